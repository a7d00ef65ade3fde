use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tensor::{Graph, NamedTensor, ParamSet, TensorError, Var};

use super::pillars::{PillarTensor, PILLAR_DIMS};
use super::targets::LOC_CHANNELS;
use super::{DetectorError, GridConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub grid: GridConfig,
    pub channels: usize,
    /// 3×3 conv layers in each of the three backbone blocks; the first layer of
    /// blocks 2 and 3 has stride 2.
    pub block_layers: [usize; 3],
    /// Initial foreground probability encoded in the classification bias.
    pub prior: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig { grid: GridConfig::default(), channels: 32, block_layers: [1, 2, 2], prior: 0.01 }
    }
}

impl DetectorConfig {
    /// `(name, shape)` of every parameter, in checkpoint order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let c = self.channels;
        let mut l = vec![("pfn.weight".to_string(), vec![PILLAR_DIMS, c]), ("pfn.bias".to_string(), vec![c])];
        for (b, &n) in self.block_layers.iter().enumerate() {
            for i in 0..n {
                l.push((format!("block{}.{i}.weight", b + 1), vec![c, c, 3, 3]));
                l.push((format!("block{}.{i}.bias", b + 1), vec![c]));
            }
        }
        l.push(("fuse.weight".into(), vec![c, 2 * c, 1, 1]));
        l.push(("fuse.bias".into(), vec![c]));
        l.push(("cls.weight".into(), vec![1, c, 1, 1]));
        l.push(("cls.bias".into(), vec![1]));
        l.push(("loc.weight".into(), vec![LOC_CHANNELS, c, 1, 1]));
        l.push(("loc.bias".into(), vec![LOC_CHANNELS]));
        l
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        self.grid.validate()?;
        if self.channels == 0 || self.block_layers.iter().any(|&n| n == 0) {
            return Err(DetectorError::Layout("channels and block depths must be positive".into()));
        }
        if !(self.prior > 0.0 && self.prior < 1.0) {
            return Err(DetectorError::Layout(format!("prior {}", self.prior)));
        }
        Ok(())
    }

    /// Fixed per-dimension input scaling that keeps first-layer activations O(1).
    pub fn input_scale(&self) -> [f64; PILLAR_DIMS] {
        let g = &self.grid;
        let half_x = 0.5 * (g.x_range.1 - g.x_range.0);
        let half_y = 0.5 * (g.y_range.1 - g.y_range.0);
        let dz = g.z_range.1 - g.z_range.0;
        let d = g.pixel_size;
        [1.0 / half_x, 1.0 / half_y, 1.0 / dz, 1.0, 1.0 / d, 1.0 / d, 1.0 / dz, 1.0 / d, 1.0 / d]
    }
}

/// Graph handles produced by one forward pass over a batch.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Parameter leaves, aligned with the detector's [`ParamSet`].
    pub params: Vec<Var>,
    /// Final shared feature map `[N, C, H/2, W/2]` feeding both heads.
    pub phi: Var,
    /// Stride-2 block output, same shape as `phi`.
    pub block2: Var,
    /// Existence probabilities `[N, 1, H/2, W/2]`.
    pub existence: Var,
    /// Box regression `[N, 8, H/2, W/2]`.
    pub localization: Var,
    pub batch: usize,
}

/// Per-sample network outputs, channel-first.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionOutput<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `[C, H, W]`
    pub phi: Vec<T>,
    /// `[H, W]`, probabilities.
    pub existence: Vec<T>,
    /// `[8, H, W]`
    pub localization: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detector<T> {
    pub config: DetectorConfig,
    pub params: ParamSet<T>,
}

/// Max over each pillar's rows of a `[R, C]` tensor; `segments` are row ranges.
fn pillar_max<T: Scalar>(g: &mut Graph<T>, x: Var, segments: &[(usize, usize)]) -> Result<Var, TensorError> {
    let s = g.shape(x).to_vec();
    let rows = s.first().copied().unwrap_or(0);
    if s.len() != 2 || segments.iter().any(|&(a, b)| a >= b || b > rows) {
        return Err(TensorError::Invalid { op: "pillar_max", msg: format!("segments over shape {s:?}") });
    }
    let c = s[1];
    let v = g.value(x);
    let mut out = Vec::with_capacity(segments.len() * c);
    let mut argmax = Vec::with_capacity(segments.len() * c);
    for &(a, b) in segments {
        for ch in 0..c {
            let mut best = a * c + ch;
            for r in a + 1..b {
                if v[r * c + ch] > v[best] {
                    best = r * c + ch;
                }
            }
            out.push(v[best]);
            argmax.push(best);
        }
    }
    let n = v.len();
    g.custom("pillar_max", &[x], out, vec![segments.len(), c], move |grad| {
        let mut gx = vec![T::zero(); n];
        for (gi, &src) in grad.iter().zip(&argmax) {
            gx[src] += *gi;
        }
        vec![gx]
    })
}

impl<T: Scalar> Detector<T> {
    /// Fresh weights: He-uniform for the PointNet and backbone, small uniform for
    /// the heads, zero biases except the classification prior.
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self, DetectorError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prior_bias = -((1.0 - config.prior) / config.prior).ln();
        let tensors = config
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data: Vec<f64> = if name.ends_with(".bias") {
                    let v = if name == "cls.bias" { prior_bias } else { 0.0 };
                    vec![v; n]
                } else {
                    let fan_in: usize = if shape.len() == 2 { shape[0] } else { shape[1..].iter().product() };
                    let bound = if name.starts_with("cls") || name.starts_with("loc") {
                        0.01
                    } else {
                        (6.0 / fan_in as f64).sqrt()
                    };
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                };
                NamedTensor::new(name, shape, data.into_iter().map(T::from_f64_lossy).collect())
            })
            .collect();
        Ok(Detector { config, params: ParamSet::new(tensors) })
    }

    pub fn from_params(config: DetectorConfig, params: ParamSet<T>) -> Result<Self, DetectorError> {
        config.validate()?;
        let expected = config.layout();
        let found = params.layout();
        if expected != found {
            let diff = expected
                .iter()
                .zip(&found)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("expected {a:?}, found {b:?}"))
                .unwrap_or_else(|| format!("expected {} tensors, found {}", expected.len(), found.len()));
            return Err(DetectorError::Layout(diff));
        }
        Ok(Detector { config, params })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_values()
    }

    pub fn cast<U: Scalar>(&self) -> Detector<U> {
        Detector { config: self.config.clone(), params: self.params.cast() }
    }

    /// Builds the network on `g`. With `trainable` the parameters are gradient leaves,
    /// otherwise constants.
    pub fn forward(&self, g: &mut Graph<T>, batch: &[&PillarTensor], trainable: bool) -> Result<ForwardOutput, DetectorError> {
        let mut params = Vec::with_capacity(self.params.len());
        for t in self.params.iter() {
            let v = if trainable {
                g.param(t.data.clone(), t.shape.clone())?
            } else {
                g.constant(t.data.clone(), t.shape.clone())?
            };
            params.push(v);
        }
        self.forward_with(g, params, batch)
    }

    /// Builds the network reading parameters from existing nodes, one per tensor of
    /// the layout and in its order. Their values take precedence over `self.params`.
    pub fn forward_with(&self, g: &mut Graph<T>, params: Vec<Var>, batch: &[&PillarTensor]) -> Result<ForwardOutput, DetectorError> {
        let grid = &self.config.grid;
        let (h, w) = (grid.height(), grid.width());
        let n = batch.len();
        if n == 0 {
            return Err(DetectorError::Grid("empty batch".into()));
        }
        let layout = self.config.layout();
        if params.len() != layout.len() || params.iter().zip(&layout).any(|(v, (_, s))| g.shape(*v) != s.as_slice()) {
            return Err(DetectorError::Layout(format!("{} parameter nodes for {} tensors", params.len(), layout.len())));
        }
        let p = |name: &str| -> Var {
            let i = layout.iter().position(|(n, _)| n == name).expect("layout name");
            params[i]
        };

        let scale = self.config.input_scale();
        let mut rows: Vec<T> = Vec::new();
        let mut segments = Vec::new();
        let mut cells = Vec::new();
        for (b, t) in batch.iter().enumerate() {
            for (k, &(row, col)) in t.cells.iter().enumerate() {
                if row >= h || col >= w {
                    return Err(DetectorError::Grid(format!("pillar cell {:?} outside {h}×{w}", (row, col))));
                }
                let start = rows.len() / PILLAR_DIMS;
                for j in 0..t.points_per_pillar {
                    if t.mask[k * t.points_per_pillar + j] == 0.0 {
                        continue;
                    }
                    rows.extend(t.point(k, j).iter().zip(&scale).map(|(v, s)| T::from_f64_lossy(v * s)));
                }
                let end = rows.len() / PILLAR_DIMS;
                if end == start {
                    return Err(DetectorError::Grid(format!("pillar {k} of sample {b} has no points")));
                }
                segments.push((start, end));
                cells.push((b, row, col));
            }
        }
        let r = rows.len() / PILLAR_DIMS;
        let x = g.constant(rows, vec![r, PILLAR_DIMS])?;
        let z = g.matmul(x, p("pfn.weight"))?;
        let z = g.add_bias(z, p("pfn.bias"))?;
        let z = g.relu(z);
        let pooled = pillar_max(g, z, &segments)?;
        let image = g.scatter_to_grid(pooled, &cells, [n, h, w])?;

        let mut x = image;
        let mut block_out = Vec::new();
        for (bi, &layers) in self.config.block_layers.iter().enumerate() {
            for i in 0..layers {
                let stride = if bi > 0 && i == 0 { 2 } else { 1 };
                let y = g.conv2d(x, p(&format!("block{}.{i}.weight", bi + 1)), Some(p(&format!("block{}.{i}.bias", bi + 1))), stride)?;
                x = g.relu(y);
            }
            block_out.push(x);
        }
        let up = g.upsample2x(block_out[2])?;
        let cat = g.concat(&[block_out[1], up], 1)?;
        let fused = g.conv2d(cat, p("fuse.weight"), Some(p("fuse.bias")), 1)?;
        let phi = g.relu(fused);
        let logits = g.conv2d(phi, p("cls.weight"), Some(p("cls.bias")), 1)?;
        let existence = g.sigmoid(logits);
        let localization = g.conv2d(phi, p("loc.weight"), Some(p("loc.bias")), 1)?;
        for (v, what) in [(phi, "feature map"), (existence, "existence map"), (localization, "localization map")] {
            g.ensure_finite(v, what)?;
        }
        Ok(ForwardOutput { params, phi, block2: block_out[1], existence, localization, batch: n })
    }

    /// Splits batched head outputs into per-sample maps.
    pub fn outputs(&self, g: &Graph<T>, fw: &ForwardOutput) -> Vec<DetectionOutput<T>> {
        let s = g.shape(fw.phi);
        let (c, hh, ww) = (s[1], s[2], s[3]);
        let plane = hh * ww;
        (0..fw.batch)
            .map(|b| DetectionOutput {
                channels: c,
                height: hh,
                width: ww,
                phi: g.value(fw.phi)[b * c * plane..(b + 1) * c * plane].to_vec(),
                existence: g.value(fw.existence)[b * plane..(b + 1) * plane].to_vec(),
                localization: g.value(fw.localization)[b * LOC_CHANNELS * plane..(b + 1) * LOC_CHANNELS * plane].to_vec(),
            })
            .collect()
    }

    /// Inference without gradient bookkeeping.
    pub fn predict(&self, batch: &[&PillarTensor]) -> Result<Vec<DetectionOutput<T>>, DetectorError> {
        let mut g = Graph::new();
        let fw = self.forward(&mut g, batch, false)?;
        Ok(self.outputs(&g, &fw))
    }

    /// Names of the ops recorded for single-sample inference on `pillars`.
    pub fn inference_ops(&self, pillars: &PillarTensor) -> Result<Vec<&'static str>, DetectorError> {
        let mut g = Graph::new();
        self.forward(&mut g, &[pillars], false)?;
        Ok(g.op_names())
    }
}
