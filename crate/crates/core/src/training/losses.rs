use crate::scalar::Scalar;
use crate::tensor::{Graph, TensorError, Var};

/// Probabilities are clamped to `[P_EPS, 1 − P_EPS]` before the logarithms.
pub const P_EPS: f64 = 1e-7;

/// Weighting of the negative branch of the focal loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FocalVariant {
    /// `α` on both branches.
    AsPrinted,
    /// `α` on positives, `1 − α` on negatives.
    Balanced,
}

/// Per-element focal loss and its derivative with respect to `p`.
pub fn focal_term(p: f64, positive: bool, alpha: f64, gamma: f64, variant: FocalVariant) -> (f64, f64) {
    let clamped = !(P_EPS..=1.0 - P_EPS).contains(&p);
    let q = p.clamp(P_EPS, 1.0 - P_EPS);
    let (value, grad) = if positive {
        let m = (1.0 - q).powf(gamma);
        let dm = if gamma == 0.0 { 0.0 } else { -gamma * (1.0 - q).powf(gamma - 1.0) };
        (-alpha * m * q.ln(), -alpha * (dm * q.ln() + m / q))
    } else {
        let a = match variant {
            FocalVariant::AsPrinted => alpha,
            FocalVariant::Balanced => 1.0 - alpha,
        };
        let m = q.powf(gamma);
        let dm = if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) };
        let l = (1.0 - q).ln();
        (-a * m * l, -a * (dm * l - m / (1.0 - q)))
    };
    (value, if clamped { 0.0 } else { grad })
}

/// Summed focal loss over every element of `p`, divided by `normalizer`.
pub fn focal_loss<T: Scalar>(
    g: &mut Graph<T>,
    p: Var,
    labels: &[bool],
    alpha: f64,
    gamma: f64,
    variant: FocalVariant,
    normalizer: f64,
) -> Result<Var, TensorError> {
    let n = g.value(p).len();
    if labels.len() != n {
        return Err(TensorError::Shape { op: "focal_loss", shapes: vec![g.shape(p).to_vec(), vec![labels.len()]] });
    }
    let mut total = 0.0;
    let mut dp = Vec::with_capacity(n);
    for (v, &y) in g.value(p).iter().zip(labels) {
        let (l, d) = focal_term(v.to_f64_lossy(), y, alpha, gamma, variant);
        total += l;
        dp.push(d / normalizer);
    }
    g.custom("focal_loss", &[p], vec![T::from_f64_lossy(total / normalizer)], vec![], move |grad| {
        let up = grad[0].to_f64_lossy();
        vec![dp.iter().map(|d| T::from_f64_lossy(d * up)).collect()]
    })
}

/// Per-element Huber value and derivative.
pub fn huber_term(d: f64, sigma: f64) -> (f64, f64) {
    let s2 = sigma * sigma;
    if d.abs() < 1.0 / s2 {
        (0.5 * d * d * s2, d * s2)
    } else {
        (d.abs() - 0.5 / s2, d.signum())
    }
}

/// Huber loss summed over the elements of `residual` where `mask` is set, divided
/// by `normalizer`.
pub fn huber_loss<T: Scalar>(
    g: &mut Graph<T>,
    residual: Var,
    mask: &[bool],
    sigma: f64,
    normalizer: f64,
) -> Result<Var, TensorError> {
    let n = g.value(residual).len();
    if mask.len() != n {
        return Err(TensorError::Shape { op: "huber_loss", shapes: vec![g.shape(residual).to_vec(), vec![mask.len()]] });
    }
    let mut total = 0.0;
    let mut dd = vec![0.0; n];
    for (i, (v, &m)) in g.value(residual).iter().zip(mask).enumerate() {
        if m {
            let (l, d) = huber_term(v.to_f64_lossy(), sigma);
            total += l;
            dd[i] = d / normalizer;
        }
    }
    g.custom("huber_loss", &[residual], vec![T::from_f64_lossy(total / normalizer)], vec![], move |grad| {
        let up = grad[0].to_f64_lossy();
        vec![dd.iter().map(|d| T::from_f64_lossy(d * up)).collect()]
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConsistencyReduction {
    /// Squared distance divided by the element count.
    Mean,
    /// Plain squared distance.
    Sum,
}

/// Squared L2 distance between two feature maps of identical shape.
pub fn consistency_loss<T: Scalar>(
    g: &mut Graph<T>,
    student: Var,
    teacher: Var,
    reduction: ConsistencyReduction,
) -> Result<Var, TensorError> {
    let diff = g.sub(student, teacher)?;
    let sq = g.square(diff);
    match reduction {
        ConsistencyReduction::Mean => g.mean(sq),
        ConsistencyReduction::Sum => Ok(g.sum(sq)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focal_reference_values() {
        let (v, _) = focal_term(0.5, true, 0.25, 2.0, FocalVariant::AsPrinted);
        assert!((v - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-12);
        let (v, _) = focal_term(1.0 - 1e-7, true, 0.25, 2.0, FocalVariant::AsPrinted);
        assert!(v.abs() < 1e-15);
        let (a, _) = focal_term(0.3, false, 0.25, 2.0, FocalVariant::AsPrinted);
        let (b, _) = focal_term(0.3, false, 0.25, 2.0, FocalVariant::Balanced);
        assert!((b / a - 3.0).abs() < 1e-12);
    }

    #[test]
    fn focal_derivative_matches_difference() {
        for &(p, y, gamma) in &[(0.2, true, 2.0), (0.7, false, 2.0), (0.4, true, 0.0), (0.9, false, 1.5)] {
            let h = 1e-6;
            let f = |x| focal_term(x, y, 0.25, gamma, FocalVariant::AsPrinted).0;
            let fd = (f(p + h) - f(p - h)) / (2.0 * h);
            let (_, d) = focal_term(p, y, 0.25, gamma, FocalVariant::AsPrinted);
            assert!((fd - d).abs() < 1e-6 * (1.0 + d.abs()), "{p} {y} {gamma}: {fd} vs {d}");
        }
    }

    #[test]
    fn huber_reference_values() {
        assert_eq!(huber_term(0.0, 3.0).0, 0.0);
        assert!((huber_term(0.1, 3.0).0 - 0.045).abs() < 1e-12);
        assert!((huber_term(1.0, 3.0).0 - (1.0 - 1.0 / 18.0)).abs() < 1e-12);
        assert!((huber_term(-1.0, 3.0).1 + 1.0).abs() < 1e-12);
    }

    #[test]
    fn consistency_mean_of_ones() {
        let mut g = Graph::<f64>::new();
        let a = g.param(vec![2.0; 6], vec![2, 3]).unwrap();
        let b = g.constant(vec![1.0; 6], vec![2, 3]).unwrap();
        let l = consistency_loss(&mut g, a, b, ConsistencyReduction::Mean).unwrap();
        assert_eq!(g.scalar(l), 1.0);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(a).unwrap().iter().all(|v| (*v - 2.0 / 6.0).abs() < 1e-15));
        let c = g.constant(vec![1.0; 5], vec![5]).unwrap();
        assert!(consistency_loss(&mut g, a, c, ConsistencyReduction::Mean).is_err());
    }
}
