//! Little-endian binary sequence format.
//!
//! ```text
//! "MF2SF" | u16 version (=1) | u32 frame count
//! per frame:
//!   u32 N | u8 c | N×3 f32 points | N×c f32 features | 12×f64 ego pose
//!   u32 box count | per box: 8×f32 (center 3, size 3, heading, reserved) | u32 track id | u8 class
//! ```
//!
//! Frame indices are implicit (position in the file).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::geometry::{BoundingBox, ObjectClass, PointCloudFrame, Pose};

use super::{Sequence, SimDataError};

pub const SEQUENCE_MAGIC: &[u8; 5] = b"MF2SF";
pub const SEQUENCE_VERSION: u16 = 1;

pub fn write_sequence_to<W: Write>(w: &mut W, seq: &Sequence) -> Result<(), SimDataError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(SEQUENCE_MAGIC);
    buf.extend_from_slice(&SEQUENCE_VERSION.to_le_bytes());
    buf.extend_from_slice(&u32::try_from(seq.frames.len()).map_err(|_| SimDataError::Invalid("too many frames".into()))?.to_le_bytes());
    for f in &seq.frames {
        let n = u32::try_from(f.len()).map_err(|_| SimDataError::Invalid("too many points".into()))?;
        let c = u8::try_from(f.feature_width).map_err(|_| SimDataError::Invalid("feature width above 255".into()))?;
        buf.extend_from_slice(&n.to_le_bytes());
        buf.push(c);
        for p in &f.points {
            for v in p {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        for v in &f.features {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        for v in f.ego_pose.to_array() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&(f.boxes.len() as u32).to_le_bytes());
        for b in &f.boxes {
            let vals = [b.center[0], b.center[1], b.center[2], b.size[0], b.size[1], b.size[2], b.heading, 0.0];
            for v in vals {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            buf.extend_from_slice(&b.track_id.to_le_bytes());
            buf.push(b.class as u8);
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn write_sequence(seq: &Sequence, path: impl AsRef<Path>) -> Result<(), SimDataError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_sequence_to(&mut w, seq)?;
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], SimDataError> {
        let end = self.pos.checked_add(n).ok_or(SimDataError::Truncated(what))?;
        if end > self.data.len() {
            return Err(SimDataError::Truncated(what));
        }
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, SimDataError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, SimDataError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, SimDataError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &'static str) -> Result<Vec<f64>, SimDataError> {
        let bytes = n.checked_mul(4).ok_or(SimDataError::Truncated(what))?;
        let raw = self.take(bytes, what)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect())
    }

    fn f64(&mut self, what: &'static str) -> Result<f64, SimDataError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn read_sequence_from<R: Read>(r: &mut R) -> Result<Sequence, SimDataError> {
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    let mut cur = Cursor { data: &data, pos: 0 };
    if cur.take(SEQUENCE_MAGIC.len(), "magic").map_err(|_| SimDataError::BadMagic)? != SEQUENCE_MAGIC {
        return Err(SimDataError::BadMagic);
    }
    let version = cur.u16("version")?;
    if version != SEQUENCE_VERSION {
        return Err(SimDataError::Version(version));
    }
    let n_frames = cur.u32("frame count")? as usize;
    let mut frames = Vec::new();
    for index in 0..n_frames {
        let n = cur.u32("point count")? as usize;
        let c = cur.u8("feature width")? as usize;
        let flat = cur.f32s(n.checked_mul(3).ok_or(SimDataError::Truncated("points"))?, "points")?;
        let points = flat.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect();
        let features = cur.f32s(n.checked_mul(c).ok_or(SimDataError::Truncated("features"))?, "features")?;
        let mut pose = [0.0; 12];
        for v in pose.iter_mut() {
            *v = cur.f64("ego pose")?;
        }
        let ego_pose = Pose::from_array(&pose)?;
        let n_boxes = cur.u32("box count")? as usize;
        let mut boxes = Vec::new();
        for _ in 0..n_boxes {
            let v = cur.f32s(8, "box")?;
            let track_id = cur.u32("track id")?;
            let class_raw = cur.u8("class id")?;
            let class = ObjectClass::from_u8(class_raw).ok_or_else(|| SimDataError::Invalid(format!("class id {class_raw}")))?;
            boxes.push(BoundingBox::new([v[0], v[1], v[2]], [v[3], v[4], v[5]], v[6], track_id, class)?);
        }
        frames.push(PointCloudFrame::new(index as u32, points, features, c, ego_pose, boxes)?);
    }
    if cur.pos != data.len() {
        return Err(SimDataError::Invalid(format!("{} trailing bytes", data.len() - cur.pos)));
    }
    Ok(Sequence { frames })
}

pub fn read_sequence(path: impl AsRef<Path>) -> Result<Sequence, SimDataError> {
    read_sequence_from(&mut BufReader::new(File::open(path)?))
}
