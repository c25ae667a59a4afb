//! Binary scene records.
//!
//! Layout, little-endian: magic `LMXS`, format version (u32), height, width,
//! classes, object count (u32 each), then per object its class (u32) and
//! pickup row/col (f64), then the `[4, H, W]` image as f64 and the
//! `[K, H, W]` masks as one byte per pixel.

use super::{ObjectLabel, Scene, SceneLabel, IMAGE_CHANNELS};
use crate::error::{Error, Result};
use crate::losses::PickupPoint;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"LMXS";
const FORMAT_VERSION: u32 = 1;

pub fn encode_scene(scene: &Scene) -> Vec<u8> {
    let s = scene.label.masks.shape();
    let (k, h, w) = (s[0], s[1], s[2]);
    let mut out = Vec::with_capacity(24 + scene.label.objects.len() * 20 + IMAGE_CHANNELS * h * w * 8 + k * h * w);
    out.extend_from_slice(MAGIC);
    for v in [FORMAT_VERSION, h as u32, w as u32, k as u32, scene.label.objects.len() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for o in &scene.label.objects {
        out.extend_from_slice(&(o.class as u32).to_le_bytes());
        out.extend_from_slice(&o.pickup.row.to_le_bytes());
        out.extend_from_slice(&o.pickup.col.to_le_bytes());
    }
    for v in scene.image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend(scene.label.masks.data().iter().map(|&m| u8::from(m != 0.0)));
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::InvalidArgument(format!("record truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_scene(bytes: &[u8]) -> Result<Scene> {
    let bad = |m: String| Error::InvalidArgument(m);
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(bad("not a scene record (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported record version {version}")));
    }
    let (h, w, k, n) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    if h == 0 || w == 0 || k == 0 || n > k {
        return Err(bad(format!("implausible header h={h} w={w} k={k} objects={n}")));
    }
    let mut objects = Vec::with_capacity(n);
    for _ in 0..n {
        let class = r.u32()? as usize;
        if class >= k {
            return Err(bad(format!("object class {class} out of {k}")));
        }
        let row = r.f64()?;
        let col = r.f64()?;
        objects.push(ObjectLabel { class, pickup: PickupPoint::new(row, col) });
    }
    let plane = h * w;
    let image: Vec<f64> = (0..IMAGE_CHANNELS * plane).map(|_| r.f64()).collect::<Result<_>>()?;
    let masks: Vec<f64> = r.take(k * plane)?.iter().map(|&b| f64::from(b)).collect();
    if r.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Scene {
        image: Tensor::new(&[IMAGE_CHANNELS, h, w], image)?,
        label: SceneLabel {
            masks: Tensor::new(&[k, h, w], masks)?,
            objects,
        },
    })
}
