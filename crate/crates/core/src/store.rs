//! Tensor archives (`CWKT`) and PPM image output.
//!
//! Archive layout, all integers little-endian:
//!
//! ```text
//! "CWKT" | version u32 | count u32
//! count × ( name_len u16 | name utf-8 | dtype u8 (0 = f32) | rank u8 | dims u32×rank | payload f32×Πdims )
//! trailing UTF-8 JSON config blob (to end of file)
//! ```

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::Value;

use crate::error::{config_err, Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"CWKT";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Named tensors plus a JSON provenance blob.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub tensors: Vec<(String, Tensor)>,
    pub config: Value,
}

impl Archive {
    pub fn new(config: Value) -> Self {
        Self { tensors: Vec::new(), config }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Archive of every parameter value in `store`.
    pub fn from_params(store: &ParamStore, config: Value) -> Self {
        let tensors = store.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        Self { tensors, config }
    }

    /// Overwrites the values of `store` with same-named tensors. Every
    /// parameter must be present with a matching shape; extra entries under
    /// `prefix` are rejected.
    pub fn load_params(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        let mut seen = 0;
        for (name, t) in &self.tensors {
            if !name.starts_with(prefix) {
                continue;
            }
            let Some(id) = store.id(name) else {
                return config_err(format!("checkpoint entry `{name}` has no matching parameter"));
            };
            let p = store.get_mut(id);
            if p.value.shape() != t.shape() {
                return config_err(format!("`{name}`: checkpoint shape {:?}, model shape {:?}", t.shape(), p.value.shape()));
            }
            p.value = t.clone();
            seen += 1;
        }
        if seen != store.len() {
            return config_err(format!("checkpoint holds {seen} of {} parameters", store.len()));
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut names = HashSet::new();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            if !names.insert(name.as_str()) {
                return config_err(format!("duplicate archive entry `{name}`"));
            }
            t.ensure_finite(name)?;
            let len = u16::try_from(name.len()).map_err(|_| Error::Config(format!("entry name too long: {name}")))?;
            let rank = u8::try_from(t.rank()).map_err(|_| Error::Config(format!("rank too large: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.push(rank);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(serde_json::to_string(&self.config)?.as_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, entry: "header".into() };
        if r.take(4)? != MAGIC {
            return Err(r.fail("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version { found: version, expected: VERSION });
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        let mut names = HashSet::new();
        for k in 0..count {
            r.entry = format!("#{k}");
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| r.fail("name is not UTF-8"))?.to_string();
            r.entry = format!("#{k} `{name}`");
            if !names.insert(name.clone()) {
                return Err(r.fail("duplicate name"));
            }
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(r.fail(&format!("unsupported dtype {dtype}")));
            }
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.fail("size overflow"))?;
            let payload = r.take(numel.checked_mul(4).ok_or_else(|| r.fail("size overflow"))?)?;
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push((name, Tensor::from_vec(&shape, data)?));
        }
        r.entry = "config".into();
        let rest = &bytes[r.pos..];
        let config = if rest.is_empty() {
            Value::Null
        } else {
            serde_json::from_slice(rest).map_err(|e| r.fail(&format!("config blob: {e}")))?
        };
        Ok(Self { tensors, config })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.encode()?;
        if let Some(dir) = path.as_ref().parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    entry: String,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: &str) -> Error {
        Error::Parse { entry: self.entry.clone(), msg: format!("{msg} (byte {})", self.pos) }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(&format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// An 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rgb8 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Tiles `[N, 3, H, W]` images (values in [0, 1], clamped) into a mosaic
/// with `cols` columns.
pub fn mosaic(images: &Tensor, cols: usize) -> Result<Rgb8> {
    let (n, c, h, w) = images.dims4()?;
    if c != 3 {
        return config_err(format!("mosaic needs 3 channels, got {c}"));
    }
    if n == 0 || cols == 0 {
        return config_err("mosaic needs at least one image and one column");
    }
    let rows = n.div_ceil(cols);
    let (width, height) = (cols * w, rows * h);
    let mut pixels = vec![0u8; width * height * 3];
    let d = images.data();
    for i in 0..n {
        let (ox, oy) = ((i % cols) * w, (i / cols) * h);
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let v = d[((i * 3 + ch) * h + y) * w + x];
                    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
                    pixels[((oy + y) * width + ox + x) * 3 + ch] = (v * 255.0).round() as u8;
                }
            }
        }
    }
    Ok(Rgb8 { width, height, pixels })
}

/// Writes a binary P6 PPM mosaic of `images`.
pub fn write_ppm(images: &Tensor, path: impl AsRef<Path>, cols: usize) -> Result<()> {
    let img = mosaic(images, cols)?;
    if let Some(dir) = path.as_ref().parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    write!(f, "P6\n{} {}\n255\n", img.width, img.height)?;
    f.write_all(&img.pixels)?;
    Ok(())
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Rgb8> {
    let bytes = fs::read(path)?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse { entry: "ppm header".into(), msg: "truncated header".into() });
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    let bad = |msg: &str| Error::Parse { entry: "ppm header".into(), msg: msg.into() };
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad("expected P6 with maxval 255"));
    }
    let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let pixels = bytes.get(pos + 1..).unwrap_or_default().to_vec();
    if pixels.len() != width * height * 3 {
        return Err(Error::Parse { entry: "ppm pixels".into(), msg: format!("expected {} bytes", width * height * 3) });
    }
    Ok(Rgb8 { width, height, pixels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_archive_round_trips() {
        let a = Archive::new(serde_json::json!({"seed": 1}));
        assert_eq!(Archive::decode(&a.encode().unwrap()).unwrap(), a);
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut a = Archive::new(Value::Null);
        a.push("x", Tensor::zeros(&[1]));
        a.push("x", Tensor::zeros(&[2]));
        assert!(a.encode().is_err());
    }
}
