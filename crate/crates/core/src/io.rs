//! Raw volume interchange: a headerless little-endian payload plus a
//! `key: value` text sidecar (`<name>.hdr` next to `<name>.raw`).
//!
//! Voxel order is slice-major, then row, then column.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::volume::{BinaryMap, Slice2D, Volume3D};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    U8,
}

impl DType {
    fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32le",
            DType::U8 => "u8",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawHeader {
    pub dims: (usize, usize, usize),
    pub dtype: DType,
    pub spacing: [f32; 3],
}

pub fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("hdr")
}

impl RawHeader {
    pub fn to_text(&self) -> String {
        let (h, w, d) = self.dims;
        format!(
            "dims: {h} {w} {d}\ndtype: {}\nspacing: {} {} {}\norder: slice,row,col\n",
            self.dtype.name(),
            self.spacing[0],
            self.spacing[1],
            self.spacing[2]
        )
    }

    pub fn parse(text: &str, path: &Path) -> Result<RawHeader> {
        let mut dims = None;
        let mut dtype = None;
        let mut spacing = [1.0f32; 3];
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (key, value) = line
                .split_once(':')
                .ok_or_else(|| Error::data(path, format!("expected key: value, got {line:?}")))?;
            let nums = || -> Vec<&str> { value.split_whitespace().collect() };
            match key.trim() {
                "dims" => {
                    let v: Vec<usize> = nums()
                        .iter()
                        .map(|s| s.parse().map_err(|_| Error::data(path, format!("bad dims {value:?}"))))
                        .collect::<Result<_>>()?;
                    if v.len() != 3 || v.contains(&0) {
                        return Err(Error::data(path, format!("dims needs three positive values, got {value:?}")));
                    }
                    dims = Some((v[0], v[1], v[2]));
                }
                "dtype" => {
                    dtype = Some(match value.trim() {
                        "f32le" | "float32" => DType::F32,
                        "u8" | "uint8" => DType::U8,
                        other => return Err(Error::data(path, format!("unsupported dtype {other:?}"))),
                    })
                }
                "spacing" => {
                    let v: Vec<f32> = nums()
                        .iter()
                        .map(|s| s.parse().map_err(|_| Error::data(path, format!("bad spacing {value:?}"))))
                        .collect::<Result<_>>()?;
                    if v.len() != 3 {
                        return Err(Error::data(path, "spacing needs three values"));
                    }
                    spacing = [v[0], v[1], v[2]];
                }
                _ => {}
            }
        }
        Ok(RawHeader {
            dims: dims.ok_or_else(|| Error::data(path, "missing dims"))?,
            dtype: dtype.ok_or_else(|| Error::data(path, "missing dtype"))?,
            spacing,
        })
    }
}

fn write_pair(raw: &Path, header: &RawHeader, payload: &[u8]) -> Result<()> {
    if let Some(dir) = raw.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(raw, payload).map_err(|e| Error::io(raw, e))?;
    let side = sidecar_path(raw);
    fs::write(&side, header.to_text()).map_err(|e| Error::io(&side, e))
}

fn read_pair(raw: &Path, expect: DType) -> Result<(RawHeader, Vec<u8>)> {
    let side = sidecar_path(raw);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let header = RawHeader::parse(&text, &side)?;
    if header.dtype != expect {
        return Err(Error::data(raw, format!("expected {}, sidecar says {}", expect.name(), header.dtype.name())));
    }
    let bytes = fs::read(raw).map_err(|e| Error::io(raw, e))?;
    let (h, w, d) = header.dims;
    let width = if expect == DType::F32 { 4 } else { 1 };
    if bytes.len() != h * w * d * width {
        return Err(Error::data(raw, format!("payload has {} bytes, dims {h}x{w}x{d} need {}", bytes.len(), h * w * d * width)));
    }
    Ok((header, bytes))
}

pub fn write_volume(raw: impl AsRef<Path>, v: &Volume3D) -> Result<()> {
    let mut payload = Vec::with_capacity(v.data().len() * 4);
    for x in v.data() {
        payload.extend_from_slice(&x.to_le_bytes());
    }
    write_pair(raw.as_ref(), &RawHeader { dims: v.dims(), dtype: DType::F32, spacing: v.spacing() }, &payload)
}

pub fn read_volume(raw: impl AsRef<Path>) -> Result<Volume3D> {
    let raw = raw.as_ref();
    let (header, bytes) = read_pair(raw, DType::F32)?;
    let data: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::data(raw, "volume contains non-finite values"));
    }
    let (h, w, d) = header.dims;
    Ok(Volume3D::new(h, w, d, data)?.with_spacing(header.spacing))
}

pub fn write_binary_map(raw: impl AsRef<Path>, m: &BinaryMap, spacing: [f32; 3]) -> Result<()> {
    write_pair(raw.as_ref(), &RawHeader { dims: m.dims(), dtype: DType::U8, spacing }, m.data())
}

pub fn read_binary_map(raw: impl AsRef<Path>) -> Result<BinaryMap> {
    let raw = raw.as_ref();
    let (header, bytes) = read_pair(raw, DType::U8)?;
    if bytes.iter().any(|&b| b > 1) {
        return Err(Error::data(raw, "binary map contains values other than 0 and 1"));
    }
    let (h, w, d) = header.dims;
    BinaryMap::new(h, w, d, bytes)
}

/// 8-bit grayscale PGM of a slice, linearly scaled so `max` maps to 255.
pub fn write_pgm(path: impl AsRef<Path>, s: &Slice2D, max: f32) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = s.dims();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    out.extend(s.data().iter().map(|&v| (v * scale).round().clamp(0.0, 255.0) as u8));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..24).map(|i| (i as f32 * 0.37).sin()).collect();
        let v = Volume3D::new(2, 3, 4, data).unwrap().with_spacing([1.0, 1.0, 2.5]);
        let p = dir.path().join("a/v.raw");
        write_volume(&p, &v).unwrap();
        assert_eq!(read_volume(&p).unwrap(), v);
        assert!(fs::read_to_string(sidecar_path(&p)).unwrap().contains("dims: 2 3 4"));
        assert!(read_binary_map(&p).is_err());
    }

    #[test]
    fn binary_map_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = BinaryMap::from_fn(3, 3, 2, |r, c, k| (r + c + k) % 2 == 0);
        let p = dir.path().join("m.raw");
        write_binary_map(&p, &m, [1.0; 3]).unwrap();
        assert_eq!(read_binary_map(&p).unwrap(), m);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.raw");
        write_volume(&p, &Volume3D::zeros(2, 2, 2)).unwrap();
        fs::write(&p, [0u8; 7]).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::Data { .. })));
    }
}
