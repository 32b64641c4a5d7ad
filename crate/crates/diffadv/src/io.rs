//! Persistence primitives: raw little-endian f32 arrays with JSON sidecars,
//! plus SHA-256 checksums for run manifests.
//!
//! A stored array is a pair of files: `<name>.bin` holding the values as
//! little-endian IEEE-754 f32 in row-major order, and `<name>.json` recording
//! the shape and, for latents, the ladder slot(s).

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Sidecar metadata for one stored array.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArraySidecar {
    pub shape: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timestep: Option<usize>,
    /// Ladder slots for stacked latents (one per leading-axis entry).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timesteps: Option<Vec<usize>>,
}

fn bin_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.bin"))
}

fn sidecar_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.json"))
}

/// Write raw f32 little-endian bytes.
pub fn write_raw_f32(path: &Path, values: impl Iterator<Item = f64>) -> Result<()> {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))
}

/// Read raw f32 little-endian bytes back as f64.
pub fn read_raw_f32(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!(
            "{} has {} bytes, not a multiple of 4",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub fn write_sidecar(dir: &Path, name: &str, sidecar: &ArraySidecar) -> Result<()> {
    let path = sidecar_path(dir, name);
    let json = serde_json::to_string_pretty(sidecar).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn read_sidecar(dir: &Path, name: &str) -> Result<ArraySidecar> {
    let path = sidecar_path(dir, name);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
}

/// Store a `[C, H, W]` array under `dir/name.{bin,json}`.
pub fn save_array3(dir: &Path, name: &str, values: &Array3<f64>, slot: Option<usize>) -> Result<()> {
    write_raw_f32(&bin_path(dir, name), values.iter().copied())?;
    write_sidecar(
        dir,
        name,
        &ArraySidecar { shape: values.shape().to_vec(), timestep: slot, timesteps: None },
    )
}

pub fn load_array3(dir: &Path, name: &str) -> Result<(Array3<f64>, ArraySidecar)> {
    let sidecar = read_sidecar(dir, name)?;
    if sidecar.shape.len() != 3 {
        return Err(Error::Format(format!(
            "{name}: expected rank-3 shape, got {:?}",
            sidecar.shape
        )));
    }
    let data = read_raw_f32(&bin_path(dir, name))?;
    let (c, h, w) = (sidecar.shape[0], sidecar.shape[1], sidecar.shape[2]);
    if data.len() != c * h * w {
        return Err(Error::Format(format!(
            "{name}: {} values do not fill shape {:?}",
            data.len(),
            sidecar.shape
        )));
    }
    let arr = Array3::from_shape_vec((c, h, w), data)
        .map_err(|e| Error::Format(format!("{name}: {e}")))?;
    Ok((arr, sidecar))
}

/// Store a stack of equally shaped `[C, H, W]` arrays contiguously.
pub fn save_array3_stack(
    dir: &Path,
    name: &str,
    stack: &[Array3<f64>],
    slots: Option<Vec<usize>>,
) -> Result<()> {
    let mut shape = vec![stack.len()];
    if let Some(first) = stack.first() {
        shape.extend_from_slice(first.shape());
        for a in stack {
            if a.shape() != first.shape() {
                return Err(Error::Shape("stacked arrays must share a shape".into()));
            }
        }
    }
    write_raw_f32(&bin_path(dir, name), stack.iter().flat_map(|a| a.iter().copied()))?;
    write_sidecar(dir, name, &ArraySidecar { shape, timestep: None, timesteps: slots })
}

pub fn load_array3_stack(dir: &Path, name: &str) -> Result<(Vec<Array3<f64>>, ArraySidecar)> {
    let sidecar = read_sidecar(dir, name)?;
    if sidecar.shape.is_empty() {
        return Err(Error::Format(format!("{name}: empty shape")));
    }
    let n = sidecar.shape[0];
    if n == 0 {
        return Ok((Vec::new(), sidecar));
    }
    if sidecar.shape.len() != 4 {
        return Err(Error::Format(format!(
            "{name}: expected rank-4 stacked shape, got {:?}",
            sidecar.shape
        )));
    }
    let (c, h, w) = (sidecar.shape[1], sidecar.shape[2], sidecar.shape[3]);
    let data = read_raw_f32(&bin_path(dir, name))?;
    if data.len() != n * c * h * w {
        return Err(Error::Format(format!(
            "{name}: {} values do not fill shape {:?}",
            data.len(),
            sidecar.shape
        )));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let chunk = data[i * c * h * w..(i + 1) * c * h * w].to_vec();
        out.push(
            Array3::from_shape_vec((c, h, w), chunk)
                .map_err(|e| Error::Format(format!("{name}: {e}")))?,
        );
    }
    Ok((out, sidecar))
}

/// Store a flat vector (embeddings) under `dir/name.{bin,json}`.
pub fn save_array1(dir: &Path, name: &str, values: &Array1<f64>, slot: Option<usize>) -> Result<()> {
    write_raw_f32(&bin_path(dir, name), values.iter().copied())?;
    write_sidecar(
        dir,
        name,
        &ArraySidecar { shape: vec![values.len()], timestep: slot, timesteps: None },
    )
}

pub fn load_array1(dir: &Path, name: &str) -> Result<(Array1<f64>, ArraySidecar)> {
    let sidecar = read_sidecar(dir, name)?;
    let data = read_raw_f32(&bin_path(dir, name))?;
    if sidecar.shape.len() != 1 || data.len() != sidecar.shape[0] {
        return Err(Error::Format(format!(
            "{name}: data length {} does not match shape {:?}",
            data.len(),
            sidecar.shape
        )));
    }
    Ok((Array1::from_vec(data), sidecar))
}

/// Store a stack of equal-length vectors (one embedding per ladder step).
pub fn save_array1_stack(
    dir: &Path,
    name: &str,
    stack: &[Array1<f64>],
    slots: Option<Vec<usize>>,
) -> Result<()> {
    let mut shape = vec![stack.len()];
    if let Some(first) = stack.first() {
        shape.push(first.len());
        for a in stack {
            if a.len() != first.len() {
                return Err(Error::Shape("stacked vectors must share a length".into()));
            }
        }
    }
    write_raw_f32(&bin_path(dir, name), stack.iter().flat_map(|a| a.iter().copied()))?;
    write_sidecar(dir, name, &ArraySidecar { shape, timestep: None, timesteps: slots })
}

pub fn load_array1_stack(dir: &Path, name: &str) -> Result<(Vec<Array1<f64>>, ArraySidecar)> {
    let sidecar = read_sidecar(dir, name)?;
    let n = sidecar.shape[0];
    if n == 0 {
        return Ok((Vec::new(), sidecar));
    }
    if sidecar.shape.len() != 2 {
        return Err(Error::Format(format!(
            "{name}: expected rank-2 stacked shape, got {:?}",
            sidecar.shape
        )));
    }
    let len = sidecar.shape[1];
    let data = read_raw_f32(&bin_path(dir, name))?;
    if data.len() != n * len {
        return Err(Error::Format(format!(
            "{name}: {} values do not fill shape {:?}",
            data.len(),
            sidecar.shape
        )));
    }
    let out = data.chunks_exact(len).map(|c| Array1::from_vec(c.to_vec())).collect();
    Ok((out, sidecar))
}

/// Convert a unit-range `[3, H, W]` array to an 8-bit RGB image.
pub fn array_to_rgb8(x: &Array3<f64>) -> Result<image::RgbImage> {
    let (c, h, w) = x.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for xx in 0..w {
            let px = image::Rgb([
                (x[[0, y, xx]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (x[[1, y, xx]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (x[[2, y, xx]].clamp(0.0, 1.0) * 255.0).round() as u8,
            ]);
            img.put_pixel(xx as u32, y as u32, px);
        }
    }
    Ok(img)
}

/// Convert an 8-bit RGB image to a unit-range `[3, H, W]` array.
pub fn rgb8_to_array(img: &image::RgbImage) -> Array3<f64> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    })
}

/// Write a unit-range `[3, H, W]` array as an 8-bit PNG.
pub fn save_png(path: &Path, x: &Array3<f64>) -> Result<()> {
    let img = array_to_rgb8(x)?;
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Read an 8-bit PNG as a unit-range `[3, H, W]` array.
pub fn load_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()?
        .to_rgb8();
    Ok(rgb8_to_array(&img))
}

/// SHA-256 of a byte slice, hex encoded.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// SHA-256 of a file's contents.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Checksum of an f64 array after f32 narrowing, matching the stored form.
pub fn checksum_f32(values: impl Iterator<Item = f64>) -> String {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    sha256_hex(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use tempfile::tempdir;

    #[test]
    fn array3_round_trips_through_f32() {
        let dir = tempdir().unwrap();
        let a = array![[[0.25f64, 0.5], [0.75, 1.0]], [[0.0, -1.0], [2.0, 3.5]]];
        save_array3(dir.path(), "latent", &a, Some(7)).unwrap();
        let (back, sc) = load_array3(dir.path(), "latent").unwrap();
        assert_eq!(back, a);
        assert_eq!(sc.timestep, Some(7));
        assert_eq!(sc.shape, vec![2, 2, 2]);
    }

    #[test]
    fn stack_round_trips_and_rejects_ragged() {
        let dir = tempdir().unwrap();
        let a = Array3::from_elem((1, 2, 2), 0.5);
        let b = Array3::from_elem((1, 2, 2), 0.25);
        save_array3_stack(dir.path(), "pivots", &[a.clone(), b.clone()], Some(vec![0, 1])).unwrap();
        let (back, sc) = load_array3_stack(dir.path(), "pivots").unwrap();
        assert_eq!(back, vec![a.clone(), b]);
        assert_eq!(sc.timesteps, Some(vec![0, 1]));

        let ragged = Array3::from_elem((1, 2, 3), 0.0);
        assert!(save_array3_stack(dir.path(), "bad", &[a, ragged], None).is_err());
    }

    #[test]
    fn empty_stack_round_trips() {
        let dir = tempdir().unwrap();
        save_array1_stack(dir.path(), "nulls", &[], None).unwrap();
        let (back, _) = load_array1_stack(dir.path(), "nulls").unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn checksums_are_stable() {
        let a = vec![0.1f64, 0.2, 0.3];
        let c1 = checksum_f32(a.iter().copied());
        let c2 = checksum_f32(a.iter().copied());
        assert_eq!(c1, c2);
        assert_eq!(c1.len(), 64);
        assert_ne!(c1, checksum_f32([0.1f64, 0.2, 0.4].iter().copied()));
    }
}
