//! Raster file formats: float depth maps (`DPT1`), binary PPM images, and
//! binary PGM grayscale dumps.
//!
//! `DPT1` is a 16-byte header ⟨magic `DPT1`, u32 height, u32 width,
//! u32 reserved⟩ followed by row-major little-endian float32 samples. The
//! reserved word is 0 for a single plane; stacked multi-plane files (voxel
//! grids, per-stage dumps) store the plane count there and concatenate the
//! planes along height.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

pub const DEPTH_MAGIC: &[u8; 4] = b"DPT1";

pub fn write_depth(map: &Array2<f64>, path: &Path) -> Result<()> {
    write_depth_planes(&[map.clone()], 0, path)
}

/// Write `planes` stacked along height; `reserved` goes into the header
/// (0 for a plain depth map, the plane count for stacked dumps).
pub fn write_depth_planes(planes: &[Array2<f64>], reserved: u32, path: &Path) -> Result<()> {
    assert!(!planes.is_empty());
    let (h, w) = planes[0].dim();
    for p in planes {
        assert_eq!(p.dim(), (h, w), "stacked planes must share a shape");
    }
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(DEPTH_MAGIC)?;
    out.write_all(&((h * planes.len()) as u32).to_le_bytes())?;
    out.write_all(&(w as u32).to_le_bytes())?;
    out.write_all(&reserved.to_le_bytes())?;
    for p in planes {
        for &v in p.iter() {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_voxel_planes(grid: &Array3<f64>, path: &Path) -> Result<()> {
    let planes: Vec<Array2<f64>> = grid
        .outer_iter()
        .map(|p| p.to_owned())
        .collect();
    write_depth_planes(&planes, planes.len() as u32, path)
}

pub fn read_depth(path: &Path) -> Result<Array2<f64>> {
    let mut input = BufReader::new(File::open(path)?);
    let mut header = [0u8; 16];
    input
        .read_exact(&mut header)
        .map_err(|_| Error::data(format!("{}: truncated header", path.display())))?;
    if &header[0..4] != DEPTH_MAGIC {
        return Err(Error::data(format!(
            "{}: bad magic {:?}, expected {:?}",
            path.display(),
            &header[0..4],
            DEPTH_MAGIC
        )));
    }
    let h = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let mut bytes = vec![0u8; h * w * 4];
    input
        .read_exact(&mut bytes)
        .map_err(|_| Error::data(format!("{}: truncated pixel data", path.display())))?;
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Array2::from_shape_vec((h, w), data)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

/// Write an `[H,W,3]` image with channels in `[0,1]` as binary PPM.
pub fn write_ppm(image: &Array3<f64>, path: &Path) -> Result<()> {
    let (h, w, c) = image.dim();
    assert_eq!(c, 3, "PPM wants 3 channels");
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P6\n{w} {h}\n255\n")?;
    for v in image.iter() {
        out.write_all(&[(v.clamp(0.0, 1.0) * 255.0).round() as u8])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Array3<f64>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let bad = |msg: &str| Error::data(format!("{}: {msg}", path.display()));

    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        while pos < bytes.len() {
            match bytes[pos] {
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                b' ' | b'\t' | b'\r' | b'\n' => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::data("truncated PPM header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    if token(&bytes)? != "P6" {
        return Err(bad("not a binary PPM (P6)"));
    }
    let w: usize = token(&bytes)?.parse().map_err(|_| bad("bad width"))?;
    let h: usize = token(&bytes)?.parse().map_err(|_| bad("bad height"))?;
    let maxval: usize = token(&bytes)?.parse().map_err(|_| bad("bad maxval"))?;
    if maxval != 255 {
        return Err(bad("only maxval 255 supported"));
    }
    pos += 1;
    if bytes.len() < pos + h * w * 3 {
        return Err(bad("truncated pixel data"));
    }
    let data: Vec<f64> = bytes[pos..pos + h * w * 3]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Array3::from_shape_vec((h, w, 3), data).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

/// Write a real-valued map as binary PGM, linearly rescaled to its own
/// min..max range (a constant map writes as mid-gray).
pub fn write_pgm_scaled(map: &Array2<f64>, path: &Path) -> Result<()> {
    let (h, w) = map.dim();
    let lo = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{w} {h}\n255\n")?;
    for &v in map.iter() {
        let g = if span > 0.0 { (v - lo) / span } else { 0.5 };
        out.write_all(&[(g * 255.0).round() as u8])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn depth_roundtrip_is_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.dpt1");
        let map = arr2(&[[1.5, 2.25], [0.125, 1e4]]);
        write_depth(&map, &path).unwrap();
        let back = read_depth(&path).unwrap();
        assert_eq!(back, map);
    }

    #[test]
    fn depth_rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.dpt1");
        std::fs::write(&path, b"NOPE0000000000000000").unwrap();
        assert!(read_depth(&path).is_err());
    }

    #[test]
    fn stacked_planes_concatenate_along_height() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.dpt1");
        let grid = Array3::from_shape_fn((3, 2, 4), |(b, y, x)| (b * 100 + y * 10 + x) as f64);
        write_voxel_planes(&grid, &path).unwrap();
        let flat = read_depth(&path).unwrap();
        assert_eq!(flat.dim(), (6, 4));
        assert_eq!(flat[[0, 3]], 3.0);
        assert_eq!(flat[[2, 0]], 100.0);
        assert_eq!(flat[[5, 2]], 212.0);
    }

    #[test]
    fn ppm_roundtrip_quantizes_to_8bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.ppm");
        let img = Array3::from_shape_fn((3, 5, 3), |(y, x, c)| {
            ((y * 5 + x) * 3 + c) as f64 / 44.0
        });
        write_ppm(&img, &path).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.dim(), (3, 5, 3));
        for (a, b) in back.iter().zip(img.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn pgm_has_expected_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        write_pgm_scaled(&arr2(&[[0.0, 1.0]]), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n2 1\n255\n"));
        assert_eq!(&bytes[bytes.len() - 2..], &[0u8, 255u8]);
    }
}
