//! Grayscale image grids in the binary PGM (P5) format, plus a raw CSV
//! of the underlying values. Inputs are tensors of per-pixel values in
//! [0, 1], one image per row; tiles are laid out row-major with a one
//! pixel separator.

use std::path::Path;

use aevb::tensor::Tensor;
use aevb::{Error, Result};

/// Writes `images` — shape (N, h*w), values in [0, 1] — as a `cols`-wide
/// tile grid.
pub fn write_pgm_grid(
    path: &Path,
    images: &Tensor,
    h: usize,
    w: usize,
    cols: usize,
) -> Result<()> {
    let shape = images.shape();
    if shape.len() != 2 || shape[1] != h * w {
        return Err(Error::ShapeMismatch {
            op: "write_pgm_grid",
            shapes: vec![shape.to_vec()],
            detail: format!("expected (N, {}) for {h}x{w} tiles", h * w),
        });
    }
    let n = shape[0];
    if n == 0 || cols == 0 {
        return Err(Error::Domain {
            op: "write_pgm_grid",
            detail: "need at least one image and one column".to_string(),
        });
    }
    let rows = n.div_ceil(cols);
    let width = cols * w + cols - 1;
    let height = rows * h + rows - 1;
    let mut pixels = vec![0u8; width * height];
    let data = images.data();
    for idx in 0..n {
        let tile_r = idx / cols;
        let tile_c = idx % cols;
        let top = tile_r * (h + 1);
        let left = tile_c * (w + 1);
        for r in 0..h {
            for c in 0..w {
                let v = data[idx * h * w + r * w + c].clamp(0.0, 1.0);
                pixels[(top + r) * width + (left + c)] = (v * 255.0).round() as u8;
            }
        }
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    std::fs::write(path, out)?;
    Ok(())
}

/// Writes the raw values, one image per line, full f64 precision.
pub fn write_values_csv(path: &Path, images: &Tensor) -> Result<()> {
    let shape = images.shape();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "write_values_csv",
            shapes: vec![shape.to_vec()],
            detail: "expected a rank-2 value table".to_string(),
        });
    }
    let mut out = String::new();
    for row in images.data().chunks(shape[1]) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_dimensions_and_header_are_exact() {
        let dir = std::env::temp_dir().join("aevb_pgm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("grid.pgm");
        let images = Tensor::from_vec(vec![3, 4], vec![0.0; 12]).unwrap();
        write_pgm_grid(&path, &images, 2, 2, 2).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = b"P5\n5 5\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 25);
    }

    #[test]
    fn values_clamp_and_scale_to_full_range() {
        let dir = std::env::temp_dir().join("aevb_pgm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("scale.pgm");
        let images = Tensor::from_vec(vec![1, 4], vec![-0.5, 0.0, 0.5, 2.0]).unwrap();
        write_pgm_grid(&path, &images, 2, 2, 1).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let px = &bytes[bytes.len() - 4..];
        assert_eq!(px, &[0, 0, 128, 255]);
    }

    #[test]
    fn shape_errors_are_reported() {
        let dir = std::env::temp_dir().join("aevb_pgm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let images = Tensor::from_vec(vec![1, 5], vec![0.0; 5]).unwrap();
        assert!(write_pgm_grid(&dir.join("bad.pgm"), &images, 2, 2, 1).is_err());
    }
}
