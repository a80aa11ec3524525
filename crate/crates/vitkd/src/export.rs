//! Attention-map export: CSV of raw values and an 8-bit PGM rendering
//! normalized by the global maximum, so relative response strength is
//! comparable across rows.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Write `matrix` as `<prefix>.csv` (row-major, 6 decimal places) and
/// `<prefix>.pgm` (binary P5, pixel = round(255 * v / max); an all-zero
/// or negative max maps every pixel to 0).
pub fn attn_export(matrix: &Tensor, path_prefix: &Path) -> Result<(PathBuf, PathBuf)> {
    let s = matrix.shape();
    if s.len() != 2 {
        return Err(Error::shape(
            "attn_export",
            format!("expected a matrix, got shape {s:?}"),
        ));
    }
    let (rows, cols) = (s[0], s[1]);
    let data = matrix.data();

    let csv_path = path_prefix.with_extension("csv");
    let pgm_path = path_prefix.with_extension("pgm");
    if let Some(dir) = path_prefix.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }

    let mut csv = String::with_capacity(rows * cols * 10);
    for r in 0..rows {
        for c in 0..cols {
            if c > 0 {
                csv.push(',');
            }
            csv.push_str(&format!("{:.6}", data[r * cols + c]));
        }
        csv.push('\n');
    }
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;

    let max = data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut pgm = Vec::with_capacity(rows * cols + 32);
    write!(&mut pgm, "P5\n{cols} {rows}\n255\n").expect("in-memory write");
    for &v in data.iter() {
        let pixel = if max > 0.0 {
            (255.0 * v / max).round().clamp(0.0, 255.0) as u8
        } else {
            0
        };
        pgm.push(pixel);
    }
    std::fs::write(&pgm_path, pgm).map_err(|e| Error::io(&pgm_path, e))?;

    Ok((csv_path, pgm_path))
}

/// Parse a CSV written by [`attn_export`] back into a tensor.
pub fn parse_attn_csv(path: &Path) -> Result<Tensor> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<f32>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let row: Vec<f32> = line
            .split(',')
            .map(|cell| {
                cell.trim().parse::<f32>().map_err(|e| {
                    Error::Format(format!("{}:{}: bad cell {cell:?}: {e}", path.display(), lineno + 1))
                })
            })
            .collect::<Result<_>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Format(format!(
                    "{}: ragged rows ({} vs {} columns)",
                    path.display(),
                    first.len(),
                    row.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Format(format!("{}: empty matrix", path.display())));
    }
    let (r, c) = (rows.len(), rows[0].len());
    Tensor::from_vec(&[r, c], rows.into_iter().flatten().collect())
}

/// Read the pixel bytes back out of a binary P5 file.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let header_end = buf
        .windows(4)
        .position(|w| w == b"255\n")
        .ok_or_else(|| Error::Format(format!("{}: not a P5 file", path.display())))?
        + 4;
    let header = std::str::from_utf8(&buf[..header_end])
        .map_err(|_| Error::Format("pgm header is not ASCII".into()))?;
    let mut parts = header.split_ascii_whitespace();
    if parts.next() != Some("P5") {
        return Err(Error::Format(format!("{}: not a P5 file", path.display())));
    }
    let cols: usize = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format("pgm: bad width".into()))?;
    let rows: usize = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format("pgm: bad height".into()))?;
    let pixels = buf[header_end..].to_vec();
    if pixels.len() != rows * cols {
        return Err(Error::Format(format!(
            "{}: expected {} pixels, found {}",
            path.display(),
            rows * cols,
            pixels.len()
        )));
    }
    Ok((rows, cols, pixels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_matrix_renders_fully_bright() {
        let dir = tempfile::tempdir().unwrap();
        let m = Tensor::full(&[4, 4], 0.25);
        let (_, pgm) = attn_export(&m, &dir.path().join("uniform")).unwrap();
        let (r, c, px) = read_pgm(&pgm).unwrap();
        assert_eq!((r, c), (4, 4));
        assert!(px.iter().all(|&p| p == 255));
    }

    #[test]
    fn diagonal_matrix_renders_bright_diagonal() {
        let dir = tempfile::tempdir().unwrap();
        let mut data = vec![0.0f32; 9];
        for i in 0..3 {
            data[i * 3 + i] = 0.5;
        }
        let m = Tensor::from_vec(&[3, 3], data).unwrap();
        let (_, pgm) = attn_export(&m, &dir.path().join("diag")).unwrap();
        let (_, _, px) = read_pgm(&pgm).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 255 } else { 0 };
                assert_eq!(px[i * 3 + j], want);
            }
        }
    }

    #[test]
    fn zero_matrix_renders_black() {
        let dir = tempfile::tempdir().unwrap();
        let (_, pgm) = attn_export(&Tensor::zeros(&[2, 5]), &dir.path().join("zero")).unwrap();
        let (_, _, px) = read_pgm(&pgm).unwrap();
        assert!(px.iter().all(|&p| p == 0));
    }

    #[test]
    fn csv_reparses_within_tolerance() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = crate::rng::stream(3, "csv");
        use rand::Rng;
        let data: Vec<f32> = (0..25).map(|_| rng.gen_range(0.0..1.0)).collect();
        let m = Tensor::from_vec(&[5, 5], data.clone()).unwrap();
        let (csv, _) = attn_export(&m, &dir.path().join("rt")).unwrap();
        let back = parse_attn_csv(&csv).unwrap();
        assert_eq!(back.shape(), &[5, 5]);
        for (a, b) in back.data_vec().iter().zip(&data) {
            assert!((a - b).abs() <= 1e-6);
        }
    }
}
