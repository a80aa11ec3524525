//! Datasets: the built-in procedural 10-class image set and an IDX
//! loader for real small-image corpora. Images are stored as flat RGB
//! planes in [0, 1]; batching normalizes to [-1, 1] and optionally
//! mirrors horizontally.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

#[derive(Debug)]
pub struct Dataset {
    /// n x 3 x size x size, channel-major per image, values in [0, 1].
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
    pub n: usize,
    pub size: usize,
    pub classes: usize,
    pub split: String,
}

impl Dataset {
    fn image_len(&self) -> usize {
        3 * self.size * self.size
    }

    pub fn raw_image(&self, idx: usize) -> &[f32] {
        let len = self.image_len();
        &self.images[idx * len..(idx + 1) * len]
    }

    /// One image as a [3, size, size] tensor normalized to [-1, 1].
    pub fn image_tensor(&self, idx: usize, flip: bool) -> Tensor {
        let raw = self.raw_image(idx);
        let s = self.size;
        let mut data = vec![0.0f32; raw.len()];
        for c in 0..3 {
            for y in 0..s {
                for x in 0..s {
                    let sx = if flip { s - 1 - x } else { x };
                    data[c * s * s + y * s + x] = (raw[c * s * s + y * s + sx] - 0.5) / 0.5;
                }
            }
        }
        Tensor::from_vec(&[3, s, s], data).expect("image tensor")
    }

    pub fn batch(&self, indices: &[usize], flips: Option<&[bool]>) -> Vec<Tensor> {
        indices
            .iter()
            .enumerate()
            .map(|(k, &i)| self.image_tensor(i, flips.map_or(false, |f| f[k])))
            .collect()
    }

    pub fn labels_for(&self, indices: &[usize]) -> Vec<u8> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}

/// The ten procedural patterns, in class order.
const PATTERN_NAMES: [&str; 10] = [
    "bars_horizontal",
    "bars_vertical",
    "stripes_diagonal",
    "stripes_antidiagonal",
    "checker_fine",
    "checker_coarse",
    "disk",
    "ring",
    "cross",
    "gradient",
];

/// Every class shares the same low-contrast palette, so the classes are
/// only separable through pattern geometry, not through a color
/// shortcut. Contrast sits near the pixel-noise level on purpose.
const FG_LEVEL: f32 = 0.75;
const BG_LEVEL: f32 = 0.25;

pub fn pattern_name(class: usize) -> &'static str {
    PATTERN_NAMES[class]
}

/// Side of the patterned tile each image carries; the rest is
/// background. Localized patterns against background reward local
/// attention, the way objects do in natural images.
fn tile_side(size: usize) -> i64 {
    (5 * size as i64) / 8
}

/// Positional jitter half-range for the tile placement.
fn jitter_range(size: usize) -> i64 {
    (size as i64 / 16).max(1)
}

/// Foreground weight of pattern `class` at pixel (y, x): patterns are
/// drawn inside a jitter-placed square tile, zero outside. 1.0 is pure
/// foreground color.
fn pattern_weight(class: usize, y: usize, x: usize, size: usize, oy: i64, ox: i64) -> f32 {
    let w = tile_side(size);
    let corner_x = (size as i64 - w) / 2 + ox;
    let corner_y = (size as i64 - w) / 2 + oy;
    // tile-local coordinates; texture phase rides along with the tile
    let tx = x as i64 - corner_x;
    let ty = y as i64 - corner_y;
    if tx < 0 || tx >= w || ty < 0 || ty >= w {
        return 0.0;
    }
    let cx = w / 2;
    let cy = w / 2;
    let r_out = (2 * w) / 5;
    let on = |v: bool| if v { 1.0 } else { 0.0 };
    match class {
        0 => on(ty.rem_euclid(8) < 4),
        1 => on(tx.rem_euclid(8) < 4),
        2 => on((tx + ty).rem_euclid(8) < 4),
        3 => on((tx - ty).rem_euclid(8) < 4),
        4 => on((tx.div_euclid(2) + ty.div_euclid(2)).rem_euclid(2) == 0),
        5 => on((tx.div_euclid(5) + ty.div_euclid(5)).rem_euclid(2) == 0),
        6 => {
            let r2 = (tx - cx).pow(2) + (ty - cy).pow(2);
            on(r2 <= r_out * r_out)
        }
        7 => {
            let r2 = (tx - cx).pow(2) + (ty - cy).pow(2);
            let inner = (w / 4) * (w / 4);
            on(r2 >= inner && r2 <= r_out * r_out)
        }
        8 => on((tx - cx).abs() <= w / 8 || (ty - cy).abs() <= w / 8),
        9 => (tx as f32 / (w as f32 - 1.0)).clamp(0.0, 1.0),
        _ => unreachable!("pattern classes are 0..10"),
    }
}

fn gaussian(rng: &mut ChaCha8Rng, std: f32) -> f32 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32 * std
}

/// Deterministic balanced synthetic set: `classes` procedural patterns
/// with positional jitter and Gaussian pixel noise (sigma 0.1).
pub fn synth_generate(
    seed: u64,
    n_per_class: usize,
    classes: usize,
    size: usize,
    split: &str,
) -> Result<Dataset> {
    if classes == 0 || classes > 10 {
        return Err(Error::Config(format!(
            "synthetic set supports 1..=10 classes, got {classes}"
        )));
    }
    if size < 8 {
        return Err(Error::Config(format!("image size {size} is too small")));
    }
    let mut rng = stream(seed, "synth");
    let n = n_per_class * classes;
    let mut images = vec![0.0f32; n * 3 * size * size];
    let mut labels = vec![0u8; n];
    let plane = size * size;
    for c in 0..classes {
        for k in 0..n_per_class {
            let idx = c * n_per_class + k;
            labels[idx] = c as u8;
            let j = jitter_range(size);
            let ox = rng.gen_range(-j..=j);
            let oy = rng.gen_range(-j..=j);
            let base = idx * 3 * plane;
            for y in 0..size {
                for x in 0..size {
                    let w = pattern_weight(c, y, x, size, oy, ox);
                    let signal = BG_LEVEL + (FG_LEVEL - BG_LEVEL) * w;
                    for ch in 0..3 {
                        let v = signal + gaussian(&mut rng, 0.1);
                        images[base + ch * plane + y * size + x] = v.clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    Ok(Dataset {
        images,
        labels,
        n,
        size,
        classes,
        split: split.to_string(),
    })
}

/// Class-separability statistics over a generated set: mean pairwise L2
/// distance between class-mean images, and the mean distance between the
/// two half-split means of each class (how stable a class mean is).
pub fn class_separation(ds: &Dataset) -> (f64, f64) {
    let dim = 3 * ds.size * ds.size;
    let mut means = vec![vec![0.0f64; dim]; ds.classes];
    let mut half_a = vec![vec![0.0f64; dim]; ds.classes];
    let mut half_b = vec![vec![0.0f64; dim]; ds.classes];
    let mut counts = vec![0usize; ds.classes];
    for i in 0..ds.n {
        let c = ds.labels[i] as usize;
        let img = ds.raw_image(i);
        let target = if counts[c] % 2 == 0 { &mut half_a[c] } else { &mut half_b[c] };
        for (t, &v) in target.iter_mut().zip(img) {
            *t += f64::from(v);
        }
        for (m, &v) in means[c].iter_mut().zip(img) {
            *m += f64::from(v);
        }
        counts[c] += 1;
    }
    for c in 0..ds.classes {
        let na = counts[c].div_ceil(2) as f64;
        let nb = (counts[c] / 2) as f64;
        for v in &mut means[c] {
            *v /= counts[c] as f64;
        }
        for v in &mut half_a[c] {
            *v /= na;
        }
        for v in &mut half_b[c] {
            *v /= nb;
        }
    }
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    let mut inter = 0.0;
    let mut pairs = 0usize;
    for i in 0..ds.classes {
        for j in i + 1..ds.classes {
            inter += dist(&means[i], &means[j]);
            pairs += 1;
        }
    }
    let inter = inter / pairs.max(1) as f64;
    let intra = (0..ds.classes).map(|c| dist(&half_a[c], &half_b[c])).sum::<f64>() / ds.classes as f64;
    (inter, intra)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(buf: &[u8], off: usize, what: &str) -> Result<u32> {
    let end = off + 4;
    if end > buf.len() {
        return Err(Error::Format(format!("idx: truncated while reading {what}")));
    }
    Ok(u32::from_be_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]]))
}

/// Load an IDX image/label pair, replicate grayscale to RGB, scale to
/// [0, 1], and center pad or crop to `target_size`.
pub fn idx_load(images_path: &Path, labels_path: &Path, target_size: usize) -> Result<Dataset> {
    let img_buf = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lbl_buf = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;

    let magic = read_u32_be(&img_buf, 0, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "idx images: expected magic {IDX_IMAGES_MAGIC:#010x}, got {magic:#010x}"
        )));
    }
    let n = read_u32_be(&img_buf, 4, "image count")? as usize;
    let rows = read_u32_be(&img_buf, 8, "row count")? as usize;
    let cols = read_u32_be(&img_buf, 12, "column count")? as usize;
    let need = 16 + n * rows * cols;
    if img_buf.len() < need {
        return Err(Error::Format(format!(
            "idx images: need {need} bytes for {n} images of {rows}x{cols}, file has {}",
            img_buf.len()
        )));
    }

    let lmagic = read_u32_be(&lbl_buf, 0, "label magic")?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "idx labels: expected magic {IDX_LABELS_MAGIC:#010x}, got {lmagic:#010x}"
        )));
    }
    let ln = read_u32_be(&lbl_buf, 4, "label count")? as usize;
    if ln != n {
        return Err(Error::Format(format!(
            "idx: {n} images but {ln} labels"
        )));
    }
    if lbl_buf.len() < 8 + ln {
        return Err(Error::Format("idx labels: truncated payload".into()));
    }

    let s = target_size;
    let plane = s * s;
    let mut images = vec![0.0f32; n * 3 * plane];
    // symmetric placement; odd differences put the extra row/col at the
    // bottom/right
    for i in 0..n {
        let src = &img_buf[16 + i * rows * cols..16 + (i + 1) * rows * cols];
        let dst = &mut images[i * 3 * plane..(i + 1) * 3 * plane];
        for y in 0..s {
            for x in 0..s {
                let sy = y as i64 - (s as i64 - rows as i64) / 2;
                let sx = x as i64 - (s as i64 - cols as i64) / 2;
                let v = if sy >= 0 && sy < rows as i64 && sx >= 0 && sx < cols as i64 {
                    f32::from(src[sy as usize * cols + sx as usize]) / 255.0
                } else {
                    0.0
                };
                for c in 0..3 {
                    dst[c * plane + y * s + x] = v;
                }
            }
        }
    }
    let labels: Vec<u8> = lbl_buf[8..8 + n].to_vec();
    let classes = labels.iter().copied().max().map_or(1, |m| usize::from(m) + 1);
    Ok(Dataset {
        images,
        labels,
        n,
        size: s,
        classes,
        split: "idx".to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let a = synth_generate(7, 20, 10, 32, "train").unwrap();
        let b = synth_generate(7, 20, 10, 32, "train").unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.n, 200);
        for c in 0..10u8 {
            assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 20);
        }
        assert!(a.images.iter().all(|&v| (0.0..=1.0).contains(&v) && v.is_finite()));
    }

    #[test]
    fn synth_sample_count() {
        let ds = synth_generate(1, 500, 10, 32, "train").unwrap();
        assert_eq!(ds.n, 5000);
    }

    #[test]
    fn class_means_are_separable() {
        // the full-size training split is the set the threshold was
        // frozen against
        let ds = synth_generate(3, 500, 10, 32, "train").unwrap();
        let (inter, intra) = class_separation(&ds);
        assert!(
            inter > 5.0 * intra,
            "inter {inter:.3} vs intra {intra:.3} (ratio {:.2})",
            inter / intra
        );
    }

    #[test]
    fn train_and_test_seeds_share_no_samples() {
        let train = synth_generate(crate::rng::derive_seed(7, "train"), 30, 10, 32, "train").unwrap();
        let test = synth_generate(crate::rng::derive_seed(7, "test"), 10, 10, 32, "test").unwrap();
        let hash = |img: &[f32]| -> u64 {
            let mut h = 0xcbf2_9ce4_8422_2325u64;
            for v in img {
                for b in v.to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
            h
        };
        let train_hashes: std::collections::HashSet<u64> =
            (0..train.n).map(|i| hash(train.raw_image(i))).collect();
        for i in 0..test.n {
            assert!(!train_hashes.contains(&hash(test.raw_image(i))));
        }
    }

    #[test]
    fn flip_mirrors_and_normalizes() {
        let ds = synth_generate(5, 2, 10, 16, "t").unwrap();
        let plain = ds.image_tensor(0, false);
        let flipped = ds.image_tensor(0, true);
        let (p, f) = (plain.data_vec(), flipped.data_vec());
        for c in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    let a = p[c * 256 + y * 16 + x];
                    let b = f[c * 256 + y * 16 + (15 - x)];
                    assert_eq!(a, b);
                }
            }
        }
        assert!(p.iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    fn write_idx(dir: &Path, rows: usize, cols: usize, images: &[Vec<u8>], labels: &[u8], bad_magic: bool) -> (std::path::PathBuf, std::path::PathBuf) {
        let ipath = dir.join("images.idx");
        let lpath = dir.join("labels.idx");
        let mut ibuf = Vec::new();
        let magic: u32 = if bad_magic { IDX_LABELS_MAGIC } else { IDX_IMAGES_MAGIC };
        ibuf.extend_from_slice(&magic.to_be_bytes());
        ibuf.extend_from_slice(&(images.len() as u32).to_be_bytes());
        ibuf.extend_from_slice(&(rows as u32).to_be_bytes());
        ibuf.extend_from_slice(&(cols as u32).to_be_bytes());
        for img in images {
            ibuf.extend_from_slice(img);
        }
        std::fs::write(&ipath, ibuf).unwrap();
        let mut lbuf = Vec::new();
        lbuf.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lbuf.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        lbuf.extend_from_slice(labels);
        std::fs::write(&lpath, lbuf).unwrap();
        (ipath, lpath)
    }

    #[test]
    fn idx_round_trip_with_padding() {
        let dir = tempfile::tempdir().unwrap();
        let img: Vec<u8> = (0..28 * 28).map(|v| (v % 256) as u8).collect();
        let (ip, lp) = write_idx(dir.path(), 28, 28, &[img.clone()], &[3], false);
        let ds = idx_load(&ip, &lp, 32).unwrap();
        assert_eq!(ds.n, 1);
        assert_eq!(ds.labels, vec![3]);
        assert_eq!(ds.size, 32);
        // symmetric 2-pixel zero pad: source (0,0) lands at (2,2)
        let raw = ds.raw_image(0);
        assert_eq!(raw[0], 0.0);
        assert_eq!(raw[2 * 32 + 2], f32::from(img[0]) / 255.0);
        assert_eq!(raw[2 * 32 + 1], 0.0);
        // all three channels replicated
        assert_eq!(raw[2 * 32 + 2], raw[32 * 32 + 2 * 32 + 2]);
    }

    #[test]
    fn idx_error_paths() {
        let dir = tempfile::tempdir().unwrap();
        let img: Vec<u8> = vec![0; 28 * 28];

        // wrong magic names the magic it saw
        let (ip, lp) = write_idx(dir.path(), 28, 28, &[img.clone()], &[1], true);
        let err = idx_load(&ip, &lp, 32).unwrap_err();
        assert!(err.to_string().contains("0x00000801"), "{err}");

        // count mismatch
        let (ip, lp) = write_idx(dir.path(), 28, 28, &[img.clone()], &[1, 2], false);
        let err = idx_load(&ip, &lp, 32).unwrap_err();
        assert!(err.to_string().contains("labels"), "{err}");

        // truncated payload
        let (ip, lp) = write_idx(dir.path(), 28, 28, &[img], &[1], false);
        let full = std::fs::read(&ip).unwrap();
        std::fs::write(&ip, &full[..full.len() - 10]).unwrap();
        let err = idx_load(&ip, &lp, 32).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }
}