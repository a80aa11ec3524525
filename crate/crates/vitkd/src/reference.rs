//! Naive-loop f64 reference implementations of the distillation losses.
//!
//! These are deliberately independent of the tape engine: plain loops in
//! f64 over raw slices. They back the oracle-equivalence tests and the
//! finite-difference audit, where a quantization-free loss evaluation is
//! needed. Nothing here is used on the training path.

/// Token correlation map: F F^t / sqrt(D) for an N x D feature.
pub fn correlation_ref(f: &[f32], n: usize, d: usize) -> Vec<f64> {
    assert_eq!(f.len(), n * d);
    let inv = 1.0 / (d as f64).sqrt();
    let mut m = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0f64;
            for k in 0..d {
                s += f64::from(f[i * d + k]) * f64::from(f[j * d + k]);
            }
            m[i * n + j] = s * inv;
        }
    }
    m
}

/// Single-sample mimicking loss: squared distance between the teacher
/// feature and the affine-projected student feature, summed over tokens
/// and dims.
pub fn mimic_linear_ref(
    fs: &[f32],
    ft: &[f32],
    w: &[f32],
    b: &[f32],
    n: usize,
    ds: usize,
    dt: usize,
) -> f64 {
    assert_eq!(fs.len(), n * ds);
    assert_eq!(ft.len(), n * dt);
    assert_eq!(w.len(), ds * dt);
    assert_eq!(b.len(), dt);
    let mut total = 0.0f64;
    for i in 0..n {
        for j in 0..dt {
            let mut proj = f64::from(b[j]);
            for k in 0..ds {
                proj += f64::from(fs[i * ds + k]) * f64::from(w[k * dt + j]);
            }
            let diff = f64::from(ft[i * dt + j]) - proj;
            total += diff * diff;
        }
    }
    total
}

/// Single-sample correlation-mimicking loss: squared distance between
/// the two correlation maps, summed over all entries.
pub fn mimic_corr_ref(fs: &[f32], ft: &[f32], n: usize, ds: usize, dt: usize) -> f64 {
    let ms = correlation_ref(fs, n, ds);
    let mt = correlation_ref(ft, n, dt);
    ms.iter().zip(&mt).map(|(s, t)| (t - s) * (t - s)).sum()
}

/// Single-sample generation loss: squared distance on masked rows only.
pub fn generation_ref(gen_out: &[f32], ft: &[f32], mask: &[bool], n: usize, d: usize) -> f64 {
    assert_eq!(gen_out.len(), n * d);
    assert_eq!(ft.len(), n * d);
    assert_eq!(mask.len(), n);
    let mut total = 0.0f64;
    for (i, &bit) in mask.iter().enumerate() {
        if !bit {
            continue;
        }
        for j in 0..d {
            let diff = f64::from(ft[i * d + j]) - f64::from(gen_out[i * d + j]);
            total += diff * diff;
        }
    }
    total
}

fn softmax64(z: &[f32], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = z.iter().map(|&v| f64::from(v) / temperature).collect();
    let mx = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|v| (v - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Single-sample softened-logit distillation loss:
/// T^2 * KL(softmax(z_t/T) || softmax(z_s/T)).
pub fn kd_logit_ref(zs: &[f32], zt: &[f32], temperature: f64) -> f64 {
    assert_eq!(zs.len(), zt.len());
    let pt = softmax64(zt, temperature);
    let ps = softmax64(zs, temperature);
    let mut kl = 0.0f64;
    for (t, s) in pt.iter().zip(&ps) {
        if *t > 0.0 {
            kl += t * (t.ln() - s.ln());
        }
    }
    temperature * temperature * kl
}
