use rayon::prelude::*;

/// Per-channel mean and biased variance over an `[n, c, plane]` layout.
pub(crate) fn channel_moments(x: &[f32], n: usize, c: usize, plane: usize) -> (Vec<f32>, Vec<f32>) {
    (0..c)
        .into_par_iter()
        .map(|ch| {
            let mut sum = 0.0f64;
            for i in 0..n {
                sum += x[(i * c + ch) * plane..][..plane].iter().map(|&v| v as f64).sum::<f64>();
            }
            let count = (n * plane) as f64;
            let mean = sum / count;
            let mut sq = 0.0f64;
            for i in 0..n {
                sq += x[(i * c + ch) * plane..][..plane]
                    .iter()
                    .map(|&v| {
                        let d = v as f64 - mean;
                        d * d
                    })
                    .sum::<f64>();
            }
            (mean as f32, (sq / count) as f32)
        })
        .unzip()
}

/// `y = (x - mean) * invstd * gamma + beta` per channel.
pub(crate) fn channel_affine(
    x: &[f32],
    c: usize,
    plane: usize,
    mean: &[f32],
    invstd: &[f32],
    gamma: &[f32],
    beta: &[f32],
) -> Vec<f32> {
    let mut y = vec![0.0f32; x.len()];
    y.par_chunks_mut(plane).enumerate().for_each(|(nc, yp)| {
        let ch = nc % c;
        let scale = invstd[ch] * gamma[ch];
        let shift = beta[ch] - mean[ch] * scale;
        for (o, &v) in yp.iter_mut().zip(&x[nc * plane..][..plane]) {
            *o = v * scale + shift;
        }
    });
    y
}

pub(crate) struct BnGrads {
    pub dx: Option<Vec<f32>>,
    pub dgamma: Vec<f32>,
    pub dbeta: Vec<f32>,
}

/// Backward of per-channel normalization. With `batch_stats` the mean and
/// variance depend on `x` (training mode); otherwise they are constants.
pub(crate) fn channel_norm_backward(
    x: &[f32],
    dy: &[f32],
    n: usize,
    c: usize,
    plane: usize,
    mean: &[f32],
    invstd: &[f32],
    gamma: &[f32],
    batch_stats: bool,
    need_dx: bool,
) -> BnGrads {
    let (dgamma, dbeta): (Vec<f32>, Vec<f32>) = (0..c)
        .into_par_iter()
        .map(|ch| {
            let mut sg = 0.0f64;
            let mut sb = 0.0f64;
            for i in 0..n {
                let off = (i * c + ch) * plane;
                for (&xv, &g) in x[off..off + plane].iter().zip(&dy[off..off + plane]) {
                    let xhat = (xv - mean[ch]) * invstd[ch];
                    sg += (g * xhat) as f64;
                    sb += g as f64;
                }
            }
            (sg as f32, sb as f32)
        })
        .unzip();
    let dx = need_dx.then(|| {
        let count = (n * plane) as f32;
        let mut dx = vec![0.0f32; x.len()];
        dx.par_chunks_mut(plane).enumerate().for_each(|(nc, dp)| {
            let ch = nc % c;
            let off = nc * plane;
            let k = gamma[ch] * invstd[ch];
            if batch_stats {
                let mg = dbeta[ch] / count;
                let mgx = dgamma[ch] / count;
                for ((o, &xv), &g) in dp.iter_mut().zip(&x[off..off + plane]).zip(&dy[off..off + plane]) {
                    let xhat = (xv - mean[ch]) * invstd[ch];
                    *o = k * (g - mg - xhat * mgx);
                }
            } else {
                for (o, &g) in dp.iter_mut().zip(&dy[off..off + plane]) {
                    *o = k * g;
                }
            }
        });
        dx
    });
    BnGrads { dx, dgamma, dbeta }
}

/// Layer normalization over the last axis of length `d`.
/// Returns output, per-row mean and per-row reciprocal std.
pub(crate) fn layer_norm_forward(
    x: &[f32],
    d: usize,
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let rows = x.len() / d;
    let mut y = vec![0.0f32; x.len()];
    let stats: Vec<(f32, f32)> = y
        .par_chunks_mut(d)
        .enumerate()
        .map(|(r, yr)| {
            let xr = &x[r * d..][..d];
            let mean = xr.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = xr
                .iter()
                .map(|&v| {
                    let t = v as f64 - mean;
                    t * t
                })
                .sum::<f64>()
                / d as f64;
            let rstd = 1.0 / (var + eps as f64).sqrt();
            let (mean, rstd) = (mean as f32, rstd as f32);
            for i in 0..d {
                yr[i] = (xr[i] - mean) * rstd * gamma[i] + beta[i];
            }
            (mean, rstd)
        })
        .collect();
    debug_assert_eq!(stats.len(), rows);
    let (mean, rstd) = stats.into_iter().unzip();
    (y, mean, rstd)
}

pub(crate) fn layer_norm_backward(
    x: &[f32],
    dy: &[f32],
    d: usize,
    gamma: &[f32],
    mean: &[f32],
    rstd: &[f32],
    need_dx: bool,
) -> (Option<Vec<f32>>, Vec<f32>, Vec<f32>) {
    let rows = x.len() / d;
    let mut dgamma = vec![0.0f64; d];
    let mut dbeta = vec![0.0f64; d];
    for r in 0..rows {
        let xr = &x[r * d..][..d];
        let gr = &dy[r * d..][..d];
        for i in 0..d {
            let xhat = (xr[i] - mean[r]) * rstd[r];
            dgamma[i] += (gr[i] * xhat) as f64;
            dbeta[i] += gr[i] as f64;
        }
    }
    let dx = need_dx.then(|| {
        let mut dx = vec![0.0f32; x.len()];
        dx.par_chunks_mut(d).enumerate().for_each(|(r, dr)| {
            let xr = &x[r * d..][..d];
            let gr = &dy[r * d..][..d];
            let mut s1 = 0.0f64;
            let mut s2 = 0.0f64;
            for i in 0..d {
                let xhat = (xr[i] - mean[r]) * rstd[r];
                let gh = gr[i] * gamma[i];
                s1 += gh as f64;
                s2 += (gh * xhat) as f64;
            }
            let (m1, m2) = ((s1 / d as f64) as f32, (s2 / d as f64) as f32);
            for i in 0..d {
                let xhat = (xr[i] - mean[r]) * rstd[r];
                dr[i] = rstd[r] * (gr[i] * gamma[i] - m1 - xhat * m2);
            }
        });
        dx
    });
    (
        dx,
        dgamma.into_iter().map(|v| v as f32).collect(),
        dbeta.into_iter().map(|v| v as f32).collect(),
    )
}
