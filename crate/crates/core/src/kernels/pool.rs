use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PoolGeom {
    pub fn out_len(&self, len: usize) -> usize {
        (len + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

/// Max pooling over each `h x w` plane. Padding never wins the max.
/// Returns the pooled planes and, per output, the flat in-plane argmax.
pub(crate) fn max_pool_forward(
    x: &[f32],
    planes: usize,
    h: usize,
    w: usize,
    g: PoolGeom,
) -> (Vec<f32>, Vec<u32>) {
    let (ho, wo) = (g.out_len(h), g.out_len(w));
    let mut out = vec![0.0f32; planes * ho * wo];
    let mut arg = vec![0u32; planes * ho * wo];
    out.par_chunks_mut(ho * wo)
        .zip(arg.par_chunks_mut(ho * wo))
        .enumerate()
        .for_each(|(p, (o, a))| {
            let xp = &x[p * h * w..][..h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = 0usize;
                    for ky in 0..g.kernel {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..g.kernel {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = iy as usize * w + ix as usize;
                            if xp[idx] > best {
                                best = xp[idx];
                                best_i = idx;
                            }
                        }
                    }
                    o[oy * wo + ox] = best;
                    a[oy * wo + ox] = best_i as u32;
                }
            }
        });
    (out, arg)
}

pub(crate) fn max_pool_backward(dy: &[f32], arg: &[u32], planes: usize, plane_in: usize) -> Vec<f32> {
    let plane_out = dy.len() / planes;
    let mut dx = vec![0.0f32; planes * plane_in];
    dx.par_chunks_mut(plane_in).enumerate().for_each(|(p, d)| {
        let g = &dy[p * plane_out..][..plane_out];
        let a = &arg[p * plane_out..][..plane_out];
        for (gv, &i) in g.iter().zip(a) {
            d[i as usize] += gv;
        }
    });
    dx
}

/// Unpadded average pooling.
pub(crate) fn avg_pool_forward(x: &[f32], planes: usize, h: usize, w: usize, g: PoolGeom) -> Vec<f32> {
    debug_assert_eq!(g.pad, 0);
    let (ho, wo) = (g.out_len(h), g.out_len(w));
    let scale = 1.0 / (g.kernel * g.kernel) as f32;
    let mut out = vec![0.0f32; planes * ho * wo];
    out.par_chunks_mut(ho * wo).enumerate().for_each(|(p, o)| {
        let xp = &x[p * h * w..][..h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0f32;
                for ky in 0..g.kernel {
                    let row = &xp[(oy * g.stride + ky) * w..];
                    for kx in 0..g.kernel {
                        acc += row[ox * g.stride + kx];
                    }
                }
                o[oy * wo + ox] = acc * scale;
            }
        }
    });
    out
}

pub(crate) fn avg_pool_backward(dy: &[f32], planes: usize, h: usize, w: usize, g: PoolGeom) -> Vec<f32> {
    let (ho, wo) = (g.out_len(h), g.out_len(w));
    let scale = 1.0 / (g.kernel * g.kernel) as f32;
    let mut dx = vec![0.0f32; planes * h * w];
    dx.par_chunks_mut(h * w).enumerate().for_each(|(p, d)| {
        let gp = &dy[p * ho * wo..][..ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let v = gp[oy * wo + ox] * scale;
                for ky in 0..g.kernel {
                    let row = (oy * g.stride + ky) * w;
                    for kx in 0..g.kernel {
                        d[row + ox * g.stride + kx] += v;
                    }
                }
            }
        }
    });
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_pool_picks_window_max_and_routes_grad() {
        let x: Vec<f32> = (0..16).map(|i| ((i * 7) % 16) as f32).collect();
        let g = PoolGeom {
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let (out, arg) = max_pool_forward(&x, 1, 4, 4, g);
        assert_eq!(out.len(), 4);
        for (o, &a) in out.iter().zip(&arg) {
            assert_eq!(*o, x[a as usize]);
        }
        let dx = max_pool_backward(&[1.0; 4], &arg, 1, 16);
        assert_eq!(dx.iter().sum::<f32>(), 4.0);
    }

    #[test]
    fn avg_pool_adjoint() {
        let g = PoolGeom {
            kernel: 2,
            stride: 2,
            pad: 0,
        };
        let x: Vec<f32> = (0..32).map(|i| (i as f32).sin()).collect();
        let y = avg_pool_forward(&x, 2, 4, 4, g);
        let dy: Vec<f32> = (0..8).map(|i| (i as f32).cos()).collect();
        let dx = avg_pool_backward(&dy, 2, 4, 4, g);
        let lhs: f32 = y.iter().zip(&dy).map(|(a, b)| a * b).sum();
        let rhs: f32 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-5);
    }
}
