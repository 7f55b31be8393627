use crate::error::{Error, Result};

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Visits every multi-index of `shape[..rank-1]` in row-major order, passing
/// the offset computed with `src_strides`.
fn for_each_outer(shape: &[usize], src_strides: &[&[usize]], mut f: impl FnMut(&[usize])) {
    let r = shape.len();
    let outer: usize = shape[..r - 1].iter().product();
    let mut idx = vec![0usize; r - 1];
    let mut offs = vec![0usize; src_strides.len()];
    for _ in 0..outer {
        for (o, s) in offs.iter_mut().zip(src_strides) {
            *o = idx.iter().zip(s.iter()).map(|(i, st)| i * st).sum();
        }
        f(&offs);
        for i in (0..r - 1).rev() {
            idx[i] += 1;
            if idx[i] < shape[i] {
                break;
            }
            idx[i] = 0;
        }
    }
}

pub(crate) fn permute(x: &[f32], shape: &[usize], perm: &[usize]) -> (Vec<f32>, Vec<usize>) {
    let r = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    if r <= 1 {
        return (x.to_vec(), out_shape);
    }
    let in_strides = strides(shape);
    let src: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let inner = out_shape[r - 1];
    let inner_stride = src[r - 1];
    let mut out = Vec::with_capacity(x.len());
    for_each_outer(&out_shape, &[&src[..r - 1]], |offs| {
        let base = offs[0];
        if inner_stride == 1 {
            out.extend_from_slice(&x[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| x[base + j * inner_stride]));
        }
    });
    (out, out_shape)
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Right-aligned (numpy-style) broadcasting of two shapes.
#[derive(Clone, Debug)]
pub(crate) struct Broadcast {
    pub out_shape: Vec<usize>,
    sa: Vec<usize>,
    sb: Vec<usize>,
}

impl Broadcast {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let r = a.len().max(b.len()).max(1);
        let pad = |s: &[usize]| {
            let mut v = vec![1usize; r - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut out_shape = Vec::with_capacity(r);
        for i in 0..r {
            let d = match (pa[i], pb[i]) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => {
                    return Err(Error::Shape(format!("cannot broadcast {a:?} with {b:?}")));
                }
            };
            out_shape.push(d);
        }
        let eff = |p: &[usize]| {
            let st = strides(p);
            p.iter()
                .zip(st)
                .map(|(&d, s)| if d == 1 { 0 } else { s })
                .collect::<Vec<_>>()
        };
        Ok(Broadcast {
            sa: eff(&pa),
            sb: eff(&pb),
            out_shape,
        })
    }

    pub fn numel(&self) -> usize {
        self.out_shape.iter().product()
    }

    /// Calls `f(out_index, a_index, b_index)` for every output element in order.
    pub fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let r = self.out_shape.len();
        let inner = self.out_shape[r - 1];
        let (ia, ib) = (self.sa[r - 1], self.sb[r - 1]);
        let mut o = 0usize;
        for_each_outer(&self.out_shape, &[&self.sa[..r - 1], &self.sb[..r - 1]], |offs| {
            for j in 0..inner {
                f(o, offs[0] + j * ia, offs[1] + j * ib);
                o += 1;
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_roundtrip() {
        let shape = [2, 3, 4];
        let x: Vec<f32> = (0..24).map(|i| i as f32).collect();
        let (y, ys) = permute(&x, &shape, &[2, 0, 1]);
        assert_eq!(ys, vec![4, 2, 3]);
        // y[k][i][j] == x[i][j][k]
        assert_eq!(y[(1 * 2 + 1) * 3 + 2], x[(1 * 3 + 2) * 4 + 1]);
        let (z, zs) = permute(&y, &ys, &inverse_perm(&[2, 0, 1]));
        assert_eq!(zs, shape.to_vec());
        assert_eq!(z, x);
    }

    #[test]
    fn broadcast_indices() {
        let bc = Broadcast::new(&[2, 1, 3], &[4, 1]).unwrap();
        assert_eq!(bc.out_shape, vec![2, 4, 3]);
        let mut seen = Vec::new();
        bc.for_each(|o, a, b| seen.push((o, a, b)));
        assert_eq!(seen.len(), 24);
        assert_eq!(seen[5], (5, 2, 1));
        assert_eq!(seen[23], (23, 5, 3));
        assert!(Broadcast::new(&[2, 3], &[4]).is_err());
    }
}
