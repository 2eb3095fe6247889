use crate::error::{Error, Result};
use crate::numerics::float::Float;
use crate::numerics::graph::{Graph, Var};

/// `[B, L, d] -> [B*h, L, d/h]`
fn split_heads<T: Float>(g: &mut Graph<'_, T>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, l, d) = (s[0], s[1], s[2]);
    let x = g.reshape(x, &[b, l, heads, d / heads])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[b * heads, l, d / heads])
}

/// Scaled dot-product attention over `heads` heads.
///
/// `q: [B, Lq, d]`, `k, v: [B, Lk, d]`; `mask` (`[B, Lk]`, row-major) marks keys that may be attended.
/// Returns `[B, Lq, d]`.
pub fn multi_head_attention<T: Float>(
    g: &mut Graph<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let (sq, sk, sv) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if sq.len() != 3 || sk.len() != 3 || sk != sv || sq[0] != sk[0] || sq[2] != sk[2] {
        return Err(Error::shape("multi_head_attention", &sq, &sk));
    }
    let (b, lq, d) = (sq[0], sq[1], sq[2]);
    let lk = sk[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("model dim {d} is not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let qh = split_heads(g, q, heads)?;
    let kh = split_heads(g, k, heads)?;
    let vh = split_heads(g, v, heads)?;
    let scores = g.bmm(qh, kh, true)?;
    let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    if let Some(m) = mask {
        if m.len() != b * lk {
            return Err(Error::shape("attention mask", &[b, lk], &[m.len()]));
        }
        let mut keep = Vec::with_capacity(b * heads * lq * lk);
        for bi in 0..b {
            let row = &m[bi * lk..(bi + 1) * lk];
            for _ in 0..heads * lq {
                keep.extend_from_slice(row);
            }
        }
        scores = g.mask_fill(scores, keep)?;
    }
    let attn = g.softmax(scores);
    let out = g.bmm(attn, vh, false)?;
    let out = g.reshape(out, &[b, heads, lq, dh])?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    g.reshape(out, &[b, lq, d])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::params::ParamStore;
    use crate::numerics::tensor::Tensor;

    fn rand_tensor(shape: &[usize], seed: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i as f64 + 1.0) * seed).sin())
    }

    #[test]
    fn single_key_returns_value_row() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, false, 0);
        let q = g.input(rand_tensor(&[2, 1, 4], 0.7));
        let k = g.input(rand_tensor(&[2, 1, 4], 1.3));
        let v = g.input(rand_tensor(&[2, 1, 4], 2.1));
        let o = multi_head_attention(&mut g, q, k, v, 2, None).unwrap();
        assert!(g.value(o).max_abs_diff(g.value(v)) < 1e-15);
    }

    #[test]
    fn matches_brute_force_per_head() {
        let (l, d, h) = (3, 4, 2);
        let qt = rand_tensor(&[1, l, d], 0.37);
        let kt = rand_tensor(&[1, l, d], 0.91);
        let vt = rand_tensor(&[1, l, d], 1.77);
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, false, 0);
        let (q, k, v) = (g.input(qt.clone()), g.input(kt.clone()), g.input(vt.clone()));
        let o = multi_head_attention(&mut g, q, k, v, h, None).unwrap();
        let dh = d / h;
        let (qd, kd, vd) = (qt.data(), kt.data(), vt.data());
        for head in 0..h {
            for i in 0..l {
                let s: Vec<f64> = (0..l)
                    .map(|j| (0..dh).map(|c| qd[i * d + head * dh + c] * kd[j * d + head * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..dh {
                    let expect: f64 = (0..l).map(|j| e[j] / z * vd[j * d + head * dh + c]).sum();
                    let got = g.value(o).data()[i * d + head * dh + c];
                    assert!((expect - got).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn rejects_indivisible_heads() {
        let store = ParamStore::<f32>::new();
        let mut g = Graph::new(&store, false, 0);
        let x = g.input(Tensor::zeros(&[1, 2, 6]));
        assert!(matches!(multi_head_attention(&mut g, x, x, x, 4, None), Err(Error::Config(_))));
    }
}
