//! Parameterised layers built on [`Graph`] primitives.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::float::Float;
use crate::numerics::graph::{Graph, Var};
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Affine map over the last axis: `x W + b` with `W: [d_in, d_out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.add_normal(format!("{name}.w"), &[d_in, d_out], (1.0 / d_in as f64).sqrt(), rng)?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), Tensor::zeros(&[d_out]))?)
        } else {
            None
        };
        Ok(Linear { w, b, d_in, d_out })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Layer normalisation over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add_const(format!("{name}.gamma"), &[d], 1.0)?,
            beta: store.add_const(format!("{name}.beta"), &[d], 0.0)?,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gm, bt, LN_EPS)
    }
}

/// Linear layer with an optional low-rank adapter: `x (W + A B) + b`.
#[derive(Debug, Clone)]
pub struct LoraLinear {
    pub base: Linear,
    pub adapter: Option<(ParamId, ParamId)>,
}

impl LoraLinear {
    /// `adapter_name` is `Some(prefix)` to attach `prefix.a` (`[d_in, r]`, random) and `prefix.b` (`[r, d_out]`, zero).
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        adapter_name: Option<&str>,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rank: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let base = Linear::new(store, name, d_in, d_out, bias, rng)?;
        let adapter = match adapter_name {
            Some(prefix) => {
                if rank == 0 {
                    return Err(Error::Config("LoRA rank must be at least 1".into()));
                }
                let a = store.add_normal(format!("{prefix}.a"), &[d_in, rank], (1.0 / d_in as f64).sqrt(), rng)?;
                let b = store.add(format!("{prefix}.b"), Tensor::zeros(&[rank, d_out]))?;
                Some((a, b))
            }
            None => None,
        };
        Ok(LoraLinear { base, adapter })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.base.forward(g, x)?;
        match self.adapter {
            Some((a, b)) => {
                let (a, b) = (g.param(a), g.param(b));
                let xa = g.matmul(x, a)?;
                let xab = g.matmul(xa, b)?;
                g.add(y, xab)
            }
            None => Ok(y),
        }
    }

    /// Folds the adapter into the base weight and zeroes `A`.
    pub fn merge<T: Float>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let Some((a, b)) = self.adapter else {
            return Ok(());
        };
        let ab = store.value(a).matmul(store.value(b))?;
        let w = store.value(self.base.w).add(&ab)?;
        store.get_mut(self.base.w).value = w;
        let zeros = Tensor::zeros(store.value(a).shape());
        store.get_mut(a).value = zeros;
        Ok(())
    }
}

/// `W + A B` for explicit matrices.
pub fn lora_apply<T: Float>(w: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape("lora_apply", a.shape(), b.shape()));
    }
    let ab = a.matmul(b)?;
    if ab.shape() != w.shape() {
        return Err(Error::shape("lora_apply", w.shape(), ab.shape()));
    }
    w.add(&ab)
}

/// Two-layer perceptron `Linear -> GELU -> Linear`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), d_in, hidden, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d_out, true, rng)?,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lora_zero_adapter_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let plain = Linear::new(&mut store, "p", 5, 3, true, &mut rng).unwrap();
        let lora = LoraLinear {
            base: plain.clone(),
            adapter: Some((
                store.add("l.a", Tensor::from_fn(&[5, 2], |i| i as f32)).unwrap(),
                store.add("l.b", Tensor::zeros(&[2, 3])).unwrap(),
            )),
        };
        let x = Tensor::from_fn(&[4, 5], |i| (i as f32 * 0.3).sin());
        let mut g = Graph::new(&store, false, 0);
        let xv = g.input(x);
        let y0 = plain.forward(&mut g, xv).unwrap();
        let y1 = lora.forward(&mut g, xv).unwrap();
        assert_eq!(g.value(y0), g.value(y1));
    }

    #[test]
    fn lora_apply_rank_one() {
        let w = Tensor::<f64>::zeros(&[2, 2]);
        let a = Tensor::from_f64(&[2, 1], &[1.0, 2.0]).unwrap();
        let b = Tensor::from_f64(&[1, 2], &[3.0, 4.0]).unwrap();
        let out = lora_apply(&w, &a, &b).unwrap();
        assert_eq!(out.data(), &[3.0, 4.0, 6.0, 8.0]);
        assert!(lora_apply(&w, &a, &a).is_err());
    }
}
