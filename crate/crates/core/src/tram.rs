//! Aggregation-centre model: stacked cross-device attention with summed
//! outputs, and the shared five-head prediction network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{multi_head_attention, Float, Graph, LayerNorm, Linear, Mlp, ParamStore, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TramConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_sd: usize,
    pub dropout: f64,
    pub classes: usize,
    /// Average the per-device terms instead of summing them.
    pub mean: bool,
    /// Feed the centre's own feature through the key/value path as `devices[0]`.
    pub center_as_device: bool,
}

impl Default for TramConfig {
    fn default() -> Self {
        TramConfig {
            layers: 2,
            heads: 4,
            d_sd: 64,
            dropout: 0.1,
            classes: 3,
            mean: false,
            center_as_device: true,
        }
    }
}

impl TramConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("tram: {m}")));
        if self.layers == 0 {
            return bad("layers must be at least 1".into());
        }
        if self.heads == 0 || self.d_sd % self.heads != 0 {
            return bad(format!("d_sd {} is not divisible by {} heads", self.d_sd, self.heads));
        }
        if self.classes < 2 {
            return bad(format!("classes must be at least 2, got {}", self.classes));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TramLayer {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
}

#[derive(Debug, Clone)]
pub struct Tram {
    pub cfg: TramConfig,
    pub layers: Vec<TramLayer>,
    pub ln: LayerNorm,
}

impl Tram {
    pub fn new<T: Float>(store: &mut ParamStore<T>, cfg: &TramConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_sd;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("tram.layer{l}");
            layers.push(TramLayer {
                w_q: Linear::new(store, &format!("{p}.w_q"), d, d, false, rng)?,
                w_k: Linear::new(store, &format!("{p}.w_k"), d, d, false, rng)?,
                w_v: Linear::new(store, &format!("{p}.w_v"), d, d, false, rng)?,
            });
        }
        Ok(Tram {
            cfg: cfg.clone(),
            layers,
            ln: LayerNorm::new(store, "tram.ln", d)?,
        })
    }

    /// One layer: `Σ_k Attn(ŝ W_Q, s_k W_K, s_k W_V)`.
    pub fn layer<T: Float>(&self, g: &mut Graph<'_, T>, layer: &TramLayer, s: Var, devices: &[Var]) -> Result<Var> {
        let q = layer.w_q.forward(g, s)?;
        let mut acc: Option<Var> = None;
        for &dev in devices {
            let k = layer.w_k.forward(g, dev)?;
            let v = layer.w_v.forward(g, dev)?;
            let a = multi_head_attention(g, q, k, v, self.cfg.heads, None)?;
            acc = Some(match acc {
                Some(prev) => g.add(prev, a)?,
                None => a,
            });
        }
        let out = acc.ok_or_else(|| Error::Config("aggregation needs at least one device".into()))?;
        Ok(if self.cfg.mean {
            g.scale(out, 1.0 / devices.len() as f64)
        } else {
            out
        })
    }

    /// `Dropout(LN(ŝ^(L)))` starting from the centre feature.
    pub fn aggregate<T: Float>(&self, g: &mut Graph<'_, T>, center: Var, devices: &[Var]) -> Result<Var> {
        let mut all = Vec::with_capacity(devices.len() + 1);
        if self.cfg.center_as_device {
            all.push(center);
        }
        all.extend_from_slice(devices);
        if all.is_empty() {
            return Err(Error::Config("aggregation needs at least one device".into()));
        }
        let cs = g.shape(center).to_vec();
        for &d in &all {
            if g.shape(d) != cs.as_slice() {
                return Err(Error::shape("aggregate", &cs, g.shape(d)));
            }
        }
        let mut s = center;
        for layer in &self.layers {
            s = self.layer(g, layer, s, &all)?;
        }
        let s = self.ln.forward(g, s)?;
        g.dropout(s, self.cfg.dropout)
    }
}

/// Pooled MLP trunk with four sigmoid regressors and a class head.
#[derive(Debug, Clone)]
pub struct Head {
    pub ln: LayerNorm,
    pub mlp: Mlp,
    pub reg: Linear,
    pub cls: Linear,
}

/// Head outputs: `[B, 4]` values in `(0, 1)` and `[B, M]` logits.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    pub regression: Var,
    pub logits: Var,
}

impl Head {
    pub fn new<T: Float>(store: &mut ParamStore<T>, prefix: &str, d: usize, classes: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Head {
            ln: LayerNorm::new(store, &format!("{prefix}.ln"), d)?,
            mlp: Mlp::new(store, &format!("{prefix}.mlp"), d, 2 * d, d, rng)?,
            reg: Linear::new(store, &format!("{prefix}.reg"), d, 4, true, rng)?,
            cls: Linear::new(store, &format!("{prefix}.cls"), d, classes, true, rng)?,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, s: Var) -> Result<HeadOutput> {
        if g.shape(s).len() != 3 {
            return Err(Error::shape("predict", g.shape(s), &[0, 0, self.reg.d_in]));
        }
        let pooled = g.mean_axis(s, 1)?;
        let h = self.ln.forward(g, pooled)?;
        let h = self.mlp.forward(g, h)?;
        let r = self.reg.forward(g, h)?;
        Ok(HeadOutput {
            regression: g.sigmoid(r),
            logits: self.cls.forward(g, h)?,
        })
    }
}
