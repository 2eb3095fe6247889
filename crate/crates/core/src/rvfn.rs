//! RF–vision fusion: complex-valued convolutional RF extractor, ConvNeXt-shaped
//! vision extractor and bidirectional cross-attention fusion.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Record;
use crate::error::{Error, Result};
use crate::numerics::kernels::max_pool_indices;
use crate::numerics::{cast, multi_head_attention, Float, Graph, LayerNorm, Linear, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rf,
    Cv,
    Mm,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Rf => "rf",
            Modality::Cv => "cv",
            Modality::Mm => "mm",
        }
    }

    pub fn uses_rf(self) -> bool {
        matches!(self, Modality::Rf | Modality::Mm)
    }

    pub fn uses_cv(self) -> bool {
        matches!(self, Modality::Cv | Modality::Mm)
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rf" => Ok(Modality::Rf),
            "cv" => Ok(Modality::Cv),
            "mm" => Ok(Modality::Mm),
            _ => Err(Error::Config(format!("unknown modality `{s}` (valid: rf, cv, mm)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RvfnConfig {
    pub l_sf: usize,
    pub d_sf: usize,
    pub rf_widths: [usize; 3],
    pub rf_kernel: usize,
    pub cv_widths: [usize; 4],
    pub cv_depths: [usize; 4],
    pub heads: usize,
    pub drop_path: f64,
    /// Fixed residual-branch scale of every vision block.
    pub layer_scale: f64,
    /// Magnitude mapped to zero by the echo compander.
    pub echo_ref: f64,
    /// Decades above `echo_ref` mapped to one.
    pub echo_decades: f64,
    pub antennas: usize,
    pub samples: usize,
    pub image_size: usize,
}

impl Default for RvfnConfig {
    fn default() -> Self {
        RvfnConfig {
            l_sf: 16,
            d_sf: 64,
            rf_widths: [16, 32, 64],
            rf_kernel: 3,
            cv_widths: [32, 64, 128, 128],
            cv_depths: [1, 1, 2, 1],
            heads: 4,
            drop_path: 0.05,
            layer_scale: 1.0,
            echo_ref: 1e-9,
            echo_decades: 6.0,
            antennas: 16,
            samples: 60,
            image_size: 64,
        }
    }
}

impl RvfnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("rvfn: {m}")));
        if self.heads == 0 || self.d_sf % self.heads != 0 {
            return bad(format!("d_sf {} is not divisible by {} heads", self.d_sf, self.heads));
        }
        if self.rf_final_len() == 0 {
            return bad(format!("echo length {} is too short for three pooling stages", self.samples));
        }
        if self.rf_kernel % 2 == 0 {
            return bad("rf_kernel must be odd".into());
        }
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return bad(format!("image size {} is not divisible by 32", self.image_size));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return bad("drop_path must lie in [0, 1)".into());
        }
        if self.l_sf == 0 || self.d_sf == 0 || self.antennas == 0 {
            return bad("l_sf, d_sf and antennas must be positive".into());
        }
        Ok(())
    }

    fn rf_final_len(&self) -> usize {
        self.samples / 8
    }

    pub fn feature_len(&self) -> usize {
        self.l_sf * self.d_sf
    }
}

/// Log-compands echo magnitude into roughly `[0, 1]` while keeping phase.
pub fn compand(re: f64, im: f64, echo_ref: f64, decades: f64) -> (f64, f64) {
    let m = (re * re + im * im).sqrt();
    if m == 0.0 {
        return (0.0, 0.0);
    }
    let c = (1.0 + m / echo_ref).log10() / decades;
    (re / m * c, im / m * c)
}

/// Stacked complex echo batch `[B, 2A, 1, M]`: real antennas first, then imaginary.
pub fn echo_input<T: Float>(records: &[&Record], cfg: &RvfnConfig) -> Result<Tensor<T>> {
    let (a, m) = (cfg.antennas, cfg.samples);
    let mut data = vec![T::zero(); records.len() * 2 * a * m];
    for (b, r) in records.iter().enumerate() {
        if r.echo.len() != a * m * 2 {
            return Err(Error::shape("echo_input", &[a, m, 2], &[r.echo.len()]));
        }
        let base = b * 2 * a * m;
        for i in 0..a * m {
            let (re, im) = compand(r.echo[2 * i] as f64, r.echo[2 * i + 1] as f64, cfg.echo_ref, cfg.echo_decades);
            data[base + i] = cast(re);
            data[base + a * m + i] = cast(im);
        }
    }
    Tensor::new(vec![records.len(), 2 * a, 1, m], data)
}

/// Normalised image batch `[B, 3, H, W]`: `(x / 255 − 0.5) / 0.25`.
pub fn image_input<T: Float>(records: &[&Record], cfg: &RvfnConfig) -> Result<Tensor<T>> {
    let s = cfg.image_size;
    let mut data = vec![T::zero(); records.len() * 3 * s * s];
    for (b, r) in records.iter().enumerate() {
        if r.image.len() != s * s * 3 {
            return Err(Error::shape("image_input", &[s, s, 3], &[r.image.len()]));
        }
        for p in 0..s * s {
            for c in 0..3 {
                let v = (r.image[p * 3 + c] as f64 / 255.0 - 0.5) / 0.25;
                data[(b * 3 + c) * s * s + p] = cast(v);
            }
        }
    }
    Tensor::new(vec![records.len(), 3, s, s], data)
}

/// Complex convolution over the stacked layout `[B, 2C, H, W]`:
/// `z_re = W_re∗x_re − W_im∗x_im`, `z_im = W_re∗x_im + W_im∗x_re`.
pub fn complex_conv<T: Float>(
    g: &mut Graph<'_, T>,
    x: Var,
    w_re: Var,
    w_im: Var,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Var> {
    let neg_im = g.scale(w_im, -1.0);
    let top = g.concat(&[w_re, neg_im], 1)?;
    let bottom = g.concat(&[w_im, w_re], 1)?;
    let w = g.concat(&[top, bottom], 0)?;
    g.conv2d(x, w, None, stride, padding)
}

/// Max-pool on the stacked complex layout, choosing by modulus.
pub fn complex_max_pool<T: Float>(g: &mut Graph<'_, T>, x: Var, kernel: (usize, usize)) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[1] % 2 != 0 || s[2] < kernel.0 || s[3] < kernel.1 {
        return Err(Error::shape("complex_max_pool", &s, &[kernel.0, kernel.1]));
    }
    let (b, c2, h, w) = (s[0], s[1], s[2], s[3]);
    let c = c2 / 2;
    let xv = g.value(x).data();
    let plane = h * w;
    // index i over [B, C, H, W] for the real part; imaginary part sits C planes later
    let re_of = |i: usize| {
        let (bi, rest) = (i / (c * plane), i % (c * plane));
        bi * c2 * plane + rest
    };
    let modsq = |i: usize| {
        let r = re_of(i);
        let (a, bb) = (xv[r], xv[r + c * plane]);
        a * a + bb * bb
    };
    let (idx, [_, _, ho, wo]) = max_pool_indices(modsq, [b, c, h, w], kernel, kernel);
    let mut full = Vec::with_capacity(b * c2 * ho * wo);
    let per = c * ho * wo;
    for bi in 0..b {
        let chunk = &idx[bi * per..(bi + 1) * per];
        full.extend(chunk.iter().map(|&i| re_of(i)));
        full.extend(chunk.iter().map(|&i| re_of(i) + c * plane));
    }
    g.gather(x, full, &[b, c2, ho, wo])
}

#[derive(Debug, Clone)]
struct ComplexConv {
    w_re: ParamId,
    w_im: ParamId,
}

#[derive(Debug, Clone)]
pub struct RfBranch {
    convs: Vec<ComplexConv>,
    proj: Linear,
    kernel: usize,
}

impl RfBranch {
    fn new<T: Float>(store: &mut ParamStore<T>, cfg: &RvfnConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut convs = Vec::new();
        let mut c_in = cfg.antennas;
        for (i, &c_out) in cfg.rf_widths.iter().enumerate() {
            let std = (1.0 / (2.0 * c_in as f64 * cfg.rf_kernel as f64)).sqrt();
            let shape = [c_out, c_in, 1, cfg.rf_kernel];
            convs.push(ComplexConv {
                w_re: store.add_normal(format!("rvfn.rf.conv{}.w_real", i + 1), &shape, std, rng)?,
                w_im: store.add_normal(format!("rvfn.rf.conv{}.w_imag", i + 1), &shape, std, rng)?,
            });
            c_in = c_out;
        }
        let flat = 2 * c_in * cfg.rf_final_len();
        let proj = Linear::new(store, "rvfn.rf.proj", flat, cfg.feature_len(), true, rng)?;
        Ok(RfBranch {
            convs,
            proj,
            kernel: cfg.rf_kernel,
        })
    }

    /// `[B, 2A, 1, M]` stacked echo to `[B, L_sf, d_sf]`.
    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, echo: Var, cfg: &RvfnConfig) -> Result<Var> {
        let b = g.shape(echo)[0];
        let mut x = echo;
        for c in &self.convs {
            let (wr, wi) = (g.param(c.w_re), g.param(c.w_im));
            x = complex_conv(g, x, wr, wi, (1, 1), (0, self.kernel / 2))?;
            x = g.relu(x);
            x = complex_max_pool(g, x, (1, 2))?;
        }
        let n = g.value(x).numel() / b;
        let flat = g.reshape(x, &[b, n])?;
        let y = self.proj.forward(g, flat)?;
        g.reshape(y, &[b, cfg.l_sf, cfg.d_sf])
    }
}

#[derive(Debug, Clone)]
struct Block {
    dw_w: ParamId,
    dw_b: ParamId,
    ln: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Layer norm then a 2×2 stride-2 patch merge, as a linear map over each patch.
#[derive(Debug, Clone)]
struct Downsample {
    ln: LayerNorm,
    lin: Linear,
}

/// ConvNeXt-shaped backbone, run channels-last after the stem.
#[derive(Debug, Clone)]
pub struct CvBranch {
    stem_w: ParamId,
    stem_b: ParamId,
    stem_ln: LayerNorm,
    stages: Vec<Vec<Block>>,
    downs: Vec<Downsample>,
    proj: Linear,
    layer_scale: f64,
    drop_path: f64,
}

impl CvBranch {
    fn new<T: Float>(store: &mut ParamStore<T>, cfg: &RvfnConfig, rng: &mut impl Rng) -> Result<Self> {
        let w = cfg.cv_widths;
        let stem_w = store.add_normal("rvfn.cv.stem.w", &[w[0], 3, 4, 4], (1.0 / 48.0f64).sqrt(), rng)?;
        let stem_b = store.add("rvfn.cv.stem.b", Tensor::zeros(&[w[0]]))?;
        let stem_ln = LayerNorm::new(store, "rvfn.cv.stem.ln", w[0])?;
        let mut stages = Vec::new();
        let mut downs = Vec::new();
        for (s, (&c, &depth)) in w.iter().zip(&cfg.cv_depths).enumerate() {
            let mut blocks = Vec::new();
            for d in 0..depth {
                let p = format!("rvfn.cv.stage{}.block{}", s + 1, d + 1);
                blocks.push(Block {
                    dw_w: store.add_normal(format!("{p}.dw.w"), &[7, 7, c], 1.0 / 7.0, rng)?,
                    dw_b: store.add(format!("{p}.dw.b"), Tensor::zeros(&[c]))?,
                    ln: LayerNorm::new(store, &format!("{p}.ln"), c)?,
                    fc1: Linear::new(store, &format!("{p}.fc1"), c, 4 * c, true, rng)?,
                    fc2: Linear::new(store, &format!("{p}.fc2"), 4 * c, c, true, rng)?,
                });
            }
            stages.push(blocks);
            if s + 1 < w.len() {
                let p = format!("rvfn.cv.down{}", s + 1);
                downs.push(Downsample {
                    ln: LayerNorm::new(store, &format!("{p}.ln"), c)?,
                    lin: Linear::new(store, &p, 4 * c, w[s + 1], true, rng)?,
                });
            }
        }
        let side = cfg.image_size / 32;
        let proj = Linear::new(store, "rvfn.cv.proj", w[3] * side * side, cfg.feature_len(), true, rng)?;
        Ok(CvBranch {
            stem_w,
            stem_b,
            stem_ln,
            stages,
            downs,
            proj,
            layer_scale: cfg.layer_scale,
            drop_path: cfg.drop_path,
        })
    }

    /// `z + DropPath(γ · MLP(LN(DWConv(z))))` on a channels-last map.
    fn block<T: Float>(&self, g: &mut Graph<'_, T>, blk: &Block, z: Var) -> Result<Var> {
        let (w, b) = (g.param(blk.dw_w), g.param(blk.dw_b));
        let h = g.depthwise_conv2d_nhwc(z, w, Some(b), (1, 1), (3, 3))?;
        let h = blk.ln.forward(g, h)?;
        let h = blk.fc1.forward(g, h)?;
        let h = g.gelu(h);
        let h = blk.fc2.forward(g, h)?;
        let h = if self.layer_scale == 1.0 { h } else { g.scale(h, self.layer_scale) };
        let h = g.drop_path(h, self.drop_path)?;
        g.add(z, h)
    }

    fn downsample<T: Float>(&self, g: &mut Graph<'_, T>, d: &Downsample, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let x = d.ln.forward(g, x)?;
        let x = g.reshape(x, &[b, h / 2, 2, w / 2, 2, c])?;
        let x = g.permute(x, &[0, 1, 3, 2, 4, 5])?;
        let x = g.reshape(x, &[b, h / 2, w / 2, 4 * c])?;
        d.lin.forward(g, x)
    }

    /// `[B, 3, H, W]` normalised image to `[B, L_sf, d_sf]`.
    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, image: Var, cfg: &RvfnConfig) -> Result<Var> {
        let b = g.shape(image)[0];
        let (sw, sb) = (g.param(self.stem_w), g.param(self.stem_b));
        let x = g.conv2d(image, sw, Some(sb), (4, 4), (0, 0))?;
        let x = g.permute(x, &[0, 2, 3, 1])?;
        let mut x = self.stem_ln.forward(g, x)?;
        for (s, blocks) in self.stages.iter().enumerate() {
            for blk in blocks {
                x = self.block(g, blk, x)?;
            }
            if let Some(d) = self.downs.get(s) {
                x = self.downsample(g, d, x)?;
            }
        }
        let n = g.value(x).numel() / b;
        let flat = g.reshape(x, &[b, n])?;
        let y = self.proj.forward(g, flat)?;
        g.reshape(y, &[b, cfg.l_sf, cfg.d_sf])
    }
}

/// Bidirectional cross-attention with residual sum.
#[derive(Debug, Clone)]
pub struct Fusion {
    pub q1: Linear,
    pub k1: Linear,
    pub v1: Linear,
    pub q2: Linear,
    pub k2: Linear,
    pub v2: Linear,
    pub ln: LayerNorm,
    pub heads: usize,
}

impl Fusion {
    pub fn new<T: Float>(store: &mut ParamStore<T>, prefix: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut lin = |n: &str| Linear::new(store, &format!("{prefix}.{n}"), d, d, false, rng);
        let (q1, k1, v1, q2, k2, v2) = (lin("w_q1")?, lin("w_k1")?, lin("w_v1")?, lin("w_q2")?, lin("w_k2")?, lin("w_v2")?);
        Ok(Fusion {
            q1,
            k1,
            v1,
            q2,
            k2,
            v2,
            ln: LayerNorm::new(store, &format!("{prefix}.ln"), d)?,
            heads,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, s_rf: Var, s_cv: Var) -> Result<Var> {
        if g.shape(s_rf) != g.shape(s_cv) {
            return Err(Error::shape("fuse", g.shape(s_rf), g.shape(s_cv)));
        }
        let q1 = self.q1.forward(g, s_rf)?;
        let k2 = self.k2.forward(g, s_cv)?;
        let v2 = self.v2.forward(g, s_cv)?;
        let z_cv = multi_head_attention(g, q1, k2, v2, self.heads, None)?;
        let q2 = self.q2.forward(g, s_cv)?;
        let k1 = self.k1.forward(g, s_rf)?;
        let v1 = self.v1.forward(g, s_rf)?;
        let z_rf = multi_head_attention(g, q2, k1, v1, self.heads, None)?;
        let z = g.add(z_cv, z_rf)?;
        let z = self.ln.forward(g, z)?;
        let r = g.add(z, s_rf)?;
        g.add(r, s_cv)
    }
}

/// Inputs of one batch; the branch that a modality does not use may be `None`.
#[derive(Debug, Clone)]
pub struct RvfnInput<T> {
    pub echo: Option<Tensor<T>>,
    pub image: Option<Tensor<T>>,
}

impl<T: Float> RvfnInput<T> {
    pub fn from_records(records: &[&Record], cfg: &RvfnConfig, modality: Modality) -> Result<Self> {
        Ok(RvfnInput {
            echo: if modality.uses_rf() { Some(echo_input(records, cfg)?) } else { None },
            image: if modality.uses_cv() { Some(image_input(records, cfg)?) } else { None },
        })
    }
}

/// Per-device feature extractor; single-modality variants skip the other branch and fusion.
#[derive(Debug, Clone)]
pub struct Rvfn {
    pub cfg: RvfnConfig,
    pub modality: Modality,
    pub rf: Option<RfBranch>,
    pub cv: Option<CvBranch>,
    pub fuse: Option<Fusion>,
}

impl Rvfn {
    pub fn new<T: Float>(store: &mut ParamStore<T>, cfg: &RvfnConfig, modality: Modality, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let rf = if modality.uses_rf() { Some(RfBranch::new(store, cfg, rng)?) } else { None };
        let cv = if modality.uses_cv() { Some(CvBranch::new(store, cfg, rng)?) } else { None };
        let fuse = if modality == Modality::Mm {
            Some(Fusion::new(store, "rvfn.fuse", cfg.d_sf, cfg.heads, rng)?)
        } else {
            None
        };
        Ok(Rvfn {
            cfg: cfg.clone(),
            modality,
            rf,
            cv,
            fuse,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, input: &RvfnInput<T>) -> Result<Var> {
        let missing = |what: &str| Error::Config(format!("{} model needs {what} input", self.modality.name()));
        let s_rf = match &self.rf {
            Some(rf) => {
                let e = g.input(input.echo.clone().ok_or_else(|| missing("echo"))?);
                Some(rf.forward(g, e, &self.cfg)?)
            }
            None => None,
        };
        let s_cv = match &self.cv {
            Some(cv) => {
                let i = g.input(input.image.clone().ok_or_else(|| missing("image"))?);
                Some(cv.forward(g, i, &self.cfg)?)
            }
            None => None,
        };
        match (s_rf, s_cv, &self.fuse) {
            (Some(r), Some(c), Some(f)) => f.forward(g, r, c),
            (Some(r), None, _) => Ok(r),
            (None, Some(c), _) => Ok(c),
            _ => Err(Error::Config("rvfn has no active branch".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compand_keeps_phase_and_orders_magnitude() {
        let (a, b) = compand(3e-6, 4e-6, 1e-9, 6.0);
        assert!((a / b - 0.75).abs() < 1e-12);
        let (c, _) = compand(3e-7, 0.0, 1e-9, 6.0);
        assert!(c < a.hypot(b));
        assert_eq!(compand(0.0, 0.0, 1e-9, 6.0), (0.0, 0.0));
    }

    #[test]
    fn config_rejects_bad_shapes() {
        let mut c = RvfnConfig::default();
        c.image_size = 48;
        assert!(c.validate().is_err());
        let mut c = RvfnConfig::default();
        c.samples = 7;
        assert!(c.validate().is_err());
        let mut c = RvfnConfig::default();
        c.heads = 3;
        assert!(c.validate().is_err());
    }
}
