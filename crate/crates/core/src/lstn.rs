//! Semantic transmission: linear semantic encoder, channel-context tokenizer,
//! channel pass in the graph, and a small decoder with LoRA adapters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{self, ChannelContext, Link};
use crate::error::{Error, Result};
use crate::numerics::{multi_head_attention, Float, Graph, LayerNorm, Linear, LoraLinear, ParamId, ParamStore, Tensor, Var};

pub const VOCAB: [&str; 21] = [
    "<pad>", "<bos>", "the", "snr", "is", "db", "and", "distance", "m", ".", "-", "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
];
pub const PAD: usize = 0;
pub const BOS: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Transformer,
    Recurrent,
}

impl std::str::FromStr for DecoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transformer" => Ok(DecoderKind::Transformer),
            "recurrent" => Ok(DecoderKind::Recurrent),
            _ => Err(Error::Config(format!("unknown decoder `{s}` (valid: transformer, recurrent)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LstnConfig {
    pub l_se: usize,
    pub d_se: usize,
    pub l_text: usize,
    pub d_sd: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    pub lora_rank: usize,
    /// Number of final decoder layers that carry adapters.
    pub lora_layers: usize,
    pub positional: bool,
    pub decoder: DecoderKind,
}

impl Default for LstnConfig {
    fn default() -> Self {
        LstnConfig {
            l_se: 8,
            d_se: 32,
            l_text: 24,
            d_sd: 64,
            layers: 2,
            heads: 4,
            ff: 128,
            lora_rank: 4,
            lora_layers: 1,
            positional: true,
            decoder: DecoderKind::Transformer,
        }
    }
}

impl LstnConfig {
    pub fn validate(&self, feature_len: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("lstn: {m}")));
        if self.l_se == 0 || self.d_se == 0 || self.d_sd == 0 || self.l_text == 0 {
            return bad("l_se, d_se, d_sd and l_text must be positive".into());
        }
        if self.code_len() >= feature_len {
            return bad(format!("code length {} does not compress the {feature_len}-value feature", self.code_len()));
        }
        if self.heads == 0 || self.d_sd % self.heads != 0 {
            return bad(format!("d_sd {} is not divisible by {} heads", self.d_sd, self.heads));
        }
        if self.lora_rank == 0 {
            return bad("lora_rank must be at least 1".into());
        }
        if self.lora_layers > self.layers {
            return bad(format!("lora_layers {} exceeds layers {}", self.lora_layers, self.layers));
        }
        if self.layers == 0 || self.ff == 0 {
            return bad("layers and ff must be positive".into());
        }
        Ok(())
    }

    pub fn code_len(&self) -> usize {
        self.l_se * self.d_se
    }

    pub fn l_fusion(&self) -> usize {
        self.l_se + self.l_text
    }
}

fn token_id(tok: &str) -> Result<usize> {
    VOCAB
        .iter()
        .position(|v| *v == tok)
        .ok_or_else(|| Error::Domain(format!("token `{tok}` is not in the vocabulary")))
}

/// Word/character hybrid split: vocabulary words whole, numbers as digit and point tokens.
pub fn tokenize(text: &str, l_text: usize) -> Result<(Vec<usize>, Vec<bool>)> {
    let mut ids = Vec::new();
    if !text.trim().is_empty() {
        ids.push(BOS);
        for word in text.split_whitespace() {
            if VOCAB[2..9].contains(&word) {
                ids.push(token_id(word)?);
            } else {
                for ch in word.chars() {
                    ids.push(token_id(ch.encode_utf8(&mut [0; 4]))?);
                }
            }
        }
    }
    if ids.len() > l_text {
        return Err(Error::Domain(format!("context needs {} tokens, limit is {l_text}", ids.len())));
    }
    let mask: Vec<bool> = (0..l_text).map(|i| i < ids.len()).collect();
    ids.resize(l_text, PAD);
    Ok((ids, mask))
}

pub fn detokenize(ids: &[usize]) -> Result<String> {
    let mut words: Vec<String> = Vec::new();
    let mut in_number = false;
    for &id in ids {
        let tok = *VOCAB.get(id).ok_or_else(|| Error::Domain(format!("token id {id} is not in the vocabulary")))?;
        match id {
            PAD | BOS => in_number = false,
            9.. => {
                if in_number {
                    words.last_mut().expect("number started").push_str(tok);
                } else {
                    words.push(tok.to_string());
                    in_number = true;
                }
            }
            _ => {
                words.push(tok.to_string());
                in_number = false;
            }
        }
    }
    Ok(words.join(" "))
}

/// Additive channel perturbation for every sample of a `[B, ...]` code, in code units.
pub fn channel_noise<T: Float>(code: &Tensor<T>, links: &[Link], rng: &mut impl Rng) -> Result<Tensor<T>> {
    let b = code.shape()[0];
    if links.len() != b {
        return Err(Error::shape("channel_noise", code.shape(), &[links.len()]));
    }
    let per = code.numel() / b.max(1);
    let mut out = Vec::with_capacity(code.numel());
    for (s, link) in links.iter().enumerate() {
        let mut e: Vec<f64> = code.data()[s * per..(s + 1) * per].iter().map(|v| v.to_f64_lossy()).collect();
        if per % 2 == 1 {
            e.push(0.0);
        }
        let n = channel::code_noise(&e, *link, rng)?;
        out.extend(n[..per].iter().map(|&v| T::from_f64_lossy(v)));
    }
    Tensor::new(code.shape().to_vec(), out)
}

/// Linear map from the flattened fused feature to `[B, L_se, d_se]`.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub lin: Linear,
    l_se: usize,
    d_se: usize,
}

impl Encoder {
    pub fn new<T: Float>(store: &mut ParamStore<T>, d_in: usize, cfg: &LstnConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(Encoder {
            lin: Linear::new(store, "lstn.encoder", d_in, cfg.code_len(), true, rng)?,
            l_se: cfg.l_se,
            d_se: cfg.d_se,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, s: Var) -> Result<Var> {
        let shape = g.shape(s).to_vec();
        let b = shape[0];
        let n: usize = shape[1..].iter().product();
        if n != self.lin.d_in {
            return Err(Error::shape("encode", &shape, &[b, self.lin.d_in]));
        }
        let flat = g.reshape(s, &[b, n])?;
        let e = self.lin.forward(g, flat)?;
        g.reshape(e, &[b, self.l_se, self.d_se])
    }
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    ln1: LayerNorm,
    q: LoraLinear,
    k: LoraLinear,
    v: LoraLinear,
    o: LoraLinear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
struct Gru {
    wx: Linear,
    wh: Linear,
    d: usize,
}

#[derive(Debug, Clone)]
enum Body {
    Transformer { layers: Vec<DecoderLayer>, pos: Option<ParamId> },
    Recurrent(Gru),
}

/// Tokenized contexts for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TextBatch {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub l_text: usize,
}

impl TextBatch {
    pub fn new(contexts: &[&ChannelContext], l_text: usize) -> Result<Self> {
        let mut ids = Vec::with_capacity(contexts.len() * l_text);
        let mut mask = Vec::with_capacity(contexts.len() * l_text);
        for c in contexts {
            let (i, m) = tokenize(&c.text, l_text)?;
            ids.extend(i);
            mask.extend(m);
        }
        Ok(TextBatch {
            ids,
            mask,
            batch: contexts.len(),
            l_text,
        })
    }

    pub fn from_texts(texts: &[&str], l_text: usize) -> Result<Self> {
        let mut ids = Vec::new();
        let mut mask = Vec::new();
        for t in texts {
            let (i, m) = tokenize(t, l_text)?;
            ids.extend(i);
            mask.extend(m);
        }
        Ok(TextBatch {
            ids,
            mask,
            batch: texts.len(),
            l_text,
        })
    }
}

/// Decoder over `[proj(ê); embed(text)]` with key-padding mask `[1…1, M_text]`.
#[derive(Debug, Clone)]
pub struct Decoder {
    proj: Linear,
    embed: ParamId,
    body: Body,
    final_ln: LayerNorm,
    cfg: LstnConfig,
    lora: Vec<LoraLinear>,
}

impl Decoder {
    pub fn new<T: Float>(store: &mut ParamStore<T>, cfg: &LstnConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.d_sd;
        let proj = Linear::new(store, "lstn.decoder.proj", cfg.d_se, d, true, rng)?;
        let embed = store.add_normal("lstn.decoder.embed", &[VOCAB.len(), d], 0.02f64.max(1.0 / (d as f64).sqrt()), rng)?;
        let mut lora = Vec::new();
        let body = match cfg.decoder {
            DecoderKind::Transformer => {
                let pos = if cfg.positional {
                    Some(store.add_normal("lstn.decoder.pos", &[cfg.l_fusion(), d], 0.02, rng)?)
                } else {
                    None
                };
                let mut layers = Vec::new();
                for l in 0..cfg.layers {
                    let p = format!("lstn.decoder.layer{l}");
                    let adapted = l + cfg.lora_layers >= cfg.layers;
                    let mut projs = Vec::with_capacity(4);
                    for n in ["q", "k", "v", "o"] {
                        let lp = format!("lstn.lora.layer{l}.{n}");
                        let name = format!("{p}.w_{n}");
                        projs.push(LoraLinear::new(store, &name, adapted.then_some(lp.as_str()), d, d, true, cfg.lora_rank, rng)?);
                    }
                    let [q, k, v, o]: [LoraLinear; 4] = projs.try_into().expect("four projections");
                    if adapted {
                        lora.extend([q.clone(), k.clone(), v.clone(), o.clone()]);
                    }
                    layers.push(DecoderLayer {
                        ln1: LayerNorm::new(store, &format!("{p}.ln1"), d)?,
                        q,
                        k,
                        v,
                        o,
                        ln2: LayerNorm::new(store, &format!("{p}.ln2"), d)?,
                        fc1: Linear::new(store, &format!("{p}.fc1"), d, cfg.ff, true, rng)?,
                        fc2: Linear::new(store, &format!("{p}.fc2"), cfg.ff, d, true, rng)?,
                    });
                }
                Body::Transformer { layers, pos }
            }
            DecoderKind::Recurrent => Body::Recurrent(Gru {
                wx: Linear::new(store, "lstn.decoder.gru.wx", d, 3 * d, true, rng)?,
                wh: Linear::new(store, "lstn.decoder.gru.wh", d, 3 * d, true, rng)?,
                d,
            }),
        };
        Ok(Decoder {
            proj,
            embed,
            body,
            final_ln: LayerNorm::new(store, "lstn.decoder.ln", d)?,
            cfg: cfg.clone(),
            lora,
        })
    }

    /// Adapted projections of the final layers.
    pub fn lora_layers(&self) -> &[LoraLinear] {
        &self.lora
    }

    /// Folds every adapter into its base weight and zeroes `A`.
    pub fn merge_lora<T: Float>(&self, store: &mut ParamStore<T>) -> Result<()> {
        self.lora.iter().try_for_each(|l| l.merge(store))
    }

    /// `code: [B, L_se, d_se]` to `[B, L_se + L_text, d_sd]`.
    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, code: Var, text: &TextBatch) -> Result<Var> {
        let s = g.shape(code).to_vec();
        let (b, d) = (s[0], self.cfg.d_sd);
        if s.len() != 3 || s[1] != self.cfg.l_se || s[2] != self.cfg.d_se {
            return Err(Error::shape("decode", &s, &[b, self.cfg.l_se, self.cfg.d_se]));
        }
        if text.batch != b || text.l_text != self.cfg.l_text || text.ids.len() != b * text.l_text {
            return Err(Error::shape("decode text", &[b, self.cfg.l_text], &[text.batch, text.l_text]));
        }
        let l = self.cfg.l_fusion();
        let feat = self.proj.forward(g, code)?;
        let table = g.param(self.embed);
        let words = g.embedding(table, &text.ids, &[b, text.l_text])?;
        let mut x = g.concat(&[feat, words], 1)?;
        let mut mask = Vec::with_capacity(b * l);
        for bi in 0..b {
            mask.extend(std::iter::repeat_n(true, self.cfg.l_se));
            mask.extend_from_slice(&text.mask[bi * text.l_text..(bi + 1) * text.l_text]);
        }
        match &self.body {
            Body::Transformer { layers, pos } => {
                if let Some(p) = pos {
                    let p = g.param(*p);
                    let p = g.reshape(p, &[l * d])?;
                    let flat = g.reshape(x, &[b, l * d])?;
                    let flat = g.add_bias(flat, p)?;
                    x = g.reshape(flat, &[b, l, d])?;
                }
                for layer in layers {
                    let h = layer.ln1.forward(g, x)?;
                    let q = layer.q.forward(g, h)?;
                    let k = layer.k.forward(g, h)?;
                    let v = layer.v.forward(g, h)?;
                    let a = multi_head_attention(g, q, k, v, self.cfg.heads, Some(&mask))?;
                    let a = layer.o.forward(g, a)?;
                    x = g.add(x, a)?;
                    let h = layer.ln2.forward(g, x)?;
                    let h = layer.fc1.forward(g, h)?;
                    let h = g.gelu(h);
                    let h = layer.fc2.forward(g, h)?;
                    x = g.add(x, h)?;
                }
            }
            Body::Recurrent(gru) => x = gru.forward(g, x, &mask)?,
        }
        self.final_ln.forward(g, x)
    }
}

impl Gru {
    /// Runs over the sequence; padded steps carry the previous state.
    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var, mask: &[bool]) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, l, d) = (s[0], s[1], self.d);
        let gx = self.wx.forward(g, x)?;
        let mut h = g.input(Tensor::zeros(&[b, d]));
        let mut outs = Vec::with_capacity(l);
        for t in 0..l {
            let xt = g.select(gx, 1, t)?;
            let ht = self.wh.forward(g, h)?;
            let xr = split3(g, xt, d)?;
            let hr = split3(g, ht, d)?;
            let rz = g.add(xr.0, hr.0)?;
            let r = g.sigmoid(rz);
            let zz = g.add(xr.1, hr.1)?;
            let z = g.sigmoid(zz);
            let rn = g.mul(r, hr.2)?;
            let nn = g.add(xr.2, rn)?;
            let n = g.tanh(nn);
            // h' = n + z (h − n)
            let diff = g.sub(h, n)?;
            let zd = g.mul(z, diff)?;
            let cand = g.add(n, zd)?;
            let keep: Vec<T> = (0..b).flat_map(|bi| std::iter::repeat_n(if mask[bi * l + t] { T::one() } else { T::zero() }, d)).collect();
            let step = g.sub(cand, h)?;
            let step = g.mul_mask(step, keep)?;
            h = g.add(h, step)?;
            outs.push(g.reshape(h, &[b, 1, d])?);
        }
        g.concat(&outs, 1)
    }
}

fn split3<T: Float>(g: &mut Graph<'_, T>, x: Var, d: usize) -> Result<(Var, Var, Var)> {
    let b = g.shape(x)[0];
    let r = g.reshape(x, &[b, 3, d])?;
    Ok((g.select(r, 1, 0)?, g.select(r, 1, 1)?, g.select(r, 1, 2)?))
}

/// Encoder and decoder of one device.
#[derive(Debug, Clone)]
pub struct Lstn {
    pub cfg: LstnConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Lstn {
    pub fn new<T: Float>(store: &mut ParamStore<T>, cfg: &LstnConfig, feature_len: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate(feature_len)?;
        Ok(Lstn {
            cfg: cfg.clone(),
            encoder: Encoder::new(store, feature_len, cfg, rng)?,
            decoder: Decoder::new(store, cfg, rng)?,
        })
    }

    /// Adds the channel perturbation as a constant: gradients pass straight through.
    pub fn transmit<T: Float>(g: &mut Graph<'_, T>, code: Var, links: &[Link], rng: &mut impl Rng) -> Result<Var> {
        if links.iter().all(|l| *l == Link::Lossless) {
            return Ok(code);
        }
        let noise = channel_noise(g.value(code), links, rng)?;
        g.add_const(code, noise)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_context_has_seventeen_tokens() {
        let text = "the snr is 5.0 db and the distance is 50.0 m";
        let (ids, mask) = tokenize(text, 24).unwrap();
        assert_eq!(mask.iter().filter(|m| **m).count(), 17);
        assert_eq!(ids.iter().filter(|&&i| i != PAD).count(), 17);
        assert_eq!(detokenize(&ids).unwrap(), text);
    }

    #[test]
    fn empty_text_is_all_pad() {
        let (ids, mask) = tokenize("", 24).unwrap();
        assert!(ids.iter().all(|&i| i == PAD));
        assert!(mask.iter().all(|m| !m));
    }

    #[test]
    fn unknown_word_is_named() {
        let err = tokenize("the snr is high", 24).unwrap_err();
        assert!(err.to_string().contains("`h`"), "{err}");
        let err = tokenize("the noise", 24).unwrap_err();
        assert!(err.to_string().contains("`n`"), "{err}");
    }

    #[test]
    fn negative_numbers_round_trip() {
        let text = "the snr is -3.5 db and the distance is 0.0 m";
        let (ids, _) = tokenize(text, 24).unwrap();
        assert_eq!(detokenize(&ids).unwrap(), text);
    }
}
