//! The noise-prediction network: dilated-causal temporal blocks with a
//! noise-level embedding, a masked relational transformer over stock tokens,
//! a second temporal stage, and a linear output head.

use std::collections::BTreeMap;

use crate::relations::HeadMaskSet;
use crate::tensor::{Rng, Tensor, TensorError};

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone)]
pub struct DenoiserConfig {
    pub n_stocks: usize,
    pub n_indicators: usize,
    /// History length L; the modelled window is L + horizon steps.
    pub window: usize,
    pub horizon: usize,
    /// Hidden channel width d of the temporal stages.
    pub d_model: usize,
    pub n_masked_heads: usize,
    pub n_unmasked_heads: usize,
    pub n_encoder_layers: usize,
    pub conv_kernel: usize,
    pub dilations: Vec<usize>,
    pub ff_dim: usize,
    /// Diffusion step count K (embedding input range).
    pub k_steps: usize,
    /// Noise-embedding dimension D (even).
    pub emb_dim: usize,
    /// Noise-embedding base r.
    pub emb_base: f64,
    /// Per-head projection width; 0 derives flat_dim / total_heads.
    pub head_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            n_stocks: 8,
            n_indicators: 3,
            window: 16,
            horizon: 1,
            d_model: 16,
            n_masked_heads: 12,
            n_unmasked_heads: 4,
            n_encoder_layers: 2,
            conv_kernel: 3,
            dilations: vec![1, 2, 4, 8],
            ff_dim: 64,
            k_steps: 100,
            emb_dim: 32,
            emb_base: 1e4,
            head_dim: 0,
        }
    }
}

impl DenoiserConfig {
    pub fn target_len(&self) -> usize {
        self.window + self.horizon
    }

    /// Token width of the relational transformer: d * (L + horizon).
    pub fn flat_dim(&self) -> usize {
        self.d_model * self.target_len()
    }

    pub fn total_heads(&self) -> usize {
        self.n_masked_heads + self.n_unmasked_heads
    }

    pub fn effective_head_dim(&self) -> usize {
        if self.head_dim > 0 {
            self.head_dim
        } else {
            self.flat_dim() / self.total_heads()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| {
            Err(TensorError::Contract {
                op: "denoiser_config",
                reason,
            })
        };
        if self.n_stocks == 0 || self.n_indicators == 0 || self.window == 0 || self.horizon == 0 {
            return fail("n_stocks, n_indicators, window and horizon must all be >= 1".into());
        }
        if self.d_model == 0 || self.n_encoder_layers == 0 || self.ff_dim == 0 {
            return fail("d_model, n_encoder_layers and ff_dim must all be >= 1".into());
        }
        if self.n_masked_heads == 0 || self.n_masked_heads > 12 {
            return fail(format!(
                "n_masked_heads must lie in 1..=12, got {}",
                self.n_masked_heads
            ));
        }
        if self.emb_dim == 0 || self.emb_dim % 2 != 0 {
            return fail(format!("emb_dim must be even and positive, got {}", self.emb_dim));
        }
        if self.conv_kernel == 0 {
            return fail("conv_kernel must be >= 1".into());
        }
        if self.dilations.is_empty() {
            return fail("need at least one dilation".into());
        }
        for (i, d) in self.dilations.iter().enumerate() {
            if !d.is_power_of_two() {
                return fail(format!("dilation {d} is not a power of two"));
            }
            if i > 0 && self.dilations[i] <= self.dilations[i - 1] {
                return fail("dilations must be strictly increasing".into());
            }
        }
        if self.k_steps == 0 {
            return fail("k_steps must be >= 1".into());
        }
        if self.head_dim == 0 && self.flat_dim() % self.total_heads() != 0 {
            return fail(format!(
                "flat width {} is not divisible by {} heads; set head_dim explicitly",
                self.flat_dim(),
                self.total_heads()
            ));
        }
        Ok(())
    }
}

/// Transformer-style sinusoidal embedding of the noise level k.
pub fn noise_embedding(k: usize, d: usize, r: f64) -> Result<Vec<f64>> {
    if d == 0 || d % 2 != 0 {
        return Err(TensorError::Contract {
            op: "noise_embedding",
            reason: format!("embedding dimension must be even, got {d}"),
        });
    }
    let mut out = Vec::with_capacity(d);
    for s in 0..d / 2 {
        let freq = r.powf(2.0 * s as f64 / d as f64);
        let arg = k as f64 / freq;
        out.push(arg.cos());
        out.push(arg.sin());
    }
    Ok(out)
}

// ---- parameter containers ----

struct Conv {
    w: Tensor,
    b: Tensor,
}

impl Conv {
    fn new(prefix: &str, cout: usize, cin: usize, kernel: usize, rng: &mut Rng, out: &mut Params) -> Conv {
        let scale = 1.0 / ((cin * kernel) as f64).sqrt();
        let w = Tensor::param(
            vec![cout, cin, kernel],
            (0..cout * cin * kernel).map(|_| rng.normal() * scale).collect(),
        )
        .expect("finite init");
        let b = Tensor::param(vec![cout, 1], vec![0.0; cout]).expect("finite init");
        out.push(format!("{prefix}.w"), w.clone());
        out.push(format!("{prefix}.b"), b.clone());
        Conv { w, b }
    }

    fn forward(&self, x: &Tensor, dilation: usize) -> Result<Tensor> {
        x.conv1d_causal(&self.w, &self.b, dilation)
    }
}

struct Params(Vec<(String, Tensor)>);

impl Params {
    fn push(&mut self, name: String, t: Tensor) {
        self.0.push((name, t));
    }
}

fn linear(prefix: &str, rows: usize, cols: usize, rng: &mut Rng, out: &mut Params) -> (Tensor, Tensor) {
    let scale = 1.0 / (rows as f64).sqrt();
    let w = Tensor::param(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.normal() * scale).collect(),
    )
    .expect("finite init");
    let b = Tensor::param(vec![1, cols], vec![0.0; cols]).expect("finite init");
    out.push(format!("{prefix}.w"), w.clone());
    out.push(format!("{prefix}.b"), b.clone());
    (w, b)
}

struct TemporalBlock {
    in_conv: Conv,
    emb_w: Option<Tensor>,
    emb_b: Option<Tensor>,
    gates: Vec<(Conv, Conv)>,
    attn_w1: Tensor,
    attn_b1: Tensor,
    attn_w2: Tensor,
    attn_b2: Tensor,
    dilations: Vec<usize>,
}

impl TemporalBlock {
    fn new(
        prefix: &str,
        cin: usize,
        cfg: &DenoiserConfig,
        with_embedding: bool,
        rng: &mut Rng,
        out: &mut Params,
    ) -> TemporalBlock {
        let d = cfg.d_model;
        let in_conv = Conv::new(&format!("{prefix}.in_conv"), d, cin, cfg.conv_kernel, rng, out);
        let (emb_w, emb_b) = if with_embedding {
            let scale = 1.0 / (cfg.emb_dim as f64).sqrt();
            let w = Tensor::param(
                vec![d, cfg.emb_dim],
                (0..d * cfg.emb_dim).map(|_| rng.normal() * scale).collect(),
            )
            .expect("finite init");
            let b = Tensor::param(vec![d, 1], vec![0.0; d]).expect("finite init");
            out.push(format!("{prefix}.emb.w"), w.clone());
            out.push(format!("{prefix}.emb.b"), b.clone());
            (Some(w), Some(b))
        } else {
            (None, None)
        };
        let gates = cfg
            .dilations
            .iter()
            .enumerate()
            .map(|(i, _)| {
                let t = Conv::new(&format!("{prefix}.gate{i}.tanh"), d, d, cfg.conv_kernel, rng, out);
                let s = Conv::new(&format!("{prefix}.gate{i}.sig"), d, d, cfg.conv_kernel, rng, out);
                (t, s)
            })
            .collect();
        let dh = (d / 2).max(1);
        let mk = |r: usize, c: usize, rng: &mut Rng| -> Tensor {
            let scale = 1.0 / (c as f64).sqrt();
            Tensor::param(vec![r, c], (0..r * c).map(|_| rng.normal() * scale).collect())
                .expect("finite init")
        };
        let attn_w1 = mk(dh, d, rng);
        let attn_b1 = Tensor::param(vec![dh, 1], vec![0.0; dh]).expect("finite init");
        let attn_w2 = mk(d, dh, rng);
        let attn_b2 = Tensor::param(vec![d, 1], vec![0.0; d]).expect("finite init");
        out.push(format!("{prefix}.attn.w1"), attn_w1.clone());
        out.push(format!("{prefix}.attn.b1"), attn_b1.clone());
        out.push(format!("{prefix}.attn.w2"), attn_w2.clone());
        out.push(format!("{prefix}.attn.b2"), attn_b2.clone());
        TemporalBlock {
            in_conv,
            emb_w,
            emb_b,
            gates,
            attn_w1,
            attn_b1,
            attn_w2,
            attn_b2,
            dilations: cfg.dilations.clone(),
        }
    }

    /// (c_in, T) -> (d, T); causal throughout (the channel attention pools
    /// with a running mean, not a global one).
    fn forward(&self, x: &Tensor, k_emb: Option<&Tensor>) -> Result<Tensor> {
        let mut h = self.in_conv.forward(x, 1)?;
        if let (Some(w), Some(b), Some(emb)) = (&self.emb_w, &self.emb_b, k_emb) {
            let proj = w.matmul(emb)?.add(b)?;
            h = h.add_col(&proj)?;
        }
        for ((conv_t, conv_s), dil) in self.gates.iter().zip(self.dilations.iter()) {
            let z = conv_t
                .forward(&h, *dil)?
                .tanh()?
                .mul(&conv_s.forward(&h, *dil)?.sigmoid()?)?;
            h = h.add(&z)?;
        }
        let pooled = h.cummean_cols()?;
        let a1 = self.attn_w1.matmul(&pooled)?.add_col(&self.attn_b1)?.relu()?;
        let gate = self.attn_w2.matmul(&a1)?.add_col(&self.attn_b2)?.sigmoid()?;
        h.mul(&gate)
    }
}

struct AttentionHead {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
}

struct EncoderLayer {
    heads: Vec<AttentionHead>,
    w_o: Tensor,
    b_o: Tensor,
    ln1_g: Tensor,
    ln1_b: Tensor,
    ff_w1: Tensor,
    ff_b1: Tensor,
    ff_w2: Tensor,
    ff_b2: Tensor,
    ln2_g: Tensor,
    ln2_b: Tensor,
}

impl EncoderLayer {
    fn new(prefix: &str, cfg: &DenoiserConfig, rng: &mut Rng, out: &mut Params) -> EncoderLayer {
        let flat = cfg.flat_dim();
        let hd = cfg.effective_head_dim();
        let mk = |r: usize, c: usize, rng: &mut Rng| -> Tensor {
            let scale = 1.0 / (r as f64).sqrt();
            Tensor::param(vec![r, c], (0..r * c).map(|_| rng.normal() * scale).collect())
                .expect("finite init")
        };
        let heads = (0..cfg.total_heads())
            .map(|hi| {
                let head = AttentionHead {
                    wq: mk(flat, hd, rng),
                    wk: mk(flat, hd, rng),
                    wv: mk(flat, hd, rng),
                };
                out.push(format!("{prefix}.head{hi}.wq"), head.wq.clone());
                out.push(format!("{prefix}.head{hi}.wk"), head.wk.clone());
                out.push(format!("{prefix}.head{hi}.wv"), head.wv.clone());
                head
            })
            .collect();
        let (w_o, b_o) = linear(&format!("{prefix}.out"), cfg.total_heads() * hd, flat, rng, out);
        let ln1_g = Tensor::param(vec![1, flat], vec![1.0; flat]).expect("finite init");
        let ln1_b = Tensor::param(vec![1, flat], vec![0.0; flat]).expect("finite init");
        out.push(format!("{prefix}.ln1.g"), ln1_g.clone());
        out.push(format!("{prefix}.ln1.b"), ln1_b.clone());
        let (ff_w1, ff_b1) = linear(&format!("{prefix}.ff1"), flat, cfg.ff_dim, rng, out);
        let (ff_w2, ff_b2) = linear(&format!("{prefix}.ff2"), cfg.ff_dim, flat, rng, out);
        let ln2_g = Tensor::param(vec![1, flat], vec![1.0; flat]).expect("finite init");
        let ln2_b = Tensor::param(vec![1, flat], vec![0.0; flat]).expect("finite init");
        out.push(format!("{prefix}.ln2.g"), ln2_g.clone());
        out.push(format!("{prefix}.ln2.b"), ln2_b.clone());
        EncoderLayer {
            heads,
            w_o,
            b_o,
            ln1_g,
            ln1_b,
            ff_w1,
            ff_b1,
            ff_w2,
            ff_b2,
            ln2_g,
            ln2_b,
        }
    }
}

/// Masked scaled dot-product attention over stock tokens. With the identity
/// mask each token attends only to itself; with an all-ones mask this is
/// plain attention.
pub fn masked_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let dk = q.shape()[1] as f64;
    let scores = q.matmul(&k.transpose2()?)?.scale(1.0 / dk.sqrt())?;
    let weights = scores.masked_softmax_rows(mask)?;
    weights.matmul(v)
}

pub fn unmasked_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let dk = q.shape()[1] as f64;
    let scores = q.matmul(&k.transpose2()?)?.scale(1.0 / dk.sqrt())?;
    scores.softmax_rows()?.matmul(v)
}

pub struct DenoiserNet {
    pub cfg: DenoiserConfig,
    stage1: TemporalBlock,
    layers: Vec<EncoderLayer>,
    stage2: TemporalBlock,
    out_conv: Conv,
    params: Vec<(String, Tensor)>,
}

impl DenoiserNet {
    pub fn new(cfg: DenoiserConfig, rng: &mut Rng) -> Result<DenoiserNet> {
        cfg.validate()?;
        let mut out = Params(Vec::new());
        let stage1 = TemporalBlock::new("stage1", cfg.n_indicators, &cfg, true, rng, &mut out);
        let layers = (0..cfg.n_encoder_layers)
            .map(|li| EncoderLayer::new(&format!("mrt{li}"), &cfg, rng, &mut out))
            .collect();
        let stage2 = TemporalBlock::new("stage2", cfg.d_model, &cfg, false, rng, &mut out);
        let out_conv = Conv::new("out", cfg.n_indicators, cfg.d_model, 1, rng, &mut out);
        Ok(DenoiserNet {
            cfg,
            stage1,
            layers,
            stage2,
            out_conv,
            params: out.0,
        })
    }

    pub fn named_params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// Parameter counts keyed by top-level submodule.
    pub fn describe(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (name, t) in &self.params {
            let top = name.split('.').next().unwrap_or(name).to_string();
            *out.entry(top).or_insert(0) += t.len();
        }
        out
    }

    pub fn load_state(&self, entries: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        for (name, p) in &self.params {
            let found = entries.iter().find(|(n, _, _)| n == name).ok_or_else(|| {
                TensorError::Contract {
                    op: "load_state",
                    reason: format!("checkpoint is missing parameter {name}"),
                }
            })?;
            if found.1 != p.shape() {
                return Err(TensorError::Contract {
                    op: "load_state",
                    reason: format!(
                        "shape mismatch for {name}: checkpoint {:?} vs model {:?}",
                        found.1,
                        p.shape()
                    ),
                });
            }
            p.set_data(&found.2);
        }
        Ok(())
    }

    fn head_mask_tensor(&self, masks: &HeadMaskSet, head: usize) -> Result<Tensor> {
        let n = masks.n;
        if head < masks.masks.len() {
            Tensor::from_vec(vec![n, n], masks.masks[head].clone())
        } else {
            // surplus masked heads reuse the union of all relation masks
            let nn = n * n;
            let mut union = vec![0.0; nn];
            for m in &masks.masks {
                for (u, v) in union.iter_mut().zip(m) {
                    if *v > 0.0 {
                        *u = 1.0;
                    }
                }
            }
            Tensor::from_vec(vec![n, n], union)
        }
    }

    /// One encoder pass over stock tokens: masked + unmasked heads,
    /// concatenation, output projection, residual + layer norm, feed-forward,
    /// residual + layer norm.
    fn encoder_forward(&self, layer: &EncoderLayer, x: &Tensor, masks: &HeadMaskSet) -> Result<Tensor> {
        let mut head_outs = Vec::with_capacity(layer.heads.len());
        for (hi, head) in layer.heads.iter().enumerate() {
            let q = x.matmul(&head.wq)?;
            let k = x.matmul(&head.wk)?;
            let v = x.matmul(&head.wv)?;
            let o = if hi < self.cfg.n_masked_heads {
                let mask = self.head_mask_tensor(masks, hi)?;
                masked_attention(&q, &k, &v, &mask)?
            } else {
                unmasked_attention(&q, &k, &v)?
            };
            head_outs.push(o);
        }
        let concat = Tensor::concat_cols(&head_outs)?;
        let o = concat.matmul(&layer.w_o)?.add_row(&layer.b_o)?;
        let x = x.add(&o)?.layer_norm_rows(&layer.ln1_g, &layer.ln1_b, 1e-5)?;
        let ff = x
            .matmul(&layer.ff_w1)?
            .add_row(&layer.ff_b1)?
            .relu()?
            .matmul(&layer.ff_w2)?
            .add_row(&layer.ff_b2)?;
        x.add(&ff)?.layer_norm_rows(&layer.ln2_g, &layer.ln2_b, 1e-5)
    }

    /// Temporal feature extraction for one stock: input is the time
    /// concatenation (history | noisy target), each (P, L + horizon); the
    /// output keeps the last L + horizon positions, aligned with the target.
    pub fn temporal_forward(&self, stock_input: &Tensor, k_emb: &Tensor) -> Result<Tensor> {
        let lp = self.cfg.target_len();
        let h = self.stage1.forward(stock_input, Some(k_emb))?;
        h.slice_cols(lp, 2 * lp)
    }

    /// Relational pass over flattened stock tokens (N, d * (L + horizon)).
    pub fn mrt_forward(&self, x: &Tensor, masks: &HeadMaskSet) -> Result<Tensor> {
        if masks.masks.len() > self.cfg.n_masked_heads {
            return Err(TensorError::Contract {
                op: "mrt_forward",
                reason: format!(
                    "{} head masks but only {} masked heads configured",
                    masks.masks.len(),
                    self.cfg.n_masked_heads
                ),
            });
        }
        let mut h = x.clone();
        for layer in &self.layers {
            h = self.encoder_forward(layer, &h, masks)?;
        }
        Ok(h)
    }

    /// Full pipeline: per-stock temporal features, relational mixing,
    /// second temporal stage, linear head back to indicator channels.
    /// `x_k` and `history` are (N * P, L + horizon); returns the same shape.
    pub fn forward(&self, x_k: &Tensor, history: &Tensor, k: usize) -> Result<Tensor> {
        self.forward_with_masks(x_k, history, k, None)
    }

    pub fn forward_with_masks(
        &self,
        x_k: &Tensor,
        history: &Tensor,
        k: usize,
        masks: Option<&HeadMaskSet>,
    ) -> Result<Tensor> {
        let cfg = &self.cfg;
        let (n, p, lp) = (cfg.n_stocks, cfg.n_indicators, cfg.target_len());
        if x_k.shape() != [n * p, lp] || history.shape() != [n * p, lp] {
            return Err(TensorError::ShapeMismatch {
                op: "denoiser_forward",
                lhs: x_k.shape().to_vec(),
                rhs: vec![n * p, lp],
            });
        }
        let emb = Tensor::from_vec(
            vec![cfg.emb_dim, 1],
            noise_embedding(k, cfg.emb_dim, cfg.emb_base)?,
        )?;

        // stage 1 per stock, then flatten to one token per stock
        let mut tokens = Vec::with_capacity(n);
        for s in 0..n {
            let hist = history.slice_rows(s * p, (s + 1) * p)?;
            let noisy = x_k.slice_rows(s * p, (s + 1) * p)?;
            let input = Tensor::concat_cols(&[hist, noisy])?;
            let feats = self.temporal_forward(&input, &emb)?;
            tokens.push(feats.reshape(vec![1, cfg.flat_dim()])?);
        }
        let mut x = Tensor::concat_rows(&tokens)?;

        // relational mixing (skipped entirely when no masks are supplied:
        // the temporal-only ablation)
        if let Some(masks) = masks {
            x = self.mrt_forward(&x, masks)?;
        }

        // stage 2 + output head per stock
        let mut outs = Vec::with_capacity(n);
        for s in 0..n {
            let feats = x.slice_rows(s, s + 1)?.reshape(vec![cfg.d_model, lp])?;
            let h = self.stage2.forward(&feats, None)?;
            outs.push(self.out_conv.forward(&h, 1)?);
        }
        Tensor::concat_rows(&outs)
    }
}

#[cfg(test)]
mod tests;
