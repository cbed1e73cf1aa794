//! Encoder-decoder Transformer with hand-derived reverse mode.
//!
//! Pre-norm residual blocks (layer norm before each sublayer, a final norm on
//! each stack), sinusoidal positions, embeddings scaled by `sqrt(d_model)`,
//! ReLU feed-forward and an untied output projection. Sources get a trailing
//! `</s>`; decoder inputs start with `<s>` and outputs end with `</s>`.

use super::layers::{
    attention_backward, attention_forward, dropout_backward, dropout_forward, layer_norm_backward,
    layer_norm_forward, linear_backward, linear_forward, sinusoidal_table, AttnShape, LayerNormCache,
};
use super::tensor::{axpy, Scalar, Tensor};
use super::{ModelConfig, ModelError};
use crate::rng::{self, Rng};
use crate::subword::{BOS_ID, EOS_ID, PAD_ID};

#[derive(Debug, Clone, Copy)]
struct LinearIdx {
    w: usize,
    b: usize,
    d_in: usize,
    d_out: usize,
}

#[derive(Debug, Clone, Copy)]
struct NormIdx {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone, Copy)]
struct AttnIdx {
    q: LinearIdx,
    k: LinearIdx,
    v: LinearIdx,
    o: LinearIdx,
}

#[derive(Debug, Clone, Copy)]
struct FfnIdx {
    inner: LinearIdx,
    outer: LinearIdx,
}

#[derive(Debug, Clone, Copy)]
struct EncLayerIdx {
    attn_norm: NormIdx,
    attn: AttnIdx,
    ffn_norm: NormIdx,
    ffn: FfnIdx,
}

#[derive(Debug, Clone, Copy)]
struct DecLayerIdx {
    self_norm: NormIdx,
    self_attn: AttnIdx,
    cross_norm: NormIdx,
    cross_attn: AttnIdx,
    ffn_norm: NormIdx,
    ffn: FfnIdx,
}

#[derive(Debug, Clone)]
struct Layout {
    src_embed: usize,
    tgt_embed: usize,
    encoder: Vec<EncLayerIdx>,
    encoder_norm: NormIdx,
    decoder: Vec<DecLayerIdx>,
    decoder_norm: NormIdx,
    generator: LinearIdx,
}

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in))
    FanIn(usize),
    Zeros,
    Ones,
}

struct LayoutBuilder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }

    fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize) -> LinearIdx {
        LinearIdx {
            w: self.push(format!("{prefix}.weight"), vec![d_in, d_out], Init::FanIn(d_in)),
            b: self.push(format!("{prefix}.bias"), vec![d_out], Init::Zeros),
            d_in,
            d_out,
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormIdx {
        NormIdx {
            gamma: self.push(format!("{prefix}.gamma"), vec![d], Init::Ones),
            beta: self.push(format!("{prefix}.beta"), vec![d], Init::Zeros),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIdx {
        AttnIdx {
            q: self.linear(&format!("{prefix}.q"), d, d),
            k: self.linear(&format!("{prefix}.k"), d, d),
            v: self.linear(&format!("{prefix}.v"), d, d),
            o: self.linear(&format!("{prefix}.o"), d, d),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, d_ff: usize) -> FfnIdx {
        FfnIdx {
            inner: self.linear(&format!("{prefix}.w1"), d, d_ff),
            outer: self.linear(&format!("{prefix}.w2"), d_ff, d),
        }
    }
}

fn build_layout(cfg: &ModelConfig) -> (Layout, LayoutBuilder) {
    let d = cfg.d_model;
    let mut lb = LayoutBuilder {
        names: Vec::new(),
        shapes: Vec::new(),
        inits: Vec::new(),
    };
    let src_embed = lb.push("src_embed.weight".into(), vec![cfg.src_vocab, d], Init::FanIn(d));
    let tgt_embed = lb.push("tgt_embed.weight".into(), vec![cfg.tgt_vocab, d], Init::FanIn(d));
    let encoder = (0..cfg.layers)
        .map(|l| EncLayerIdx {
            attn_norm: lb.norm(&format!("encoder.{l}.self_attn_norm"), d),
            attn: lb.attn(&format!("encoder.{l}.self_attn"), d),
            ffn_norm: lb.norm(&format!("encoder.{l}.ffn_norm"), d),
            ffn: lb.ffn(&format!("encoder.{l}.ffn"), d, cfg.d_ff),
        })
        .collect();
    let encoder_norm = lb.norm("encoder.norm", d);
    let decoder = (0..cfg.layers)
        .map(|l| DecLayerIdx {
            self_norm: lb.norm(&format!("decoder.{l}.self_attn_norm"), d),
            self_attn: lb.attn(&format!("decoder.{l}.self_attn"), d),
            cross_norm: lb.norm(&format!("decoder.{l}.cross_attn_norm"), d),
            cross_attn: lb.attn(&format!("decoder.{l}.cross_attn"), d),
            ffn_norm: lb.norm(&format!("decoder.{l}.ffn_norm"), d),
            ffn: lb.ffn(&format!("decoder.{l}.ffn"), d, cfg.d_ff),
        })
        .collect();
    let decoder_norm = lb.norm("decoder.norm", d);
    let generator = lb.linear("generator", d, cfg.tgt_vocab);
    (
        Layout {
            src_embed,
            tgt_embed,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            generator,
        },
        lb,
    )
}

/// A padded batch of id sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    /// `[size x src_len]`, each row ending in `</s>` then padding.
    pub src: Vec<u32>,
    /// `[size x tgt_len]`, `<s>` followed by the target ids.
    pub tgt_in: Vec<u32>,
    /// `[size x tgt_len]`, the target ids followed by `</s>`.
    pub tgt_out: Vec<u32>,
    pub src_lens: Vec<usize>,
    pub tgt_lens: Vec<usize>,
}

impl Batch {
    /// Builds a batch from (source ids, target ids) pairs without control symbols.
    pub fn from_pairs<S: AsRef<[u32]>, T: AsRef<[u32]>>(pairs: &[(S, T)]) -> Self {
        let src_lens: Vec<usize> = pairs.iter().map(|(s, _)| s.as_ref().len() + 1).collect();
        let tgt_lens: Vec<usize> = pairs.iter().map(|(_, t)| t.as_ref().len() + 1).collect();
        let src_len = src_lens.iter().copied().max().unwrap_or(0);
        let tgt_len = tgt_lens.iter().copied().max().unwrap_or(0);
        let mut batch = Batch {
            size: pairs.len(),
            src_len,
            tgt_len,
            src: vec![PAD_ID; pairs.len() * src_len],
            tgt_in: vec![PAD_ID; pairs.len() * tgt_len],
            tgt_out: vec![PAD_ID; pairs.len() * tgt_len],
            src_lens,
            tgt_lens,
        };
        for (b, (s, t)) in pairs.iter().enumerate() {
            let (s, t) = (s.as_ref(), t.as_ref());
            let row = &mut batch.src[b * src_len..];
            row[..s.len()].copy_from_slice(s);
            row[s.len()] = EOS_ID;
            let tin = &mut batch.tgt_in[b * tgt_len..];
            tin[0] = BOS_ID;
            tin[1..=t.len()].copy_from_slice(t);
            let tout = &mut batch.tgt_out[b * tgt_len..];
            tout[..t.len()].copy_from_slice(t);
            tout[t.len()] = EOS_ID;
        }
        batch
    }

    /// Re-pads to at least the given lengths.
    pub fn padded_to(&self, src_len: usize, tgt_len: usize) -> Self {
        let (src_len, tgt_len) = (src_len.max(self.src_len), tgt_len.max(self.tgt_len));
        let repad = |data: &[u32], old: usize, new: usize| -> Vec<u32> {
            let mut out = vec![PAD_ID; self.size * new];
            for b in 0..self.size {
                out[b * new..b * new + old].copy_from_slice(&data[b * old..(b + 1) * old]);
            }
            out
        };
        Batch {
            size: self.size,
            src_len,
            tgt_len,
            src: repad(&self.src, self.src_len, src_len),
            tgt_in: repad(&self.tgt_in, self.tgt_len, tgt_len),
            tgt_out: repad(&self.tgt_out, self.tgt_len, tgt_len),
            src_lens: self.src_lens.clone(),
            tgt_lens: self.tgt_lens.clone(),
        }
    }

    /// Non-pad target positions.
    pub fn target_tokens(&self) -> usize {
        self.tgt_lens.iter().sum()
    }

    /// Padded size of the larger side, the unit used for token batching.
    pub fn padded_tokens(&self) -> usize {
        self.size * self.src_len.max(self.tgt_len)
    }
}

/// Whether dropout is active. Training mode carries the dropout RNG.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut Rng),
}

impl Mode<'_> {
    fn rng(&mut self) -> Option<&mut Rng> {
        match self {
            Mode::Eval => None,
            Mode::Train(r) => Some(&mut **r),
        }
    }
}

struct MhaCache<F> {
    xq: Vec<F>,
    /// `None` for self-attention (keys/values come from `xq`).
    xkv: Option<Vec<F>>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    probs: Vec<F>,
    ctx: Vec<F>,
}

struct FfnCache<F> {
    x: Vec<F>,
    act: Vec<F>,
}

struct EncLayerCache<F> {
    attn_norm: LayerNormCache<F>,
    attn: MhaCache<F>,
    attn_drop: Option<Vec<F>>,
    ffn_norm: LayerNormCache<F>,
    ffn: FfnCache<F>,
    ffn_drop: Option<Vec<F>>,
}

struct DecLayerCache<F> {
    self_norm: LayerNormCache<F>,
    self_attn: MhaCache<F>,
    self_drop: Option<Vec<F>>,
    cross_norm: LayerNormCache<F>,
    cross_attn: MhaCache<F>,
    cross_drop: Option<Vec<F>>,
    ffn_norm: LayerNormCache<F>,
    ffn: FfnCache<F>,
    ffn_drop: Option<Vec<F>>,
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardCache<F> {
    batch: Batch,
    src_drop: Option<Vec<F>>,
    enc_layers: Vec<EncLayerCache<F>>,
    enc_norm: LayerNormCache<F>,
    tgt_drop: Option<Vec<F>>,
    dec_layers: Vec<DecLayerCache<F>>,
    dec_norm: LayerNormCache<F>,
    dec_out: Vec<F>,
}

/// Per-parameter gradient buffers in model parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<F> {
    pub names: Vec<String>,
    pub tensors: Vec<Vec<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, name: &str) -> Option<&[F]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.tensors[i].as_slice())
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flatten()
            .map(|g| {
                let v = g.to_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: F) {
        for g in self.tensors.iter_mut().flatten() {
            *g *= factor;
        }
    }
}

/// Summed loss statistics over the non-pad target positions of a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossStats {
    /// Label-smoothed cross-entropy, summed (nats).
    pub loss_sum: f64,
    /// Plain negative log-likelihood of the reference, summed (nats).
    pub nll_sum: f64,
    pub tokens: usize,
}

impl LossStats {
    pub fn mean_loss(&self) -> f64 {
        self.loss_sum / self.tokens.max(1) as f64
    }
}

/// Label-smoothed cross-entropy over `[rows x vocab]` logits. The smoothed
/// target puts `1 - eps` on the reference id and spreads `eps` uniformly over
/// the whole vocabulary. Rows whose target is `<pad>` are skipped.
///
/// When `normalizer` is given, also returns `d loss_sum / d logits` divided by it.
pub fn loss<F: Scalar>(
    logits: &[F],
    targets: &[u32],
    vocab: usize,
    label_smoothing: f64,
    normalizer: Option<f64>,
) -> Result<(LossStats, Option<Vec<F>>), ModelError> {
    if logits.len() != targets.len() * vocab {
        return Err(ModelError::ShapeMismatch(format!(
            "logits hold {} values, expected {} rows x {vocab}",
            logits.len(),
            targets.len()
        )));
    }
    let eps = label_smoothing;
    let uniform = eps / vocab as f64;
    let mut stats = LossStats {
        loss_sum: 0.0,
        nll_sum: 0.0,
        tokens: 0,
    };
    let mut grad = normalizer.map(|_| vec![F::ZERO; logits.len()]);
    let scale = normalizer.map(|n| 1.0 / n);
    for (r, &target) in targets.iter().enumerate() {
        if target == PAD_ID {
            continue;
        }
        let t = target as usize;
        if t >= vocab {
            return Err(ModelError::ShapeMismatch(format!("target id {t} outside vocabulary of {vocab}")));
        }
        let row = &logits[r * vocab..(r + 1) * vocab];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.to_f64()));
        let sum_exp: f64 = row.iter().map(|&v| (v.to_f64() - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        let sum_logits: f64 = row.iter().map(|&v| v.to_f64()).sum();
        let nll = log_z - row[t].to_f64();
        // -sum_k q_k log p_k with log p_k = z_k - log Z
        let smoothed = (1.0 - eps) * nll + uniform * (vocab as f64 * log_z - sum_logits);
        stats.loss_sum += smoothed;
        stats.nll_sum += nll;
        stats.tokens += 1;
        if let (Some(g), Some(scale)) = (grad.as_mut(), scale) {
            let gr = &mut g[r * vocab..(r + 1) * vocab];
            for (k, gk) in gr.iter_mut().enumerate() {
                let p = (row[k].to_f64() - log_z).exp();
                let q = uniform + if k == t { 1.0 - eps } else { 0.0 };
                *gk = F::from_f64((p - q) * scale);
            }
        }
    }
    Ok((stats, grad))
}

/// Transformer parameters plus the static tables derived from the config.
#[derive(Debug, Clone)]
pub struct Model<F> {
    config: ModelConfig,
    layout: Layout,
    names: Vec<String>,
    params: Vec<Tensor<F>>,
    positions: Vec<F>,
}

impl<F: Scalar> PartialEq for Model<F> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.names == other.names && self.params == other.params
    }
}

impl<F: Scalar> Model<F> {
    /// Fresh parameters: fan-in-scaled uniform weights, zero biases, unit gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let (layout, lb) = build_layout(&config);
        let mut rng = rng::seeded(seed);
        let params = lb
            .shapes
            .iter()
            .zip(&lb.inits)
            .map(|(shape, init)| match *init {
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::filled(shape, F::ONE),
                Init::FanIn(fan_in) => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let n: usize = shape.iter().product();
                    Tensor {
                        shape: shape.clone(),
                        data: (0..n)
                            .map(|_| F::from_f64((2.0 * rng::unit_f64(&mut rng) - 1.0) * bound))
                            .collect(),
                    }
                }
            })
            .collect();
        let positions = sinusoidal_table(config.max_position, config.d_model);
        Ok(Self {
            config,
            layout,
            names: lb.names,
            params,
            positions,
        })
    }

    /// Rebuilds a model from named tensors, checking every name and shape.
    pub fn from_named(config: ModelConfig, tensors: Vec<(String, Tensor<F>)>) -> Result<Self, ModelError> {
        config.validate()?;
        let (layout, lb) = build_layout(&config);
        if tensors.len() != lb.names.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "expected {} tensors, found {}",
                lb.names.len(),
                tensors.len()
            )));
        }
        let mut params = Vec::with_capacity(tensors.len());
        for ((name, tensor), (want_name, want_shape)) in tensors.into_iter().zip(lb.names.iter().zip(&lb.shapes)) {
            if &name != want_name || &tensor.shape != want_shape || tensor.data.len() != want_shape.iter().product::<usize>() {
                return Err(ModelError::ShapeMismatch(format!(
                    "tensor `{name}` {:?} does not match expected `{want_name}` {want_shape:?}",
                    tensor.shape
                )));
            }
            params.push(tensor);
        }
        let positions = sinusoidal_table(config.max_position, config.d_model);
        Ok(Self {
            config,
            layout,
            names: lb.names,
            params,
            positions,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<F>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.params[i])
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Same weights in another precision.
    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            layout: self.layout.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            positions: sinusoidal_table(self.config.max_position, self.config.d_model),
        }
    }

    fn p(&self, i: usize) -> &[F] {
        &self.params[i].data
    }

    pub fn check_batch(&self, batch: &Batch) -> Result<(), ModelError> {
        let c = &self.config;
        let longest = batch.src_len.max(batch.tgt_len);
        if longest > c.max_position {
            return Err(ModelError::PositionOverflow {
                len: longest,
                max: c.max_position,
            });
        }
        let consistent = batch.src.len() == batch.size * batch.src_len
            && batch.tgt_in.len() == batch.size * batch.tgt_len
            && batch.tgt_out.len() == batch.size * batch.tgt_len
            && batch.src_lens.len() == batch.size
            && batch.tgt_lens.len() == batch.size
            && batch.src_lens.iter().all(|&l| l <= batch.src_len)
            && batch.tgt_lens.iter().all(|&l| l <= batch.tgt_len);
        if !consistent {
            return Err(ModelError::ShapeMismatch("batch buffers disagree with its dimensions".into()));
        }
        if let Some(&id) = batch.src.iter().find(|&&id| id as usize >= c.src_vocab) {
            return Err(ModelError::ShapeMismatch(format!("source id {id} outside vocabulary of {}", c.src_vocab)));
        }
        if let Some(&id) = batch
            .tgt_in
            .iter()
            .chain(&batch.tgt_out)
            .find(|&&id| id as usize >= c.tgt_vocab)
        {
            return Err(ModelError::ShapeMismatch(format!("target id {id} outside vocabulary of {}", c.tgt_vocab)));
        }
        Ok(())
    }

    fn embed(&self, table: usize, ids: &[u32], seq_len: usize) -> Vec<F> {
        let d = self.config.d_model;
        let scale = F::from_f64((d as f64).sqrt());
        let emb = self.p(table);
        let mut x = vec![F::ZERO; ids.len() * d];
        for (r, &id) in ids.iter().enumerate() {
            let pos = r % seq_len;
            let out = &mut x[r * d..(r + 1) * d];
            let e = &emb[id as usize * d..(id as usize + 1) * d];
            let pe = &self.positions[pos * d..(pos + 1) * d];
            for i in 0..d {
                out[i] = e[i] * scale + pe[i];
            }
        }
        x
    }

    fn linear(&self, idx: LinearIdx, x: &[F], rows: usize) -> Vec<F> {
        linear_forward(x, rows, self.p(idx.w), self.p(idx.b), idx.d_in, idx.d_out)
    }

    fn norm(&self, idx: NormIdx, x: &[F]) -> (Vec<F>, LayerNormCache<F>) {
        layer_norm_forward(x, self.config.d_model, self.p(idx.gamma), self.p(idx.beta))
    }

    fn mha(&self, idx: AttnIdx, xq: Vec<F>, xkv: Option<Vec<F>>, shape: AttnShape<'_>) -> (Vec<F>, MhaCache<F>) {
        let rows_q = shape.batch * shape.tq;
        let rows_k = shape.batch * shape.tk;
        let q = self.linear(idx.q, &xq, rows_q);
        let kv_in = xkv.as_deref().unwrap_or(&xq);
        let k = self.linear(idx.k, kv_in, rows_k);
        let v = self.linear(idx.v, kv_in, rows_k);
        let (ctx, probs) = attention_forward(&q, &k, &v, shape);
        let out = self.linear(idx.o, &ctx, rows_q);
        (
            out,
            MhaCache {
                xq,
                xkv,
                q,
                k,
                v,
                probs,
                ctx,
            },
        )
    }

    fn ffn(&self, idx: FfnIdx, x: Vec<F>, rows: usize) -> (Vec<F>, FfnCache<F>) {
        let mut act = self.linear(idx.inner, &x, rows);
        for a in &mut act {
            if *a < F::ZERO {
                *a = F::ZERO;
            }
        }
        let out = self.linear(idx.outer, &act, rows);
        (out, FfnCache { x, act })
    }

    fn attn_shape<'a>(&self, b: usize, tq: usize, tk: usize, q_lens: &'a [usize], k_lens: &'a [usize], causal: bool) -> AttnShape<'a> {
        AttnShape {
            batch: b,
            tq,
            tk,
            heads: self.config.heads,
            head_dim: self.config.head_dim(),
            q_lens,
            k_lens,
            causal,
        }
    }

    /// Runs the encoder, returning the normalized memory `[B*S x d]`.
    fn encode(&self, batch: &Batch, mode: &mut Mode<'_>) -> (Vec<F>, Option<Vec<F>>, Vec<EncLayerCache<F>>, LayerNormCache<F>) {
        let (b, s) = (batch.size, batch.src_len);
        let p = self.config.dropout;
        let mut x = self.embed(self.layout.src_embed, &batch.src, s);
        let src_drop = dropout_forward(&mut x, p, mode.rng());
        let mut caches = Vec::with_capacity(self.layout.encoder.len());
        for layer in &self.layout.encoder {
            let shape = self.attn_shape(b, s, s, &batch.src_lens, &batch.src_lens, false);
            let (h, attn_norm) = self.norm(layer.attn_norm, &x);
            let (mut a, attn) = self.mha(layer.attn, h, None, shape);
            let attn_drop = dropout_forward(&mut a, p, mode.rng());
            axpy(F::ONE, &a, &mut x);

            let (h, ffn_norm) = self.norm(layer.ffn_norm, &x);
            let (mut f, ffn) = self.ffn(layer.ffn, h, b * s);
            let ffn_drop = dropout_forward(&mut f, p, mode.rng());
            axpy(F::ONE, &f, &mut x);
            caches.push(EncLayerCache {
                attn_norm,
                attn,
                attn_drop,
                ffn_norm,
                ffn,
                ffn_drop,
            });
        }
        let (memory, enc_norm) = self.norm(self.layout.encoder_norm, &x);
        (memory, src_drop, caches, enc_norm)
    }

    /// Runs the decoder over `batch.tgt_in`, returning the normalized states.
    fn decode(
        &self,
        batch: &Batch,
        memory: &[F],
        mode: &mut Mode<'_>,
    ) -> (Vec<F>, Option<Vec<F>>, Vec<DecLayerCache<F>>, LayerNormCache<F>) {
        let (b, s, t) = (batch.size, batch.src_len, batch.tgt_len);
        let p = self.config.dropout;
        let mut y = self.embed(self.layout.tgt_embed, &batch.tgt_in, t);
        let tgt_drop = dropout_forward(&mut y, p, mode.rng());
        let mut caches = Vec::with_capacity(self.layout.decoder.len());
        for layer in &self.layout.decoder {
            let self_shape = self.attn_shape(b, t, t, &batch.tgt_lens, &batch.tgt_lens, true);
            let (h, self_norm) = self.norm(layer.self_norm, &y);
            let (mut a, self_attn) = self.mha(layer.self_attn, h, None, self_shape);
            let self_drop = dropout_forward(&mut a, p, mode.rng());
            axpy(F::ONE, &a, &mut y);

            let cross_shape = self.attn_shape(b, t, s, &batch.tgt_lens, &batch.src_lens, false);
            let (h, cross_norm) = self.norm(layer.cross_norm, &y);
            let (mut c, cross_attn) = self.mha(layer.cross_attn, h, Some(memory.to_vec()), cross_shape);
            let cross_drop = dropout_forward(&mut c, p, mode.rng());
            axpy(F::ONE, &c, &mut y);

            let (h, ffn_norm) = self.norm(layer.ffn_norm, &y);
            let (mut f, ffn) = self.ffn(layer.ffn, h, b * t);
            let ffn_drop = dropout_forward(&mut f, p, mode.rng());
            axpy(F::ONE, &f, &mut y);
            caches.push(DecLayerCache {
                self_norm,
                self_attn,
                self_drop,
                cross_norm,
                cross_attn,
                cross_drop,
                ffn_norm,
                ffn,
                ffn_drop,
            });
        }
        let (out, dec_norm) = self.norm(self.layout.decoder_norm, &y);
        (out, tgt_drop, caches, dec_norm)
    }

    /// Next-token logits `[B x T x V]`, flattened row-major.
    pub fn forward(&self, batch: &Batch, mode: Mode<'_>) -> Result<Vec<F>, ModelError> {
        self.forward_cached(batch, mode).map(|(logits, _)| logits)
    }

    pub fn forward_cached(&self, batch: &Batch, mut mode: Mode<'_>) -> Result<(Vec<F>, ForwardCache<F>), ModelError> {
        self.check_batch(batch)?;
        let (memory, src_drop, enc_layers, enc_norm) = self.encode(batch, &mut mode);
        let (dec_out, tgt_drop, dec_layers, dec_norm) = self.decode(batch, &memory, &mut mode);
        let logits = self.linear(self.layout.generator, &dec_out, batch.size * batch.tgt_len);
        Ok((
            logits,
            ForwardCache {
                batch: batch.clone(),
                src_drop,
                enc_layers,
                enc_norm,
                tgt_drop,
                dec_layers,
                dec_norm,
                dec_out,
            },
        ))
    }

    fn zero_grads(&self) -> Gradients<F> {
        Gradients {
            names: self.names.clone(),
            tensors: self.params.iter().map(|t| vec![F::ZERO; t.len()]).collect(),
        }
    }

    fn linear_back(&self, idx: LinearIdx, x: &[F], dy: &[F], rows: usize, g: &mut Gradients<F>, want_dx: bool) -> Option<Vec<F>> {
        let (gw, gb) = two_mut(&mut g.tensors, idx.w, idx.b);
        linear_backward(x, dy, rows, self.p(idx.w), idx.d_in, idx.d_out, gw, gb, want_dx)
    }

    fn norm_back(&self, idx: NormIdx, cache: &LayerNormCache<F>, dy: &[F], g: &mut Gradients<F>) -> Vec<F> {
        let (gg, gb) = two_mut(&mut g.tensors, idx.gamma, idx.beta);
        layer_norm_backward(cache, dy, self.config.d_model, self.p(idx.gamma), gg, gb)
    }

    /// Returns (d xq, d xkv); for self-attention the second is folded into the first.
    fn mha_back(&self, idx: AttnIdx, c: &MhaCache<F>, dout: &[F], shape: AttnShape<'_>, g: &mut Gradients<F>) -> (Vec<F>, Option<Vec<F>>) {
        let rows_q = shape.batch * shape.tq;
        let rows_k = shape.batch * shape.tk;
        let dctx = self.linear_back(idx.o, &c.ctx, dout, rows_q, g, true).unwrap();
        let (dq, dk, dv) = attention_backward(&c.q, &c.k, &c.v, &c.probs, &dctx, shape);
        let mut dxq = self.linear_back(idx.q, &c.xq, &dq, rows_q, g, true).unwrap();
        let kv_in = c.xkv.as_deref().unwrap_or(&c.xq);
        let mut dxkv = self.linear_back(idx.k, kv_in, &dk, rows_k, g, true).unwrap();
        let dxv = self.linear_back(idx.v, kv_in, &dv, rows_k, g, true).unwrap();
        axpy(F::ONE, &dxv, &mut dxkv);
        if c.xkv.is_none() {
            axpy(F::ONE, &dxkv, &mut dxq);
            (dxq, None)
        } else {
            (dxq, Some(dxkv))
        }
    }

    fn ffn_back(&self, idx: FfnIdx, c: &FfnCache<F>, dout: &[F], rows: usize, g: &mut Gradients<F>) -> Vec<F> {
        let mut dact = self.linear_back(idx.outer, &c.act, dout, rows, g, true).unwrap();
        for (da, &a) in dact.iter_mut().zip(&c.act) {
            if a <= F::ZERO {
                *da = F::ZERO;
            }
        }
        self.linear_back(idx.inner, &c.x, &dact, rows, g, true).unwrap()
    }

    fn embed_back(&self, table: usize, ids: &[u32], dx: &[F], g: &mut Gradients<F>) {
        let d = self.config.d_model;
        let scale = F::from_f64((d as f64).sqrt());
        let ge = &mut g.tensors[table];
        for (r, &id) in ids.iter().enumerate() {
            axpy(scale, &dx[r * d..(r + 1) * d], &mut ge[id as usize * d..(id as usize + 1) * d]);
        }
    }

    /// Parameter gradients given `d objective / d logits`.
    pub fn backward(&self, cache: &ForwardCache<F>, dlogits: &[F]) -> Gradients<F> {
        let batch = &cache.batch;
        let (b, s, t) = (batch.size, batch.src_len, batch.tgt_len);
        let mut g = self.zero_grads();

        let ddec = self
            .linear_back(self.layout.generator, &cache.dec_out, dlogits, b * t, &mut g, true)
            .unwrap();
        let mut dy = self.norm_back(self.layout.decoder_norm, &cache.dec_norm, &ddec, &mut g);
        let mut dmemory = vec![F::ZERO; b * s * self.config.d_model];

        for (layer, c) in self.layout.decoder.iter().zip(&cache.dec_layers).rev() {
            let mut df = dy.clone();
            dropout_backward(&mut df, c.ffn_drop.as_ref());
            let dh = self.ffn_back(layer.ffn, &c.ffn, &df, b * t, &mut g);
            let dres = self.norm_back(layer.ffn_norm, &c.ffn_norm, &dh, &mut g);
            axpy(F::ONE, &dres, &mut dy);

            let mut dc = dy.clone();
            dropout_backward(&mut dc, c.cross_drop.as_ref());
            let shape = self.attn_shape(b, t, s, &batch.tgt_lens, &batch.src_lens, false);
            let (dh, dmem) = self.mha_back(layer.cross_attn, &c.cross_attn, &dc, shape, &mut g);
            axpy(F::ONE, &dmem.unwrap(), &mut dmemory);
            let dres = self.norm_back(layer.cross_norm, &c.cross_norm, &dh, &mut g);
            axpy(F::ONE, &dres, &mut dy);

            let mut da = dy.clone();
            dropout_backward(&mut da, c.self_drop.as_ref());
            let shape = self.attn_shape(b, t, t, &batch.tgt_lens, &batch.tgt_lens, true);
            let (dh, _) = self.mha_back(layer.self_attn, &c.self_attn, &da, shape, &mut g);
            let dres = self.norm_back(layer.self_norm, &c.self_norm, &dh, &mut g);
            axpy(F::ONE, &dres, &mut dy);
        }
        dropout_backward(&mut dy, cache.tgt_drop.as_ref());
        self.embed_back(self.layout.tgt_embed, &batch.tgt_in, &dy, &mut g);

        let mut dx = self.norm_back(self.layout.encoder_norm, &cache.enc_norm, &dmemory, &mut g);
        for (layer, c) in self.layout.encoder.iter().zip(&cache.enc_layers).rev() {
            let mut df = dx.clone();
            dropout_backward(&mut df, c.ffn_drop.as_ref());
            let dh = self.ffn_back(layer.ffn, &c.ffn, &df, b * s, &mut g);
            let dres = self.norm_back(layer.ffn_norm, &c.ffn_norm, &dh, &mut g);
            axpy(F::ONE, &dres, &mut dx);

            let mut da = dx.clone();
            dropout_backward(&mut da, c.attn_drop.as_ref());
            let shape = self.attn_shape(b, s, s, &batch.src_lens, &batch.src_lens, false);
            let (dh, _) = self.mha_back(layer.attn, &c.attn, &da, shape, &mut g);
            let dres = self.norm_back(layer.attn_norm, &c.attn_norm, &dh, &mut g);
            axpy(F::ONE, &dres, &mut dx);
        }
        dropout_backward(&mut dx, cache.src_drop.as_ref());
        self.embed_back(self.layout.src_embed, &batch.src, &dx, &mut g);
        g
    }

    /// Loss over a batch and the gradients of the mean (per target token) loss.
    pub fn loss_and_gradients(&self, batch: &Batch, label_smoothing: f64, mode: Mode<'_>) -> Result<(LossStats, Gradients<F>), ModelError> {
        let (logits, cache) = self.forward_cached(batch, mode)?;
        let normalizer = batch.target_tokens().max(1) as f64;
        let (stats, dlogits) = loss(&logits, &batch.tgt_out, self.config.tgt_vocab, label_smoothing, Some(normalizer))?;
        let grads = self.backward(&cache, &dlogits.unwrap());
        Ok((stats, grads))
    }

    /// Loss statistics without gradients, dropout off.
    pub fn evaluate(&self, batch: &Batch, label_smoothing: f64) -> Result<LossStats, ModelError> {
        let logits = self.forward(batch, Mode::Eval)?;
        loss(&logits, &batch.tgt_out, self.config.tgt_vocab, label_smoothing, None).map(|(s, _)| s)
    }

    /// Greedy decoding of one source sentence (ids without `</s>`).
    /// Output stops after `</s>` (included) or `max_len` ids.
    pub fn greedy_decode(&self, src: &[u32], max_len: usize) -> Result<Vec<u32>, ModelError> {
        let mut out = self.greedy_decode_batch(&[src.to_vec()], max_len)?;
        Ok(out.pop().unwrap_or_default())
    }

    /// Greedy decoding of several sentences at once; results match
    /// decoding each sentence alone.
    pub fn greedy_decode_batch(&self, sources: &[Vec<u32>], max_len: usize) -> Result<Vec<Vec<u32>>, ModelError> {
        if sources.is_empty() {
            return Ok(Vec::new());
        }
        let max_len = max_len.min(self.config.max_position);
        let pairs: Vec<(&[u32], &[u32])> = sources.iter().map(|s| (s.as_slice(), &[][..])).collect();
        let mut batch = Batch::from_pairs(&pairs);
        self.check_batch(&batch)?;
        let (memory, ..) = self.encode(&batch, &mut Mode::Eval);

        let v = self.config.tgt_vocab;
        let d = self.config.d_model;
        let mut outputs: Vec<Vec<u32>> = vec![Vec::new(); sources.len()];
        let mut done = vec![false; sources.len()];
        for step in 0..max_len {
            let t = step + 1;
            batch.tgt_len = t;
            batch.tgt_in = (0..sources.len())
                .flat_map(|i| {
                    let mut row = vec![PAD_ID; t];
                    row[0] = BOS_ID;
                    for (j, &id) in outputs[i].iter().take(t - 1).enumerate() {
                        row[j + 1] = id;
                    }
                    row
                })
                .collect();
            batch.tgt_out = vec![PAD_ID; sources.len() * t];
            batch.tgt_lens = vec![t; sources.len()];
            let (states, ..) = self.decode(&batch, &memory, &mut Mode::Eval);
            let last: Vec<F> = (0..sources.len())
                .flat_map(|i| states[(i * t + t - 1) * d..(i * t + t) * d].iter().copied())
                .collect();
            let logits = self.linear(self.layout.generator, &last, sources.len());
            for i in 0..sources.len() {
                if done[i] {
                    continue;
                }
                let row = &logits[i * v..(i + 1) * v];
                let mut best = 0usize;
                for k in 1..v {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                outputs[i].push(best as u32);
                if best as u32 == EOS_ID {
                    done[i] = true;
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(outputs)
    }
}

fn two_mut<T>(v: &mut [T], i: usize, j: usize) -> (&mut T, &mut T) {
    assert_ne!(i, j);
    if i < j {
        let (a, b) = v.split_at_mut(j);
        (&mut a[i], &mut b[0])
    } else {
        let (a, b) = v.split_at_mut(i);
        (&mut b[0], &mut a[j])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(layers: usize) -> ModelConfig {
        ModelConfig {
            layers,
            heads: 2,
            d_model: 8,
            d_ff: 16,
            src_vocab: 11,
            tgt_vocab: 13,
            dropout: 0.0,
            label_smoothing: 0.1,
            max_position: 32,
        }
    }

    fn sample_batch() -> Batch {
        Batch::from_pairs(&[
            (vec![4u32, 5, 6], vec![7u32, 8]),
            (vec![9u32], vec![10u32, 11, 12, 4]),
            (vec![5u32, 5], vec![6u32]),
        ])
    }

    #[test]
    fn batch_layout() {
        let b = Batch::from_pairs(&[(vec![4u32, 5], vec![6u32]), (vec![7u32], vec![8u32, 9])]);
        assert_eq!((b.src_len, b.tgt_len), (3, 3));
        assert_eq!(b.src, vec![4, 5, EOS_ID, 7, EOS_ID, PAD_ID]);
        assert_eq!(b.tgt_in, vec![BOS_ID, 6, PAD_ID, BOS_ID, 8, 9]);
        assert_eq!(b.tgt_out, vec![6, EOS_ID, PAD_ID, 8, 9, EOS_ID]);
        assert_eq!(b.target_tokens(), 5);
        assert_eq!(b.padded_tokens(), 6);
    }

    #[test]
    fn logits_shape() {
        let m = Model::<f64>::init(tiny(2), 1).unwrap();
        let b = sample_batch();
        let logits = m.forward(&b, Mode::Eval).unwrap();
        assert_eq!(logits.len(), b.size * b.tgt_len * 13);
    }

    #[test]
    fn init_is_seeded() {
        let a = Model::<f32>::init(tiny(1), 5).unwrap();
        assert_eq!(a, Model::<f32>::init(tiny(1), 5).unwrap());
        assert_ne!(a, Model::<f32>::init(tiny(1), 6).unwrap());
        assert_eq!(a.param("encoder.0.ffn_norm.gamma").unwrap().data, vec![1.0; 8]);
    }

    #[test]
    fn position_overflow() {
        let mut cfg = tiny(1);
        cfg.max_position = 3;
        let m = Model::<f32>::init(cfg, 1).unwrap();
        let b = Batch::from_pairs(&[(vec![4u32, 5, 6], vec![7u32])]);
        assert!(matches!(
            m.forward(&b, Mode::Eval),
            Err(ModelError::PositionOverflow { len: 4, max: 3 })
        ));
        assert!(matches!(m.greedy_decode(&[4, 5, 6], 2), Err(ModelError::PositionOverflow { .. })));
    }

    #[test]
    fn out_of_vocab_ids_are_rejected() {
        let m = Model::<f32>::init(tiny(1), 1).unwrap();
        let b = Batch::from_pairs(&[(vec![40u32], vec![7u32])]);
        assert!(matches!(m.forward(&b, Mode::Eval), Err(ModelError::ShapeMismatch(_))));
    }

    #[test]
    fn loss_uniform_logits_is_ln_v() {
        let v = 6;
        let logits = vec![0.5f64; 2 * v];
        for eps in [0.0, 0.1, 0.3] {
            let (s, _) = loss(&logits, &[4, 2], v, eps, None).unwrap();
            assert!((s.loss_sum / 2.0 - (v as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_confident_correct_is_zero() {
        let mut logits = vec![0.0f64; 5];
        logits[2] = 1e4;
        let (s, _) = loss(&logits, &[2], 5, 0.0, None).unwrap();
        assert!(s.loss_sum.abs() < 1e-12);
    }

    #[test]
    fn loss_label_smoothed_small_case() {
        // V = 4, eps = 0.1, logits [1, 2, 0.5, -1], target 1
        let z = [1.0f64, 2.0, 0.5, -1.0];
        let log_z = z.iter().map(|v| v.exp()).sum::<f64>().ln();
        let logp: Vec<f64> = z.iter().map(|v| v - log_z).collect();
        let q = [0.025, 0.925, 0.025, 0.025];
        let expected: f64 = -q.iter().zip(&logp).map(|(a, b)| a * b).sum::<f64>();
        let (s, g) = loss(&z, &[1], 4, 0.1, Some(1.0)).unwrap();
        assert!((s.loss_sum - expected).abs() < 1e-12);
        assert!((s.nll_sum + logp[1]).abs() < 1e-12);
        let g = g.unwrap();
        for k in 0..4 {
            assert!((g[k] - (logp[k].exp() - q[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_skips_padding() {
        let logits = vec![0.0f64; 3 * 5];
        let (s, g) = loss(&logits, &[4, PAD_ID, PAD_ID], 5, 0.0, Some(1.0)).unwrap();
        assert_eq!(s.tokens, 1);
        assert!(g.unwrap()[5..].iter().all(|&x| x == 0.0));
        assert!(matches!(loss(&logits, &[4], 5, 0.0, None), Err(ModelError::ShapeMismatch(_))));
    }

    #[test]
    fn causal_mask_every_depth() {
        for layers in [1, 2] {
            let m = Model::<f64>::init(tiny(layers), 3).unwrap();
            let a = Batch::from_pairs(&[(vec![4u32, 5, 6], vec![7u32, 8, 9, 10])]);
            let mut b = a.clone();
            b.tgt_in[3] = 12; // position 3 holds target token 3
            let la = m.forward(&a, Mode::Eval).unwrap();
            let lb = m.forward(&b, Mode::Eval).unwrap();
            let v = 13;
            assert_eq!(&la[..3 * v], &lb[..3 * v]);
            assert_ne!(&la[3 * v..4 * v], &lb[3 * v..4 * v]);
        }
    }

    #[test]
    fn batch_permutation_permutes_logits() {
        let m = Model::<f64>::init(tiny(2), 4).unwrap();
        let pairs = [
            (vec![4u32, 5, 6], vec![7u32, 8]),
            (vec![9u32], vec![10u32, 11, 12, 4]),
        ];
        let swapped = [pairs[1].clone(), pairs[0].clone()];
        let a = m.forward(&Batch::from_pairs(&pairs), Mode::Eval).unwrap();
        let b = m.forward(&Batch::from_pairs(&swapped), Mode::Eval).unwrap();
        let row = 5 * 13;
        for (x, y) in a[..row].iter().zip(&b[row..]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn padding_invariance() {
        let m = Model::<f32>::init(tiny(2), 8).unwrap();
        let b = sample_batch();
        let padded = b.padded_to(b.src_len + 3, b.tgt_len + 2);
        let la = m.forward(&b, Mode::Eval).unwrap();
        let lb = m.forward(&padded, Mode::Eval).unwrap();
        let v = 13;
        for i in 0..b.size {
            for t in 0..b.tgt_lens[i] {
                let ra = &la[(i * b.tgt_len + t) * v..][..v];
                let rb = &lb[(i * padded.tgt_len + t) * v..][..v];
                for (x, y) in ra.iter().zip(rb) {
                    assert!((x - y).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let mut cfg = tiny(1);
        cfg.dropout = 0.3;
        let m = Model::<f64>::init(cfg, 2).unwrap();
        let b = sample_batch();
        let e1 = m.forward(&b, Mode::Eval).unwrap();
        let e2 = m.forward(&b, Mode::Eval).unwrap();
        assert_eq!(e1, e2);
        let mut r = rng::seeded(1);
        let t = m.forward(&b, Mode::Train(&mut r)).unwrap();
        assert_ne!(e1, t);
    }

    #[test]
    fn duplicate_sentence_doubles_gradient() {
        let m = Model::<f64>::init(tiny(1), 9).unwrap();
        let one = Batch::from_pairs(&[(vec![4u32, 5], vec![6u32, 7])]);
        let two = Batch::from_pairs(&[(vec![4u32, 5], vec![6u32, 7]), (vec![4u32, 5], vec![6u32, 7])]);
        let grads = |b: &Batch| {
            let (logits, cache) = m.forward_cached(b, Mode::Eval).unwrap();
            let (_, d) = loss(&logits, &b.tgt_out, 13, 0.1, Some(1.0)).unwrap();
            m.backward(&cache, &d.unwrap())
        };
        let g1 = grads(&one);
        let g2 = grads(&two);
        for (a, b) in g1.tensors.iter().flatten().zip(g2.tensors.iter().flatten()) {
            assert!((2.0 * a - b).abs() < 1e-10 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn zero_generator_leaves_bias_gradient_as_softmax_residual() {
        let mut m = Model::<f64>::init(tiny(1), 10).unwrap();
        m.param_mut("generator.weight").unwrap().data.fill(0.0);
        let b = Batch::from_pairs(&[(vec![4u32], vec![5u32])]);
        let (_, g) = m.loss_and_gradients(&b, 0.0, Mode::Eval).unwrap();
        // With a zero projection nothing upstream receives signal.
        assert!(g.get("decoder.norm.gamma").unwrap().iter().all(|&x| x == 0.0));
        assert!(g.get("src_embed.weight").unwrap().iter().all(|&x| x == 0.0));
        // Uniform softmax: the bias gradient is (1/V - onehot) averaged over tokens.
        let gb = g.get("generator.bias").unwrap();
        let v = 13.0;
        assert!((gb[5] - (1.0 / v - 0.5)).abs() < 1e-12);
        assert!((gb[EOS_ID as usize] - (1.0 / v - 0.5)).abs() < 1e-12);
        assert!((gb[0] - 1.0 / v).abs() < 1e-12);
    }

    #[test]
    fn greedy_decode_is_deterministic_and_capped() {
        let m = Model::<f32>::init(tiny(2), 11).unwrap();
        let a = m.greedy_decode(&[4, 5, 6], 7).unwrap();
        assert_eq!(a, m.greedy_decode(&[4, 5, 6], 7).unwrap());
        assert!(a.len() <= 7);
        assert_eq!(m.greedy_decode(&[4, 5, 6], 1).unwrap().len(), 1);
        let batch = m.greedy_decode_batch(&[vec![4, 5, 6], vec![9]], 7).unwrap();
        assert_eq!(batch[0], a);
        assert_eq!(batch[1], m.greedy_decode(&[9], 7).unwrap());
    }

    #[test]
    fn from_named_checks_shapes() {
        let m = Model::<f32>::init(tiny(1), 1).unwrap();
        let named: Vec<(String, Tensor<f32>)> = m.names().iter().cloned().zip(m.params().iter().cloned()).collect();
        assert_eq!(Model::from_named(tiny(1), named.clone()).unwrap(), m);
        let mut bad = named;
        bad[0].1.shape = vec![1, 1];
        assert!(Model::from_named(tiny(1), bad).is_err());
    }
}
