//! Encoder-decoder Transformer backbone.
//!
//! Sequences are carried as `[batch, steps, features]`; functions that accept
//! a single `[steps, features]` matrix treat it as a batch of one and return
//! the same rank they were given.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Activation, Dense, LayerNorm, Mlp};
use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Frequency base of the sinusoidal position code.
pub const POSITION_BASE: f64 = 10000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    /// Hidden width of the per-layer feed-forward MLPs.
    pub mlp_hidden: usize,
    /// Feature width of the encoder-side input.
    pub input_dim: usize,
    /// Feature width of the decoder-side input.
    pub target_dim: usize,
    pub output_dim: usize,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.num_heads,
            self.model_dim,
            self.mlp_hidden,
            self.input_dim,
            self.target_dim,
            self.output_dim,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("transformer dimensions must be >= 1: {self:?}")));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model dim {} is not divisible by {} heads",
                self.model_dim, self.num_heads
            )));
        }
        if self.model_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "model dim {} must be even for the position code",
                self.model_dim
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// Sinusoidal position code for steps `t = 1..=steps`.
///
/// Even feature `i` holds `sin(t / 10000^(i/d))`, odd feature `i` holds
/// `cos(t / 10000^((i-1)/d))`.
pub fn positional_encoding(steps: usize, d: usize) -> Result<Tensor> {
    if d % 2 != 0 || d == 0 || steps == 0 {
        return Err(Error::Contract(format!(
            "positional encoding needs an even width and at least one step, got steps={steps} d={d}"
        )));
    }
    let mut data = Vec::with_capacity(steps * d);
    for t in 1..=steps {
        let t = t as f64;
        for i in 0..d {
            let v = if i % 2 == 0 {
                libm::sin(t / libm::pow(POSITION_BASE, i as f64 / d as f64))
            } else {
                libm::cos(t / libm::pow(POSITION_BASE, (i - 1) as f64 / d as f64))
            };
            data.push(v);
        }
    }
    Tensor::new(&[steps, d], data)
}

fn to_batched<'t>(x: Var<'t>) -> Result<(Var<'t>, bool)> {
    let s = x.shape();
    match s.len() {
        2 => Ok((x.reshape(&[1, s[0], s[1]])?, true)),
        3 => Ok((x, false)),
        _ => Err(Error::Contract(format!("expected a sequence, got shape {s:?}"))),
    }
}

fn restore<'t>(x: Var<'t>, was_matrix: bool) -> Result<Var<'t>> {
    if was_matrix {
        let s = x.shape();
        x.reshape(&[s[1], s[2]])
    } else {
        Ok(x)
    }
}

/// Per-head projections.
#[derive(Debug, Clone, Copy)]
pub struct Head {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

/// Multi-head dot-product attention followed by the two-layer MLP.
#[derive(Debug, Clone)]
pub struct AttentionLayer {
    pub heads: Vec<Head>,
    pub fc: Dense,
    pub mlp: Mlp,
    head_dim: usize,
}

/// Output of one attention call with the per-head weight matrices.
pub struct AttentionTrace<'t> {
    pub output: Var<'t>,
    /// Multi-head output before the attention MLP.
    pub pre_mlp: Var<'t>,
    /// `[batch, s_q, s_k]` softmax weights, one entry per head.
    pub weights: Vec<Var<'t>>,
}

impl AttentionLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &TransformerConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.model_dim;
        let dh = cfg.head_dim();
        let mut heads = Vec::with_capacity(cfg.num_heads);
        for h in 0..cfg.num_heads {
            heads.push(Head {
                wq: store.add_uniform(format!("{name}.head{h}.wq"), &[d, dh], d, rng)?,
                wk: store.add_uniform(format!("{name}.head{h}.wk"), &[d, dh], d, rng)?,
                wv: store.add_uniform(format!("{name}.head{h}.wv"), &[d, dh], d, rng)?,
            });
        }
        Ok(Self {
            heads,
            fc: Dense::new(store, &format!("{name}.fc"), d, d, Activation::Identity, rng)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, d, d, Activation::Relu, rng)?,
            head_dim: dh,
        })
    }

    /// Full attention trace; `q` is `[B, s_q, d]`, `k` and `v` are `[B, s_k, d]`.
    pub fn trace<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        q: Var<'t>,
        k: Var<'t>,
        v: Var<'t>,
    ) -> Result<AttentionTrace<'t>> {
        let (q, was_matrix) = to_batched(q)?;
        let (k, _) = to_batched(k)?;
        let (v, _) = to_batched(v)?;
        let (sq, sk, sv) = (q.shape(), k.shape(), v.shape());
        if sk[1] == 0 {
            return Err(Error::Contract("attention over an empty key sequence".into()));
        }
        if sk[..2] != sv[..2] || sq[0] != sk[0] {
            return Err(crate::error::shape_err("multi_head_attention", &sk, &sv));
        }
        let (batch, s_q, d) = (sq[0], sq[1], sq[2]);
        let s_k = sk[1];
        let dh = self.head_dim;
        let heads = self.heads.len();
        let stack = |pick: fn(&Head) -> ParamId| -> Result<Var<'t>> {
            let ws: Vec<Var<'t>> = self.heads.iter().map(|h| tape.param(store, pick(h))).collect();
            Var::concat_lastaxis(&ws)
        };
        let (wq, wk, wv) = (stack(|h| h.wq)?, stack(|h| h.wk)?, stack(|h| h.wv)?);
        // all heads in one product per input; one product for q, k and v
        // when they share an input
        let (qa, ka, va) = if q.id() == k.id() && k.id() == v.id() {
            let all = q
                .reshape(&[batch * s_q, d])?
                .matmul(Var::concat_lastaxis(&[wq, wk, wv])?)?;
            let w = heads * dh;
            (all.slice_lastaxis(0, w)?, all.slice_lastaxis(w, w)?, all.slice_lastaxis(2 * w, w)?)
        } else {
            (
                q.reshape(&[batch * s_q, d])?.matmul(wq)?,
                k.reshape(&[batch * s_k, d])?.matmul(wk)?,
                v.reshape(&[batch * s_k, d])?.matmul(wv)?,
            )
        };
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut outs = Vec::with_capacity(heads);
        let mut weights = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = qa.slice_lastaxis(h * dh, dh)?.reshape(&[batch, s_q, dh])?;
            let kh = ka.slice_lastaxis(h * dh, dh)?.reshape(&[batch, s_k, dh])?;
            let vh = va.slice_lastaxis(h * dh, dh)?.reshape(&[batch, s_k, dh])?;
            let w = qh.matmul_nt(kh)?.scale(scale).softmax_lastaxis();
            outs.push(w.matmul(vh)?.reshape(&[batch * s_q, dh])?);
            weights.push(w);
        }
        let merged = self.fc.forward(tape, store, Var::concat_lastaxis(&outs)?)?;
        let out = self.mlp.forward(tape, store, merged)?;
        Ok(AttentionTrace {
            output: restore(out.reshape(&[batch, s_q, d])?, was_matrix)?,
            pre_mlp: restore(merged.reshape(&[batch, s_q, d])?, was_matrix)?,
            weights,
        })
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        q: Var<'t>,
        k: Var<'t>,
        v: Var<'t>,
    ) -> Result<Var<'t>> {
        Ok(self.trace(tape, store, q, k, v)?.output)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attn: AttentionLayer,
    pub norm1: LayerNorm,
    pub mlp: Mlp,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &TransformerConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.model_dim;
        Ok(Self {
            attn: AttentionLayer::new(store, &format!("{name}.attn"), cfg, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, cfg.mlp_hidden, d, Activation::Relu, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d)?,
        })
    }

    fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, h: Var<'t>) -> Result<Var<'t>> {
        let a = self.attn.forward(tape, store, h, h, h)?.add(h)?;
        let a_n = self.norm1.forward(tape, store, a)?;
        let c = self.mlp.forward(tape, store, a_n)?.add(a_n)?;
        self.norm2.forward(tape, store, c)
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: AttentionLayer,
    pub norm1: LayerNorm,
    pub cross_attn: AttentionLayer,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub norm3: LayerNorm,
}

impl DecoderLayer {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &TransformerConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.model_dim;
        Ok(Self {
            self_attn: AttentionLayer::new(store, &format!("{name}.self_attn"), cfg, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d)?,
            cross_attn: AttentionLayer::new(store, &format!("{name}.cross_attn"), cfg, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, cfg.mlp_hidden, d, Activation::Relu, rng)?,
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), d)?,
        })
    }

    fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, h: Var<'t>, h_e: Var<'t>) -> Result<Var<'t>> {
        let a = self.self_attn.forward(tape, store, h, h, h)?.add(h)?;
        let a_n = self.norm1.forward(tape, store, a)?;
        // decoder state queries the encoder output
        let a2 = self.cross_attn.forward(tape, store, a_n, h_e, h_e)?.add(a_n)?;
        let a2_n = self.norm2.forward(tape, store, a2)?;
        let c = self.mlp.forward(tape, store, a2_n)?.add(a2_n)?;
        self.norm3.forward(tape, store, c)
    }
}

/// Encoder-decoder stack with input embeddings and an output projection.
#[derive(Debug, Clone)]
pub struct Transformer {
    pub cfg: TransformerConfig,
    pub enc_embed: Dense,
    pub dec_embed: Dense,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub out: Dense,
}

impl Transformer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: TransformerConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let enc_embed = Dense::new(store, &format!("{name}.enc_embed"), cfg.input_dim, d, Activation::Identity, rng)?;
        let dec_embed = Dense::new(store, &format!("{name}.dec_embed"), cfg.target_dim, d, Activation::Identity, rng)?;
        let encoder = (0..cfg.num_layers)
            .map(|l| EncoderLayer::new(store, &format!("{name}.enc.layer{l}"), &cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..cfg.num_layers)
            .map(|l| DecoderLayer::new(store, &format!("{name}.dec.layer{l}"), &cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        let out = Dense::new(store, &format!("{name}.out"), d, cfg.output_dim, Activation::Identity, rng)?;
        Ok(Self {
            cfg,
            enc_embed,
            dec_embed,
            encoder,
            decoder,
            out,
        })
    }

    /// Linear embedding of a raw sequence plus the position code.
    pub fn embed_and_position<'t>(
        tape: &'t Tape,
        store: &ParamStore,
        embed: &Dense,
        x: Var<'t>,
    ) -> Result<Var<'t>> {
        let (x, was_matrix) = to_batched(x)?;
        let e = embed.forward(tape, store, x)?;
        let s = e.shape();
        let pe = positional_encoding(s[1], s[2])?;
        let pe = tape.constant(&pe.reshape(&[s[1] * s[2]])?);
        let flat = e.reshape(&[s[0], s[1] * s[2]])?.broadcast_rows(pe)?;
        restore(flat.reshape(&s)?, was_matrix)
    }

    pub fn encode<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let (mut h, was_matrix) = to_batched(x)?;
        for layer in &self.encoder {
            h = layer.forward(tape, store, h)?;
        }
        restore(h, was_matrix)
    }

    pub fn decode<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>, h_e: Var<'t>) -> Result<Var<'t>> {
        let (mut h, was_matrix) = to_batched(x)?;
        let (h_e, _) = to_batched(h_e)?;
        for layer in &self.decoder {
            h = layer.forward(tape, store, h, h_e)?;
        }
        restore(h, was_matrix)
    }

    /// `source` feeds the encoder, `target` the decoder; the result has the
    /// decoder's length and `output_dim` features.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, source: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
        let src = Self::embed_and_position(tape, store, &self.enc_embed, source)?;
        let tgt = Self::embed_and_position(tape, store, &self.dec_embed, target)?;
        let h_e = self.encode(tape, store, src)?;
        let h = self.decode(tape, store, tgt, h_e)?;
        self.out.forward(tape, store, h)
    }
}
