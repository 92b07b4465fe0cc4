//! Self-attention and cross masked attention over flattened feature maps.
//!
//! Both block types share one layout: multi-head attention, residual add and
//! layer norm, then a two-layer token-wise MLP with a second residual and
//! layer norm. In the cross variant queries come from the stream being
//! enhanced while keys and values come from the other stream, and logits at
//! the other stream's background tokens are filled with a large negative
//! value so those tokens receive no weight.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bindings, Linear, Norm, ParamStore};
use crate::tensor::{Scalar, Tape, Tensor, Var, Warning};

/// Additive logit fill for masked-out keys.
pub const MASK_FILL: f64 = -1e9;

/// Initial variance gain of the projections that close each residual
/// branch. Keeping it small starts every block near the identity, so a deep
/// stack does not blur all tokens together before training begins.
pub const BRANCH_GAIN: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
}

impl AttentionConfig {
    pub fn new(embed_dim: usize) -> Self {
        AttentionConfig {
            embed_dim,
            num_heads: 4,
            mlp_hidden: embed_dim,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.embed_dim == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.mlp_hidden == 0 {
            return Err(Error::Config("mlp_hidden must be ≥ 1".into()));
        }
        Ok(())
    }
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig::new(64)
    }
}

/// Row-major flattening of a `[D×h×w]` map into tokens `[T×D]`, T = h·w.
#[derive(Clone, Copy, Debug)]
pub struct TokenSequence {
    pub tensor: Var,
    pub origin: (usize, usize),
}

impl TokenSequence {
    pub fn from_feature_map<F: Scalar>(tape: &mut Tape<F>, map: Var) -> Result<Self> {
        let s = tape.shape(map).clone();
        if s.rank() != 3 {
            return Err(Error::dim("flatten", format!("expected [D×h×w], got {s}")));
        }
        let (d, h, w) = (s.dim(0), s.dim(1), s.dim(2));
        let flat = tape.reshape(map, &[d, h * w])?;
        Ok(TokenSequence {
            tensor: tape.transpose(flat)?,
            origin: (h, w),
        })
    }

    pub fn to_feature_map<F: Scalar>(&self, tape: &mut Tape<F>) -> Result<Var> {
        let d = tape.shape(self.tensor).dim(1);
        let t = tape.transpose(self.tensor)?;
        tape.reshape(t, &[d, self.origin.0, self.origin.1])
    }

    pub fn len<F: Scalar>(&self, tape: &Tape<F>) -> usize {
        tape.shape(self.tensor).dim(0)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MhaParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
    pub norm_attn: Norm,
    pub norm_mlp: Norm,
}

impl MhaParams {
    pub fn init<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        prefix: &str,
        cfg: &AttentionConfig,
        rng: &mut R,
    ) -> Result<()> {
        let d = cfg.embed_dim;
        for name in ["query", "key", "value"] {
            Linear::init(store, &format!("{prefix}.{name}"), d, d, 1.0, rng)?;
        }
        Linear::init(store, &format!("{prefix}.out"), d, d, BRANCH_GAIN, rng)?;
        Linear::init(store, &format!("{prefix}.mlp_in"), d, cfg.mlp_hidden, 2.0, rng)?;
        Linear::init(store, &format!("{prefix}.mlp_out"), cfg.mlp_hidden, d, BRANCH_GAIN, rng)?;
        Norm::init(store, &format!("{prefix}.norm_attn"), d)?;
        Norm::init(store, &format!("{prefix}.norm_mlp"), d)
    }

    pub fn bind(b: &Bindings, prefix: &str) -> Result<Self> {
        let lin = |n: &str| Linear::bind(b, &format!("{prefix}.{n}"));
        Ok(MhaParams {
            query: lin("query")?,
            key: lin("key")?,
            value: lin("value")?,
            out: lin("out")?,
            mlp_in: lin("mlp_in")?,
            mlp_out: lin("mlp_out")?,
            norm_attn: Norm::bind(b, &format!("{prefix}.norm_attn"))?,
            norm_mlp: Norm::bind(b, &format!("{prefix}.norm_mlp"))?,
        })
    }
}

/// `A = q·kᵀ / √d` for `q[Tq×d']`, `k[Tk×d']`.
pub fn attention_scores<F: Scalar>(tape: &mut Tape<F>, q: Var, k: Var, d: usize) -> Result<Var> {
    let (sq, sk) = (tape.shape(q).clone(), tape.shape(k).clone());
    if sq.rank() != 2 || sk.rank() != 2 || sq.dim(1) != sk.dim(1) {
        return Err(Error::dim("attention_scores", format!("q {sq} vs k {sk}")));
    }
    let kt = tape.transpose(k)?;
    let a = tape.matmul(q, kt)?;
    Ok(tape.scale(a, F::one() / F::lit(d as f64).sqrt()))
}

/// Row-softmax of the scores, with `key_mask[Tk]` zeros filled before the softmax.
pub fn attention_weights<F: Scalar>(
    tape: &mut Tape<F>,
    q: Var,
    k: Var,
    d: usize,
    key_mask: Option<&Tensor<F>>,
) -> Result<Var> {
    let mut a = attention_scores(tape, q, k, d)?;
    if let Some(m) = key_mask {
        a = tape.masked_fill(a, m, F::lit(MASK_FILL))?;
    }
    tape.softmax(a, 1)
}

/// Multi-head attention output after the output projection, plus the
/// per-head weight matrices.
pub struct MhaOutput {
    pub output: Var,
    pub weights: Vec<Var>,
}

pub fn multi_head_attention<F: Scalar>(
    tape: &mut Tape<F>,
    dst: Var,
    src: Var,
    key_mask: Option<&Tensor<F>>,
    params: &MhaParams,
    cfg: &AttentionConfig,
) -> Result<MhaOutput> {
    let (sd, ss) = (tape.shape(dst).clone(), tape.shape(src).clone());
    if sd.rank() != 2 || ss.rank() != 2 || sd.dim(1) != cfg.embed_dim || ss.dim(1) != cfg.embed_dim {
        return Err(Error::dim(
            "multi_head_attention",
            format!("dst {sd}, src {ss}, embed_dim {}", cfg.embed_dim),
        ));
    }
    if let Some(m) = key_mask {
        if m.dims() != [ss.dim(0)] {
            return Err(Error::dim(
                "multi_head_attention",
                format!("mask {} for {} source tokens", m.shape(), ss.dim(0)),
            ));
        }
    }
    let q = params.query.forward(tape, dst)?;
    let k = params.key.forward(tape, src)?;
    let v = params.value.forward(tape, src)?;
    let hd = cfg.head_dim();
    let mut heads = Vec::with_capacity(cfg.num_heads);
    let mut weights = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let qh = tape.narrow(q, 1, h * hd, hd)?;
        let kh = tape.narrow(k, 1, h * hd, hd)?;
        let vh = tape.narrow(v, 1, h * hd, hd)?;
        let w = attention_weights(tape, qh, kh, hd, key_mask)?;
        heads.push(tape.matmul(w, vh)?);
        weights.push(w);
    }
    let joined = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat(&heads, 1)?
    };
    Ok(MhaOutput {
        output: params.out.forward(tape, joined)?,
        weights,
    })
}

/// `LN(h + MLP(h))` where `h = LN(dst + attended)`; `attended = None` skips
/// the attention term.
fn residual_tail<F: Scalar>(
    tape: &mut Tape<F>,
    dst: Var,
    attended: Option<Var>,
    params: &MhaParams,
) -> Result<Var> {
    let h = match attended {
        Some(a) => tape.add(dst, a)?,
        None => dst,
    };
    let h = params.norm_attn.forward(tape, h)?;
    let m = params.mlp_in.forward(tape, h)?;
    let m = tape.relu(m);
    let m = params.mlp_out.forward(tape, m)?;
    let y = tape.add(h, m)?;
    params.norm_mlp.forward(tape, y)
}

pub fn self_attention_block<F: Scalar>(
    tape: &mut Tape<F>,
    x: &TokenSequence,
    params: &MhaParams,
    cfg: &AttentionConfig,
) -> Result<TokenSequence> {
    let attn = multi_head_attention(tape, x.tensor, x.tensor, None, params, cfg)?;
    Ok(TokenSequence {
        tensor: residual_tail(tape, x.tensor, Some(attn.output), params)?,
        origin: x.origin,
    })
}

/// Enhances `dst` with foreground information from `src`.
///
/// `src_mask[T_src]` marks the source tokens that may be attended to. An
/// all-zero mask skips attention entirely and records
/// [`Warning::EmptyAttentionMask`].
pub fn cross_masked_attention<F: Scalar>(
    tape: &mut Tape<F>,
    src: &TokenSequence,
    dst: &TokenSequence,
    src_mask: &Tensor<F>,
    params: &MhaParams,
    cfg: &AttentionConfig,
) -> Result<TokenSequence> {
    if src_mask.dims() != [src.len(tape)] {
        return Err(Error::dim(
            "cross_masked_attention",
            format!("mask {} for {} source tokens", src_mask.shape(), src.len(tape)),
        ));
    }
    if !src_mask.is_binary() {
        return Err(Error::Validation("attention mask must be binary".into()));
    }
    let attended = if src_mask.sum() == F::zero() {
        tape.warn(Warning::EmptyAttentionMask);
        None
    } else {
        let attn = multi_head_attention(tape, dst.tensor, src.tensor, Some(src_mask), params, cfg)?;
        Some(attn.output)
    };
    Ok(TokenSequence {
        tensor: residual_tail(tape, dst.tensor, attended, params)?,
        origin: dst.origin,
    })
}
