//! Iterative cross masked attention refinement.
//!
//! One step runs self-attention on each stream, cross masked attention in the
//! configured direction(s), then prototype segmentation of the query against
//! prototypes pooled from the enhanced support features. The thresholded
//! query mask of one step gates the next step's attention.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::attention::{
    cross_masked_attention, self_attention_block, AttentionConfig, MhaParams, TokenSequence,
};
use crate::error::{Error, Result};
use crate::params::{Bindings, ParamStore};
use crate::prototype::{
    binary_class_masks, double_threshold, foreground_channel, masked_average_pooling,
    prototype_segment, MaskPair, ProtoConfig,
};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const MAX_ITERATIONS: usize = 5;

/// Which streams receive cross masked attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum CrossMode {
    /// Support enhances the query only.
    SupportToQuery,
    /// Query enhances the support only.
    QueryToSupport,
    #[default]
    Bidirectional,
}

impl CrossMode {
    pub const ALL: [CrossMode; 3] = [
        CrossMode::SupportToQuery,
        CrossMode::QueryToSupport,
        CrossMode::Bidirectional,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CrossMode::SupportToQuery => "s2q",
            CrossMode::QueryToSupport => "q2s",
            CrossMode::Bidirectional => "bidir",
        }
    }

    fn enhances_query(self) -> bool {
        self != CrossMode::QueryToSupport
    }

    fn enhances_support(self) -> bool {
        self != CrossMode::SupportToQuery
    }
}

impl fmt::Display for CrossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CrossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s2q" => Ok(CrossMode::SupportToQuery),
            "q2s" => Ok(CrossMode::QueryToSupport),
            "bidir" => Ok(CrossMode::Bidirectional),
            other => Err(Error::Config(format!(
                "unknown cross mode {other:?} (expected s2q, q2s or bidir)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RefineConfig {
    pub num_iterations: usize,
    /// Share one parameter set across all iterations.
    pub tied_weights: bool,
    pub mode: CrossMode,
    /// Add a Dice term for every intermediate iteration, not just the last.
    pub deep_supervision: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            num_iterations: 4,
            tied_weights: false,
            mode: CrossMode::Bidirectional,
            deep_supervision: false,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_ITERATIONS).contains(&self.num_iterations) {
            return Err(Error::Config(format!(
                "depth {} outside 1..={MAX_ITERATIONS}",
                self.num_iterations
            )));
        }
        Ok(())
    }

    /// Number of distinct parameter sets.
    pub fn param_sets(&self) -> usize {
        if self.tied_weights {
            1
        } else {
            self.num_iterations
        }
    }
}

/// The four attention blocks of one refinement step.
#[derive(Clone, Copy, Debug)]
pub struct CmatParams {
    pub self_support: MhaParams,
    pub self_query: MhaParams,
    /// Enhances the support stream (source: query).
    pub cross_support: MhaParams,
    /// Enhances the query stream (source: support).
    pub cross_query: MhaParams,
}

const BLOCKS: [&str; 4] = ["self_support", "self_query", "cross_support", "cross_query"];

fn set_prefix(set: usize) -> String {
    format!("cmat.{set}")
}

impl CmatParams {
    pub fn init<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        set: usize,
        cfg: &AttentionConfig,
        rng: &mut R,
    ) -> Result<()> {
        let prefix = set_prefix(set);
        for block in BLOCKS {
            MhaParams::init(store, &format!("{prefix}.{block}"), cfg, rng)?;
        }
        Ok(())
    }

    pub fn bind(b: &Bindings, set: usize) -> Result<Self> {
        let prefix = set_prefix(set);
        let get = |block: &str| MhaParams::bind(b, &format!("{prefix}.{block}"));
        Ok(CmatParams {
            self_support: get(BLOCKS[0])?,
            self_query: get(BLOCKS[1])?,
            cross_support: get(BLOCKS[2])?,
            cross_query: get(BLOCKS[3])?,
        })
    }

    /// Parameter sets for every iteration, repeating set 0 when tied.
    pub fn bind_all(b: &Bindings, cfg: &RefineConfig) -> Result<Vec<Self>> {
        (0..cfg.num_iterations)
            .map(|i| CmatParams::bind(b, if cfg.tied_weights { 0 } else { i }))
            .collect()
    }

    pub fn init_all<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        refine: &RefineConfig,
        attn: &AttentionConfig,
        rng: &mut R,
    ) -> Result<()> {
        (0..refine.param_sets()).try_for_each(|set| CmatParams::init(store, set, attn, rng))
    }
}

/// Support/query features plus the current query masks.
#[derive(Clone, Debug)]
pub struct CmatState<F: Scalar = f32> {
    /// `[D×h×w]`
    pub support: Var,
    /// `[D×h×w]`
    pub query: Var,
    pub masks: MaskPair<F>,
    /// Differentiable foreground probability behind `masks`, `[h×w]`.
    pub probabilities: Var,
    pub iteration: usize,
}

impl<F: Scalar> CmatState<F> {
    /// State from features and a foreground probability map; the masks are
    /// read off the probability values.
    pub fn new(
        tape: &Tape<F>,
        support: Var,
        query: Var,
        probabilities: Var,
        proto: &ProtoConfig,
        iteration: usize,
    ) -> Result<Self> {
        let (ss, sq, sp) = (tape.shape(support), tape.shape(query), tape.shape(probabilities));
        if ss != sq || ss.rank() != 3 || sp.dims() != &ss.dims()[1..] {
            return Err(Error::dim(
                "cmat_state",
                format!("support {ss}, query {sq}, probabilities {sp}"),
            ));
        }
        Ok(CmatState {
            support,
            query,
            masks: double_threshold(tape.value(probabilities), proto)?,
            probabilities,
            iteration,
        })
    }
}

/// Prototype segmentation of `query` against background/foreground
/// prototypes pooled from `support` under `support_mask[h×w]`. Returns the
/// foreground probability `[h×w]`.
pub fn proto_head<F: Scalar>(
    tape: &mut Tape<F>,
    support: Var,
    query: Var,
    support_mask: &Tensor<F>,
    proto: &ProtoConfig,
) -> Result<Var> {
    let s = tape.shape(support).clone();
    let (d, h, w) = (s.dim(0), s.dim(1), s.dim(2));
    let class_masks = binary_class_masks(support_mask)?;
    let batched = tape.reshape(support, &[1, d, h, w])?;
    let prototypes = masked_average_pooling(tape, batched, &class_masks)?;
    let probs = prototype_segment(tape, query, &prototypes, proto)?;
    foreground_channel(tape, probs)
}

pub fn cmat_step<F: Scalar>(
    tape: &mut Tape<F>,
    state: &CmatState<F>,
    support_mask: &Tensor<F>,
    params: &CmatParams,
    attn: &AttentionConfig,
    proto: &ProtoConfig,
    mode: CrossMode,
) -> Result<CmatState<F>> {
    let s = tape.shape(state.support).clone();
    let (h, w) = (s.dim(1), s.dim(2));
    if support_mask.dims() != [h, w] || state.masks.dilated.dims() != [h, w] {
        return Err(Error::dim(
            "cmat_step",
            format!(
                "features {s}, support mask {}, query mask {}",
                support_mask.shape(),
                state.masks.dilated.shape()
            ),
        ));
    }
    let tokens_s = TokenSequence::from_feature_map(tape, state.support)?;
    let tokens_q = TokenSequence::from_feature_map(tape, state.query)?;
    let tokens_s = self_attention_block(tape, &tokens_s, &params.self_support, attn)?;
    let tokens_q = self_attention_block(tape, &tokens_q, &params.self_query, attn)?;

    let query_gate = state.masks.dilated.reshape(&[h * w])?;
    let support_gate = support_mask.reshape(&[h * w])?;
    let enhanced_s = if mode.enhances_support() {
        cross_masked_attention(tape, &tokens_q, &tokens_s, &query_gate, &params.cross_support, attn)?
    } else {
        tokens_s
    };
    let enhanced_q = if mode.enhances_query() {
        cross_masked_attention(tape, &tokens_s, &tokens_q, &support_gate, &params.cross_query, attn)?
    } else {
        tokens_q
    };

    let support = enhanced_s.to_feature_map(tape)?;
    let query = enhanced_q.to_feature_map(tape)?;
    let probabilities = proto_head(tape, support, query, support_mask, proto)?;
    CmatState::new(tape, support, query, probabilities, proto, state.iteration + 1)
}

/// Final state plus every state produced along the way (excluding the
/// initial one).
#[derive(Clone, Debug)]
pub struct Refinement<F: Scalar = f32> {
    pub last: CmatState<F>,
    pub trace: Vec<CmatState<F>>,
}

/// Applies one [`cmat_step`] per entry of `params`. An empty slice returns
/// the initial state with an empty trace.
pub fn refine<F: Scalar>(
    tape: &mut Tape<F>,
    initial: CmatState<F>,
    support_mask: &Tensor<F>,
    params: &[CmatParams],
    attn: &AttentionConfig,
    proto: &ProtoConfig,
    mode: CrossMode,
) -> Result<Refinement<F>> {
    let mut trace = Vec::with_capacity(params.len());
    let mut state = initial;
    for p in params {
        state = cmat_step(tape, &state, support_mask, p, attn, proto, mode)?;
        trace.push(state.clone());
    }
    Ok(Refinement { last: state, trace })
}
