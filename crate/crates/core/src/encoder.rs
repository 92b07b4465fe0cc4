//! Mask incorporated feature extraction.
//!
//! A small shared CNN encodes query and support images. The support mask is
//! pooled against the support features, broadcast back over the grid and
//! concatenated onto both streams; a per-pixel cosine map against the pooled
//! vector is appended to the query stream, and a two-layer 1×1 classifier
//! turns the result into an initial query probability map.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bindings, Conv, ParamStore};
use crate::prototype;
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    pub strides: Vec<usize>,
    /// Feature width D; equals the last stage's channel count.
    pub embed_dim: usize,
    /// Hidden width of the initial-mask classifier.
    pub classifier_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 1,
            stage_channels: vec![16, 32, 64],
            strides: vec![1, 2, 2],
            embed_dim: 64,
            classifier_hidden: 32,
        }
    }
}

impl EncoderConfig {
    /// Same stage layout with every width scaled so the last stage is `embed_dim`.
    pub fn with_embed_dim(embed_dim: usize) -> Self {
        let base = EncoderConfig::default();
        let last = *base.stage_channels.last().expect("non-empty");
        EncoderConfig {
            stage_channels: base
                .stage_channels
                .iter()
                .map(|&c| (c * embed_dim / last).max(1))
                .collect(),
            embed_dim,
            classifier_hidden: (embed_dim / 2).max(1),
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.len() != self.strides.len() {
            return Err(Error::Config(format!(
                "encoder needs matching non-empty stage_channels and strides, got {} and {}",
                self.stage_channels.len(),
                self.strides.len()
            )));
        }
        if self.stage_channels.last() != Some(&self.embed_dim) {
            return Err(Error::Config(format!(
                "last stage width {:?} must equal embed_dim {}",
                self.stage_channels.last(),
                self.embed_dim
            )));
        }
        if self.in_channels == 0
            || self.classifier_hidden == 0
            || self.strides.contains(&0)
            || self.stage_channels.contains(&0)
        {
            return Err(Error::Config("encoder widths and strides must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }
}

/// Encoder output `[D×h×w]` and its downscale factor.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub tensor: Var,
    pub stride: usize,
}

impl FeatureMap {
    /// (D, h, w)
    pub fn extents<F: Scalar>(&self, tape: &Tape<F>) -> (usize, usize, usize) {
        let s = tape.shape(self.tensor);
        (s.dim(0), s.dim(1), s.dim(2))
    }
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub stages: Vec<[Conv; 2]>,
}

impl EncoderParams {
    pub fn init<F: Scalar, R: Rng>(store: &mut ParamStore<F>, cfg: &EncoderConfig, rng: &mut R) -> Result<()> {
        let mut cin = cfg.in_channels;
        for (i, &c) in cfg.stage_channels.iter().enumerate() {
            Conv::init(store, &format!("encoder.s{i}.c0"), cin, c, 3, 2.0, rng)?;
            Conv::init(store, &format!("encoder.s{i}.c1"), c, c, 3, 2.0, rng)?;
            cin = c;
        }
        Ok(())
    }

    pub fn bind(b: &Bindings, cfg: &EncoderConfig) -> Result<Self> {
        let stages = cfg
            .strides
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                Ok([
                    Conv::bind(b, &format!("encoder.s{i}.c0"), s)?,
                    Conv::bind(b, &format!("encoder.s{i}.c1"), 1)?,
                ])
            })
            .collect::<Result<_>>()?;
        Ok(EncoderParams { stages })
    }
}

/// Runs the CNN on `image[C×H×W]`.
pub fn extract_features<F: Scalar>(
    tape: &mut Tape<F>,
    image: Var,
    params: &EncoderParams,
    cfg: &EncoderConfig,
) -> Result<FeatureMap> {
    let s = tape.shape(image).clone();
    if s.rank() != 3 || s.dim(0) != cfg.in_channels {
        return Err(Error::dim(
            "extract_features",
            format!("expected [{}×H×W], got {s}", cfg.in_channels),
        ));
    }
    let stride = cfg.total_stride();
    if s.dim(1) % stride != 0 || s.dim(2) % stride != 0 {
        return Err(Error::Config(format!(
            "image {}×{} not divisible by total encoder stride {stride}",
            s.dim(1),
            s.dim(2)
        )));
    }
    let mut x = image;
    for stage in &params.stages {
        for conv in stage {
            let y = conv.forward(tape, x)?;
            x = tape.relu(y);
        }
    }
    Ok(FeatureMap { tensor: x, stride })
}

/// Nearest-neighbour resize of a binary `[H×W]` mask to `[h×w]`, sampling the
/// source pixel under each target cell centre.
pub fn downsample_mask<F: Scalar>(mask: &Tensor<F>, h: usize, w: usize) -> Result<Tensor<F>> {
    if mask.shape().rank() != 2 {
        return Err(Error::dim("downsample_mask", format!("expected [H×W], got {}", mask.shape())));
    }
    let (sh, sw) = (mask.dims()[0], mask.dims()[1]);
    let half = F::lit(0.5);
    Tensor::from_fn(&[h, w], |i| {
        let (y, x) = (i / w, i % w);
        let sy = ((2 * y + 1) * sh / (2 * h)).min(sh - 1);
        let sx = ((2 * x + 1) * sw / (2 * w)).min(sw - 1);
        if mask.data()[sy * sw + sx] >= half {
            F::one()
        } else {
            F::zero()
        }
    })
}

/// Both streams augmented with the broadcast pooled support vector.
#[derive(Clone, Debug)]
pub struct MaskIncorporation<F: Scalar> {
    /// `[2D×h×w]`
    pub query: Var,
    /// `[2D×h×w]`
    pub support: Var,
    /// `[D]`
    pub pooled: Var,
    /// Support mask at feature resolution, `[h×w]`.
    pub support_mask: Tensor<F>,
}

pub fn incorporate_mask<F: Scalar>(
    tape: &mut Tape<F>,
    fq: &FeatureMap,
    fs: &FeatureMap,
    support_mask: &Tensor<F>,
) -> Result<MaskIncorporation<F>> {
    let (d, h, w) = fs.extents(tape);
    if fq.extents(tape) != (d, h, w) {
        return Err(Error::dim(
            "incorporate_mask",
            format!("query {} vs support {}", tape.shape(fq.tensor), tape.shape(fs.tensor)),
        ));
    }
    if !support_mask.is_binary() {
        return Err(Error::Validation("support mask must be binary".into()));
    }
    let small = downsample_mask(support_mask, h, w)?;
    let class_mask = small.reshape(&[1, h, w, 1])?;
    let batched = tape.reshape(fs.tensor, &[1, d, h, w])?;
    let pooled = prototype::masked_average_pooling(tape, batched, &class_mask)?[0].vector;

    let column = tape.reshape(pooled, &[d, 1])?;
    let ones = tape.constant(Tensor::ones(&[1, h * w])?);
    let expanded = tape.matmul(column, ones)?;
    let expanded = tape.reshape(expanded, &[d, h, w])?;
    let query = tape.concat(&[fq.tensor, expanded], 0)?;
    let support = tape.concat(&[fs.tensor, expanded], 0)?;
    Ok(MaskIncorporation {
        query,
        support,
        pooled,
        support_mask: small,
    })
}

/// Cosine similarity between every query location and the pooled support
/// vector, `[1×h×w]`. A zero pooled vector yields an all-zero map.
pub fn similarity_map<F: Scalar>(tape: &mut Tape<F>, fq: &FeatureMap, pooled: Var) -> Result<Var> {
    let (d, h, w) = fq.extents(tape);
    let flat = tape.reshape(fq.tensor, &[d, h * w])?;
    let tokens = tape.transpose(flat)?;
    let cos = tape.cosine_rows(tokens, pooled)?;
    tape.reshape(cos, &[1, h, w])
}

#[derive(Clone, Copy, Debug)]
pub struct ClassifierParams {
    pub hidden: Conv,
    pub out: Conv,
}

impl ClassifierParams {
    pub fn init<F: Scalar, R: Rng>(store: &mut ParamStore<F>, cfg: &EncoderConfig, rng: &mut R) -> Result<()> {
        let cin = 2 * cfg.embed_dim + 1;
        Conv::init(store, "mife.classifier.hidden", cin, cfg.classifier_hidden, 1, 2.0, rng)?;
        Conv::init(store, "mife.classifier.out", cfg.classifier_hidden, 1, 1, 1.0, rng)
    }

    pub fn bind(b: &Bindings) -> Result<Self> {
        Ok(ClassifierParams {
            hidden: Conv::bind(b, "mife.classifier.hidden", 1)?,
            out: Conv::bind(b, "mife.classifier.out", 1)?,
        })
    }
}

/// Concatenates the similarity map onto the augmented query features and
/// applies 1×1 conv → ReLU → 1×1 conv → sigmoid. Returns `[h×w]`.
pub fn classify_initial_mask<F: Scalar>(
    tape: &mut Tape<F>,
    augmented_query: Var,
    sim: Var,
    params: &ClassifierParams,
) -> Result<Var> {
    let (sa, ss) = (tape.shape(augmented_query).clone(), tape.shape(sim).clone());
    if sa.rank() != 3 || ss.dims() != [1, sa.dim(1), sa.dim(2)] {
        return Err(Error::dim("classify_initial_mask", format!("features {sa}, similarity {ss}")));
    }
    let x = tape.concat(&[augmented_query, sim], 0)?;
    let hidden = params.hidden.forward(tape, x)?;
    let hidden = tape.relu(hidden);
    let logits = params.out.forward(tape, hidden)?;
    let probs = tape.sigmoid(logits);
    tape.reshape(probs, &[sa.dim(1), sa.dim(2)])
}

/// All MIFE parameters, including the 1×1 projections that bring the
/// augmented streams back to width D for the attention blocks.
#[derive(Clone, Debug)]
pub struct MifeParams {
    pub encoder: EncoderParams,
    pub classifier: ClassifierParams,
    pub query_proj: Conv,
    pub support_proj: Conv,
}

impl MifeParams {
    pub fn init<F: Scalar, R: Rng>(store: &mut ParamStore<F>, cfg: &EncoderConfig, rng: &mut R) -> Result<()> {
        EncoderParams::init(store, cfg, rng)?;
        ClassifierParams::init(store, cfg, rng)?;
        let d = cfg.embed_dim;
        Conv::init(store, "mife.query_proj", 2 * d + 1, d, 1, 1.0, rng)?;
        Conv::init(store, "mife.support_proj", 2 * d, d, 1, 1.0, rng)
    }

    pub fn bind(b: &Bindings, cfg: &EncoderConfig) -> Result<Self> {
        Ok(MifeParams {
            encoder: EncoderParams::bind(b, cfg)?,
            classifier: ClassifierParams::bind(b)?,
            query_proj: Conv::bind(b, "mife.query_proj", 1)?,
            support_proj: Conv::bind(b, "mife.support_proj", 1)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct MifeOutput<F: Scalar> {
    /// Initial query features `[D×h×w]`.
    pub query: Var,
    /// Initial support features `[D×h×w]`.
    pub support: Var,
    /// Initial query foreground probability `[h×w]`.
    pub probabilities: Var,
    pub similarity: Var,
    pub support_mask: Tensor<F>,
}

pub fn mife_forward<F: Scalar>(
    tape: &mut Tape<F>,
    query_image: Var,
    support_image: Var,
    support_mask: &Tensor<F>,
    params: &MifeParams,
    cfg: &EncoderConfig,
) -> Result<MifeOutput<F>> {
    let fq = extract_features(tape, query_image, &params.encoder, cfg)?;
    let fs = extract_features(tape, support_image, &params.encoder, cfg)?;
    let mixed = incorporate_mask(tape, &fq, &fs, support_mask)?;
    let sim = similarity_map(tape, &fq, mixed.pooled)?;
    let probabilities = classify_initial_mask(tape, mixed.query, sim, &params.classifier)?;
    let q_in = tape.concat(&[mixed.query, sim], 0)?;
    let query = params.query_proj.forward(tape, q_in)?;
    let support = params.support_proj.forward(tape, mixed.support)?;
    Ok(MifeOutput {
        query,
        support,
        probabilities,
        similarity: sim,
        support_mask: mixed.support_mask,
    })
}
