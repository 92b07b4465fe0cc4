//! The full few-shot segmenter: feature extraction with mask incorporation,
//! iterative refinement, and bilinear upsampling back to image resolution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::AttentionConfig;
use crate::encoder::{mife_forward, EncoderConfig, MifeOutput, MifeParams};
use crate::error::{Error, Result};
use crate::params::{Bindings, ParamStore};
use crate::prototype::{soft_dice_loss, ProtoConfig};
use crate::refine::{refine, CmatParams, CmatState, RefineConfig, Refinement};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub attention: AttentionConfig,
    pub proto: ProtoConfig,
    pub refine: RefineConfig,
    /// Weight of the Dice term on the initial (pre-refinement) prediction.
    pub initial_loss_weight: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::with_embed_dim(64)
    }
}

impl ModelConfig {
    pub fn with_embed_dim(embed_dim: usize) -> Self {
        ModelConfig {
            encoder: EncoderConfig::with_embed_dim(embed_dim),
            attention: AttentionConfig::new(embed_dim),
            proto: ProtoConfig::default(),
            refine: RefineConfig::default(),
            initial_loss_weight: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.attention.validate()?;
        self.proto.validate()?;
        self.refine.validate()?;
        if self.attention.embed_dim != self.encoder.embed_dim {
            return Err(Error::Config(format!(
                "attention width {} differs from encoder width {}",
                self.attention.embed_dim, self.encoder.embed_dim
            )));
        }
        if !(self.initial_loss_weight >= 0.0 && self.initial_loss_weight.is_finite()) {
            return Err(Error::Config("initial_loss_weight must be finite and ≥ 0".into()));
        }
        Ok(())
    }
}

/// Bilinear interpolation weights `[out×inp]` with half-pixel centres and
/// edge clamping. Each row sums to 1.
pub fn bilinear_matrix<F: Scalar>(out: usize, inp: usize) -> Result<Tensor<F>> {
    let mut data = vec![F::zero(); out * inp];
    let ratio = inp as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (inp - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(inp - 1);
        let frac = src - i0 as f64;
        data[o * inp + i0] += F::lit(1.0 - frac);
        data[o * inp + i1] += F::lit(frac);
    }
    Tensor::new(&[out, inp], data)
}

/// `U_h · P · U_wᵀ` for a `[h×w]` map.
pub fn upsample<F: Scalar>(tape: &mut Tape<F>, map: Var, height: usize, width: usize) -> Result<Var> {
    let s = tape.shape(map).clone();
    if s.rank() != 2 {
        return Err(Error::dim("upsample", format!("expected [h×w], got {s}")));
    }
    if s.dims() == [height, width] {
        return Ok(map);
    }
    let uh = tape.constant(bilinear_matrix(height, s.dim(0))?);
    let uwt = tape.constant(bilinear_matrix::<F>(width, s.dim(1))?.transpose2()?);
    let rows = tape.matmul(uh, map)?;
    tape.matmul(rows, uwt)
}

trait Transpose2: Sized {
    fn transpose2(&self) -> Result<Self>;
}

impl<F: Scalar> Transpose2 for Tensor<F> {
    fn transpose2(&self) -> Result<Self> {
        let (r, c) = (self.dims()[0], self.dims()[1]);
        Tensor::from_fn(&[c, r], |i| self.data()[(i % r) * c + i / r])
    }
}

/// Images `[C×H×W]` and the support mask `[H×W]` of a 1-way 1-shot task.
#[derive(Clone, Copy, Debug)]
pub struct EpisodeInput<'a, F: Scalar> {
    pub support_image: &'a Tensor<F>,
    pub support_mask: &'a Tensor<F>,
    pub query_image: &'a Tensor<F>,
}

/// Everything a forward pass recorded, with foreground probabilities already
/// upsampled to image resolution.
#[derive(Clone, Debug)]
pub struct ForwardPass<F: Scalar = f32> {
    pub bindings: Bindings,
    pub mife: MifeOutput<F>,
    pub refinement: Refinement<F>,
    /// Upsampled initial probability `[H×W]`.
    pub initial: Var,
    /// Upsampled probability after every iteration, `[H×W]` each.
    pub iterations: Vec<Var>,
}

impl<F: Scalar> ForwardPass<F> {
    /// Final upsampled foreground probability.
    pub fn output(&self) -> Var {
        *self.iterations.last().unwrap_or(&self.initial)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CatNet<F: Scalar = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
}

impl<F: Scalar> CatNet<F> {
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        MifeParams::init(&mut params, &config.encoder, rng)?;
        CmatParams::init_all(&mut params, &config.refine, &config.attention, rng)?;
        Ok(CatNet { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore<F>) -> Result<Self> {
        config.validate()?;
        let expected = CatNet::<F>::init(config.clone(), &mut ChaCha8Rng::seed_from_u64(0))
            .map(|m| m.params)?;
        for (name, t) in expected.iter() {
            match params.get(name) {
                Some(p) if p.dims() == t.dims() => {}
                Some(p) => {
                    return Err(Error::Format(format!(
                        "parameter {name} has shape {}, expected {}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Format(format!("missing parameter {name}"))),
            }
        }
        if params.len() != expected.len() {
            return Err(Error::Format(format!(
                "{} parameters present, model expects {}",
                params.len(),
                expected.len()
            )));
        }
        Ok(CatNet { config, params })
    }

    pub fn cast<G: Scalar>(&self) -> CatNet<G> {
        CatNet {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn forward(&self, tape: &mut Tape<F>, input: EpisodeInput<'_, F>) -> Result<ForwardPass<F>> {
        let bindings = self.params.bind(tape);
        forward_with(tape, bindings, &self.config, input)
    }

    /// Dice on the final output, plus the weighted Dice on the initial
    /// prediction, plus Dice on intermediate iterations under deep supervision.
    pub fn loss(&self, tape: &mut Tape<F>, pass: &ForwardPass<F>, truth: &Tensor<F>) -> Result<Var> {
        episode_loss(tape, pass, truth, &self.config)
    }

    /// Inference without gradients.
    pub fn predict(&self, input: EpisodeInput<'_, F>) -> Result<Prediction<F>> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, input)?;
        let tau = F::lit(self.config.proto.tau);
        let binarize = |v: Var| {
            let p = tape.value(v);
            Tensor::new(
                p.dims(),
                p.data().iter().map(|&x| if x > tau { F::one() } else { F::zero() }).collect(),
            )
        };
        Ok(Prediction {
            mask: binarize(pass.output())?,
            probabilities: tape.value(pass.output()).clone(),
            initial_mask: binarize(pass.initial)?,
            iteration_masks: pass.iterations.iter().map(|&v| binarize(v)).collect::<Result<_>>()?,
            warnings: tape.warnings().total(),
        })
    }
}

/// Forward pass over already-bound parameters.
pub fn forward_with<F: Scalar>(
    tape: &mut Tape<F>,
    bindings: Bindings,
    config: &ModelConfig,
    input: EpisodeInput<'_, F>,
) -> Result<ForwardPass<F>> {
    let (qd, sd, md) = (
        input.query_image.dims(),
        input.support_image.dims(),
        input.support_mask.dims(),
    );
    if qd.len() != 3 || qd != sd || md != &qd[1..] || qd[0] != config.encoder.in_channels {
        return Err(Error::dim(
            "forward",
            format!(
                "query {}, support {}, mask {}",
                input.query_image.shape(),
                input.support_image.shape(),
                input.support_mask.shape()
            ),
        ));
    }
    let (height, width) = (qd[1], qd[2]);
    let mife_params = MifeParams::bind(&bindings, &config.encoder)?;
    let cmat_params = CmatParams::bind_all(&bindings, &config.refine)?;
    let q = tape.constant(input.query_image.clone());
    let s = tape.constant(input.support_image.clone());
    let mife = mife_forward(tape, q, s, input.support_mask, &mife_params, &config.encoder)?;
    let start = CmatState::new(tape, mife.support, mife.query, mife.probabilities, &config.proto, 0)?;
    let refinement = refine(
        tape,
        start,
        &mife.support_mask,
        &cmat_params,
        &config.attention,
        &config.proto,
        config.refine.mode,
    )?;
    let initial = upsample(tape, mife.probabilities, height, width)?;
    let iterations = refinement
        .trace
        .iter()
        .map(|s| upsample(tape, s.probabilities, height, width))
        .collect::<Result<_>>()?;
    Ok(ForwardPass {
        bindings,
        mife,
        refinement,
        initial,
        iterations,
    })
}

pub fn episode_loss<F: Scalar>(
    tape: &mut Tape<F>,
    pass: &ForwardPass<F>,
    truth: &Tensor<F>,
    config: &ModelConfig,
) -> Result<Var> {
    let mut total = soft_dice_loss(tape, pass.output(), truth)?;
    if config.refine.deep_supervision {
        for &v in &pass.iterations[..pass.iterations.len().saturating_sub(1)] {
            let l = soft_dice_loss(tape, v, truth)?;
            total = tape.add(total, l)?;
        }
    }
    if config.initial_loss_weight > 0.0 && !pass.iterations.is_empty() {
        let l = soft_dice_loss(tape, pass.initial, truth)?;
        let l = tape.scale(l, F::lit(config.initial_loss_weight));
        total = tape.add(total, l)?;
    }
    Ok(total)
}

/// Binary masks at image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<F: Scalar = f32> {
    pub mask: Tensor<F>,
    pub probabilities: Tensor<F>,
    pub initial_mask: Tensor<F>,
    pub iteration_masks: Vec<Tensor<F>>,
    pub warnings: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        let mut cfg = ModelConfig::with_embed_dim(8);
        cfg.attention.num_heads = 2;
        cfg.refine.num_iterations = 2;
        cfg
    }

    #[test]
    fn bilinear_rows_are_convex_and_identity_when_equal() {
        let m = bilinear_matrix::<f64>(32, 8).unwrap();
        for r in 0..32 {
            let row = &m.data()[r * 8..(r + 1) * 8];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        let id = bilinear_matrix::<f64>(5, 5).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(id.at(&[i, j]), if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn upsampling_a_constant_is_constant() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::full(&[4, 4], 0.3).unwrap());
        let u = upsample(&mut tape, p, 16, 12).unwrap();
        assert_eq!(tape.shape(u).dims(), &[16, 12]);
        assert!(tape.value(u).data().iter().all(|&v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn forward_shapes_and_probability_range() {
        let model = CatNet::<f64>::init(small(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let img = Tensor::from_fn(&[1, 16, 16], |i| ((i * 13 % 29) as f64 - 14.0) / 9.0).unwrap();
        let mask = Tensor::from_fn(&[16, 16], |i| if (i / 16) < 8 && (i % 16) < 8 { 1.0 } else { 0.0 }).unwrap();
        let input = EpisodeInput {
            support_image: &img,
            support_mask: &mask,
            query_image: &img,
        };
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, input).unwrap();
        assert_eq!(pass.iterations.len(), 2);
        let out = tape.value(pass.output());
        assert_eq!(out.dims(), &[16, 16]);
        assert!(out.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        let loss = model.loss(&mut tape, &pass, &mask).unwrap();
        let l = tape.value(loss).data()[0];
        assert!(l > 0.0 && l < 2.0);
        let pred = model.predict(input).unwrap();
        assert!(pred.mask.is_binary());
        assert_eq!(pred.iteration_masks.len(), 2);
    }

    #[test]
    fn from_parts_rejects_missing_or_misshapen_params() {
        let model = CatNet::<f32>::init(small(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        CatNet::from_parts(model.config.clone(), model.params.clone()).unwrap();
        let mut deeper = model.config.clone();
        deeper.refine.num_iterations = 3;
        assert!(matches!(
            CatNet::from_parts(deeper, model.params.clone()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn mismatched_widths_are_rejected() {
        let mut cfg = small();
        cfg.attention.embed_dim = 16;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
