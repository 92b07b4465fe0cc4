//! Prototypical segmentation head.
//!
//! A prototype per class is the masked average of support features. Each
//! query location is then classified by a softmax over scaled cosine
//! similarities to the prototypes, and the foreground probability is cut
//! twice: a strict mask for evaluation and a looser, dilated mask that gates
//! attention in the next refinement step.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var, Warning};

/// Smoothing constant of the soft Dice loss.
pub const DICE_SMOOTHING: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProtoConfig {
    /// Cosine scaling factor.
    pub alpha: f64,
    /// Strict threshold (evaluation mask).
    pub tau: f64,
    /// Dilation threshold (next-iteration attention mask).
    pub tau_hat: f64,
}

impl Default for ProtoConfig {
    fn default() -> Self {
        ProtoConfig {
            alpha: 20.0,
            tau: 0.5,
            tau_hat: 0.4,
        }
    }
}

impl ProtoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(0.0 < self.tau_hat && self.tau_hat < self.tau && self.tau < 1.0) {
            return Err(Error::Config(format!(
                "thresholds must satisfy 0 < tau_hat < tau < 1, got tau={} tau_hat={}",
                self.tau, self.tau_hat
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Prototype {
    pub class_id: usize,
    /// `[D]`
    pub vector: Var,
}

/// Strict and dilated binary masks cut from one probability map.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPair<F: Scalar = f32> {
    pub mask: Tensor<F>,
    pub dilated: Tensor<F>,
    pub probabilities: Tensor<F>,
}

/// Class masks `[1×h×w×2]` for the 1-way case: channel 0 is the background
/// (complement), channel 1 the foreground.
pub fn binary_class_masks<F: Scalar>(mask: &Tensor<F>) -> Result<Tensor<F>> {
    if mask.shape().rank() != 2 {
        return Err(Error::dim("class_masks", format!("expected [h×w], got {}", mask.shape())));
    }
    if !mask.is_binary() {
        return Err(Error::Validation("support mask must be binary".into()));
    }
    let (h, w) = (mask.dims()[0], mask.dims()[1]);
    let mut data = Vec::with_capacity(h * w * 2);
    for &m in mask.data() {
        data.push(F::one() - m);
        data.push(m);
    }
    Tensor::new(&[1, h, w, 2], data)
}

/// Masked average pooling of `features[K×D×h×w]` under `masks[K×h×w×C]`.
///
/// A shot whose mask is empty for a class contributes a zero vector and
/// records [`Warning::EmptyPoolingMask`]; the average still divides by K.
pub fn masked_average_pooling<F: Scalar>(
    tape: &mut Tape<F>,
    features: Var,
    masks: &Tensor<F>,
) -> Result<Vec<Prototype>> {
    let fs = tape.shape(features).clone();
    if fs.rank() != 4 || masks.shape().rank() != 4 {
        return Err(Error::dim(
            "masked_average_pooling",
            format!("features {fs}, masks {}", masks.shape()),
        ));
    }
    let (shots, d, h, w) = (fs.dim(0), fs.dim(1), fs.dim(2), fs.dim(3));
    let md = masks.dims();
    if md[0] != shots || md[1] != h || md[2] != w {
        return Err(Error::dim(
            "masked_average_pooling",
            format!("features {fs}, masks {}", masks.shape()),
        ));
    }
    if !masks.is_binary() {
        return Err(Error::Validation("pooling masks must be binary".into()));
    }
    let classes = md[3];
    let tokens = h * w;
    let inv_shots = F::one() / F::lit(shots as f64);

    let mut shot_features = Vec::with_capacity(shots);
    for k in 0..shots {
        let f = tape.narrow(features, 0, k, 1)?;
        shot_features.push(tape.reshape(f, &[d, tokens])?);
    }

    let mut prototypes = Vec::with_capacity(classes);
    for c in 0..classes {
        let mut acc: Option<Var> = None;
        for (k, &fk) in shot_features.iter().enumerate() {
            let column: Vec<F> = (0..tokens)
                .map(|t| masks.data()[(k * tokens + t) * classes + c])
                .collect();
            let count: F = column.iter().copied().sum();
            if count == F::zero() {
                tape.warn(Warning::EmptyPoolingMask);
                continue;
            }
            let m = tape.constant(Tensor::new(&[tokens, 1], column)?);
            let pooled = tape.matmul(fk, m)?;
            let pooled = tape.scale(pooled, F::one() / count);
            acc = Some(match acc {
                Some(a) => tape.add(a, pooled)?,
                None => pooled,
            });
        }
        let vector = match acc {
            Some(sum) => {
                let mean = tape.scale(sum, inv_shots);
                tape.reshape(mean, &[d])?
            }
            None => tape.constant(Tensor::zeros(&[d])?),
        };
        prototypes.push(Prototype { class_id: c, vector });
    }
    Ok(prototypes)
}

/// Per-location softmax over classes of `alpha · cos(feature, prototype)`.
///
/// `fq` is `[D×h×w]`; the result is `[h×w×C]` with C = number of prototypes.
pub fn prototype_segment<F: Scalar>(
    tape: &mut Tape<F>,
    fq: Var,
    prototypes: &[Prototype],
    cfg: &ProtoConfig,
) -> Result<Var> {
    if prototypes.len() < 2 {
        return Err(Error::Validation(format!(
            "prototype segmentation needs at least 2 prototypes, got {}",
            prototypes.len()
        )));
    }
    let s = tape.shape(fq).clone();
    if s.rank() != 3 {
        return Err(Error::dim("prototype_segment", format!("expected [D×h×w], got {s}")));
    }
    let (d, h, w) = (s.dim(0), s.dim(1), s.dim(2));
    let flat = tape.reshape(fq, &[d, h * w])?;
    let tokens = tape.transpose(flat)?;
    let mut columns = Vec::with_capacity(prototypes.len());
    for p in prototypes {
        let cos = tape.cosine_rows(tokens, p.vector)?;
        columns.push(tape.reshape(cos, &[h * w, 1])?);
    }
    let logits = tape.concat(&columns, 1)?;
    let logits = tape.scale(logits, F::lit(cfg.alpha));
    let probs = tape.softmax(logits, 1)?;
    tape.reshape(probs, &[h, w, prototypes.len()])
}

/// Foreground channel of a `[h×w×C]` probability map, as `[h×w]`.
pub fn foreground_channel<F: Scalar>(tape: &mut Tape<F>, probs: Var) -> Result<Var> {
    let s = tape.shape(probs).clone();
    if s.rank() != 3 || s.dim(2) < 2 {
        return Err(Error::dim("foreground_channel", format!("got {s}")));
    }
    let fg = tape.narrow(probs, 2, 1, 1)?;
    tape.reshape(fg, &[s.dim(0), s.dim(1)])
}

/// `M = [p > tau]`, `M̂ = [p > tau_hat]`.
pub fn double_threshold<F: Scalar>(probabilities: &Tensor<F>, cfg: &ProtoConfig) -> Result<MaskPair<F>> {
    if probabilities
        .data()
        .iter()
        .any(|&p| !(p >= F::zero() && p <= F::one()))
    {
        return Err(Error::Validation("probabilities must lie in [0, 1]".into()));
    }
    let cut = |t: f64| {
        let t = F::lit(t);
        let data = probabilities
            .data()
            .iter()
            .map(|&p| if p > t { F::one() } else { F::zero() })
            .collect();
        Tensor::new(probabilities.dims(), data)
    };
    Ok(MaskPair {
        mask: cut(cfg.tau)?,
        dilated: cut(cfg.tau_hat)?,
        probabilities: probabilities.clone(),
    })
}

/// `1 − (2Σpg + ε) / (Σp + Σg + ε)` on soft probabilities.
pub fn soft_dice_loss<F: Scalar>(tape: &mut Tape<F>, probs: Var, truth: &Tensor<F>) -> Result<Var> {
    if tape.shape(probs) != truth.shape() {
        return Err(Error::dim(
            "dice_loss",
            format!("prediction {} vs truth {}", tape.shape(probs), truth.shape()),
        ));
    }
    let eps = F::lit(DICE_SMOOTHING);
    let truth_sum = truth.sum();
    let g = tape.constant(truth.clone());
    let overlap = tape.mul(probs, g)?;
    let inter = tape.sum(overlap);
    let numer = tape.scale(inter, F::lit(2.0));
    let numer = tape.add_scalar(numer, eps);
    let pred_sum = tape.sum(probs);
    let denom = tape.add_scalar(pred_sum, truth_sum + eps);
    let dice = tape.div(numer, denom)?;
    let neg = tape.scale(dice, -F::one());
    Ok(tape.add_scalar(neg, F::one()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feats(d: usize, h: usize, w: usize, f: impl Fn(usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn(&[1, d, h, w], f).unwrap()
    }

    #[test]
    fn full_mask_pools_to_spatial_mean() {
        let f = feats(2, 2, 2, |i| i as f64);
        let mut tape = Tape::new();
        let fv = tape.constant(f);
        let masks = Tensor::ones(&[1, 2, 2, 1]).unwrap();
        let p = masked_average_pooling(&mut tape, fv, &masks).unwrap();
        assert_eq!(tape.value(p[0].vector).data(), &[1.5, 5.5]);
    }

    #[test]
    fn single_pixel_pools_to_that_pixel() {
        let f = feats(3, 2, 2, |i| (i as f64).sin());
        let mut tape = Tape::new();
        let fv = tape.constant(f.clone());
        let masks = Tensor::new(&[1, 2, 2, 1], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let p = masked_average_pooling(&mut tape, fv, &masks).unwrap();
        let want: Vec<f64> = (0..3).map(|c| f.at(&[0, c, 1, 0])).collect();
        assert_eq!(tape.value(p[0].vector).data(), &want[..]);
    }

    #[test]
    fn empty_mask_gives_zero_prototype_and_warns() {
        let mut tape = Tape::new();
        let fv = tape.constant(feats(2, 2, 2, |i| i as f64 + 1.0));
        let masks = Tensor::zeros(&[1, 2, 2, 1]).unwrap();
        let p = masked_average_pooling(&mut tape, fv, &masks).unwrap();
        assert_eq!(tape.value(p[0].vector).data(), &[0.0, 0.0]);
        assert_eq!(tape.warnings().count(Warning::EmptyPoolingMask), 1);
    }

    #[test]
    fn non_binary_masks_rejected() {
        let mut tape = Tape::new();
        let fv = tape.constant(feats(2, 2, 2, |i| i as f64));
        let masks = Tensor::full(&[1, 2, 2, 1], 0.5).unwrap();
        assert!(matches!(
            masked_average_pooling(&mut tape, fv, &masks),
            Err(Error::Validation(_))
        ));
    }

    fn two_prototypes(tape: &mut Tape<f64>, fg: &[f64], bg: &[f64]) -> Vec<Prototype> {
        let b = tape.constant(Tensor::new(&[bg.len()], bg.to_vec()).unwrap());
        let f = tape.constant(Tensor::new(&[fg.len()], fg.to_vec()).unwrap());
        vec![
            Prototype { class_id: 0, vector: b },
            Prototype { class_id: 1, vector: f },
        ]
    }

    #[test]
    fn matching_prototype_closed_form() {
        let mut tape = Tape::new();
        let fq = tape.constant(Tensor::new(&[2, 1, 1], vec![1.0, 0.0]).unwrap());
        let protos = two_prototypes(&mut tape, &[3.0, 0.0], &[0.0, 2.0]);
        let p = prototype_segment(&mut tape, fq, &protos, &ProtoConfig::default()).unwrap();
        let fg = tape.value(p).data()[1];
        let want = 20f64.exp() / (20f64.exp() + 1.0);
        assert!((fg - want).abs() < 1e-15);
        assert!((1.0 - fg - 2.061e-9).abs() < 1e-11);
    }

    #[test]
    fn identical_prototypes_split_evenly() {
        let mut tape = Tape::new();
        let fq = tape.constant(Tensor::from_fn(&[3, 2, 2], |i| (i as f64 * 0.7).cos()).unwrap());
        let protos = two_prototypes(&mut tape, &[1.0, 2.0, -1.0], &[1.0, 2.0, -1.0]);
        let p = prototype_segment(&mut tape, fq, &protos, &ProtoConfig::default()).unwrap();
        assert!(tape.value(p).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn vanishing_alpha_gives_uniform() {
        let mut tape = Tape::new();
        let fq = tape.constant(Tensor::from_fn(&[2, 2, 2], |i| i as f64 - 3.0).unwrap());
        let protos = two_prototypes(&mut tape, &[1.0, 0.0], &[0.0, 1.0]);
        let cfg = ProtoConfig {
            alpha: 1e-300,
            ..ProtoConfig::default()
        };
        let p = prototype_segment(&mut tape, fq, &protos, &cfg).unwrap();
        assert!(tape.value(p).data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn zero_query_feature_is_uniform_and_warned() {
        let mut tape = Tape::new();
        let fq = tape.constant(Tensor::zeros(&[2, 1, 1]).unwrap());
        let protos = two_prototypes(&mut tape, &[1.0, 0.0], &[0.0, 1.0]);
        let p = prototype_segment(&mut tape, fq, &protos, &ProtoConfig::default()).unwrap();
        assert_eq!(tape.value(p).data(), &[0.5, 0.5]);
        assert_eq!(tape.warnings().count(Warning::ZeroNormCosine), 2);
    }

    #[test]
    fn one_prototype_is_rejected() {
        let mut tape = Tape::new();
        let fq = tape.constant(Tensor::zeros(&[2, 1, 1]).unwrap());
        let protos = two_prototypes(&mut tape, &[1.0, 0.0], &[0.0, 1.0]);
        assert!(prototype_segment(&mut tape, fq, &protos[..1], &ProtoConfig::default()).is_err());
    }

    #[test]
    fn double_threshold_cases() {
        let cfg = ProtoConfig::default();
        let p = Tensor::new(&[1, 3], vec![0.45, 0.5, 0.9]).unwrap();
        let pair = double_threshold(&p, &cfg).unwrap();
        assert_eq!(pair.mask.data(), &[0.0, 0.0, 1.0]);
        assert_eq!(pair.dilated.data(), &[1.0, 1.0, 1.0]);

        let ones = Tensor::<f32>::ones(&[2, 2]).unwrap();
        let pair = double_threshold(&ones, &cfg).unwrap();
        assert!(pair.mask.data().iter().all(|&v| v == 1.0));
        assert!(pair.dilated.data().iter().all(|&v| v == 1.0));

        let bad = Tensor::new(&[1], vec![1.5f32]).unwrap();
        assert!(double_threshold(&bad, &cfg).is_err());
    }

    #[test]
    fn config_ordering_enforced() {
        assert!(ProtoConfig::default().validate().is_ok());
        let swapped = ProtoConfig {
            tau: 0.4,
            tau_hat: 0.5,
            ..ProtoConfig::default()
        };
        assert!(swapped.validate().is_err());
    }

    #[test]
    fn soft_dice_limits() {
        let truth = Tensor::new(&[2, 2], vec![1.0f64, 1.0, 0.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let p = tape.constant(truth.clone());
        let l = soft_dice_loss(&mut tape, p, &truth).unwrap();
        assert!(tape.value(l).data()[0].abs() < 1e-12);
        let q = tape.constant(Tensor::new(&[2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap());
        let l = soft_dice_loss(&mut tape, q, &truth).unwrap();
        // 1 − 1/5
        assert!((tape.value(l).data()[0] - 0.8).abs() < 1e-12);
    }
}
