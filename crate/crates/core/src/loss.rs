//! Foreground-weighted reconstruction, perceptual and adversarial losses.
//!
//! Every reconstruction term is normalized by the element count of the
//! ground-truth image (H·W·C, times the batch size for batches), never by
//! the number of foreground pixels. Norms are read as sums of absolute
//! values (L1) and sums of squares (L2).
//!
//! Each loss exists twice: a plain function over [`ImageTensor`]s that
//! returns a number, and a `*_node` variant that records the same quantity
//! on a [`Tape`] so it can be differentiated.

use ndarray::{Array4, ArrayD, Zip};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::imaging::{masks_to_n1hw, resize_mask, to_nchw, BinaryMask, ForegroundMask, ImageTensor};

/// Coefficients of the composite generator objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    #[serde(rename = "lambda_cF")]
    pub lambda_cf: f64,
    #[serde(rename = "lambda_F")]
    pub lambda_f: f64,
    #[serde(rename = "lambda_pF")]
    pub lambda_pf: f64,
    pub lambda_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cf: 1.0,
            lambda_f: 10.0,
            lambda_pf: 0.05,
            lambda_adv: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_cf, self.lambda_f, self.lambda_pf, self.lambda_adv];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

/// What the foreground L1 term compares the prediction against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CfTarget {
    /// The masked input `M_I`, holes included.
    #[default]
    MaskedInput,
    GroundTruth,
}

/// Per-term values of the generator objective (unweighted) and the weighted
/// total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cf: f64,
    pub l_f: f64,
    pub l_pf: f64,
    pub l_adv: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [(&'static str, f64); 5] {
        [
            ("l_cF", self.l_cf),
            ("l_F", self.l_f),
            ("l_pF", self.l_pf),
            ("l_adv", self.l_adv),
            ("total", self.total),
        ]
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.terms().into_iter().find(|(_, v)| !v.is_finite()).map(|(k, _)| k)
    }
}

fn check_pair(a: &ImageTensor, b: &ImageTensor, fg: &BinaryMask, what: &str) -> Result<()> {
    if a.data().dim() != b.data().dim() {
        return Err(Error::Dimension(format!(
            "{what}: {:?} vs {:?}",
            a.data().dim(),
            b.data().dim()
        )));
    }
    if fg.dim() != (a.height(), a.width()) {
        return Err(Error::Dimension(format!(
            "{what}: foreground {:?} vs image {:?}",
            fg.dim(),
            (a.height(), a.width())
        )));
    }
    Ok(())
}

fn masked_reduce(
    a: &ImageTensor,
    b: &ImageTensor,
    fg: &ForegroundMask,
    what: &str,
    f: impl Fn(f64) -> f64,
) -> Result<f64> {
    check_pair(a, b, fg, what)?;
    let mut acc = 0.0;
    Zip::indexed(a.data()).and(b.data()).for_each(|(y, x, _), &u, &v| {
        acc += f(fg.data()[[y, x]] * (u - v));
    });
    Ok(acc / a.len() as f64)
}

/// `(1/N) Σ |M_F ⊙ (M_I − I_pred)|`.
pub fn loss_cf(masked: &ImageTensor, pred: &ImageTensor, fg: &ForegroundMask) -> Result<f64> {
    masked_reduce(masked, pred, fg, "loss_cF", f64::abs)
}

/// `(1/N) Σ (M_F ⊙ (I_gt − I_pred))²`.
pub fn loss_f(gt: &ImageTensor, pred: &ImageTensor, fg: &ForegroundMask) -> Result<f64> {
    masked_reduce(gt, pred, fg, "loss_F", |d| d * d)
}

/// `Σ_i (1/N) Σ (M_F↓ ⊙ (φ_i(M_I) − φ_i(I_pred)))²`, with the foreground
/// mask resized to each tap by nearest neighbour.
pub fn loss_pf(
    masked: &ImageTensor,
    pred: &ImageTensor,
    fg: &ForegroundMask,
    fx: &dyn FeatureExtractor,
) -> Result<f64> {
    check_pair(masked, pred, fg, "loss_pF")?;
    let mut tape = Tape::new();
    let m = tape.constant(to_nchw(&[masked])?.into_dyn());
    let p = tape.constant(to_nchw(&[pred])?.into_dyn());
    let node = loss_pf_node(&mut tape, m, p, &[fg], fx)?;
    Ok(tape.scalar(node))
}

/// `−(mean(real) − mean(fake))`: the critic's maximization objective,
/// negated for minimization.
pub fn critic_loss(real_scores: &[f64], fake_scores: &[f64]) -> Result<f64> {
    if real_scores.is_empty() || fake_scores.is_empty() {
        return Err(Error::Dimension("critic_loss needs nonempty score lists".into()));
    }
    Ok(-(mean(real_scores) - mean(fake_scores)))
}

/// `−mean(fake)`.
pub fn generator_adv_loss(fake_scores: &[f64]) -> Result<f64> {
    if fake_scores.is_empty() {
        return Err(Error::Dimension("generator_adv_loss needs nonempty scores".into()));
    }
    Ok(-mean(fake_scores))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Weighted composite objective and its unweighted terms.
#[allow(clippy::too_many_arguments)]
pub fn generator_total_loss(
    gt: &ImageTensor,
    masked: &ImageTensor,
    pred: &ImageTensor,
    fg: &ForegroundMask,
    fx: &dyn FeatureExtractor,
    fake_scores: &[f64],
    w: &LossWeights,
    cf_target: CfTarget,
) -> Result<(f64, LossBreakdown)> {
    w.validate()?;
    check_pair(gt, masked, fg, "generator_total_loss")?;
    let cf_ref = match cf_target {
        CfTarget::MaskedInput => masked,
        CfTarget::GroundTruth => gt,
    };
    let l_cf = loss_cf(cf_ref, pred, fg)?;
    let l_f = loss_f(gt, pred, fg)?;
    let l_pf = loss_pf(masked, pred, fg, fx)?;
    let l_adv = generator_adv_loss(fake_scores)?;
    let total = w.lambda_cf * l_cf + w.lambda_f * l_f + w.lambda_pf * l_pf + w.lambda_adv * l_adv;
    Ok((
        total,
        LossBreakdown {
            l_cf,
            l_f,
            l_pf,
            l_adv,
            total,
        },
    ))
}

fn fg_broadcast(fg: &[&ForegroundMask]) -> Result<ArrayD<f64>> {
    let masks: Vec<&BinaryMask> = fg.iter().map(|m| &***m).collect();
    Ok(masks_to_n1hw(&masks)?.into_dyn())
}

/// `(1/N) Σ |M_F ⊙ (target − pred)|` on a tape. `fg` holds one mask per
/// batch element.
pub fn loss_cf_node(tape: &mut Tape, target: Var, pred: Var, fg: &[&ForegroundMask]) -> Result<Var> {
    let n = tape.value(target).len() as f64;
    let d = tape.sub(target, pred);
    let m = tape.mul_const(d, fg_broadcast(fg)?);
    let a = tape.abs(m);
    let s = tape.sum(a);
    Ok(tape.scale(s, 1.0 / n))
}

/// `(1/N) Σ (M_F ⊙ (target − pred))²` on a tape.
pub fn loss_f_node(tape: &mut Tape, target: Var, pred: Var, fg: &[&ForegroundMask]) -> Result<Var> {
    let n = tape.value(target).len() as f64;
    let d = tape.sub(target, pred);
    let m = tape.mul_const(d, fg_broadcast(fg)?);
    let sq = tape.square(m);
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / n))
}

/// Perceptual term on a tape; `target` is usually a constant, so its
/// features carry no gradient.
pub fn loss_pf_node(
    tape: &mut Tape,
    target: Var,
    pred: Var,
    fg: &[&ForegroundMask],
    fx: &dyn FeatureExtractor,
) -> Result<Var> {
    let n = tape.value(target).len() as f64;
    let ft = fx.features(tape, target)?;
    let fp = fx.features(tape, pred)?;
    let mut total: Option<Var> = None;
    for (a, b) in ft.into_iter().zip(fp) {
        let shape = tape.value(a).shape().to_vec();
        let (th, tw) = (shape[2], shape[3]);
        let resized = fg
            .iter()
            .map(|m| resize_mask(m, (th, tw)))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&BinaryMask> = resized.iter().collect();
        let mask = masks_to_n1hw(&refs)?.into_dyn();
        let d = tape.sub(a, b);
        let m = tape.mul_const(d, mask);
        let sq = tape.square(m);
        let s = tape.sum(sq);
        let term = tape.scale(s, 1.0 / n);
        total = Some(match total {
            Some(t) => tape.add(t, term),
            None => term,
        });
    }
    total.ok_or_else(|| Error::Config(format!("feature extractor `{}` has no taps", fx.name())))
}

/// Critic loss on a tape over (N, 1) score nodes.
pub fn critic_loss_node(tape: &mut Tape, real: Var, fake: Var) -> Var {
    let mr = tape.mean(real);
    let mf = tape.mean(fake);
    let gap = tape.sub(mr, mf);
    tape.scale(gap, -1.0)
}

pub fn generator_adv_node(tape: &mut Tape, fake: Var) -> Var {
    let m = tape.mean(fake);
    tape.scale(m, -1.0)
}

/// Nodes of the composite generator objective.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveNodes {
    pub l_cf: Var,
    pub l_f: Var,
    pub l_pf: Var,
    pub l_adv: Var,
    pub total: Var,
}

impl ObjectiveNodes {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            l_cf: tape.scalar(self.l_cf),
            l_f: tape.scalar(self.l_f),
            l_pf: tape.scalar(self.l_pf),
            l_adv: tape.scalar(self.l_adv),
            total: tape.scalar(self.total),
        }
    }
}

/// Records the weighted generator objective. `gt` and `masked` are
/// (N, C, H, W) batches; `fake_scores` is the critic's (N, 1) output on
/// `pred`.
#[allow(clippy::too_many_arguments)]
pub fn generator_objective(
    tape: &mut Tape,
    gt: &Array4<f64>,
    masked: &Array4<f64>,
    pred: Var,
    fg: &[&ForegroundMask],
    fx: &dyn FeatureExtractor,
    fake_scores: Var,
    w: &LossWeights,
    cf_target: CfTarget,
) -> Result<ObjectiveNodes> {
    w.validate()?;
    if tape.value(pred).shape() != gt.shape() || gt.shape() != masked.shape() {
        return Err(Error::Dimension("generator objective: batch shapes differ".into()));
    }
    let gt_v = tape.constant(gt.clone().into_dyn());
    let masked_v = tape.constant(masked.clone().into_dyn());
    let cf_ref = match cf_target {
        CfTarget::MaskedInput => masked_v,
        CfTarget::GroundTruth => gt_v,
    };
    let l_cf = loss_cf_node(tape, cf_ref, pred, fg)?;
    let l_f = loss_f_node(tape, gt_v, pred, fg)?;
    let l_pf = loss_pf_node(tape, masked_v, pred, fg, fx)?;
    let l_adv = generator_adv_node(tape, fake_scores);
    let parts = [
        (l_cf, w.lambda_cf),
        (l_f, w.lambda_f),
        (l_pf, w.lambda_pf),
        (l_adv, w.lambda_adv),
    ];
    let mut total: Option<Var> = None;
    for (node, weight) in parts {
        let t = tape.scale(node, weight);
        total = Some(match total {
            Some(acc) => tape.add(acc, t),
            None => t,
        });
    }
    Ok(ObjectiveNodes {
        l_cf,
        l_f,
        l_pf,
        l_adv,
        total: total.unwrap(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{IdentityExtractor, VggConfig, VggExtractor};
    use crate::imaging::ValueRange;
    use ndarray::{Array2, Array3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sym(data: Array3<f64>) -> ImageTensor {
        ImageTensor::new(data, ValueRange::Symmetric).unwrap()
    }

    fn random_sym(seed: u64, h: usize, c: usize) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sym(Array3::from_shape_fn((h, h, c), |_| rng.random_range(-1.0..=1.0)))
    }

    fn random_fg(seed: u64, h: usize) -> ForegroundMask {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ForegroundMask::new(Array2::from_shape_fn((h, h), |_| rng.random_range(0..2) as f64)).unwrap()
    }

    /// The 2×2×1 fixture: masked/gt = [[1,0],[0,1]], pred = [[0.5,0],[0,1]],
    /// fg = [[1,1],[0,0]]. Stored raw because ImageTensor enforces an 8-pixel
    /// minimum side; the oracle sums elementwise exactly as the definitions
    /// read.
    fn fixture_oracle() -> (f64, f64) {
        let target = [[1.0, 0.0], [0.0, 1.0]];
        let pred = [[0.5, 0.0], [0.0, 1.0]];
        let fg = [[1.0, 1.0], [0.0, 0.0]];
        let n = 4.0;
        let mut l1 = 0.0;
        let mut l2 = 0.0;
        for y in 0..2 {
            for x in 0..2 {
                let d = fg[y][x] * (target[y][x] - pred[y][x]);
                l1 += f64::abs(d);
                l2 += d * d;
            }
        }
        (l1 / n, l2 / n)
    }

    #[test]
    fn hand_fixture_through_tape() {
        let (cf_oracle, f_oracle) = fixture_oracle();
        assert_eq!(cf_oracle, 0.125);
        assert_eq!(f_oracle, 0.0625);
        let mut t = Tape::new();
        let target = t.constant(ArrayD::from_shape_vec(ndarray::IxDyn(&[1, 1, 2, 2]), vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let pred = t.constant(ArrayD::from_shape_vec(ndarray::IxDyn(&[1, 1, 2, 2]), vec![0.5, 0.0, 0.0, 1.0]).unwrap());
        let fg = ForegroundMask::new(ndarray::array![[1.0, 1.0], [0.0, 0.0]]).unwrap();
        let cf = loss_cf_node(&mut t, target, pred, &[&fg]).unwrap();
        let f = loss_f_node(&mut t, target, pred, &[&fg]).unwrap();
        assert!((t.scalar(cf) - 0.125).abs() < 1e-12);
        assert!((t.scalar(f) - 0.0625).abs() < 1e-12);
    }

    #[test]
    fn zero_cases() {
        let x = random_sym(1, 8, 3);
        let y = random_sym(2, 8, 3);
        let fg = random_fg(3, 8);
        let none = ForegroundMask::from_binary(BinaryMask::zeros(8, 8));
        assert_eq!(loss_cf(&x, &x, &fg).unwrap(), 0.0);
        assert_eq!(loss_cf(&x, &y, &none).unwrap(), 0.0);
        assert_eq!(loss_f(&x, &x, &fg).unwrap(), 0.0);
        let fx = VggExtractor::random(VggConfig::compact(), 1).unwrap();
        assert_eq!(loss_pf(&x, &x, &fg, &fx).unwrap(), 0.0);
        assert_eq!(loss_pf(&x, &y, &none, &fx).unwrap(), 0.0);
    }

    #[test]
    fn full_foreground_loss_f_is_mse() {
        let x = random_sym(4, 8, 3);
        let y = random_sym(5, 8, 3);
        let all = ForegroundMask::from_binary(BinaryMask::ones(8, 8));
        let mse = x.data().iter().zip(y.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64;
        assert!((loss_f(&x, &y, &all).unwrap() - mse).abs() < 1e-12);
    }

    #[test]
    fn identity_features_reduce_perceptual_to_loss_f() {
        let x = random_sym(6, 8, 3);
        let y = random_sym(7, 8, 3);
        let fg = random_fg(8, 8);
        let a = loss_pf(&x, &y, &fg, &IdentityExtractor::new(3)).unwrap();
        let b = loss_f(&x, &y, &fg).unwrap();
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn shape_mismatch_errors() {
        let x = random_sym(1, 8, 3);
        let y = random_sym(2, 16, 3);
        let fg = random_fg(3, 8);
        assert!(matches!(loss_cf(&x, &y, &fg), Err(Error::Dimension(_))));
        assert!(matches!(loss_f(&x, &x, &random_fg(1, 16)), Err(Error::Dimension(_))));
    }

    #[test]
    fn adversarial_cases() {
        assert_eq!(critic_loss(&[1.0, 1.0], &[0.0, 0.0]).unwrap(), -1.0);
        assert_eq!(critic_loss(&[0.3, -2.0], &[0.3, -2.0]).unwrap(), 0.0);
        assert_eq!(critic_loss(&[0.0], &[2.0]).unwrap(), 2.0);
        assert!(critic_loss(&[], &[1.0]).is_err());
        assert_eq!(generator_adv_loss(&[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(generator_adv_loss(&[1.0, 3.0]).unwrap(), -2.0);
        assert!(generator_adv_loss(&[]).is_err());
        let base = generator_adv_loss(&[0.25, -1.5, 4.0]).unwrap();
        let shifted = generator_adv_loss(&[2.25, 0.5, 6.0]).unwrap();
        assert!((shifted - (base - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn total_loss_selection_and_zero() {
        let gt = random_sym(1, 8, 3);
        let pred = random_sym(2, 8, 3);
        let fg = random_fg(3, 8);
        let fx = IdentityExtractor::new(3);
        let only_f = LossWeights {
            lambda_cf: 0.0,
            lambda_f: 1.0,
            lambda_pf: 0.0,
            lambda_adv: 0.0,
        };
        let (total, _) = generator_total_loss(&gt, &gt, &pred, &fg, &fx, &[0.7], &only_f, CfTarget::MaskedInput).unwrap();
        assert_eq!(total, loss_f(&gt, &pred, &fg).unwrap());

        let no_adv = LossWeights {
            lambda_adv: 0.0,
            ..Default::default()
        };
        let (total, b) = generator_total_loss(&gt, &gt, &gt, &fg, &fx, &[3.0], &no_adv, CfTarget::MaskedInput).unwrap();
        assert_eq!(total, 0.0);
        assert_eq!(b.l_adv, -3.0);

        let zero = LossWeights {
            lambda_cf: 0.0,
            lambda_f: 0.0,
            lambda_pf: 0.0,
            lambda_adv: 0.0,
        };
        assert!(generator_total_loss(&gt, &gt, &pred, &fg, &fx, &[0.0], &zero, CfTarget::MaskedInput).is_err());
    }

    #[test]
    fn default_weights_combine_fixture_values() {
        // Embed the 2×2 fixture in an 8×8 canvas of zeros: padding adds no
        // residual, but N grows to 64, so each term scales by 4/64.
        let mut target = Array3::zeros((8, 8, 1));
        let mut pred = Array3::zeros((8, 8, 1));
        let mut fg = Array2::zeros((8, 8));
        for (y, x, t, p, f) in [(0, 0, 1.0, 0.5, 1.0), (0, 1, 0.0, 0.0, 1.0), (1, 0, 0.0, 0.0, 0.0), (1, 1, 1.0, 1.0, 0.0)] {
            target[[y, x, 0]] = t;
            pred[[y, x, 0]] = p;
            fg[[y, x]] = f;
        }
        let (target, pred) = (sym(target), sym(pred));
        let fg = ForegroundMask::new(fg).unwrap();
        let w = LossWeights {
            lambda_pf: 0.0,
            lambda_adv: 0.0,
            ..Default::default()
        };
        let (total, b) = generator_total_loss(&target, &target, &pred, &fg, &IdentityExtractor::new(1), &[0.0], &w, CfTarget::MaskedInput).unwrap();
        let (cf, f) = fixture_oracle();
        let scale = 4.0 / 64.0;
        assert!((b.l_cf - cf * scale).abs() < 1e-12);
        assert!((b.l_f - f * scale).abs() < 1e-12);
        assert!((total - (1.0 * cf + 10.0 * f) * scale).abs() < 1e-12);
    }

    #[test]
    fn cf_target_switch() {
        let gt = random_sym(1, 8, 3);
        let masked = random_sym(2, 8, 3);
        let fg = random_fg(3, 8);
        let fx = IdentityExtractor::new(3);
        let w = LossWeights::default();
        let (_, a) = generator_total_loss(&gt, &masked, &gt, &fg, &fx, &[0.0], &w, CfTarget::GroundTruth).unwrap();
        let (_, b) = generator_total_loss(&gt, &masked, &gt, &fg, &fx, &[0.0], &w, CfTarget::MaskedInput).unwrap();
        assert_eq!(a.l_cf, 0.0);
        assert!(b.l_cf > 0.0);
    }

    #[test]
    fn tape_and_plain_losses_agree() {
        let gt = random_sym(11, 16, 3);
        let masked = random_sym(12, 16, 3);
        let pred = random_sym(13, 16, 3);
        let fg = random_fg(14, 16);
        let fx = VggExtractor::random(VggConfig::compact(), 2).unwrap();
        let w = LossWeights::default();
        let scores = [0.4];
        let (plain, pb) = generator_total_loss(&gt, &masked, &pred, &fg, &fx, &scores, &w, CfTarget::MaskedInput).unwrap();
        let mut t = Tape::new();
        let p = t.param(to_nchw(&[&pred]).unwrap().into_dyn());
        let s = t.constant(ArrayD::from_elem(ndarray::IxDyn(&[1, 1]), 0.4));
        let nodes = generator_objective(
            &mut t,
            &to_nchw(&[&gt]).unwrap(),
            &to_nchw(&[&masked]).unwrap(),
            p,
            &[&fg],
            &fx,
            s,
            &w,
            CfTarget::MaskedInput,
        )
        .unwrap();
        let tb = nodes.breakdown(&t);
        for ((name, a), (_, b)) in pb.terms().into_iter().zip(tb.terms()) {
            assert!((a - b).abs() < 1e-12, "{name}: {a} vs {b}");
        }
        assert!((plain - tb.total).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn growing_foreground_never_decreases(seed in 0u64..500, flips in prop::collection::vec(0usize..64, 1..10)) {
            let a = random_sym(seed, 8, 3);
            let b = random_sym(seed + 1000, 8, 3);
            let fg = random_fg(seed + 2000, 8);
            let mut grown = fg.data().clone();
            for i in flips { grown[[i / 8, i % 8]] = 1.0; }
            let grown = ForegroundMask::new(grown).unwrap();
            prop_assert!(loss_cf(&a, &b, &grown).unwrap() >= loss_cf(&a, &b, &fg).unwrap());
            prop_assert!(loss_f(&a, &b, &grown).unwrap() >= loss_f(&a, &b, &fg).unwrap());
        }

        #[test]
        fn residual_scaling(seed in 0u64..500, k in -3.0f64..3.0) {
            // pred = gt + r, with gt = 0 so residuals scale without leaving [-1, 1]
            let gt = sym(Array3::zeros((8, 8, 3)));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = Array3::from_shape_fn((8, 8, 3), |_| rng.random_range(-0.3..0.3));
            let fg = random_fg(seed, 8);
            let p1 = sym(r.clone());
            let pk = sym(r.mapv(|v| v * k));
            let f1 = loss_f(&gt, &p1, &fg).unwrap();
            let fk = loss_f(&gt, &pk, &fg).unwrap();
            let c1 = loss_cf(&gt, &p1, &fg).unwrap();
            let ck = loss_cf(&gt, &pk, &fg).unwrap();
            prop_assert!((fk - k * k * f1).abs() <= 1e-12 * (1.0 + fk.abs()));
            prop_assert!((ck - k.abs() * c1).abs() <= 1e-12 * (1.0 + ck.abs()));
        }

        #[test]
        fn critic_loss_ignores_order(mut real in prop::collection::vec(-5.0f64..5.0, 1..8), mut fake in prop::collection::vec(-5.0f64..5.0, 1..8)) {
            let a = critic_loss(&real, &fake).unwrap();
            real.reverse();
            fake.rotate_left(1);
            let b = critic_loss(&real, &fake).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
