//! Training losses.
//!
//! Both branches are supervised by the binary change label through BCE on
//! their distance maps. The background channel of the independent features
//! is additionally pinned by the opposite change label (unchanged = 1),
//! counting only those positive pixels: background legitimately shows up
//! inside changed regions of appear/disappear, so changed pixels must not
//! push the background channel down.

use serde::{Deserialize, Serialize};

use crate::distances::{self, DistanceMap, DistanceMetric};
use crate::error::{Error, Result};
use crate::network::{Forward, BACKGROUND_CHANNEL};
use crate::tensor::{Tape, Tensor, Var};

fn default_weight() -> f32 {
    1.0
}

/// Weights of the three loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "default_weight")]
    pub gcd: f32,
    #[serde(default = "default_weight")]
    pub tcd: f32,
    #[serde(default = "default_weight")]
    pub bg: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            gcd: 1.0,
            tcd: 1.0,
            bg: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("gcd", self.gcd), ("tcd", self.tcd), ("bg", self.bg)] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and non-negative, got {w}"
                )));
            }
        }
        Ok(())
    }
}

/// Scalar loss terms of one forward pass, with the pixel counts each term
/// averaged over.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct LossReport {
    pub l_gcd: f64,
    pub l_tcd: f64,
    pub l_bg: f64,
    pub total: f64,
    pub changed_pixels: u64,
    pub unchanged_pixels: u64,
}

/// Differentiable total loss plus its report.
pub struct TotalLoss {
    pub var: Var,
    pub report: LossReport,
}

/// Mean binary cross-entropy between a distance map and the change label.
pub fn bce_map_loss(tape: &mut Tape, dm: &DistanceMap, change: &Tensor) -> Result<Var> {
    tape.bce_loss(dm.var, change)
}

/// Background-channel loss: mean `-log softmax_tau(F_I)[bg]` over unchanged
/// pixels only, averaged across the two temporal streams. Samples without
/// unchanged pixels contribute zero (with a warning).
pub fn background_loss(
    tape: &mut Tape,
    fi1: Var,
    fi2: Var,
    change: &Tensor,
    tau: f32,
) -> Result<Var> {
    let opposite = opposite_label(change)?;
    warn_empty_masks(&opposite);
    let s1 = tape.softmax_tau(fi1, tau)?;
    let s2 = tape.softmax_tau(fi2, tau)?;
    let l1 = tape.masked_neg_log_mean(s1, &opposite, BACKGROUND_CHANNEL)?;
    let l2 = tape.masked_neg_log_mean(s2, &opposite, BACKGROUND_CHANNEL)?;
    let sum = tape.add(l1, l2)?;
    Ok(tape.affine(sum, 0.5, 0.0))
}

/// The change label with 0/1 flipped: unchanged pixels become 1.
pub fn opposite_label(change: &Tensor) -> Result<Tensor> {
    if let Some(bad) = change.data().iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(Error::invalid(
            "opposite_label",
            format!("change label must be exactly 0 or 1, found {bad}"),
        ));
    }
    let data = change.data().iter().map(|v| 1.0 - v).collect();
    Tensor::new(change.shape().to_vec(), data)
}

fn warn_empty_masks(opposite: &Tensor) {
    if let Ok((n, _, h, w)) = opposite.dims4() {
        let plane = h * w;
        for s in 0..n {
            let any = opposite.data()[s * plane..(s + 1) * plane]
                .iter()
                .any(|v| *v == 1.0);
            if !any {
                eprintln!(
                    "warning: sample {s} has no unchanged pixels; it contributes nothing to the background loss"
                );
            }
        }
    }
}

/// Assemble the full training loss from a forward pass.
///
/// `gcd_metric` selects the distance used on the common features (the
/// ablation knob); the independent-feature branch always uses softmatch.
pub fn total_loss(
    tape: &mut Tape,
    fwd: &Forward,
    change: &Tensor,
    weights: &LossWeights,
    tau: f32,
    gcd_metric: DistanceMetric,
) -> Result<TotalLoss> {
    weights.validate()?;
    let dm_gcd = distances::by_metric(tape, gcd_metric, fwd.fc1, fwd.fc2, tau)?;
    let dm_tcd = distances::softmatch(tape, fwd.fi1, fwd.fi2, tau)?;

    let l_gcd = bce_map_loss(tape, &dm_gcd, change)?;
    let l_tcd = bce_map_loss(tape, &dm_tcd, change)?;
    let l_bg = background_loss(tape, fwd.fi1, fwd.fi2, change, tau)?;

    let wg = tape.affine(l_gcd, weights.gcd, 0.0);
    let wt = tape.affine(l_tcd, weights.tcd, 0.0);
    let wb = tape.affine(l_bg, weights.bg, 0.0);
    let partial = tape.add(wg, wt)?;
    let total = tape.add(partial, wb)?;

    let changed = change.data().iter().filter(|v| **v == 1.0).count() as u64;
    let report = LossReport {
        l_gcd: tape.scalar_f64(l_gcd),
        l_tcd: tape.scalar_f64(l_tcd),
        l_bg: tape.scalar_f64(l_bg),
        total: weights.gcd as f64 * tape.scalar_f64(l_gcd)
            + weights.tcd as f64 * tape.scalar_f64(l_tcd)
            + weights.bg as f64 * tape.scalar_f64(l_bg),
        changed_pixels: changed,
        unchanged_pixels: change.numel() as u64 - changed,
    };
    Ok(TotalLoss { var: total, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distances;
    use crate::network::{self, ModelState, NetConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn label(shape: [usize; 4], bits: &[u8]) -> Tensor {
        Tensor::new(shape.to_vec(), bits.iter().map(|b| *b as f32).collect()).unwrap()
    }

    #[test]
    fn bce_uniform_half_prediction_costs_ln2() {
        let mut tape = Tape::new();
        let d = tape.leaf(Tensor::filled(vec![1, 1, 3, 3], 0.5));
        let dm = DistanceMap {
            var: d,
            metric: DistanceMetric::Softmatch,
        };
        let y = label([1, 1, 3, 3], &[1, 0, 1, 0, 1, 0, 1, 0, 1]);
        let loss = bce_map_loss(&mut tape, &dm, &y).unwrap();
        assert!((tape.scalar_f64(loss) - std::f64::consts::LN_2).abs() < 1e-7);
    }

    #[test]
    fn bce_is_permutation_invariant_over_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vals: Vec<f32> = (0..16).map(|_| 0.05 + 0.9 * rng.random::<f32>()).collect();
        let bits: Vec<u8> = (0..16).map(|_| u8::from(rng.random::<bool>())).collect();
        let mut perm: Vec<usize> = (0..16).collect();
        // deterministic shuffle
        for i in (1..16).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        let loss_of = |vals: &[f32], bits: &[u8]| {
            let mut tape = Tape::new();
            let d = tape.leaf(Tensor::new(vec![1, 1, 4, 4], vals.to_vec()).unwrap());
            let dm = DistanceMap {
                var: d,
                metric: DistanceMetric::Softmatch,
            };
            let y = label([1, 1, 4, 4], bits);
            let l = bce_map_loss(&mut tape, &dm, &y).unwrap();
            tape.scalar_f64(l)
        };
        let base = loss_of(&vals, &bits);
        let pv: Vec<f32> = perm.iter().map(|i| vals[*i]).collect();
        let pb: Vec<u8> = perm.iter().map(|i| bits[*i]).collect();
        assert!((base - loss_of(&pv, &pb)).abs() < 1e-12);
    }

    #[test]
    fn background_loss_dominant_margin_vanishes() {
        // background channel leads by 10 logits at tau 0.1 everywhere
        let mut logits = vec![0.0f32; 3 * 4];
        logits[2 * 4..].iter_mut().for_each(|v| *v = 10.0);
        let t = Tensor::new(vec![1, 3, 2, 2], logits).unwrap();
        let change = label([1, 1, 2, 2], &[0, 0, 0, 0]);
        let mut tape = Tape::new();
        let f1 = tape.leaf(t.clone());
        let f2 = tape.leaf(t);
        let loss = background_loss(&mut tape, f1, f2, &change, 0.1).unwrap();
        assert!(tape.scalar_f64(loss).abs() < 1e-9);
    }

    #[test]
    fn background_loss_uniform_logits_cost_ln3() {
        let t = Tensor::zeros(vec![2, 3, 2, 2]);
        let change = Tensor::zeros(vec![2, 1, 2, 2]);
        let mut tape = Tape::new();
        let f1 = tape.leaf(t.clone());
        let f2 = tape.leaf(t);
        let loss = background_loss(&mut tape, f1, f2, &change, 0.1).unwrap();
        // ln 3 per stream, averaged over two streams
        assert!((tape.scalar_f64(loss) - 3.0f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn background_loss_all_changed_is_zero_with_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f32> = (0..3 * 4).map(|_| rng.random::<f32>()).collect();
        let t = Tensor::new(vec![1, 3, 2, 2], data).unwrap();
        let change = label([1, 1, 2, 2], &[1, 1, 1, 1]);
        let mut tape = Tape::new();
        let f1 = tape.leaf(t.clone());
        let f2 = tape.leaf(t);
        let loss = background_loss(&mut tape, f1, f2, &change, 0.1).unwrap();
        assert_eq!(tape.scalar_f64(loss), 0.0);
        tape.backward(loss).unwrap();
        assert!(tape.grad(f1).unwrap().iter().all(|g| *g == 0.0));
        assert!(tape.grad(f2).unwrap().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn background_loss_ignores_changed_pixel_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f32> = (0..3 * 4).map(|_| rng.random::<f32>()).collect();
        let change = label([1, 1, 2, 2], &[0, 1, 1, 0]);
        let loss_of = |data: &[f32]| {
            let t = Tensor::new(vec![1, 3, 2, 2], data.to_vec()).unwrap();
            let mut tape = Tape::new();
            let f1 = tape.leaf(t.clone());
            let f2 = tape.leaf(t);
            let l = background_loss(&mut tape, f1, f2, &change, 0.1).unwrap();
            tape.scalar_f64(l)
        };
        let base = loss_of(&data);
        let mut perturbed = data.clone();
        for ch in 0..3 {
            perturbed[ch * 4 + 1] += 5.0; // changed pixel
            perturbed[ch * 4 + 2] -= 3.0; // changed pixel
        }
        assert_eq!(base, loss_of(&perturbed));
    }

    #[test]
    fn total_loss_is_weighted_sum_of_terms() {
        let config = NetConfig {
            depth: 2,
            base_channels: 4,
            feature_channels: 3,
            use_batchnorm: false,
            tau: 0.5,
        };
        let mut state = ModelState::init(config, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 3 * 64;
        let t1 = Tensor::new(vec![1, 3, 8, 8], (0..n).map(|_| rng.random::<f32>()).collect()).unwrap();
        let t2 = Tensor::new(vec![1, 3, 8, 8], (0..n).map(|_| rng.random::<f32>()).collect()).unwrap();
        let change = Tensor::new(
            vec![1, 1, 8, 8],
            (0..64).map(|_| f32::from(rng.random::<bool>())).collect(),
        )
        .unwrap();
        let weights = LossWeights {
            gcd: 0.5,
            tcd: 2.0,
            bg: 0.25,
        };
        let mut tape = Tape::new();
        let fwd = network::forward(&mut tape, &mut state, &t1, &t2, false).unwrap();
        let total = total_loss(&mut tape, &fwd, &change, &weights, 0.5, DistanceMetric::Softmatch).unwrap();
        let r = &total.report;
        let expect = 0.5 * r.l_gcd + 2.0 * r.l_tcd + 0.25 * r.l_bg;
        assert!((r.total - expect).abs() < 1e-12);
        assert!(r.l_gcd >= 0.0 && r.l_tcd >= 0.0 && r.l_bg >= 0.0);
        assert_eq!(r.changed_pixels + r.unchanged_pixels, 64);
    }

    #[test]
    fn zero_background_weight_routes_gradients_through_distance_terms_only() {
        let config = NetConfig {
            depth: 2,
            base_channels: 4,
            feature_channels: 3,
            use_batchnorm: false,
            tau: 0.5,
        };
        let state = ModelState::init(config, 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 3 * 64;
        let t1 = Tensor::new(vec![1, 3, 8, 8], (0..n).map(|_| rng.random::<f32>()).collect()).unwrap();
        let t2 = Tensor::new(vec![1, 3, 8, 8], (0..n).map(|_| rng.random::<f32>()).collect()).unwrap();
        let change = Tensor::new(
            vec![1, 1, 8, 8],
            (0..64).map(|_| f32::from(rng.random::<bool>())).collect(),
        )
        .unwrap();

        // weights (1,1,0) through total_loss
        let mut st = state.clone();
        let mut tape_a = Tape::new();
        let fwd_a = network::forward(&mut tape_a, &mut st, &t1, &t2, false).unwrap();
        let total = total_loss(
            &mut tape_a,
            &fwd_a,
            &change,
            &LossWeights { gcd: 1.0, tcd: 1.0, bg: 0.0 },
            0.5,
            DistanceMetric::Softmatch,
        )
        .unwrap();
        tape_a.backward(total.var).unwrap();

        // the two distance terms alone
        let mut st = state.clone();
        let mut tape_b = Tape::new();
        let fwd_b = network::forward(&mut tape_b, &mut st, &t1, &t2, false).unwrap();
        let dm_g = distances::softmatch(&mut tape_b, fwd_b.fc1, fwd_b.fc2, 0.5).unwrap();
        let dm_t = distances::softmatch(&mut tape_b, fwd_b.fi1, fwd_b.fi2, 0.5).unwrap();
        let lg = bce_map_loss(&mut tape_b, &dm_g, &change).unwrap();
        let lt = bce_map_loss(&mut tape_b, &dm_t, &change).unwrap();
        let sum = tape_b.add(lg, lt).unwrap();
        tape_b.backward(sum).unwrap();

        for (va, vb) in fwd_a.param_vars.iter().zip(&fwd_b.param_vars) {
            let ga = tape_a.grad(*va).map(|g| g.to_vec()).unwrap_or_default();
            let gb = tape_b.grad(*vb).map(|g| g.to_vec()).unwrap_or_default();
            for (a, b) in ga.iter().zip(&gb) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }
}
