//! Shared test support: finite-difference gradient checking and the
//! scalar softmatch reference. Everything here is independent of the
//! library's own computation paths.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trendmatch::tensor::{Tape, Tensor, Var};

/// Scalar per-pixel softmatch reference in f64: one minus the inner
/// product of the two tempered softmaxes, with max subtraction.
pub fn softmatch_scalar_reference(p1: &[f64], p2: &[f64], tau: f64) -> f64 {
    let soft = |p: &[f64]| -> Vec<f64> {
        let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = p.iter().map(|v| ((v - max) / tau).exp()).collect();
        let denom: f64 = exps.iter().sum();
        exps.iter().map(|e| e / denom).collect()
    };
    let s1 = soft(p1);
    let s2 = soft(p2);
    1.0 - s1.iter().zip(&s2).map(|(a, b)| a * b).sum::<f64>()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| lo + (hi - lo) * rng.random::<f32>()).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random binary tensor with values exactly 0.0 or 1.0.
pub fn random_binary(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| f32::from(rng.random::<bool>())).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// One differentiable test case: a set of input tensors and a graph
/// builder producing a scalar loss from them.
pub struct OpCase {
    pub name: &'static str,
    pub gen: Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor> + Send + Sync>,
    pub build: Box<dyn Fn(&mut Tape, &[Var]) -> Var + Send + Sync>,
    /// How many leading inputs are differentiable; the rest are constants
    /// (labels, masks) that the probe must not perturb.
    pub diff_inputs: usize,
    /// Absolute tolerance floor. Most ops use [`FD_ABS_FLOOR`]; batch
    /// norm needs more headroom because perturbing one element moves the
    /// whole channel's statistics, so the probe re-rounds every element.
    pub floor: f64,
}

pub const FD_STEP: f64 = 1e-3;
pub const FD_REL_TOL: f64 = 1e-3;
pub const FD_ABS_FLOOR: f64 = 1e-6;

/// Check analytic gradients of one generated case against central finite
/// differences. Returns a description of the first failure.
pub fn grad_check_case(case: &OpCase, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = (case.gen)(&mut rng);

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = (case.build)(&mut tape, &vars);
    tape.backward(loss)
        .map_err(|e| format!("{}: backward failed: {e}", case.name))?;
    let analytic: Vec<Vec<f32>> = vars
        .iter()
        .zip(&inputs)
        .map(|(v, t)| {
            tape.grad(*v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.param(t)).collect();
        let loss = (case.build)(&mut tape, &vars);
        tape.scalar_f64(loss)
    };

    for (i, input) in inputs.iter().enumerate().take(case.diff_inputs) {
        for k in 0..input.numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[k] += FD_STEP as f32;
            let mut minus = inputs.clone();
            minus[i].data_mut()[k] -= FD_STEP as f32;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let a = analytic[i][k] as f64;
            let tol = case.floor + FD_REL_TOL * a.abs().max(fd.abs());
            if (a - fd).abs() > tol {
                return Err(format!(
                    "{}: seed {seed} input {i} element {k}: analytic {a:.6e} vs fd {fd:.6e}",
                    case.name
                ));
            }
        }
    }
    Ok(())
}

/// Randomized gradient-check cases covering every differentiable op.
pub fn op_cases() -> Vec<OpCase> {
    let mut cases: Vec<OpCase> = Vec::new();

    // Weighted-sum readout keeps map-level gradients O(1) and direction-rich.
    fn readout(tape: &mut Tape, out: Var, weights: Var) -> Var {
        let prod = tape.mul(out, weights).unwrap();
        tape.sum(prod)
    }

    cases.push(OpCase {
        name: "conv2d_s1p1",
        gen: Box::new(|rng| {
            // Positive ranges avoid sign cancellation in the gradients;
            // convolution is linear, so sign coverage adds nothing and
            // cancellation would push gradients down into the f32
            // rounding noise of the finite-difference probe.
            vec![
                random_tensor(rng, &[2, 2, 4, 4], 0.1, 1.0),
                random_tensor(rng, &[3, 2, 3, 3], 0.05, 0.3),
                random_tensor(rng, &[3], 0.05, 0.3),
                random_tensor(rng, &[2, 3, 4, 4], 0.3, 1.0),
            ]
        }),
        diff_inputs: 4,
        floor: FD_ABS_FLOOR,
        build: Box::new(|tape, v| {
            let y = tape.conv2d(v[0], v[1], v[2], 1, 1).unwrap();
            readout(tape, y, v[3])
        }),
    });

    cases.push(OpCase {
        name: "conv2d_s2p0",
        gen: Box::new(|rng| {
            // Stride 2 gives each input element few output contributions,
            // so keep activations small and readout weights large for a
            // healthy gradient-to-rounding-noise ratio.
            vec![
                random_tensor(rng, &[1, 2, 6, 6], 0.05, 0.35),
                random_tensor(rng, &[2, 2, 3, 3], 0.1, 0.4),
                random_tensor(rng, &[2], 0.05, 0.3),
                random_tensor(rng, &[1, 2, 2, 2], 0.6, 1.0),
            ]
        }),
        diff_inputs: 4,
        floor: FD_ABS_FLOOR,
        build: Box::new(|tape, v| {
            let y = tape.conv2d(v[0], v[1], v[2], 2, 0).unwrap();
            readout(tape, y, v[3])
        }),
    });

    cases.push(OpCase {
        name: "maxpool2",
        gen: Box::new(|rng| {
            // Keep 2x2 block values well separated so the FD step cannot
            // flip an argmax.
            let mut t = random_tensor(rng, &[2, 2, 4, 4], -1.0, 1.0);
            loop {
                let mut ok = true;
                let d = t.data();
                'outer: for nc in 0..4 {
                    for by in 0..2 {
                        for bx in 0..2 {
                            let idx = [
                                nc * 16 + (2 * by) * 4 + 2 * bx,
                                nc * 16 + (2 * by) * 4 + 2 * bx + 1,
                                nc * 16 + (2 * by + 1) * 4 + 2 * bx,
                                nc * 16 + (2 * by + 1) * 4 + 2 * bx + 1,
                            ];
                            for a in 0..4 {
                                for b in a + 1..4 {
                                    if (d[idx[a]] - d[idx[b]]).abs() < 0.02 {
                                        ok = false;
                                        break 'outer;
                                    }
                                }
                            }
                        }
                    }
                }
                if ok {
                    break;
                }
                t = random_tensor(rng, &[2, 2, 4, 4], -1.0, 1.0);
            }
            vec![t, random_tensor(rng, &[2, 2, 2, 2], 0.3, 1.0)]
        }),
        diff_inputs: 2,
        floor: FD_ABS_FLOOR,
        build: Box::new(|tape, v| {
            let y = tape.maxpool2(v[0]).unwrap();
            readout(tape, y, v[1])
        }),
    });

    cases.push(OpCase {
        name: "upsample2",
        gen: Box::new(|rng| {
            vec![
                random_tensor(rng, &[1, 3, 3, 3], -1.0, 1.0),
                random_tensor(rng, &[1, 3, 6, 6], 0.3, 1.0),
            ]
        }),
        diff_inputs: 2,
        floor: FD_ABS_FLOOR,
        build: Box::new(|tape, v| {
            let y = tape.upsample2(v[0]).unwrap();
            readout(tape, y, v[1])
        }),
    });

    cases.push(OpCase {
        name: "relu",
        gen: Box::new(|rng| {
            // Keep values away from the kink at zero.
            let mut t = random_tensor(rng, &[2, 3, 3, 3], -1.0, 1.0);
            for v in t.data_mut() {
                if v.abs() < 0.02 {
                    *v += 0.05;
                }
            }
            vec![t, random_tensor(rng, &[2, 3, 3, 3], 0.3, 1.0)]
        }),
        diff_inputs: 2,
        floor: FD_ABS_FLOOR,
        build: Box::new(|tape, v| {
            let y = tape.relu(v[0]);
            readout(tape, y, v[1])
        }),
    });

    cases.push(OpCase {
        name: "concat_channels",
        gen: Box::new(|rng| {
            vec![
                random_tensor(rng, &[2, 2, 3, 3], -1.0, 1.0),
                random_tensor(rng, &[2, 3, 3, 3], -1.0, 1.0),
                random_tensor(rng, &[2, 5, 3, 3], 0.3, 1.0),
            ]
        }),
        diff_inputs: 3,
        floor: FD_ABS_FLOOR,
        build: Box::new(|tape, v| {
            let y = tape.concat_channels(v[0], v[1]).unwrap();
            readout(tape, y, v[2])
        }),
    });

    cases.push(OpCase {
        name: "batchnorm_train",
        gen: Box::new(|rng| {
            vec![
                random_tensor(rng, &[2, 2, 3, 3], -0.5, 0.5),
                random_tensor(rng, &[2], 0.1, 0.4),
                random_tensor(rng, &[2], -0.1, 0.1),
                random_tensor(rng, &[2, 2, 3, 3], 0.3, 1.0),
            ]
        }),
        diff_inputs: 4,
        floor: 1e-4,
        build: Box::new(|tape, v| {
            let mut running = trendmatch::tensor::RunningStats::new(2);
            let y = tape.batchnorm(v[0], v[1], v[2], &mut running, true).unwrap();
            readout(tape, y, v[3])
        }),
    });

    cases.push(OpCase {
        name: "softmax_tau",
        gen: Box::new(|rng| {
            vec![
                random_tensor(rng, &[2, 3, 2, 2], -1.5, 1.5),
                random_tensor(rng, &[2, 3, 2, 2], 0.3, 1.0),
            ]
        }),
        diff_inputs: 2,
        floor: 1e-4,
        build: Box::new(|tape, v| {
            let y = tape.softmax_tau(v[0], 0.7).unwrap();
            readout(tape, y, v[1])
        }),
    });

    cases.push(OpCase {
        name: "softmax_tau_sharp",
        gen: Box::new(|rng| {
            vec![
                random_tensor(rng, &[1, 3, 2, 2], -0.15, 0.15),
                random_tensor(rng, &[1, 3, 2, 2], 0.3, 1.0),
            ]
        }),
        diff_inputs: 2,
        floor: 1e-4,
        build: Box::new(|tape, v| {
            let y = tape.softmax_tau(v[0], 0.1).unwrap();
            readout(tape, y, v[1])
        }),
    });

    cases.push(OpCase {
        name: "pixel_dot",
        gen: Box::new(|rng| {
            vec![
                random_tensor(rng, &[2, 3, 2, 2], -1.0, 1.0),
                random_tensor(rng, &[2, 3, 2, 2], -1.0, 1.0),
                random_tensor(rng, &[2, 1, 2, 2], 0.3, 1.0),
            ]
        }),
        diff_inputs: 3,
        floor: 1e-4,
        build: Box::new(|tape, v| {
            let y = tape.pixel_dot(v[0], v[1]).unwrap();
            readout(tape, y, v[2])
        }),
    });

    cases.push(OpCase {
        name: "softmatch",
        gen: Box::new(|rng| {
            vec![
                random_tensor(rng, &[2, 3, 2, 2], -0.4, 0.4),
                random_tensor(rng, &[2, 3, 2, 2], -0.4, 0.4),
                random_tensor(rng, &[2, 1, 2, 2], 0.3, 1.0),
            ]
        }),
        diff_inputs: 3,
        floor: 1e-4,
        build: Box::new(|tape, v| {
            let dm = trendmatch::distances::softmatch(tape, v[0], v[1], 0.5).unwrap();
            readout(tape, dm.var, v[2])
        }),
    });

    cases.push(OpCase {
        name: "cosine_dist",
        gen: Box::new(|rng| {
            // Keep pixel vectors away from the zero-vector fallback.
            let gen_one = |rng: &mut ChaCha8Rng| {
                let mut t = random_tensor(rng, &[1, 3, 2, 2], -1.0, 1.0);
                for px in 0..4 {
                    let norm2: f32 = (0..3).map(|c| t.data()[c * 4 + px].powi(2)).sum();
                    if norm2 < 0.25 {
                        t.data_mut()[px] += 0.8;
                    }
                }
                t
            };
            vec![
                gen_one(rng),
                gen_one(rng),
                random_tensor(rng, &[1, 1, 2, 2], 0.3, 1.0),
            ]
        }),
        diff_inputs: 3,
        floor: 1e-4,
        build: Box::new(|tape, v| {
            let dm = trendmatch::distances::cosine_dist(tape, v[0], v[1]).unwrap();
            readout(tape, dm.var, v[2])
        }),
    });

    cases.push(OpCase {
        name: "euclid_dist",
        gen: Box::new(|rng| {
            // Keep ||a-b|| away from the kink at zero.
            let a = random_tensor(rng, &[1, 3, 2, 2], -1.0, 1.0);
            let mut b = random_tensor(rng, &[1, 3, 2, 2], -1.0, 1.0);
            for px in 0..4 {
                let d2: f32 = (0..3)
                    .map(|c| (a.data()[c * 4 + px] - b.data()[c * 4 + px]).powi(2))
                    .sum();
                if d2 < 0.04 {
                    b.data_mut()[px] += 0.5;
                }
            }
            vec![a, b, random_tensor(rng, &[1, 1, 2, 2], 0.3, 1.0)]
        }),
        diff_inputs: 3,
        floor: 1e-4,
        build: Box::new(|tape, v| {
            let dm = trendmatch::distances::euclid_dist(tape, v[0], v[1]).unwrap();
            readout(tape, dm.var, v[2])
        }),
    });

    cases.push(OpCase {
        name: "elementwise_chain",
        gen: Box::new(|rng| {
            vec![
                random_tensor(rng, &[2, 3], -1.0, 1.0),
                random_tensor(rng, &[2, 3], -1.0, 1.0),
            ]
        }),
        diff_inputs: 2,
        floor: FD_ABS_FLOOR,
        build: Box::new(|tape, v| {
            let sum = tape.add(v[0], v[1]).unwrap();
            let diff = tape.sub(v[0], v[1]).unwrap();
            let prod = tape.mul(sum, diff).unwrap();
            let scaled = tape.affine(prod, 0.7, -0.2);
            tape.mean(scaled)
        }),
    });

    cases.push(OpCase {
        name: "bce_loss",
        gen: Box::new(|rng| {
            let pred = random_tensor(rng, &[2, 1, 3, 3], 0.05, 0.95);
            let target = random_binary(rng, &[2, 1, 3, 3]);
            vec![pred, target]
        }),
        diff_inputs: 1,
        floor: FD_ABS_FLOOR,
        build: Box::new(|tape, v| {
            let target = tape.value(v[1]).clone();
            tape.bce_loss(v[0], &target).unwrap()
        }),
    });

    cases.push(OpCase {
        name: "background_loss_term",
        gen: Box::new(|rng| {
            let logits = random_tensor(rng, &[2, 3, 2, 2], -0.5, 0.5);
            // Random mask guaranteed non-empty per sample.
            let mut mask = random_binary(rng, &[2, 1, 2, 2]);
            for s in 0..2 {
                if mask.data()[s * 4..(s + 1) * 4].iter().all(|v| *v == 0.0) {
                    mask.data_mut()[s * 4] = 1.0;
                }
            }
            vec![logits, mask]
        }),
        diff_inputs: 1,
        floor: FD_ABS_FLOOR,
        build: Box::new(|tape, v| {
            let mask = tape.value(v[1]).clone();
            let s = tape.softmax_tau(v[0], 0.4).unwrap();
            tape.masked_neg_log_mean(s, &mask, 2).unwrap()
        }),
    });

    cases
}
