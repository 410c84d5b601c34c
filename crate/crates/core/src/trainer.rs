//! Training, evaluation, prediction, and the distance-ablation harness.
//!
//! Training consumes only image pairs and change labels (the readers
//! involved cannot even represent trend labels), runs Adam with a step
//! learning-rate schedule and paired augmentation, logs one loss report
//! per epoch to stdout and CSV, and keeps both the best-by-validation
//! change-F and the final checkpoint. All randomness flows from the
//! config seed through one ChaCha stream, so identical flags reproduce
//! identical runs.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, AdamSnapshot, Checkpoint, RngSnapshot};
use crate::config::RunConfig;
use crate::distances::{self, DistanceMetric};
use crate::error::{Error, Result};
use crate::metrics::{self, AblationTable, Confusion, EvalReport, TrendConfusion};
use crate::network::{self, ModelState, BACKGROUND_CHANNEL};
use crate::supervision::{self, LossReport};
use crate::synthdata::{self, EvalPair, TrainPair, Transform};
use crate::tensor::{AdamState, Tape, Tensor};
use crate::trend::{self, trend_to_change};

/// Result of a training run.
pub struct TrainOutcome {
    pub final_path: PathBuf,
    pub best_path: Option<PathBuf>,
    pub csv_path: PathBuf,
    pub epochs_run: u32,
    pub last: LossReport,
    pub best_val_f: Option<f64>,
}

/// Train on the `train` split of a dataset directory; validate on the
/// `val` split when it is non-empty. `resume` continues the epoch counter,
/// optimizer moments, and RNG stream from a final checkpoint.
pub fn train(
    config: &RunConfig,
    data_dir: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let manifest = synthdata::read_manifest(data_dir)?;
    let train_pairs = synthdata::read_train_pairs(data_dir, manifest.splits.train)?;
    if train_pairs.is_empty() {
        return Err(Error::Data("train split is empty".into()));
    }
    let val_pairs = synthdata::read_train_pairs(data_dir, manifest.splits.val)?;

    let size = check_square(&train_pairs)?;
    config.net.check_spatial(size, size)?;
    if let Some(crop) = config.augment.crop {
        if crop > size {
            return Err(Error::Config(format!(
                "augment.crop {crop} exceeds image size {size}"
            )));
        }
    }

    fs::create_dir_all(out_dir)?;
    let final_path = out_dir.join("final.tcdw");
    let best_path = out_dir.join("best.tcdw");
    let csv_path = out_dir.join("train_log.csv");

    // Model / optimizer / RNG, fresh or resumed.
    let (mut state, mut adam, mut rng, epoch_start) = match resume {
        Some(path) => {
            let ckpt = checkpoint::load(path)?;
            if ckpt.state.config() != &config.net {
                return Err(Error::Config(format!(
                    "checkpoint net config {:?} does not match run config {:?}",
                    ckpt.state.config(),
                    config.net
                )));
            }
            let adam = match ckpt.adam {
                Some(snap) => AdamState::from_parts(snap.m, snap.v, snap.step, config.optimizer.hyper()),
                None => AdamState::new(&ckpt.state.param_sizes(), config.optimizer.hyper()),
            };
            let rng = match ckpt.rng {
                Some(snap) => {
                    let mut rng = ChaCha8Rng::from_seed(snap.seed);
                    rng.set_word_pos(snap.word_pos);
                    rng
                }
                None => train_rng(config.seed),
            };
            (ckpt.state, adam, rng, ckpt.epoch as u32)
        }
        None => {
            let state = ModelState::init(config.net, config.seed)?;
            let adam = AdamState::new(&state.param_sizes(), config.optimizer.hyper());
            (state, adam, train_rng(config.seed), 0)
        }
    };

    let mut csv = BufWriter::new(if epoch_start > 0 && csv_path.exists() {
        File::options().append(true).open(&csv_path)?
    } else {
        let mut f = File::create(&csv_path)?;
        writeln!(f, "epoch,l_gcd,l_tcd,l_bg,total,lr,val_change_f")?;
        f
    });

    let mut indices: Vec<usize> = (0..train_pairs.len()).collect();
    let mut best_val_f: Option<f64> = None;
    let mut last = LossReport::default();
    let mut epochs_run = 0u32;

    for epoch in epoch_start..config.epochs {
        let lr = config.schedule.lr_at(config.optimizer.lr, epoch);
        adam.hyper.lr = lr;
        indices.shuffle(&mut rng);

        let mut sums = LossReport::default();
        let mut batch_count = 0usize;
        for chunk in indices.chunks(config.batch_size) {
            let (t1, t2, change) = assemble_batch(&train_pairs, chunk, config, size, &mut rng)?;
            let mut tape = Tape::new();
            let fwd = network::forward(&mut tape, &mut state, &t1, &t2, true)?;
            let total = supervision::total_loss(
                &mut tape,
                &fwd,
                &change,
                &config.weights,
                config.net.tau,
                config.gcd_metric,
            )?;
            if !total.report.total.is_finite() {
                return Err(Error::Divergence(format!(
                    "epoch {epoch}: total loss is {}",
                    total.report.total
                )));
            }
            tape.backward(total.var)?;
            let grads: Vec<Option<&[f32]>> =
                fwd.param_vars.iter().map(|v| tape.grad(*v)).collect();
            adam.step(state.params_mut(), &grads)?;

            sums.l_gcd += total.report.l_gcd;
            sums.l_tcd += total.report.l_tcd;
            sums.l_bg += total.report.l_bg;
            sums.total += total.report.total;
            sums.changed_pixels += total.report.changed_pixels;
            sums.unchanged_pixels += total.report.unchanged_pixels;
            batch_count += 1;
        }
        let n = batch_count.max(1) as f64;
        last = LossReport {
            l_gcd: sums.l_gcd / n,
            l_tcd: sums.l_tcd / n,
            l_bg: sums.l_bg / n,
            total: sums.total / n,
            changed_pixels: sums.changed_pixels,
            unchanged_pixels: sums.unchanged_pixels,
        };

        let val_f = if val_pairs.is_empty() {
            None
        } else {
            Some(validation_change_f(&mut state, &val_pairs, config)?)
        };
        if let Some(f) = val_f {
            if best_val_f.map_or(true, |b| f > b) {
                best_val_f = Some(f);
                save_checkpoint(&best_path, &state, (epoch + 1) as u64, &adam, &rng)?;
            }
        }

        println!(
            "epoch {:>4}/{} lr {:.2e} l_gcd {:.4} l_tcd {:.4} l_bg {:.4} total {:.4}{}",
            epoch + 1,
            config.epochs,
            lr,
            last.l_gcd,
            last.l_tcd,
            last.l_bg,
            last.total,
            val_f.map_or(String::new(), |f| format!(" val_F {:.4}", f)),
        );
        writeln!(
            csv,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6e},{}",
            epoch + 1,
            last.l_gcd,
            last.l_tcd,
            last.l_bg,
            last.total,
            lr,
            val_f.map_or(String::new(), |f| format!("{f:.6}")),
        )?;
        csv.flush()?;
        epochs_run += 1;
    }

    save_checkpoint(&final_path, &state, config.epochs as u64, &adam, &rng)?;
    Ok(TrainOutcome {
        final_path,
        best_path: best_val_f.map(|_| best_path),
        csv_path,
        epochs_run,
        last,
        best_val_f,
    })
}

fn train_rng(seed: u64) -> ChaCha8Rng {
    // Offset so the training stream differs from the init stream.
    ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15)
}

fn save_checkpoint(
    path: &Path,
    state: &ModelState,
    epoch: u64,
    adam: &AdamState,
    rng: &ChaCha8Rng,
) -> Result<()> {
    let (m, v) = adam.moments();
    checkpoint::save(
        path,
        &Checkpoint {
            state: state.clone(),
            epoch,
            adam: Some(AdamSnapshot {
                step: adam.step_count(),
                m: m.to_vec(),
                v: v.to_vec(),
            }),
            rng: Some(RngSnapshot {
                seed: rng.get_seed(),
                word_pos: rng.get_word_pos(),
            }),
        },
    )
}

fn check_square(pairs: &[TrainPair]) -> Result<usize> {
    let shape = pairs[0].t1.shape().to_vec();
    if shape.len() != 3 || shape[1] != shape[2] {
        return Err(Error::Data(format!(
            "expected square [3,S,S] images, got {shape:?}"
        )));
    }
    for (i, p) in pairs.iter().enumerate() {
        if p.t1.shape() != shape.as_slice() || p.t2.shape() != shape.as_slice() {
            return Err(Error::Data(format!("sample {i} has inconsistent shape")));
        }
    }
    Ok(shape[1])
}

/// Stack selected (optionally augmented) pairs into batch tensors:
/// `[B,3,S,S]` images and a `[B,1,S,S]` change label.
fn assemble_batch(
    pairs: &[TrainPair],
    chunk: &[usize],
    config: &RunConfig,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Tensor, Tensor)> {
    let out_size = if config.augment.enabled {
        config.augment.crop.unwrap_or(size)
    } else {
        size
    };
    let plane = out_size * out_size;
    let b = chunk.len();
    let mut t1 = Vec::with_capacity(b * 3 * plane);
    let mut t2 = Vec::with_capacity(b * 3 * plane);
    let mut change = Vec::with_capacity(b * plane);

    for &idx in chunk {
        let pair = &pairs[idx];
        if config.augment.enabled {
            let t = Transform::sample(rng, size, config.augment.crop)?;
            let aug = synthdata::apply_transform_train(pair, &t)?;
            t1.extend_from_slice(aug.t1.data());
            t2.extend_from_slice(aug.t2.data());
            change.extend(aug.change.iter().map(|v| *v as f32));
        } else {
            t1.extend_from_slice(pair.t1.data());
            t2.extend_from_slice(pair.t2.data());
            change.extend(pair.change.iter().map(|v| *v as f32));
        }
    }
    Ok((
        Tensor::new(vec![b, 3, out_size, out_size], t1)?,
        Tensor::new(vec![b, 3, out_size, out_size], t2)?,
        Tensor::new(vec![b, 1, out_size, out_size], change)?,
    ))
}

/// Change-map F of the GCD branch over unaugmented pairs.
fn validation_change_f(
    state: &mut ModelState,
    pairs: &[TrainPair],
    config: &RunConfig,
) -> Result<f64> {
    let mut conf = Confusion::default();
    for chunk in pairs.chunks(config.batch_size) {
        let (t1, t2, _) = stack_plain(chunk)?;
        let mut tape = Tape::new();
        let fwd = network::forward(&mut tape, state, &t1, &t2, false)?;
        let dm = distances::by_metric(&mut tape, config.gcd_metric, fwd.fc1, fwd.fc2, config.net.tau)?;
        let maps = trend::decode_change(tape.value(dm.var), config.threshold)?;
        for (map, pair) in maps.iter().zip(chunk) {
            conf.accumulate(&map.values, &pair.change)?;
        }
    }
    Ok(metrics::finalize(&conf, metrics::ClassTag::Change)?.f1)
}

fn stack_plain(pairs: &[TrainPair]) -> Result<(Tensor, Tensor, Tensor)> {
    let b = pairs.len();
    let s = pairs[0].t1.shape()[1];
    let plane = s * s;
    let mut t1 = Vec::with_capacity(b * 3 * plane);
    let mut t2 = Vec::with_capacity(b * 3 * plane);
    let mut change = Vec::with_capacity(b * plane);
    for p in pairs {
        t1.extend_from_slice(p.t1.data());
        t2.extend_from_slice(p.t2.data());
        change.extend(p.change.iter().map(|v| *v as f32));
    }
    Ok((
        Tensor::new(vec![b, 3, s, s], t1)?,
        Tensor::new(vec![b, 3, s, s], t2)?,
        Tensor::new(vec![b, 1, s, s], change)?,
    ))
}

// ── evaluation ──────────────────────────────────────────────────────

/// Evaluate a model: GCD-branch change row always; C/A/D/T trend rows when
/// every sample carries a trend label; plus the branch disagreement rate.
pub fn evaluate(
    state: &mut ModelState,
    pairs: &[EvalPair],
    threshold: f32,
    gcd_metric: DistanceMetric,
    batch_size: usize,
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let tau = state.config().tau;
    let with_trend = pairs.iter().all(|p| p.trend.is_some());
    let mut gcd_conf = Confusion::default();
    let mut trend_conf = TrendConfusion::default();
    let mut disagree = 0u64;
    let mut total_px = 0u64;

    for chunk in pairs.chunks(batch_size.max(1)) {
        let b = chunk.len();
        let s = chunk[0].t1.shape()[1];
        let plane = s * s;
        let mut t1 = Vec::with_capacity(b * 3 * plane);
        let mut t2 = Vec::with_capacity(b * 3 * plane);
        for p in chunk {
            t1.extend_from_slice(p.t1.data());
            t2.extend_from_slice(p.t2.data());
        }
        let t1 = Tensor::new(vec![b, 3, s, s], t1)?;
        let t2 = Tensor::new(vec![b, 3, s, s], t2)?;

        let mut tape = Tape::new();
        let fwd = network::forward(&mut tape, state, &t1, &t2, false)?;
        let dm = distances::by_metric(&mut tape, gcd_metric, fwd.fc1, fwd.fc2, tau)?;
        let change_maps = trend::decode_change(tape.value(dm.var), threshold)?;
        let trend_maps = trend::decode_trend(
            tape.value(fwd.fi1),
            tape.value(fwd.fi2),
            BACKGROUND_CHANNEL,
        )?;

        for ((pair, cm), tm) in chunk.iter().zip(&change_maps).zip(&trend_maps) {
            gcd_conf.accumulate(&cm.values, &pair.change)?;
            let tm_change = trend_to_change(tm);
            disagree += cm
                .values
                .iter()
                .zip(&tm_change.values)
                .filter(|(a, b)| a != b)
                .count() as u64;
            total_px += cm.values.len() as u64;
            if with_trend {
                let truth = trend::TrendMap {
                    h: tm.h,
                    w: tm.w,
                    codes: pair.trend.clone().unwrap(),
                };
                trend_conf.accumulate(tm, &truth)?;
            }
        }
    }

    Ok(EvalReport {
        trend_rows: if with_trend { Some(trend_conf.rows()?) } else { None },
        change_gcd: metrics::finalize(&gcd_conf, metrics::ClassTag::Change)?,
        disagreement: disagree as f64 / total_px.max(1) as f64,
        samples: pairs.len(),
    })
}

// ── prediction ──────────────────────────────────────────────────────

/// Write per-sample prediction images: the binary change map (white =
/// changed), the trend map in the fixed palette, and grayscale
/// visualizations of the background-channel softmax of both streams.
pub fn predict(
    state: &mut ModelState,
    pairs: &[(Tensor, Tensor)],
    threshold: f32,
    gcd_metric: DistanceMetric,
    batch_size: usize,
    out_dir: &Path,
) -> Result<usize> {
    fs::create_dir_all(out_dir)?;
    let tau = state.config().tau;
    let mut written = 0usize;

    for chunk in pairs.chunks(batch_size.max(1)) {
        let b = chunk.len();
        let s = chunk[0].0.shape()[1];
        let plane = s * s;
        let mut t1 = Vec::with_capacity(b * 3 * plane);
        let mut t2 = Vec::with_capacity(b * 3 * plane);
        for (a, b_) in chunk {
            t1.extend_from_slice(a.data());
            t2.extend_from_slice(b_.data());
        }
        let t1 = Tensor::new(vec![b, 3, s, s], t1)?;
        let t2 = Tensor::new(vec![b, 3, s, s], t2)?;

        let mut tape = Tape::new();
        let fwd = network::forward(&mut tape, state, &t1, &t2, false)?;
        let dm = distances::by_metric(&mut tape, gcd_metric, fwd.fc1, fwd.fc2, tau)?;
        let s1 = tape.softmax_tau(fwd.fi1, tau)?;
        let s2 = tape.softmax_tau(fwd.fi2, tau)?;
        let change_maps = trend::decode_change(tape.value(dm.var), threshold)?;
        let trend_maps = trend::decode_trend(
            tape.value(fwd.fi1),
            tape.value(fwd.fi2),
            BACKGROUND_CHANNEL,
        )?;

        for i in 0..b {
            let idx = written + i;
            let cm: Vec<u8> = change_maps[i].values.iter().map(|v| v * 255).collect();
            synthdata::write_gray_image(&out_dir.join(format!("change_{idx:04}.png")), s, s, &cm)?;
            synthdata::write_trend_image(
                &out_dir.join(format!("trend_{idx:04}.png")),
                s,
                s,
                &trend_maps[i].codes,
            )?;
            for (name, soft) in [("bg1", s1), ("bg2", s2)] {
                let data = tape.value(soft).data();
                let base = (i * 3 + BACKGROUND_CHANNEL) * plane;
                let gray: Vec<u8> = data[base..base + plane]
                    .iter()
                    .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                    .collect();
                synthdata::write_gray_image(
                    &out_dir.join(format!("{name}_{idx:04}.png")),
                    s,
                    s,
                    &gray,
                )?;
            }
        }
        written += b;
    }
    Ok(written)
}

// ── ablation ────────────────────────────────────────────────────────

/// Train one GCD-branch model per distance metric with identical seeds and
/// splits, then evaluate each on the held-out split and assemble the
/// distance-by-metrics table.
pub fn ablate(config: &RunConfig, data_dir: &Path, out_dir: &Path) -> Result<AblationTable> {
    config.validate()?;
    let manifest = synthdata::read_manifest(data_dir)?;
    let eval_range = if manifest.splits.test.1 > manifest.splits.test.0 {
        manifest.splits.test
    } else if manifest.splits.val.1 > manifest.splits.val.0 {
        manifest.splits.val
    } else {
        return Err(Error::Data(
            "ablation needs a non-empty test or val split".into(),
        ));
    };
    let eval_pairs = synthdata::read_eval_pairs(data_dir, eval_range)?;

    let mut rows = Vec::new();
    for metric in DistanceMetric::ALL {
        let mut cfg = config.clone();
        cfg.gcd_metric = metric;
        let run_dir = out_dir.join(metric.name());
        let outcome = train(&cfg, data_dir, &run_dir, None)?;
        let mut state = checkpoint::load(&outcome.final_path)?.state;
        let report = evaluate(
            &mut state,
            &eval_pairs,
            cfg.threshold,
            metric,
            cfg.batch_size,
        )?;
        rows.push((metric.name().to_string(), report.change_gcd));
    }
    Ok(AblationTable { rows })
}
