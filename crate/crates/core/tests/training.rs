//! Training-loop integration: the overfit-decrease property, end-to-end
//! train/resume on disk, the weak-supervision firewall, and the
//! divergence guard.

use std::fs;
use std::path::Path;

use trendmatch::checkpoint;
use trendmatch::config::RunConfig;
use trendmatch::distances::DistanceMetric;
use trendmatch::network::{self, ModelState, NetConfig};
use trendmatch::supervision::{self, LossWeights};
use trendmatch::synthdata::{self, generate, write_dataset, Manifest, SceneSpec, Splits};
use trendmatch::tensor::{AdamState, Tape, Tensor};
use trendmatch::trainer;
use trendmatch::Error;

fn tiny_net() -> NetConfig {
    NetConfig {
        depth: 2,
        base_channels: 6,
        feature_channels: 3,
        use_batchnorm: true,
        tau: 0.1,
    }
}

fn small_scene() -> SceneSpec {
    SceneSpec {
        image_size: 32,
        shape_count: (2, 3),
        shape_radius: (4, 7),
        ..SceneSpec::default()
    }
}

fn write_dataset_dir(dir: &Path, count: usize, train: usize, val: usize, test: usize) {
    let spec = small_scene();
    let pairs: Vec<_> = (0..count)
        .map(|i| generate(&spec, 400 + i as u64).unwrap())
        .collect();
    let manifest = Manifest {
        format_version: synthdata::DATASET_FORMAT_VERSION,
        spec,
        master_seed: 400,
        count,
        splits: Splits::from_counts(train, val, test),
    };
    write_dataset(dir, &pairs, &manifest).unwrap();
}

/// All three loss terms drop over the first 50 optimizer steps on a
/// 4-sample overfit set, averaged over 3 seeds.
#[test]
fn loss_terms_decrease_over_first_fifty_steps() {
    let spec = small_scene();
    let pairs: Vec<_> = (0..4).map(|i| generate(&spec, 70 + i).unwrap()).collect();
    let plane = 32 * 32;
    let mut t1 = Vec::new();
    let mut t2 = Vec::new();
    let mut change = Vec::new();
    for p in &pairs {
        t1.extend_from_slice(p.t1.data());
        t2.extend_from_slice(p.t2.data());
        change.extend(p.change.iter().map(|v| *v as f32));
    }
    let t1 = Tensor::new(vec![4, 3, 32, 32], t1).unwrap();
    let t2 = Tensor::new(vec![4, 3, 32, 32], t2).unwrap();
    let change = Tensor::new(vec![4, 1, 32, 32], change).unwrap();

    let mut first = [0.0f64; 3];
    let mut last = [0.0f64; 3];
    for seed in 0..3u64 {
        let mut state = ModelState::init(tiny_net(), seed).unwrap();
        let mut adam = AdamState::new(&state.param_sizes(), Default::default());
        for step in 0..50 {
            let mut tape = Tape::new();
            let fwd = network::forward(&mut tape, &mut state, &t1, &t2, true).unwrap();
            let total = supervision::total_loss(
                &mut tape,
                &fwd,
                &change,
                &LossWeights::default(),
                0.1,
                DistanceMetric::Softmatch,
            )
            .unwrap();
            if step == 0 {
                first[0] += total.report.l_gcd;
                first[1] += total.report.l_tcd;
                first[2] += total.report.l_bg;
            }
            if step == 49 {
                last[0] += total.report.l_gcd;
                last[1] += total.report.l_tcd;
                last[2] += total.report.l_bg;
            }
            tape.backward(total.var).unwrap();
            let grads: Vec<Option<&[f32]>> =
                fwd.param_vars.iter().map(|v| tape.grad(*v)).collect();
            adam.step(state.params_mut(), &grads).unwrap();
        }
    }
    for (term, (f, l)) in ["l_gcd", "l_tcd", "l_bg"].iter().zip(first.iter().zip(&last)) {
        assert!(l < f, "{term} did not decrease: {f} -> {l}");
    }
}

#[test]
fn train_resume_and_checkpoint_continuity() {
    let data = tempfile::tempdir().unwrap();
    write_dataset_dir(data.path(), 10, 8, 2, 0);
    let out = tempfile::tempdir().unwrap();

    let mut config = RunConfig {
        net: tiny_net(),
        batch_size: 4,
        epochs: 2,
        seed: 5,
        ..RunConfig::default()
    };

    let outcome = trainer::train(&config, data.path(), out.path(), None).unwrap();
    assert_eq!(outcome.epochs_run, 2);
    assert!(outcome.final_path.exists());
    assert!(outcome.best_path.is_some(), "val split given, best expected");
    let csv = fs::read_to_string(&outcome.csv_path).unwrap();
    assert!(csv.starts_with("epoch,l_gcd,l_tcd,l_bg,total,lr,val_change_f"));
    assert_eq!(csv.lines().count(), 3);

    let ckpt = checkpoint::load(&outcome.final_path).unwrap();
    assert_eq!(ckpt.epoch, 2);
    assert!(ckpt.adam.is_some());
    assert!(ckpt.rng.is_some());

    // resume continues the epoch counter
    config.epochs = 4;
    let resumed = trainer::train(&config, data.path(), out.path(), Some(&outcome.final_path)).unwrap();
    assert_eq!(resumed.epochs_run, 2);
    let ckpt = checkpoint::load(&resumed.final_path).unwrap();
    assert_eq!(ckpt.epoch, 4);
}

#[test]
fn training_never_needs_trend_labels() {
    let data = tempfile::tempdir().unwrap();
    write_dataset_dir(data.path(), 6, 5, 1, 0);
    fs::remove_dir_all(data.path().join("trend")).unwrap();
    let out = tempfile::tempdir().unwrap();

    let config = RunConfig {
        net: tiny_net(),
        batch_size: 3,
        epochs: 1,
        seed: 1,
        ..RunConfig::default()
    };
    trainer::train(&config, data.path(), out.path(), None).unwrap();
}

#[test]
fn identical_seeds_reproduce_training_bitwise() {
    let data = tempfile::tempdir().unwrap();
    write_dataset_dir(data.path(), 6, 6, 0, 0);

    let config = RunConfig {
        net: tiny_net(),
        batch_size: 3,
        epochs: 2,
        seed: 9,
        ..RunConfig::default()
    };
    let out1 = tempfile::tempdir().unwrap();
    let out2 = tempfile::tempdir().unwrap();
    let a = trainer::train(&config, data.path(), out1.path(), None).unwrap();
    let b = trainer::train(&config, data.path(), out2.path(), None).unwrap();
    let pa = checkpoint::load(&a.final_path).unwrap().state;
    let pb = checkpoint::load(&b.final_path).unwrap().state;
    assert_eq!(pa.params(), pb.params());
}

#[test]
fn divergence_aborts_with_the_right_error() {
    let data = tempfile::tempdir().unwrap();
    write_dataset_dir(data.path(), 4, 4, 0, 0);
    let out = tempfile::tempdir().unwrap();

    let mut config = RunConfig {
        net: tiny_net(),
        batch_size: 4,
        epochs: 4,
        seed: 2,
        ..RunConfig::default()
    };
    config.optimizer.lr = 1e20;

    match trainer::train(&config, data.path(), out.path(), None) {
        Err(Error::Divergence(_)) => {}
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn evaluate_with_oracle_predictions_scores_perfectly() {
    // Feeding the labels as predictions through the report path gives
    // 100.00 everywhere; this is the eval test hook.
    let spec = small_scene();
    let pairs: Vec<_> = (0..5).map(|i| generate(&spec, 900 + i).unwrap()).collect();
    let mut conf = trendmatch::metrics::TrendConfusion::default();
    for p in &pairs {
        let tm = trendmatch::trend::TrendMap {
            h: 32,
            w: 32,
            codes: p.trend.clone(),
        };
        conf.accumulate(&tm, &tm).unwrap();
    }
    for row in conf.rows().unwrap() {
        if !row.degenerate {
            assert_eq!(row.f1, 1.0);
            assert_eq!(row.oa, 1.0);
        }
    }
}
