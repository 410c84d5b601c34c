//! Differentiable per-pixel distance maps between paired feature tensors.
//!
//! Softmatch is the primary metric: one minus the inner product of the two
//! pixels' tempered channel-softmaxes, which lives strictly inside (0,1)
//! and rewards the two streams for highlighting the same (unchanged) or
//! different (changed) channels. Cosine and squashed Euclidean are kept as
//! drop-in replacements for the ablation harness.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Which distance produced a map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    Softmatch,
    Cosine,
    Euclidean,
}

impl DistanceMetric {
    pub const ALL: [DistanceMetric; 3] = [
        DistanceMetric::Euclidean,
        DistanceMetric::Cosine,
        DistanceMetric::Softmatch,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            DistanceMetric::Softmatch => "softmatch",
            DistanceMetric::Cosine => "cosine",
            DistanceMetric::Euclidean => "euclidean",
        }
    }
}

/// Per-pixel distance map `[N,1,H,W]` with values in (0,1) for softmatch
/// and [0,1] for the squashed alternates, tagged with its metric.
#[derive(Clone, Copy, Debug)]
pub struct DistanceMap {
    pub var: Var,
    pub metric: DistanceMetric,
}

/// Softmatch distance: `1 - <softmax_tau(p1), softmax_tau(p2)>` per pixel.
pub fn softmatch(tape: &mut Tape, f1: Var, f2: Var, tau: f32) -> Result<DistanceMap> {
    check_pair(tape, "softmatch", f1, f2)?;
    let (_, c, _) = tape.value(f1).channel_view();
    if c < 2 {
        return Err(Error::invalid(
            "softmatch",
            format!("need at least 2 channels, got {c}"),
        ));
    }
    let s1 = tape.softmax_tau(f1, tau)?;
    let s2 = tape.softmax_tau(f2, tau)?;
    let dot = tape.pixel_dot(s1, s2)?;
    let raw = tape.affine(dot, -1.0, 1.0);
    // The inner product can round to 0 or 1 in f32 under hard saturation;
    // pin the map strictly inside the open interval.
    let var = tape.clamp_open(raw);
    Ok(DistanceMap {
        var,
        metric: DistanceMetric::Softmatch,
    })
}

/// Cosine distance mapped into [0,1]: `(1 - cos) / 2`. Zero vectors fall
/// back to 0.5 with zero gradient.
pub fn cosine_dist(tape: &mut Tape, f1: Var, f2: Var) -> Result<DistanceMap> {
    check_pair(tape, "cosine_dist", f1, f2)?;
    let var = tape.cosine_dist(f1, f2)?;
    Ok(DistanceMap {
        var,
        metric: DistanceMetric::Cosine,
    })
}

/// Euclidean distance squashed into [0,1): `1 - exp(-||p1 - p2||)`.
pub fn euclid_dist(tape: &mut Tape, f1: Var, f2: Var) -> Result<DistanceMap> {
    check_pair(tape, "euclid_dist", f1, f2)?;
    let var = tape.euclid_dist(f1, f2)?;
    Ok(DistanceMap {
        var,
        metric: DistanceMetric::Euclidean,
    })
}

/// Dispatch by metric; `tau` only applies to softmatch.
pub fn by_metric(
    tape: &mut Tape,
    metric: DistanceMetric,
    f1: Var,
    f2: Var,
    tau: f32,
) -> Result<DistanceMap> {
    match metric {
        DistanceMetric::Softmatch => softmatch(tape, f1, f2, tau),
        DistanceMetric::Cosine => cosine_dist(tape, f1, f2),
        DistanceMetric::Euclidean => euclid_dist(tape, f1, f2),
    }
}

fn check_pair(tape: &Tape, op: &'static str, f1: Var, f2: Var) -> Result<()> {
    let (s1, s2) = (tape.value(f1).shape(), tape.value(f2).shape());
    if s1 != s2 {
        return Err(Error::invalid(op, format!("shape mismatch: {s1:?} vs {s2:?}")));
    }
    Ok(())
}
