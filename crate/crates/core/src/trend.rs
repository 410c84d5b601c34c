//! Inference-time decoding of change and trend maps.
//!
//! The change map thresholds the GCD-branch distance map. The trend map
//! compares which channel each stream's independent features highlight:
//! the argmax over logits equals the argmax of the tempered softmax, so no
//! softmax is needed here.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TREND_UNCHANGED: u8 = 0;
pub const TREND_APPEAR: u8 = 1;
pub const TREND_DISAPPEAR: u8 = 2;
pub const TREND_TRANSFORM: u8 = 3;

/// RGB palette for rendering trend maps, indexed by trend code:
/// unchanged black, appear blue, disappear white, transform red.
pub const TREND_PALETTE: [u8; 12] = [0, 0, 0, 0, 0, 255, 255, 255, 255, 255, 0, 0];

/// Binary per-pixel change map; 1 = changed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChangeMap {
    pub h: usize,
    pub w: usize,
    pub values: Vec<u8>,
}

/// Per-pixel trend codes: 0 unchanged, 1 appear, 2 disappear, 3 transform.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrendMap {
    pub h: usize,
    pub w: usize,
    pub codes: Vec<u8>,
}

/// Threshold a distance map `[N,1,H,W]`; a pixel is changed iff its
/// distance is `>=` the threshold.
pub fn decode_change(dm: &Tensor, threshold: f32) -> Result<Vec<ChangeMap>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(
            "decode_change",
            format!("threshold must lie in (0,1), got {threshold}"),
        ));
    }
    let (n, c, h, w) = dm.dims4()?;
    if c != 1 {
        return Err(Error::dim("decode_change", "channels", 1, c));
    }
    let plane = h * w;
    Ok((0..n)
        .map(|s| ChangeMap {
            h,
            w,
            values: dm.data()[s * plane..(s + 1) * plane]
                .iter()
                .map(|v| u8::from(*v >= threshold))
                .collect(),
        })
        .collect())
}

/// Per-pixel channel argmax; ties break to the lowest channel index.
fn argmax_channel(data: &[f32], c: usize, plane: usize, sample: usize, px: usize) -> usize {
    let mut best = 0usize;
    let mut best_v = data[(sample * c) * plane + px];
    for ch in 1..c {
        let v = data[(sample * c + ch) * plane + px];
        if v > best_v {
            best_v = v;
            best = ch;
        }
    }
    best
}

/// Classify each pixel's trend from the highlighted channels of the two
/// independent feature maps `[N,3,H,W]`.
pub fn decode_trend(fi1: &Tensor, fi2: &Tensor, bg_index: usize) -> Result<Vec<TrendMap>> {
    let (n, c, h, w) = fi1.dims4()?;
    if fi1.shape() != fi2.shape() {
        return Err(Error::invalid(
            "decode_trend",
            format!("shape mismatch: {:?} vs {:?}", fi1.shape(), fi2.shape()),
        ));
    }
    if bg_index >= c {
        return Err(Error::dim("decode_trend", "background channel", c - 1, bg_index));
    }
    let plane = h * w;
    Ok((0..n)
        .map(|s| {
            let codes = (0..plane)
                .map(|px| {
                    let a1 = argmax_channel(fi1.data(), c, plane, s, px);
                    let a2 = argmax_channel(fi2.data(), c, plane, s, px);
                    classify(a1, a2, bg_index)
                })
                .collect();
            TrendMap { h, w, codes }
        })
        .collect())
}

/// The trend rule set; exhaustive over all (a1, a2) pairs.
pub fn classify(a1: usize, a2: usize, bg: usize) -> u8 {
    if a1 == a2 {
        TREND_UNCHANGED
    } else if a1 == bg {
        TREND_APPEAR
    } else if a2 == bg {
        TREND_DISAPPEAR
    } else {
        TREND_TRANSFORM
    }
}

/// A pixel is changed iff its trend code is not `unchanged`. Used for the
/// consistency diagnostic against the GCD branch.
pub fn trend_to_change(tm: &TrendMap) -> ChangeMap {
    ChangeMap {
        h: tm.h,
        w: tm.w,
        values: tm
            .codes
            .iter()
            .map(|c| u8::from(*c != TREND_UNCHANGED))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_nine_argmax_pairs_get_exactly_one_code() {
        let bg = 2;
        let mut seen = Vec::new();
        for a1 in 0..3 {
            for a2 in 0..3 {
                let code = classify(a1, a2, bg);
                assert!(code <= 3);
                seen.push(((a1, a2), code));
            }
        }
        // spot-check the paper's three named cases
        assert_eq!(classify(2, 0, 2), TREND_APPEAR); // background -> foreground A
        assert_eq!(classify(0, 1, 2), TREND_TRANSFORM); // foreground A -> B
        assert_eq!(classify(1, 1, 2), TREND_UNCHANGED);
        assert_eq!(classify(0, 2, 2), TREND_DISAPPEAR);
        assert_eq!(seen.len(), 9);
    }

    #[test]
    fn swapping_streams_swaps_appear_and_disappear() {
        let bg = 2;
        for a1 in 0..3 {
            for a2 in 0..3 {
                let fwd = classify(a1, a2, bg);
                let rev = classify(a2, a1, bg);
                match fwd {
                    TREND_APPEAR => assert_eq!(rev, TREND_DISAPPEAR),
                    TREND_DISAPPEAR => assert_eq!(rev, TREND_APPEAR),
                    other => assert_eq!(rev, other),
                }
            }
        }
    }

    fn fi(shape: [usize; 4], data: Vec<f32>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn decode_change_thresholds_with_ge_convention() {
        let dm = fi([1, 1, 2, 2], vec![0.9, 0.1, 0.5, 0.4999]);
        let maps = decode_change(&dm, 0.5).unwrap();
        assert_eq!(maps[0].values, vec![1, 0, 1, 0]);
        assert!(decode_change(&dm, 0.0).is_err());
        assert!(decode_change(&dm, 1.0).is_err());
    }

    #[test]
    fn decode_change_matches_per_pixel_comparison() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let vals: Vec<f32> = (0..64).map(|_| rng.random::<f32>()).collect();
        let dm = fi([1, 1, 8, 8], vals.clone());
        let maps = decode_change(&dm, 0.37).unwrap();
        for (v, m) in vals.iter().zip(&maps[0].values) {
            assert_eq!(*m, u8::from(*v >= 0.37));
        }
    }

    #[test]
    fn decode_trend_breaks_ties_to_lowest_channel() {
        // all channels equal: argmax 0 on both streams -> unchanged
        let a = fi([1, 3, 1, 1], vec![0.5, 0.5, 0.5]);
        let maps = decode_trend(&a, &a, 2).unwrap();
        assert_eq!(maps[0].codes, vec![TREND_UNCHANGED]);

        // stream 2 ties between channels 1 and 2 -> picks 1 (foreground)
        let b = fi([1, 3, 1, 1], vec![0.0, 0.7, 0.7]);
        let bgfirst = fi([1, 3, 1, 1], vec![0.0, 0.1, 0.7]);
        let maps = decode_trend(&bgfirst, &b, 2).unwrap();
        assert_eq!(maps[0].codes, vec![TREND_APPEAR]);
    }

    #[test]
    fn decode_trend_is_invariant_to_monotone_logit_transforms() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let n = 3 * 16;
        let d1: Vec<f32> = (0..n).map(|_| 4.0 * rng.random::<f32>() - 2.0).collect();
        let d2: Vec<f32> = (0..n).map(|_| 4.0 * rng.random::<f32>() - 2.0).collect();
        let base = decode_trend(
            &fi([1, 3, 4, 4], d1.clone()),
            &fi([1, 3, 4, 4], d2.clone()),
            2,
        )
        .unwrap();
        let transforms: [fn(f32) -> f32; 3] = [
            |x| 3.0 * x + 1.5,
            |x| x.tanh(),
            |x| x.exp(),
        ];
        for f in transforms {
            let m1: Vec<f32> = d1.iter().map(|v| f(*v)).collect();
            let m2: Vec<f32> = d2.iter().map(|v| f(*v)).collect();
            let mapped = decode_trend(&fi([1, 3, 4, 4], m1), &fi([1, 3, 4, 4], m2), 2).unwrap();
            assert_eq!(base[0].codes, mapped[0].codes);
        }
    }

    #[test]
    fn trend_to_change_recode() {
        let tm = TrendMap {
            h: 2,
            w: 2,
            codes: vec![0, 1, 2, 3],
        };
        assert_eq!(trend_to_change(&tm).values, vec![0, 1, 1, 1]);
        let all_unchanged = TrendMap {
            h: 2,
            w: 2,
            codes: vec![0; 4],
        };
        assert_eq!(trend_to_change(&all_unchanged).values, vec![0; 4]);
    }

    #[test]
    fn stream_swap_on_maps_preserves_unchanged_and_transform_sets() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let n = 3 * 64;
        let d1: Vec<f32> = (0..n).map(|_| rng.random::<f32>()).collect();
        let d2: Vec<f32> = (0..n).map(|_| rng.random::<f32>()).collect();
        let f1 = fi([1, 3, 8, 8], d1);
        let f2 = fi([1, 3, 8, 8], d2);
        let fwd = decode_trend(&f1, &f2, 2).unwrap();
        let rev = decode_trend(&f2, &f1, 2).unwrap();
        for (a, b) in fwd[0].codes.iter().zip(&rev[0].codes) {
            match *a {
                TREND_APPEAR => assert_eq!(*b, TREND_DISAPPEAR),
                TREND_DISAPPEAR => assert_eq!(*b, TREND_APPEAR),
                other => assert_eq!(*b, other),
            }
        }
    }
}
