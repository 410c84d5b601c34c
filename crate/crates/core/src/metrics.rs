//! Confusion counting and the five evaluation metrics
//! (precision, recall, F1, IoU, overall accuracy), globally for change
//! maps and one-vs-rest per trend class.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::trend::{trend_to_change, ChangeMap, TrendMap};

/// Pixel-level confusion counters. Mergeable, never decreasing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    /// Count a binary prediction against a binary truth map.
    pub fn accumulate(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::dim("accumulate", "map length", truth.len(), pred.len()));
        }
        for (p, t) in pred.iter().zip(truth) {
            match (p, t) {
                (1, 1) => self.tp += 1,
                (1, 0) => self.fp += 1,
                (0, 0) => self.tn += 1,
                (0, 1) => self.fn_ += 1,
                _ => {
                    return Err(Error::invalid(
                        "accumulate",
                        format!("maps must be binary, found pred={p} truth={t}"),
                    ))
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Evaluated class of a metric row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassTag {
    Change,
    Appear,
    Disappear,
    Transform,
}

impl ClassTag {
    pub fn short(&self) -> &'static str {
        match self {
            ClassTag::Change => "C",
            ClassTag::Appear => "A",
            ClassTag::Disappear => "D",
            ClassTag::Transform => "T",
        }
    }
}

/// One row of the evaluation table; ratios in [0,1]. Any 0/0 ratio is
/// reported as 0 with `degenerate` set.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct MetricRow {
    pub class: ClassTag,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub oa: f64,
    pub degenerate: bool,
}

/// Evaluate the five metrics from a confusion. Errors on zero totals.
pub fn finalize(conf: &Confusion, class: ClassTag) -> Result<MetricRow> {
    if conf.total() == 0 {
        return Err(Error::invalid("finalize", "empty confusion"));
    }
    let mut degenerate = false;
    let mut ratio = |num: u64, den: u64| -> f64 {
        if den == 0 {
            degenerate = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(conf.tp, conf.tp + conf.fp);
    let recall = ratio(conf.tp, conf.tp + conf.fn_);
    let iou = ratio(conf.tp, conf.tp + conf.fp + conf.fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        degenerate = true;
        0.0
    };
    let oa = (conf.tp + conf.tn) as f64 / conf.total() as f64;
    Ok(MetricRow {
        class,
        precision,
        recall,
        f1,
        iou,
        oa,
        degenerate,
    })
}

/// Confusions of a trend evaluation: change (from recoded trend maps) plus
/// one-vs-rest appear/disappear/transform.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrendConfusion {
    pub change: Confusion,
    pub appear: Confusion,
    pub disappear: Confusion,
    pub transform: Confusion,
}

impl TrendConfusion {
    pub fn accumulate(&mut self, pred: &TrendMap, truth: &TrendMap) -> Result<()> {
        if pred.codes.len() != truth.codes.len() {
            return Err(Error::dim(
                "per_trend",
                "map length",
                truth.codes.len(),
                pred.codes.len(),
            ));
        }
        if let Some(bad) = pred.codes.iter().chain(&truth.codes).find(|c| **c > 3) {
            return Err(Error::invalid(
                "per_trend",
                format!("trend code {bad} out of range"),
            ));
        }
        let pc = trend_to_change(pred);
        let tc = trend_to_change(truth);
        self.change.accumulate(&pc.values, &tc.values)?;
        for (code, conf) in [
            (1u8, &mut self.appear),
            (2, &mut self.disappear),
            (3, &mut self.transform),
        ] {
            let pv: Vec<u8> = pred.codes.iter().map(|c| u8::from(*c == code)).collect();
            let tv: Vec<u8> = truth.codes.iter().map(|c| u8::from(*c == code)).collect();
            conf.accumulate(&pv, &tv)?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &TrendConfusion) {
        self.change.merge(&other.change);
        self.appear.merge(&other.appear);
        self.disappear.merge(&other.disappear);
        self.transform.merge(&other.transform);
    }

    pub fn rows(&self) -> Result<Vec<MetricRow>> {
        Ok(vec![
            finalize(&self.change, ClassTag::Change)?,
            finalize(&self.appear, ClassTag::Appear)?,
            finalize(&self.disappear, ClassTag::Disappear)?,
            finalize(&self.transform, ClassTag::Transform)?,
        ])
    }
}

/// One-shot per-trend evaluation of a single map pair.
pub fn per_trend(pred: &TrendMap, truth: &TrendMap) -> Result<Vec<MetricRow>> {
    let mut conf = TrendConfusion::default();
    conf.accumulate(pred, truth)?;
    conf.rows()
}

/// Change-map confusion against a raw binary label.
pub fn change_confusion(pred: &ChangeMap, truth: &[u8]) -> Result<Confusion> {
    let mut conf = Confusion::default();
    conf.accumulate(&pred.values, truth)?;
    Ok(conf)
}

// ── reporting ───────────────────────────────────────────────────────

/// Full evaluation report: trend rows (C/A/D/T), the GCD-branch change
/// row, and the per-pixel disagreement rate between the two branches.
#[derive(Clone, Debug)]
pub struct EvalReport {
    /// C/A/D/T rows from the trend branch, when trend labels exist.
    pub trend_rows: Option<Vec<MetricRow>>,
    /// Change row of the GCD branch distance map.
    pub change_gcd: MetricRow,
    /// Fraction of pixels where the GCD change map and the recoded trend
    /// map disagree.
    pub disagreement: f64,
    pub samples: usize,
}

impl EvalReport {
    /// Percentages with two decimals, mirroring the table layout of the
    /// evaluation protocol.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "class       P       R       F     IoU      OA");
        if let Some(rows) = &self.trend_rows {
            for row in rows {
                let _ = writeln!(
                    out,
                    "{:<5} {:>7} {:>7} {:>7} {:>7} {:>7}{}",
                    row.class.short(),
                    pct(row.precision),
                    pct(row.recall),
                    pct(row.f1),
                    pct(row.iou),
                    pct(row.oa),
                    if row.degenerate { "  (degenerate)" } else { "" },
                );
            }
        }
        let row = &self.change_gcd;
        let _ = writeln!(
            out,
            "{:<5} {:>7} {:>7} {:>7} {:>7} {:>7}{}",
            "C_gcd",
            pct(row.precision),
            pct(row.recall),
            pct(row.f1),
            pct(row.iou),
            pct(row.oa),
            if row.degenerate { "  (degenerate)" } else { "" },
        );
        let _ = writeln!(out, "gcd/trend disagreement: {}%", pct(self.disagreement));
        let _ = writeln!(out, "samples: {}", self.samples);
        out
    }

    /// JSON object keyed `C`/`A`/`D`/`T`/`change_gcd`, each mapping to the
    /// five metrics as percentages with two decimals.
    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        if let Some(rows) = &self.trend_rows {
            for row in rows {
                map.insert(row.class.short().to_string(), row_json(row));
            }
        }
        map.insert("change_gcd".to_string(), row_json(&self.change_gcd));
        map.insert(
            "disagreement".to_string(),
            serde_json::json!(round2(self.disagreement * 100.0)),
        );
        map.insert("samples".to_string(), serde_json::json!(self.samples));
        serde_json::Value::Object(map)
    }
}

/// Table produced by the ablation harness: one row per distance metric.
#[derive(Clone, Debug)]
pub struct AblationTable {
    pub rows: Vec<(String, MetricRow)>,
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "distance        P       R       F     IoU      OA");
        for (name, row) in &self.rows {
            let _ = writeln!(
                out,
                "{:<10} {:>7} {:>7} {:>7} {:>7} {:>7}",
                name,
                pct(row.precision),
                pct(row.recall),
                pct(row.f1),
                pct(row.iou),
                pct(row.oa),
            );
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        let map: BTreeMap<String, serde_json::Value> = self
            .rows
            .iter()
            .map(|(name, row)| (name.clone(), row_json(row)))
            .collect();
        serde_json::json!(map)
    }
}

fn row_json(row: &MetricRow) -> serde_json::Value {
    serde_json::json!({
        "P": round2(row.precision * 100.0),
        "R": round2(row.recall * 100.0),
        "F": round2(row.f1 * 100.0),
        "IoU": round2(row.iou * 100.0),
        "OA": round2(row.oa * 100.0),
        "degenerate": row.degenerate,
    })
}

/// Percentage with exactly two decimals, as printed in the text table.
pub fn pct(ratio: f64) -> String {
    format!("{:.2}", ratio * 100.0)
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}
