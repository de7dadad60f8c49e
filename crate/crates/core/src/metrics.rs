//! Generalized grounding metrics: IoU, per-sample set matching with F1,
//! Precision@(F1=1, IoU>=0.5), no-target accuracy and single-box IoU@0.5.
//!
//! A match needs IoU >= threshold (inclusive). Each prediction is assigned
//! to at most one ground-truth box, its best one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box `[x1, y1, x2, y2]` in absolute pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Accepts zero-area boxes; rejects inverted or non-finite ones.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::domain("box coordinates must be finite"));
        }
        if x2 < x1 || y2 < y1 {
            return Err(Error::domain(format!("box [{x1}, {y1}, {x2}, {y2}] is inverted")));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    /// Strictly positive width and height.
    pub fn is_well_ordered(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// Intersection over union; 0 whenever either box has zero area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (area_a, area_b) = (a.area(), b.area());
    if area_a <= 0.0 || area_b <= 0.0 {
        return 0.0;
    }
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSample {
    pub sample_id: String,
    pub gt_boxes: Vec<BBox>,
    pub pred_boxes: Vec<BBox>,
}

impl EvalSample {
    pub fn new(sample_id: impl Into<String>, gt_boxes: Vec<BBox>, pred_boxes: Vec<BBox>) -> Self {
        Self {
            sample_id: sample_id.into(),
            gt_boxes,
            pred_boxes,
        }
    }

    pub fn is_no_target(&self) -> bool {
        self.gt_boxes.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MatchReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub f1: f64,
}

impl MatchReport {
    pub fn is_perfect(&self) -> bool {
        self.f1 == 1.0
    }
}

fn check_thresh(iou_thresh: f64) -> Result<()> {
    if iou_thresh > 0.0 && iou_thresh <= 1.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("IoU threshold {iou_thresh} outside (0, 1]")))
    }
}

/// Greedy set matching for one sample.
///
/// Every prediction picks its highest-IoU ground truth among those at or
/// above the threshold (lowest index on ties). For each ground truth only
/// the best of the predictions that picked it is a true positive; the rest
/// of the predictions are false positives and unmatched ground truths are
/// false negatives. With no ground truth, F1 is 1 for an empty prediction
/// set and 0 otherwise.
pub fn match_sample(s: &EvalSample, iou_thresh: f64) -> Result<MatchReport> {
    check_thresh(iou_thresh)?;
    let n_gt = s.gt_boxes.len();
    let n_pred = s.pred_boxes.len();
    if n_gt == 0 {
        return Ok(MatchReport {
            tp: 0,
            fp: n_pred,
            fn_: 0,
            f1: if n_pred == 0 { 1.0 } else { 0.0 },
        });
    }

    // best (iou, pred index) claiming each ground truth
    let mut winner: Vec<Option<(f64, usize)>> = vec![None; n_gt];
    for (p_idx, pred) in s.pred_boxes.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (g_idx, gt) in s.gt_boxes.iter().enumerate() {
            let v = iou(pred, gt);
            if v >= iou_thresh && best.map_or(true, |(_, b)| v > b) {
                best = Some((g_idx, v));
            }
        }
        if let Some((g_idx, v)) = best {
            let slot = &mut winner[g_idx];
            if slot.map_or(true, |(w, _)| v > w) {
                *slot = Some((v, p_idx));
            }
        }
    }
    let tp = winner.iter().filter(|w| w.is_some()).count();
    let fp = n_pred - tp;
    let fn_ = n_gt - tp;
    let f1 = (2 * tp) as f64 / (2 * tp + fp + fn_) as f64;
    Ok(MatchReport { tp, fp, fn_, f1 })
}

/// Fraction of samples matched perfectly (F1 = 1).
pub fn precision_at_f1(samples: &[EvalSample], iou_thresh: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::domain("precision@F1 over an empty sample set"));
    }
    let mut perfect = 0usize;
    for s in samples {
        if match_sample(s, iou_thresh)?.is_perfect() {
            perfect += 1;
        }
    }
    Ok(perfect as f64 / samples.len() as f64)
}

/// Among no-target samples, the fraction predicted empty.
pub fn n_acc(samples: &[EvalSample]) -> Result<f64> {
    let no_target: Vec<&EvalSample> = samples.iter().filter(|s| s.is_no_target()).collect();
    if no_target.is_empty() {
        return Err(Error::domain("N-acc is undefined without no-target samples"));
    }
    let correct = no_target.iter().filter(|s| s.pred_boxes.is_empty()).count();
    Ok(correct as f64 / no_target.len() as f64)
}

/// Single-target accuracy: fraction of samples whose one prediction reaches
/// IoU >= 0.5 with the one ground truth.
pub fn iou_at_05(samples: &[EvalSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::domain("IoU@0.5 over an empty sample set"));
    }
    let mut hits = 0usize;
    for s in samples {
        if s.gt_boxes.len() != 1 || s.pred_boxes.len() != 1 {
            return Err(Error::domain(format!(
                "sample {} has {} ground truths and {} predictions; IoU@0.5 needs exactly one of each",
                s.sample_id,
                s.gt_boxes.len(),
                s.pred_boxes.len()
            )));
        }
        if iou(&s.gt_boxes[0], &s.pred_boxes[0]) >= 0.5 {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleReport {
    pub sample_id: String,
    pub n_gt: usize,
    pub n_pred: usize,
    #[serde(flatten)]
    pub matching: MatchReport,
}

/// Dataset-level generalized grounding report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrecReport {
    pub precision_at_f1: f64,
    /// `None` when the set has no no-target samples.
    pub n_acc: Option<f64>,
    pub n_samples: usize,
    pub n_no_target: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_sample: Option<Vec<SampleReport>>,
}

pub fn grec_report(samples: &[EvalSample], iou_thresh: f64, per_sample: bool) -> Result<GrecReport> {
    let reports = samples
        .iter()
        .map(|s| {
            Ok(SampleReport {
                sample_id: s.sample_id.clone(),
                n_gt: s.gt_boxes.len(),
                n_pred: s.pred_boxes.len(),
                matching: match_sample(s, iou_thresh)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n_no_target = samples.iter().filter(|s| s.is_no_target()).count();
    Ok(GrecReport {
        precision_at_f1: precision_at_f1(samples, iou_thresh)?,
        n_acc: if n_no_target > 0 { Some(n_acc(samples)?) } else { None },
        n_samples: samples.len(),
        n_no_target,
        per_sample: per_sample.then_some(reports),
    })
}
