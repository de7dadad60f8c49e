//! Anchor filtering and selection: keep the most confident anchors of an
//! image, then pick the best-scoring anchor for each decoupled phrase.

use crate::decoupling::DecoupleResult;
use crate::error::{check_dim, Error, Result};
use crate::hemix::{FeatureVector, ProjectionBundle};
use crate::metrics::BBox;

pub const DEFAULT_TOP_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorRecord {
    pub feature: FeatureVector,
    pub confidence: f64,
    pub bbox: BBox,
}

impl AnchorRecord {
    pub fn new(feature: FeatureVector, confidence: f64, bbox: BBox) -> Result<Self> {
        if !confidence.is_finite() {
            return Err(Error::domain("anchor confidence must be finite"));
        }
        if !bbox.is_well_ordered() {
            return Err(Error::domain(format!("anchor box {:?} must have x1 < x2 and y1 < y2", bbox.to_array())));
        }
        Ok(Self {
            feature,
            confidence,
            bbox,
        })
    }
}

/// Number of anchors kept: `ceil(fraction * n)`, at least 1.
pub fn kept_count(n: usize, top_fraction: f64) -> usize {
    // shave a relative hair so products like 0.1 * 30 do not round up
    let raw = top_fraction * n as f64 * (1.0 - 1e-12);
    (raw.ceil() as usize).clamp(1, n)
}

/// Keeps the `ceil(fraction * n)` most confident anchors (ties go to the
/// lower index), returned in their original order.
pub fn filter_anchors(anchors: &[AnchorRecord], top_fraction: f64) -> Result<Vec<AnchorRecord>> {
    Ok(filter_anchor_indices(anchors, top_fraction)?
        .into_iter()
        .map(|i| anchors[i].clone())
        .collect())
}

/// Indices kept by [`filter_anchors`], ascending.
pub fn filter_anchor_indices(anchors: &[AnchorRecord], top_fraction: f64) -> Result<Vec<usize>> {
    if anchors.is_empty() {
        return Err(Error::domain("no anchors to filter"));
    }
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(Error::domain(format!("top fraction {top_fraction} outside (0, 1]")));
    }
    let mut order: Vec<usize> = (0..anchors.len()).collect();
    order.sort_by(|&a, &b| {
        anchors[b]
            .confidence
            .total_cmp(&anchors[a].confidence)
            .then(a.cmp(&b))
    });
    order.truncate(kept_count(anchors.len(), top_fraction));
    order.sort_unstable();
    Ok(order)
}

/// Mixed similarity of every anchor against one text feature.
pub fn score_anchors(text_feature: &FeatureVector, anchors: &[AnchorRecord], bundle: &ProjectionBundle) -> Result<Vec<f64>> {
    check_dim(bundle.dim(), text_feature.dim())?;
    let text = bundle.project_text(text_feature);
    anchors
        .iter()
        .map(|a| {
            check_dim(bundle.dim(), a.feature.dim())?;
            let (se, sh) = bundle.pair_sims(&bundle.project_visual(&a.feature), &text);
            Ok(bundle.mix(se, sh))
        })
        .collect()
}

/// First index of the maximum score.
pub fn argmax_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.map_or(true, |(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

pub fn select_anchor(text_feature: &FeatureVector, anchors: &[AnchorRecord], bundle: &ProjectionBundle) -> Result<usize> {
    if anchors.is_empty() {
        return Err(Error::domain("cannot select from an empty anchor set"));
    }
    let scores = score_anchors(text_feature, anchors, bundle)?;
    Ok(argmax_first(&scores).expect("nonempty"))
}

/// Everything needed to ground one sample.
#[derive(Debug, Clone)]
pub struct GroundingInput<'a> {
    pub sample_id: &'a str,
    pub anchors: &'a [AnchorRecord],
    pub decoupled: &'a DecoupleResult,
    /// One feature per decoupled phrase, in phrase order.
    pub phrase_features: &'a [FeatureVector],
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundingOutput {
    pub sample_id: String,
    pub boxes: Vec<BBox>,
    pub phrases_used: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundingOptions {
    pub top_fraction: f64,
    /// Greedily exclude anchors already chosen by earlier phrases while any
    /// unused anchor remains.
    pub distinct_anchors: bool,
}

impl Default for GroundingOptions {
    fn default() -> Self {
        Self {
            top_fraction: DEFAULT_TOP_FRACTION,
            distinct_anchors: false,
        }
    }
}

pub fn ground(input: &GroundingInput<'_>, bundle: &ProjectionBundle, opts: GroundingOptions) -> Result<GroundingOutput> {
    let k = input.decoupled.count();
    if input.phrase_features.len() != k {
        return Err(Error::domain(format!(
            "sample {}: {} phrase features for {} phrases",
            input.sample_id,
            input.phrase_features.len(),
            k
        )));
    }
    let mut out = GroundingOutput {
        sample_id: input.sample_id.to_string(),
        boxes: Vec::with_capacity(k),
        phrases_used: Vec::with_capacity(k),
    };
    if k == 0 {
        return Ok(out);
    }
    let kept = filter_anchors(input.anchors, opts.top_fraction)?;
    let mut used = vec![false; kept.len()];
    for (phrase, feature) in input.decoupled.phrases().iter().zip(input.phrase_features) {
        let mut scores = score_anchors(feature, &kept, bundle)?;
        if opts.distinct_anchors && used.iter().any(|u| !u) {
            for (s, u) in scores.iter_mut().zip(&used) {
                if *u {
                    *s = f64::NEG_INFINITY;
                }
            }
        }
        let idx = argmax_first(&scores).expect("filter keeps at least one anchor");
        used[idx] = true;
        out.boxes.push(kept[idx].bbox);
        out.phrases_used.push(phrase.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hemix::MixParams;

    fn anchor(feature: &[f64], confidence: f64, x: f64) -> AnchorRecord {
        AnchorRecord::new(
            FeatureVector::new(feature.to_vec()).unwrap(),
            confidence,
            BBox::new(x, 0.0, x + 10.0, 10.0).unwrap(),
        )
        .unwrap()
    }

    fn euclid_identity(dim: usize) -> ProjectionBundle {
        ProjectionBundle::identity(dim, MixParams::default().with_alpha(0.0).diagnostic()).unwrap()
    }

    #[test]
    fn filter_examples() {
        let anchors: Vec<AnchorRecord> = (0..10).map(|i| anchor(&[1.0], (i * 7 % 10) as f64 / 10.0, i as f64)).collect();
        let kept = filter_anchors(&anchors, 0.10).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].confidence, 0.9);

        let all = filter_anchors(&anchors, 1.0).unwrap();
        assert_eq!(all, anchors);

        assert_eq!(filter_anchors(&anchors[..5], 0.10).unwrap().len(), 1);
        assert!(filter_anchors(&[], 0.5).is_err());
        assert!(filter_anchors(&anchors, 0.0).is_err());
    }

    #[test]
    fn kept_count_rounding() {
        assert_eq!(kept_count(30, 0.1), 3);
        assert_eq!(kept_count(31, 0.1), 4);
        assert_eq!(kept_count(5, 0.1), 1);
        assert_eq!(kept_count(10, 1.0), 10);
    }

    #[test]
    fn confidence_ties_keep_lower_index() {
        let anchors: Vec<AnchorRecord> = (0..4).map(|i| anchor(&[1.0], 0.5, i as f64)).collect();
        assert_eq!(filter_anchor_indices(&anchors, 0.5).unwrap(), vec![0, 1]);
    }

    #[test]
    fn select_examples() {
        let b = euclid_identity(2);
        let t = FeatureVector::new(vec![1.0, 0.0]).unwrap();
        assert_eq!(select_anchor(&t, &[anchor(&[0.0, 3.0], 1.0, 0.0)], &b).unwrap(), 0);
        let same: Vec<AnchorRecord> = (0..3).map(|i| anchor(&[0.5, 0.5], 1.0, i as f64)).collect();
        assert_eq!(select_anchor(&t, &same, &b).unwrap(), 0);
        let crafted = [anchor(&[1.0, 0.0], 1.0, 0.0), anchor(&[2.0, 0.0], 1.0, 1.0), anchor(&[0.5, 9.0], 1.0, 2.0)];
        assert_eq!(score_anchors(&t, &crafted, &b).unwrap(), vec![1.0, 2.0, 0.5]);
        assert_eq!(select_anchor(&t, &crafted, &b).unwrap(), 1);
    }

    #[test]
    fn ground_cases() {
        let b = euclid_identity(2);
        let anchors = [anchor(&[1.0, 0.0], 0.9, 0.0), anchor(&[0.0, 1.0], 0.8, 50.0)];
        let none = DecoupleResult::no_target("0");
        let input = GroundingInput {
            sample_id: "s",
            anchors: &anchors,
            decoupled: &none,
            phrase_features: &[],
        };
        let full = GroundingOptions {
            top_fraction: 1.0,
            distinct_anchors: false,
        };
        assert!(ground(&input, &b, full).unwrap().boxes.is_empty());

        let two = DecoupleResult::new(vec!["a".into(), "b".into()], "");
        let feats = [
            FeatureVector::new(vec![1.0, 0.0]).unwrap(),
            FeatureVector::new(vec![0.0, 1.0]).unwrap(),
        ];
        let input = GroundingInput {
            sample_id: "s",
            anchors: &anchors,
            decoupled: &two,
            phrase_features: &feats,
        };
        let out = ground(&input, &b, full).unwrap();
        assert_eq!(out.boxes, vec![anchors[0].bbox, anchors[1].bbox]);
        assert_eq!(out.phrases_used, ["a", "b"]);

        let bad = GroundingInput {
            phrase_features: &feats[..1],
            ..input.clone()
        };
        assert!(ground(&bad, &b, full).is_err());
    }

    #[test]
    fn distinct_anchor_flag() {
        let b = euclid_identity(2);
        let anchors = [anchor(&[1.0, 0.0], 0.9, 0.0), anchor(&[0.2, 0.0], 0.8, 50.0)];
        let two = DecoupleResult::new(vec!["a".into(), "b".into()], "");
        let feats = [
            FeatureVector::new(vec![1.0, 0.0]).unwrap(),
            FeatureVector::new(vec![1.0, 0.0]).unwrap(),
        ];
        let input = GroundingInput {
            sample_id: "s",
            anchors: &anchors,
            decoupled: &two,
            phrase_features: &feats,
        };
        let mut opts = GroundingOptions {
            top_fraction: 1.0,
            distinct_anchors: false,
        };
        assert_eq!(ground(&input, &b, opts).unwrap().boxes, vec![anchors[0].bbox; 2]);
        opts.distinct_anchors = true;
        assert_eq!(ground(&input, &b, opts).unwrap().boxes, vec![anchors[0].bbox, anchors[1].bbox]);
    }
}
