//! Decouple, ground and evaluate a set of referring expressions.
//!
//! Failures are per sample: a sample that cannot be decoupled, grounded or
//! matched to ground truth is recorded with its stage and skipped, and the
//! rest of the run continues.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use log::warn;
use serde::Serialize;

use crate::decoupling::{decouple_with, parse_response, rule_based_decompose, DecoupleResult, ResponseSource};
use crate::error::{Error, Result};
use crate::grounding::{ground, AnchorRecord, GroundingInput, GroundingOptions};
use crate::hemix::{FeatureVector, ProjectionBundle};
use crate::io::{AnchorsLine, BoxesLine, DecoupledLine, ExpressionLine, PhraseFeatureLine};
use crate::metrics::{grec_report, BBox, EvalSample, GrecReport};

/// Where decoupling answers come from.
pub enum Decoupler<'a> {
    /// Replay a recorded `response` when the expression line has one,
    /// otherwise fall back to [`rule_based_decompose`].
    Offline,
    Service {
        source: &'a dyn ResponseSource,
        include_examples: bool,
        retries: usize,
    },
}

#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub grounding: GroundingOptions,
    pub iou_thresh: f64,
    pub per_sample: bool,
    /// Relative image paths are resolved against this directory.
    pub image_root: Option<PathBuf>,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            grounding: GroundingOptions::default(),
            iou_thresh: 0.5,
            per_sample: false,
            image_root: None,
        }
    }
}

/// Parsed inputs, indexed for lookup.
#[derive(Debug, Clone, Default)]
pub struct PipelineInputs {
    pub expressions: Vec<ExpressionLine>,
    pub anchors: HashMap<String, Vec<AnchorRecord>>,
    pub phrase_features: HashMap<String, FeatureVector>,
    pub gt: HashMap<String, Vec<BBox>>,
}

impl PipelineInputs {
    pub fn new(
        expressions: Vec<ExpressionLine>,
        anchors: Vec<AnchorsLine>,
        phrase_features: Vec<PhraseFeatureLine>,
        gt: Vec<BoxesLine>,
    ) -> Result<Self> {
        let mut out = Self {
            expressions,
            ..Self::default()
        };
        for line in anchors {
            let records = line.to_records()?;
            if out.anchors.insert(line.image_id.clone(), records).is_some() {
                return Err(Error::domain(format!("duplicate image_id {:?} in anchors", line.image_id)));
            }
        }
        for line in phrase_features {
            let feature = FeatureVector::new(line.feature)?;
            if out.phrase_features.insert(line.phrase.clone(), feature).is_some() {
                return Err(Error::domain(format!("duplicate phrase {:?} in phrase features", line.phrase)));
            }
        }
        for line in gt {
            if out.gt.insert(line.sample_id.clone(), line.boxes).is_some() {
                return Err(Error::domain(format!("duplicate sample_id {:?} in ground truth", line.sample_id)));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Decouple,
    Ground,
    Evaluate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleFailure {
    pub sample_id: String,
    pub stage: Stage,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineReport {
    /// Absent when no sample reached evaluation.
    #[serde(flatten)]
    pub metrics: Option<GrecReport>,
    pub n_failures: usize,
    pub failures: Vec<SampleFailure>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub decoupled: Vec<DecoupledLine>,
    pub predictions: Vec<BoxesLine>,
    pub report: PipelineReport,
}

fn decouple_sample(expr: &ExpressionLine, decoupler: &Decoupler<'_>, opts: &PipelineOptions) -> Result<DecoupleResult> {
    match decoupler {
        Decoupler::Offline => match &expr.response {
            Some(raw) => Ok(parse_response(raw)?),
            None => Ok(rule_based_decompose(&expr.expression)),
        },
        Decoupler::Service {
            source,
            include_examples,
            retries,
        } => {
            let image = match &expr.image {
                Some(p) => Some(std::fs::read(resolve(opts.image_root.as_deref(), p))?),
                None => None,
            };
            decouple_with(*source, &expr.expression, image.as_deref(), *include_examples, *retries)
        }
    }
}

fn resolve(root: Option<&Path>, path: &str) -> PathBuf {
    match root {
        Some(r) if Path::new(path).is_relative() => r.join(path),
        _ => PathBuf::from(path),
    }
}

fn ground_sample(
    expr: &ExpressionLine,
    decoupled: &DecoupleResult,
    inputs: &PipelineInputs,
    bundle: &ProjectionBundle,
    opts: &PipelineOptions,
) -> Result<Vec<BBox>> {
    if decoupled.is_no_target() {
        return Ok(Vec::new());
    }
    let anchors = inputs
        .anchors
        .get(&expr.image_id)
        .ok_or_else(|| Error::domain(format!("no anchors for image {:?}", expr.image_id)))?;
    let features = decoupled
        .phrases()
        .iter()
        .map(|p| {
            inputs
                .phrase_features
                .get(p)
                .cloned()
                .ok_or_else(|| Error::domain(format!("no feature for phrase {p:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let input = GroundingInput {
        sample_id: &expr.sample_id,
        anchors,
        decoupled,
        phrase_features: &features,
    };
    Ok(ground(&input, bundle, opts.grounding)?.boxes)
}

/// Runs every expression in input order.
pub fn run_pipeline(
    inputs: &PipelineInputs,
    bundle: &ProjectionBundle,
    decoupler: &Decoupler<'_>,
    opts: &PipelineOptions,
) -> Result<PipelineOutput> {
    let mut decoupled_lines = Vec::new();
    let mut predictions = Vec::new();
    let mut samples = Vec::new();
    let mut failures = Vec::new();
    let mut seen = BTreeMap::new();

    for expr in &inputs.expressions {
        if seen.insert(expr.sample_id.as_str(), ()).is_some() {
            return Err(Error::domain(format!("duplicate sample_id {:?} in expressions", expr.sample_id)));
        }
        let mut fail = |stage: Stage, err: Error| {
            warn!("sample {}: {stage:?} failed: {err}", expr.sample_id);
            failures.push(SampleFailure {
                sample_id: expr.sample_id.clone(),
                stage,
                message: err.to_string(),
            });
        };
        let decoupled = match decouple_sample(expr, decoupler, opts) {
            Ok(d) => d,
            Err(e) => {
                fail(Stage::Decouple, e);
                continue;
            }
        };
        decoupled_lines.push(DecoupledLine {
            sample_id: expr.sample_id.clone(),
            count: decoupled.count(),
            phrases: decoupled.phrases().to_vec(),
        });
        let boxes = match ground_sample(expr, &decoupled, inputs, bundle, opts) {
            Ok(b) => b,
            Err(e) => {
                fail(Stage::Ground, e);
                continue;
            }
        };
        predictions.push(BoxesLine {
            sample_id: expr.sample_id.clone(),
            boxes: boxes.clone(),
        });
        match inputs.gt.get(&expr.sample_id) {
            Some(gt) => samples.push(EvalSample::new(expr.sample_id.clone(), gt.clone(), boxes)),
            None => fail(Stage::Evaluate, Error::domain("no ground truth for sample")),
        }
    }

    let metrics = if samples.is_empty() {
        None
    } else {
        Some(grec_report(&samples, opts.iou_thresh, opts.per_sample)?)
    };
    Ok(PipelineOutput {
        decoupled: decoupled_lines,
        predictions,
        report: PipelineReport {
            metrics,
            n_failures: failures.len(),
            failures,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hemix::MixParams;
    use crate::io::AnchorJson;

    fn bx(x: f64) -> BBox {
        BBox::new(x, 0.0, x + 10.0, 10.0).unwrap()
    }

    fn inputs() -> PipelineInputs {
        let expr = |id: &str, text: &str, response: Option<&str>| ExpressionLine {
            sample_id: id.into(),
            image_id: "img".into(),
            expression: text.into(),
            response: response.map(String::from),
            image: None,
        };
        let anchors = vec![AnchorsLine {
            image_id: "img".into(),
            anchors: vec![
                AnchorJson {
                    feature: vec![1.0, 0.0],
                    confidence: 0.9,
                    bbox: bx(0.0),
                },
                AnchorJson {
                    feature: vec![0.0, 1.0],
                    confidence: 0.8,
                    bbox: bx(50.0),
                },
            ],
        }];
        let pf = |p: &str, f: Vec<f64>| PhraseFeatureLine {
            phrase: p.into(),
            feature: f,
        };
        let gt = |id: &str, boxes: Vec<BBox>| BoxesLine {
            sample_id: id.into(),
            boxes,
        };
        PipelineInputs::new(
            vec![
                expr("a", "left cup", None),
                expr("b", "nothing", Some("0")),
                expr("c", "unknown thing", None),
                expr("d", "x", Some("2\n1. left cup")),
            ],
            anchors,
            vec![pf("left cup", vec![1.0, 0.0])],
            vec![gt("a", vec![bx(0.0)]), gt("b", vec![]), gt("c", vec![bx(0.0)])],
        )
        .unwrap()
    }

    #[test]
    fn offline_run_records_failures() {
        let bundle = ProjectionBundle::identity(2, MixParams::default()).unwrap();
        let opts = PipelineOptions {
            grounding: GroundingOptions {
                top_fraction: 1.0,
                distinct_anchors: false,
            },
            ..PipelineOptions::default()
        };
        let out = run_pipeline(&inputs(), &bundle, &Decoupler::Offline, &opts).unwrap();
        assert_eq!(out.predictions.len(), 2);
        assert_eq!(out.predictions[0].boxes, vec![bx(0.0)]);
        assert!(out.predictions[1].boxes.is_empty());
        let stages: Vec<Stage> = out.report.failures.iter().map(|f| f.stage).collect();
        assert_eq!(stages, vec![Stage::Ground, Stage::Decouple]);
        let m = out.report.metrics.unwrap();
        assert_eq!((m.n_samples, m.precision_at_f1, m.n_acc), (2, 1.0, Some(1.0)));
    }

    #[test]
    fn duplicate_sample_ids_are_rejected() {
        let mut i = inputs();
        i.expressions.push(i.expressions[0].clone());
        let bundle = ProjectionBundle::identity(2, MixParams::default()).unwrap();
        assert!(run_pipeline(&i, &bundle, &Decoupler::Offline, &PipelineOptions::default()).is_err());
    }
}
