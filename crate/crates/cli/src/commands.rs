use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use log::{info, warn};
use serde::Serialize;

use hyperground_core::checks::{geometry_suite, gradient_suite, GradSuiteConfig};
use hyperground_core::decoupling::{decouple_with, rule_based_decompose, HttpService, ServiceConfig};
use hyperground_core::estimator::{
    mse_of_mix, monte_carlo_mse, optimal_alpha, quadratic_coeffs, McEstimate, MixtureErrorModel, QuadraticCoeffs,
};
use hyperground_core::grounding::{ground as ground_one, GroundingInput, GroundingOptions};
use hyperground_core::hemix::{EmbedStrategy, FeatureVector, ProjectionBundle};
use hyperground_core::io::{
    read_jsonl, write_jsonl, AnchorsLine, BoxesLine, ExpressionLine, PhraseFeatureLine, TextsLine, SCHEMA_ANCHORS,
    SCHEMA_BOXES, SCHEMA_DECOUPLED, SCHEMA_EXPRESSIONS, SCHEMA_PHRASE_FEATURES, SCHEMA_TEXTS,
};
use hyperground_core::metrics::{grec_report, iou_at_05, EvalSample, GrecReport};
use hyperground_core::optim::OptimizerKind;
use hyperground_core::pipeline::{run_pipeline, Decoupler, PipelineInputs, PipelineOptions, SampleFailure, Stage};
use hyperground_core::trainer::{
    apex_report, dataset_loss, generate_dataset, selection_accuracy, train, valid_records, DatasetConfig,
    HierarchyConfig, SyntheticHierarchy, TrainConfig,
};
use hyperground_core::decoupling::DecoupleResult;
use hyperground_core::Error as CoreError;

use crate::{
    AnalyzeAlphaArgs, DecoupleArgs, EmbedArg, EvalArgs, GeomCheckArgs, GlobalArgs, GradCheckArgs, GroundArgs, MetricArg,
    OptimizerArg, Outcome, PipelineArgs, ServiceArgs, TrainToyArgs,
};

fn print_json<T: Serialize>(value: &T) -> Result<String> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::io::stdout().write_all(text.as_bytes())?;
    Ok(text)
}

fn require_out(global: &GlobalArgs, what: &str) -> Result<PathBuf> {
    global.out.clone().with_context(|| format!("--out <{what}> is required"))
}

fn load_bundle(path: &Path) -> Result<ProjectionBundle> {
    ProjectionBundle::load(path).with_context(|| format!("loading weights {}", path.display()))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

pub fn geom_check(global: &GlobalArgs, args: &GeomCheckArgs) -> Result<Outcome> {
    let results = geometry_suite(global.seed, args.cases)?;
    for r in &results {
        println!(
            "{} {} ({} cases, {} failures, worst {:.3e})",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.cases,
            r.failures,
            r.worst
        );
    }
    if let Some(out) = &global.out {
        fs::write(out, serde_json::to_string_pretty(&results)? + "\n")?;
    }
    Ok(if results.iter().all(|r| r.passed()) { Outcome::Ok } else { Outcome::Partial })
}

pub fn grad_check(global: &GlobalArgs, args: &GradCheckArgs) -> Result<Outcome> {
    let cfg = GradSuiteConfig {
        batches: args.batches,
        max_dim: args.max_dim,
        epsilon: args.epsilon,
        ..GradSuiteConfig::default()
    };
    let cases = gradient_suite(global.seed, &cfg)?;
    let worst = cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let failed = cases.iter().filter(|c| !(c.max_rel_err < args.tol)).count();
    println!(
        "{} gradient check ({} batches, {} over {:.0e}, max relative error {:.3e})",
        if failed == 0 { "PASS" } else { "FAIL" },
        cases.len(),
        failed,
        args.tol,
        worst
    );
    if let Some(out) = &global.out {
        fs::write(out, serde_json::to_string_pretty(&cases)? + "\n")?;
    }
    Ok(if failed == 0 { Outcome::Ok } else { Outcome::Partial })
}

#[derive(Serialize)]
struct CurvePoint {
    alpha: f64,
    mse: f64,
}

#[derive(Serialize)]
struct OracleCheck {
    alpha: f64,
    closed_form: f64,
    monte_carlo: McEstimate,
    z_score: f64,
    within_3_stderr: bool,
}

#[derive(Serialize)]
struct AlphaAnalysis {
    model: MixtureErrorModel,
    coeffs: QuadraticCoeffs,
    /// `null` when the quadratic is degenerate (A ~ 0).
    alpha_star: Option<f64>,
    alpha_star_in_open_unit_interval: bool,
    mse_at_alpha_star: Option<f64>,
    mse_at_0: f64,
    mse_at_1: f64,
    curve: Vec<CurvePoint>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    oracle: Vec<OracleCheck>,
}

pub fn analyze_alpha(global: &GlobalArgs, args: &AnalyzeAlphaArgs) -> Result<Outcome> {
    let m = MixtureErrorModel::new(args.b_e, args.b_h, args.sigma_e, args.sigma_h, args.rho)?;
    let coeffs = quadratic_coeffs(&m);
    let star = optimal_alpha(&m);
    let alpha_star = star.value();
    if let Some(a) = alpha_star {
        if !star.in_open_unit_interval() {
            warn!("optimal alpha {a} lies outside (0, 1); reported unclamped");
        }
    }
    let curve = (0..=10)
        .map(|k| {
            let alpha = k as f64 / 10.0;
            CurvePoint {
                alpha,
                mse: mse_of_mix(alpha, &m),
            }
        })
        .collect();

    let mut oracle = Vec::new();
    if args.mc_n > 0 {
        let mut alphas = vec![0.0, 0.5, 1.0];
        alphas.extend(alpha_star);
        for (k, &alpha) in alphas.iter().enumerate() {
            let mc = monte_carlo_mse(alpha, &m, args.mc_n, global.seed.wrapping_add(k as u64))?;
            let closed = mse_of_mix(alpha, &m);
            let z = if mc.stderr > 0.0 { (mc.estimate - closed) / mc.stderr } else { 0.0 };
            oracle.push(OracleCheck {
                alpha,
                closed_form: closed,
                monte_carlo: mc,
                z_score: z,
                within_3_stderr: (mc.estimate - closed).abs() <= 3.0 * mc.stderr + 1e-12 * closed.abs(),
            });
        }
    }
    let ok = oracle.iter().all(|o| o.within_3_stderr);
    let report = AlphaAnalysis {
        model: m,
        coeffs,
        alpha_star,
        alpha_star_in_open_unit_interval: star.in_open_unit_interval(),
        mse_at_alpha_star: alpha_star.map(|a| mse_of_mix(a, &m)),
        mse_at_0: mse_of_mix(0.0, &m),
        mse_at_1: mse_of_mix(1.0, &m),
        curve,
        oracle,
    };
    let text = print_json(&report)?;
    if let Some(out) = &global.out {
        fs::write(out, text)?;
    }
    Ok(if ok { Outcome::Ok } else { Outcome::Partial })
}

#[derive(Serialize)]
struct TrainSummary {
    train_samples: usize,
    dropped_invalid: usize,
    initial_loss: f64,
    final_loss: f64,
    loss_ratio: f64,
    eval_accuracy: f64,
    apex_ratio_initial: Option<f64>,
    apex_ratio: Option<f64>,
    weights: PathBuf,
    trace: PathBuf,
    report: PathBuf,
}

pub fn train_toy(global: &GlobalArgs, args: &TrainToyArgs) -> Result<Outcome> {
    let weights = require_out(global, "weights file")?;
    let trace_path = args.trace.clone().unwrap_or_else(|| sibling(&weights, ".trace.csv"));
    let report_path = args.report.clone().unwrap_or_else(|| sibling(&weights, ".apex.json"));

    let h = SyntheticHierarchy::generate(&HierarchyConfig {
        n_parents: args.parents,
        children_per_parent: args.children,
        feature_dim: args.dim,
        noise_scale: args.noise,
        seed: global.seed,
        ..HierarchyConfig::default()
    })?;
    let data_cfg = DatasetConfig {
        n_samples: args.samples,
        negatives_per_image: args.negatives,
        invalid_fraction: args.invalid_fraction,
        stream: 0,
    };
    let generated = generate_dataset(&h, &data_cfg)?;
    let held_out = generate_dataset(
        &h,
        &DatasetConfig {
            invalid_fraction: 0.0,
            stream: 1,
            ..data_cfg
        },
    )?;
    let data = valid_records(&generated);
    if data.is_empty() {
        bail!("every generated sample was flagged invalid");
    }

    let cfg = TrainConfig {
        steps: args.steps,
        lr: args.lr,
        batch_images: args.batch_images,
        negatives_per_image: args.negatives,
        alpha: args.alpha,
        tau: args.tau,
        kappa: args.kappa,
        embed: match args.embed {
            EmbedArg::Linear => EmbedStrategy::Linear,
            EmbedArg::ExpMap => EmbedStrategy::ExpMap,
        },
        optimizer: match args.optimizer {
            OptimizerArg::Sgd => OptimizerKind::Sgd,
            OptimizerArg::Adam => OptimizerKind::Adam,
        },
        weight_decay: args.weight_decay,
        intra_negatives: args.intra_negatives,
        seed: global.seed,
    };
    let out = train(&data, &cfg)?;
    let initial_loss = dataset_loss(&data, &out.initial, cfg.batch_images, cfg.intra_negatives)?;
    let final_loss = dataset_loss(&data, &out.bundle, cfg.batch_images, cfg.intra_negatives)?;
    let apex_initial = apex_report(&out.initial, &h)?;
    let apex = apex_report(&out.bundle, &h)?;

    out.bundle.save(&weights)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in out.trace.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    fs::write(&trace_path, csv).with_context(|| format!("writing {}", trace_path.display()))?;
    fs::write(&report_path, serde_json::to_string_pretty(&apex)? + "\n")
        .with_context(|| format!("writing {}", report_path.display()))?;

    print_json(&TrainSummary {
        train_samples: data.len(),
        dropped_invalid: generated.len() - data.len(),
        initial_loss,
        final_loss,
        loss_ratio: final_loss / initial_loss,
        eval_accuracy: selection_accuracy(&held_out, &out.bundle)?,
        apex_ratio_initial: apex_initial.ratio,
        apex_ratio: apex.ratio,
        weights,
        trace: trace_path,
        report: report_path,
    })?;
    Ok(Outcome::Ok)
}

fn service_config(args: &ServiceArgs) -> Result<ServiceConfig> {
    let mut cfg = ServiceConfig::from_env()?;
    cfg.timeout = Duration::from_secs(args.vlm_timeout_s);
    cfg.retries = args.retries;
    cfg.include_examples = !args.no_examples;
    Ok(cfg)
}

pub fn decouple(global: &GlobalArgs, args: &DecoupleArgs) -> Result<Outcome> {
    let result = if args.service.offline {
        rule_based_decompose(&args.expr)
    } else {
        let cfg = service_config(&args.service)?;
        let image = match &args.image {
            Some(p) => Some(fs::read(p).with_context(|| format!("reading image {}", p.display()))?),
            None => None,
        };
        let service = HttpService::new(cfg.clone());
        match decouple_with(&service, &args.expr, image.as_deref(), cfg.include_examples, cfg.retries) {
            Ok(r) => r,
            Err(e @ CoreError::RetriesExhausted { .. }) => {
                eprintln!("error: {e}");
                return Ok(Outcome::Partial);
            }
            Err(e) => return Err(e.into()),
        }
    };
    let text = print_json(&result)?;
    if let Some(out) = &global.out {
        fs::write(out, text)?;
    }
    Ok(Outcome::Ok)
}

#[derive(Serialize)]
struct FailureSummary<'a> {
    n_failures: usize,
    failures: &'a [SampleFailure],
}

fn ground_texts_line(
    line: &TextsLine,
    anchors: &HashMap<String, AnchorsLine>,
    bundle: &ProjectionBundle,
    opts: GroundingOptions,
) -> Result<BoxesLine, CoreError> {
    let image = anchors
        .get(&line.image_id)
        .ok_or_else(|| CoreError::Domain(format!("no anchors for image {:?}", line.image_id)))?;
    let records = image.to_records()?;
    let features = line
        .features
        .iter()
        .map(|f| FeatureVector::new(f.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let decoupled = DecoupleResult::new(line.phrases.clone(), "");
    let out = ground_one(
        &GroundingInput {
            sample_id: &line.sample_id,
            anchors: &records,
            decoupled: &decoupled,
            phrase_features: &features,
        },
        bundle,
        opts,
    )?;
    Ok(BoxesLine {
        sample_id: out.sample_id,
        boxes: out.boxes,
    })
}

pub fn ground(global: &GlobalArgs, args: &GroundArgs) -> Result<Outcome> {
    let out = require_out(global, "predictions file")?;
    let bundle = load_bundle(&args.weights)?;
    let anchors: Vec<AnchorsLine> = read_jsonl(&args.anchors, SCHEMA_ANCHORS)?;
    let texts: Vec<TextsLine> = read_jsonl(&args.texts, SCHEMA_TEXTS)?;
    let anchors: HashMap<String, AnchorsLine> = anchors.into_iter().map(|a| (a.image_id.clone(), a)).collect();
    let opts = GroundingOptions {
        top_fraction: args.top_frac,
        distinct_anchors: args.distinct_anchors,
    };
    if !(opts.top_fraction > 0.0 && opts.top_fraction <= 1.0) {
        bail!("--top-frac {} outside (0, 1]", opts.top_fraction);
    }

    let mut predictions = Vec::new();
    let mut failures = Vec::new();
    for line in &texts {
        match ground_texts_line(line, &anchors, &bundle, opts) {
            Ok(p) => predictions.push(p),
            Err(e) => {
                warn!("sample {}: {e}", line.sample_id);
                failures.push(SampleFailure {
                    sample_id: line.sample_id.clone(),
                    stage: Stage::Ground,
                    message: e.to_string(),
                });
            }
        }
    }
    write_jsonl(&out, SCHEMA_BOXES, &predictions)?;
    info!("wrote {} predictions to {}", predictions.len(), out.display());
    print_json(&FailureSummary {
        n_failures: failures.len(),
        failures: &failures,
    })?;
    Ok(if failures.is_empty() { Outcome::Ok } else { Outcome::Partial })
}

#[derive(Serialize)]
struct EvalReport {
    #[serde(flatten)]
    metrics: Option<GrecReport>,
    n_failures: usize,
    failures: Vec<SampleFailure>,
}

#[derive(Serialize)]
struct WrecReport {
    iou_at_05: f64,
    n_samples: usize,
    n_failures: usize,
    failures: Vec<SampleFailure>,
}

pub fn eval(global: &GlobalArgs, args: &EvalArgs) -> Result<Outcome> {
    if !(args.iou > 0.0 && args.iou <= 1.0) {
        bail!("--iou {} outside (0, 1]", args.iou);
    }
    let gt: Vec<BoxesLine> = read_jsonl(&args.gt, SCHEMA_BOXES)?;
    let pred: Vec<BoxesLine> = read_jsonl(&args.pred, SCHEMA_BOXES)?;
    let mut pred_by_id: HashMap<&str, &BoxesLine> = HashMap::new();
    for p in &pred {
        if pred_by_id.insert(&p.sample_id, p).is_some() {
            bail!("duplicate sample_id {:?} in predictions", p.sample_id);
        }
    }
    let mut failures = Vec::new();
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for g in &gt {
        if !seen.insert(g.sample_id.as_str()) {
            bail!("duplicate sample_id {:?} in ground truth", g.sample_id);
        }
        match pred_by_id.get(g.sample_id.as_str()) {
            Some(p) => samples.push(EvalSample::new(g.sample_id.clone(), g.boxes.clone(), p.boxes.clone())),
            None => failures.push(SampleFailure {
                sample_id: g.sample_id.clone(),
                stage: Stage::Evaluate,
                message: "no prediction for sample".into(),
            }),
        }
    }
    for p in &pred {
        if !seen.contains(p.sample_id.as_str()) {
            failures.push(SampleFailure {
                sample_id: p.sample_id.clone(),
                stage: Stage::Evaluate,
                message: "prediction without ground truth".into(),
            });
        }
    }
    let n_failures = failures.len();
    let text = match args.metric {
        MetricArg::Grec => {
            let metrics = if samples.is_empty() {
                None
            } else {
                Some(grec_report(&samples, args.iou, args.per_sample)?)
            };
            print_json(&EvalReport {
                metrics,
                n_failures,
                failures,
            })?
        }
        MetricArg::Wrec => {
            if samples.is_empty() {
                bail!("no samples to evaluate");
            }
            print_json(&WrecReport {
                iou_at_05: iou_at_05(&samples)?,
                n_samples: samples.len(),
                n_failures,
                failures,
            })?
        }
    };
    if let Some(out) = &global.out {
        fs::write(out, text)?;
    }
    Ok(if n_failures == 0 { Outcome::Ok } else { Outcome::Partial })
}

pub fn pipeline(global: &GlobalArgs, args: &PipelineArgs) -> Result<Outcome> {
    let bundle = load_bundle(&args.weights)?;
    let expressions: Vec<ExpressionLine> = read_jsonl(&args.expressions, SCHEMA_EXPRESSIONS)?;
    let anchors: Vec<AnchorsLine> = read_jsonl(&args.anchors, SCHEMA_ANCHORS)?;
    let phrase_features: Vec<PhraseFeatureLine> = read_jsonl(&args.phrase_features, SCHEMA_PHRASE_FEATURES)?;
    let gt: Vec<BoxesLine> = read_jsonl(&args.gt, SCHEMA_BOXES)?;
    let inputs = PipelineInputs::new(expressions, anchors, phrase_features, gt)?;
    let opts = PipelineOptions {
        grounding: GroundingOptions {
            top_fraction: args.top_frac,
            distinct_anchors: args.distinct_anchors,
        },
        iou_thresh: args.iou,
        per_sample: args.per_sample,
        image_root: args.expressions.parent().map(Path::to_path_buf),
    };
    if !(opts.grounding.top_fraction > 0.0 && opts.grounding.top_fraction <= 1.0) {
        bail!("--top-frac {} outside (0, 1]", opts.grounding.top_fraction);
    }
    if !(opts.iou_thresh > 0.0 && opts.iou_thresh <= 1.0) {
        bail!("--iou {} outside (0, 1]", opts.iou_thresh);
    }

    let service;
    let decoupler = if args.service.offline {
        Decoupler::Offline
    } else {
        let cfg = service_config(&args.service)?;
        service = HttpService::new(cfg.clone());
        Decoupler::Service {
            source: &service,
            include_examples: cfg.include_examples,
            retries: cfg.retries,
        }
    };
    let output = run_pipeline(&inputs, &bundle, &decoupler, &opts)?;

    let report_text = print_json(&output.report)?;
    if let Some(dir) = &global.out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_jsonl(&dir.join("decoupled.jsonl"), SCHEMA_DECOUPLED, &output.decoupled)?;
        write_jsonl(&dir.join("predictions.jsonl"), SCHEMA_BOXES, &output.predictions)?;
        fs::write(dir.join("report.json"), report_text)?;
    }
    Ok(if output.report.n_failures == 0 { Outcome::Ok } else { Outcome::Partial })
}
