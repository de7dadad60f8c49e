//! Desk-scale training on a synthetic concept hierarchy.
//!
//! Parents are random centroids; each child is its parent plus an offset.
//! A sample shows one child (positive anchor = child centroid + noise) and
//! carries either the child's own descriptor or, half the time, its
//! parent's. The bundle is trained with the contrastive objective to pick
//! the positive anchor, and [`apex_report`] measures whether general
//! (parent) phrases end up nearer the hyperboloid apex than specific ones.

use std::collections::BTreeMap;

use log::debug;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::Serialize;

use crate::contrastive::{contrastive_loss, contrastive_loss_value, GroundingBatch, ImageRecord};
use crate::error::{Error, Result};
use crate::grounding::argmax_first;
use crate::hemix::{EmbedStrategy, FeatureVector, MixParams, ProjectionBundle, DEFAULT_KAPPA, DEFAULT_TAU};
use crate::optim::{Optimizer, OptimizerKind};

// independent random streams derived from one seed
const STREAM_DATA: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyConfig {
    pub n_parents: usize,
    pub children_per_parent: usize,
    pub feature_dim: usize,
    /// Std of parent centroids around the origin.
    pub parent_scale: f64,
    /// Std of child offsets around their parent.
    pub child_spread: f64,
    /// Std of the per-sample feature noise.
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        Self {
            n_parents: 3,
            children_per_parent: 3,
            feature_dim: 8,
            parent_scale: 1.0,
            child_spread: 0.6,
            noise_scale: 0.1,
            seed: 42,
        }
    }
}

/// Concept tree plus one descriptor vector per concept. Parents take ids
/// `0..n_parents`, children the ids after that.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticHierarchy {
    pub parents: Vec<usize>,
    pub children: BTreeMap<usize, Vec<usize>>,
    pub feature_dim: usize,
    pub noise_scale: f64,
    pub seed: u64,
    descriptors: Vec<Vec<f64>>,
    parent_of: Vec<Option<usize>>,
}

impl SyntheticHierarchy {
    pub fn generate(cfg: &HierarchyConfig) -> Result<Self> {
        if cfg.n_parents == 0 || cfg.children_per_parent < 2 || cfg.feature_dim == 0 {
            return Err(Error::domain("hierarchy needs >= 1 parent, >= 2 children per parent and dim >= 1"));
        }
        if !(cfg.noise_scale >= 0.0 && cfg.parent_scale >= 0.0 && cfg.child_spread >= 0.0) {
            return Err(Error::domain("hierarchy scales must be nonnegative"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let gauss = |scale: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..cfg.feature_dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    scale * z
                })
                .collect()
        };
        let parents: Vec<usize> = (0..cfg.n_parents).collect();
        let mut descriptors: Vec<Vec<f64>> = parents.iter().map(|_| gauss(cfg.parent_scale, &mut rng)).collect();
        let mut parent_of = vec![None; cfg.n_parents];
        let mut children = BTreeMap::new();
        for &p in &parents {
            let mut ids = Vec::with_capacity(cfg.children_per_parent);
            for _ in 0..cfg.children_per_parent {
                let offset = gauss(cfg.child_spread, &mut rng);
                let centroid = descriptors[p].iter().zip(&offset).map(|(a, b)| a + b).collect();
                ids.push(descriptors.len());
                descriptors.push(centroid);
                parent_of.push(Some(p));
            }
            children.insert(p, ids);
        }
        Ok(Self {
            parents,
            children,
            feature_dim: cfg.feature_dim,
            noise_scale: cfg.noise_scale,
            seed: cfg.seed,
            descriptors,
            parent_of,
        })
    }

    pub fn n_concepts(&self) -> usize {
        self.descriptors.len()
    }

    pub fn descriptor(&self, concept: usize) -> &[f64] {
        &self.descriptors[concept]
    }

    pub fn parent_of(&self, concept: usize) -> Option<usize> {
        self.parent_of[concept]
    }

    pub fn is_parent(&self, concept: usize) -> bool {
        self.parent_of[concept].is_none()
    }

    pub fn all_children(&self) -> Vec<usize> {
        self.children.values().flatten().copied().collect()
    }

    /// Replaces every descriptor; test hook for degenerate inputs.
    pub fn with_descriptors(mut self, descriptors: Vec<Vec<f64>>) -> Result<Self> {
        if descriptors.len() != self.descriptors.len() || descriptors.iter().any(|d| d.len() != self.feature_dim) {
            return Err(Error::domain("descriptor table shape does not match the hierarchy"));
        }
        self.descriptors = descriptors;
        Ok(self)
    }
}

/// One generated training or evaluation sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySample {
    pub record: ImageRecord,
    pub child: usize,
    /// The text is the parent's descriptor rather than the child's.
    pub general_phrase: bool,
    /// `false` when no anchor in the image matches the text.
    pub valid: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetConfig {
    pub n_samples: usize,
    pub negatives_per_image: usize,
    /// Fraction of samples generated with no matching anchor.
    pub invalid_fraction: f64,
    /// Mixed into the hierarchy seed so several datasets can share a tree.
    pub stream: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_samples: 256,
            negatives_per_image: 2,
            invalid_fraction: 0.0,
            stream: 0,
        }
    }
}

fn noisy(base: &[f64], noise: &Normal<f64>, scale: f64, rng: &mut ChaCha8Rng) -> Result<FeatureVector> {
    let values = if scale == 0.0 {
        base.to_vec()
    } else {
        base.iter().map(|b| b + noise.sample(rng)).collect()
    };
    FeatureVector::new(values)
}

/// Draws samples deterministically from `(h.seed, cfg.stream)`.
///
/// Child-phrase samples take their first negative from a sibling and the
/// rest from other parents' children. Parent-phrase samples take every
/// negative from other parents, since a sibling would also fit the general
/// phrase.
pub fn generate_dataset(h: &SyntheticHierarchy, cfg: &DatasetConfig) -> Result<Vec<ToySample>> {
    if cfg.n_samples == 0 {
        return Err(Error::domain("n_samples must be >= 1"));
    }
    if !(0.0..=1.0).contains(&cfg.invalid_fraction) {
        return Err(Error::domain("invalid_fraction outside [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(h.seed ^ cfg.stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(STREAM_DATA);
    let noise = Normal::new(0.0, h.noise_scale.max(f64::MIN_POSITIVE)).map_err(|e| Error::domain(e.to_string()))?;
    let children = h.all_children();

    let mut out = Vec::with_capacity(cfg.n_samples);
    for _ in 0..cfg.n_samples {
        let child = *children.choose(&mut rng).expect("hierarchy has children");
        let parent = h.parent_of(child).expect("children have parents");
        let general = rng.gen_bool(0.5);
        let valid = !(cfg.invalid_fraction > 0.0 && rng.gen_bool(cfg.invalid_fraction));

        let siblings: Vec<usize> = h.children[&parent].iter().copied().filter(|&c| c != child).collect();
        let others: Vec<usize> = children.iter().copied().filter(|&c| h.parent_of(c) != Some(parent)).collect();

        let text_concept = if general { parent } else { child };
        let mut anchor_concepts = Vec::with_capacity(cfg.negatives_per_image + 1);
        if valid {
            anchor_concepts.push(child);
        } else {
            // no anchor of the text's family is shown
            let pool = if others.is_empty() { &siblings } else { &others };
            anchor_concepts.push(*pool.choose(&mut rng).expect("nonempty pool"));
        }
        for n in 0..cfg.negatives_per_image {
            let use_sibling = !general && valid && n == 0 && !siblings.is_empty();
            let pool = if use_sibling || others.is_empty() { &siblings } else { &others };
            anchor_concepts.push(*pool.choose(&mut rng).expect("nonempty pool"));
        }

        let anchors = anchor_concepts
            .iter()
            .map(|&c| noisy(h.descriptor(c), &noise, h.noise_scale, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let text = noisy(h.descriptor(text_concept), &noise, h.noise_scale, &mut rng)?;
        out.push(ToySample {
            record: ImageRecord::new(anchors, text)?,
            child,
            general_phrase: general,
            valid,
        });
    }
    Ok(out)
}

/// Training records with the invalid (no-match) samples removed.
pub fn valid_records(samples: &[ToySample]) -> Vec<ImageRecord> {
    samples.iter().filter(|s| s.valid).map(|s| s.record.clone()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_images: usize,
    pub negatives_per_image: usize,
    pub alpha: f64,
    pub tau: f64,
    pub kappa: f64,
    pub embed: EmbedStrategy,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub intra_negatives: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 1e-2,
            batch_images: 16,
            negatives_per_image: 2,
            alpha: 0.5,
            tau: DEFAULT_TAU,
            kappa: DEFAULT_KAPPA,
            embed: EmbedStrategy::Linear,
            optimizer: OptimizerKind::Adam,
            weight_decay: 0.0,
            intra_negatives: false,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn mix_params(&self) -> MixParams {
        MixParams {
            alpha: self.alpha,
            tau: self.tau,
            kappa: self.kappa,
            embed: self.embed,
            // endpoint alphas are legitimate ablations for training
            allow_endpoint_alpha: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::domain("steps must be >= 1"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::domain(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if self.batch_images == 0 {
            return Err(Error::domain("batch_images must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub initial: ProjectionBundle,
    pub bundle: ProjectionBundle,
    /// Minibatch loss before each optimizer step.
    pub trace: Vec<f64>,
}

/// Seeded initial bundle for a config.
pub fn initial_bundle(dim: usize, cfg: &TrainConfig) -> Result<ProjectionBundle> {
    ProjectionBundle::random(dim, cfg.mix_params(), cfg.seed)
}

pub fn train(data: &[ImageRecord], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::domain("training data is empty"));
    }
    cfg.validate()?;
    let dim = data[0].dim();
    let initial = initial_bundle(dim, cfg)?;
    train_from(initial, data, cfg)
}

/// Trains starting from a given bundle.
pub fn train_from(initial: ProjectionBundle, data: &[ImageRecord], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::domain("training data is empty"));
    }
    cfg.validate()?;
    let mut bundle = initial.clone();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.weight_decay, bundle.dim());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(STREAM_SHUFFLE);

    let batch_size = cfg.batch_images.min(data.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if cursor + batch_size > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let images = order[cursor..cursor + batch_size].iter().map(|&i| data[i].clone()).collect();
        cursor += batch_size;
        let batch = GroundingBatch::new(images)?;
        let report = contrastive_loss(&batch, &bundle, cfg.intra_negatives)?;
        if !report.loss.is_finite() || !report.grads.is_finite() {
            return Err(Error::Diverged { step, loss: report.loss });
        }
        trace.push(report.loss);
        opt.step(&mut bundle, &report.grads);
        if step % 100 == 0 {
            debug!("step {step}: loss {:.6}", report.loss);
        }
    }
    Ok(TrainOutcome { initial, bundle, trace })
}

/// Mean loss over consecutive fixed chunks of `batch_images` records.
pub fn dataset_loss(data: &[ImageRecord], bundle: &ProjectionBundle, batch_images: usize, intra_negatives: bool) -> Result<f64> {
    if data.is_empty() || batch_images == 0 {
        return Err(Error::domain("dataset loss needs data and a positive batch size"));
    }
    let mut total = 0.0;
    let mut chunks = 0usize;
    for chunk in data.chunks(batch_images) {
        total += contrastive_loss_value(&GroundingBatch::new(chunk.to_vec())?, bundle, intra_negatives)?;
        chunks += 1;
    }
    Ok(total / chunks as f64)
}

/// Fraction of samples whose own positive anchor (index 0) scores highest.
pub fn selection_accuracy(samples: &[ToySample], bundle: &ProjectionBundle) -> Result<f64> {
    let scored: Vec<&ToySample> = samples.iter().filter(|s| s.valid).collect();
    if scored.is_empty() {
        return Err(Error::domain("no valid samples to score"));
    }
    let mut hits = 0usize;
    for s in &scored {
        let text = bundle.project_text(s.record.text());
        let scores: Vec<f64> = s
            .record
            .anchors()
            .iter()
            .map(|a| {
                let (se, sh) = bundle.pair_sims(&bundle.project_visual(a), &text);
                bundle.mix(se, sh)
            })
            .collect();
        if argmax_first(&scores) == Some(0) {
            hits += 1;
        }
    }
    Ok(hits as f64 / scored.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConceptNorm {
    pub concept: usize,
    pub parent: Option<usize>,
    pub spatial_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApexReport {
    pub concepts: Vec<ConceptNorm>,
    pub parent_mean: f64,
    pub child_mean: f64,
    /// `parent_mean / child_mean`; `None` when the child mean is zero.
    pub ratio: Option<f64>,
}

/// Spatial norms of every concept descriptor embedded through the text
/// hyperbolic projection.
pub fn apex_report(bundle: &ProjectionBundle, h: &SyntheticHierarchy) -> Result<ApexReport> {
    let mut concepts = Vec::with_capacity(h.n_concepts());
    let (mut parent_sum, mut child_sum) = (0.0, 0.0);
    let (mut n_parent, mut n_child) = (0usize, 0usize);
    for c in 0..h.n_concepts() {
        let f = FeatureVector::new(h.descriptor(c).to_vec())?;
        let norm = bundle.embed_point(&f, bundle.w_ht())?.spatial_norm();
        if h.is_parent(c) {
            parent_sum += norm;
            n_parent += 1;
        } else {
            child_sum += norm;
            n_child += 1;
        }
        concepts.push(ConceptNorm {
            concept: c,
            parent: h.parent_of(c),
            spatial_norm: norm,
        });
    }
    let parent_mean = parent_sum / n_parent as f64;
    let child_mean = child_sum / n_child as f64;
    Ok(ApexReport {
        concepts,
        parent_mean,
        child_mean,
        ratio: (child_mean > 0.0).then(|| parent_mean / child_mean),
    })
}
