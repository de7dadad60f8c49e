//! Anchor-based contrastive objective over mixed similarity scores.
//!
//! For image `i` with text `t_i` and positive anchor `a_0^i` the per-image
//! loss is
//!
//! ```text
//! L_i = -log( exp(s(a_0^i, t_i)/tau) / sum_{(j,n) in T_i} exp(s(a_n^j, t_i)/tau) )
//! ```
//!
//! where the term set `T_i` always holds the positive and every anchor of
//! the other images. Image `i`'s own negatives join `T_i` only with
//! `intra_negatives` set. The batch loss is the mean over images.
//!
//! Gradients with respect to all four projections are computed in closed
//! form through the mixture, the time-component solve and the projections.

use crate::error::{check_dim, Error, Result};
use crate::hemix::{FeatureVector, Matrix, ProjectionBundle, Projected};
use crate::lorentz::distance_unchecked;

/// One image: anchor features (index 0 is the positive) and its text.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    anchors: Vec<FeatureVector>,
    text: FeatureVector,
}

impl ImageRecord {
    pub fn new(anchors: Vec<FeatureVector>, text: FeatureVector) -> Result<Self> {
        if anchors.is_empty() {
            return Err(Error::domain("an image record needs at least the positive anchor"));
        }
        for a in &anchors {
            check_dim(text.dim(), a.dim())?;
        }
        Ok(Self { anchors, text })
    }

    pub fn anchors(&self) -> &[FeatureVector] {
        &self.anchors
    }

    pub fn positive(&self) -> &FeatureVector {
        &self.anchors[0]
    }

    pub fn text(&self) -> &FeatureVector {
        &self.text
    }

    pub fn dim(&self) -> usize {
        self.text.dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundingBatch {
    images: Vec<ImageRecord>,
}

impl GroundingBatch {
    pub fn new(images: Vec<ImageRecord>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::domain("grounding batch is empty"));
        }
        let dim = images[0].dim();
        for im in &images[1..] {
            check_dim(dim, im.dim())?;
        }
        Ok(Self { images })
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.images[0].dim()
    }
}

/// Gradient of the loss with respect to each projection matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w_ev: Matrix,
    pub w_et: Matrix,
    pub w_hv: Matrix,
    pub w_ht: Matrix,
}

impl Gradients {
    pub fn zeros(dim: usize) -> Self {
        Self {
            w_ev: Matrix::zeros(dim),
            w_et: Matrix::zeros(dim),
            w_hv: Matrix::zeros(dim),
            w_ht: Matrix::zeros(dim),
        }
    }

    /// Same order as [`ProjectionBundle::matrices`].
    pub fn matrices(&self) -> [&Matrix; 4] {
        [&self.w_ev, &self.w_et, &self.w_hv, &self.w_ht]
    }

    pub fn max_abs(&self) -> f64 {
        self.matrices().iter().fold(0.0, |m, g| m.max(g.max_abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.matrices()
            .iter()
            .all(|g| g.as_slice().iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    pub grads: Gradients,
}

/// Affine adjustment of raw scores before the temperature: each score `h`
/// for image `i` becomes `scale * h + offsets[i]`.
///
/// Used by tests to probe shift and scale identities of the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreAdjust {
    pub offsets: Vec<f64>,
    pub scale: f64,
}

impl ScoreAdjust {
    pub fn identity(n_images: usize) -> Self {
        Self {
            offsets: vec![0.0; n_images],
            scale: 1.0,
        }
    }
}

/// Mean contrastive loss and its gradients.
pub fn contrastive_loss(batch: &GroundingBatch, bundle: &ProjectionBundle, intra_negatives: bool) -> Result<LossReport> {
    evaluate(batch, bundle, intra_negatives, None, true).map(|(loss, grads)| LossReport {
        loss,
        grads: grads.expect("gradients requested"),
    })
}

/// [`contrastive_loss`] with a score adjustment hook.
pub fn contrastive_loss_adjusted(
    batch: &GroundingBatch,
    bundle: &ProjectionBundle,
    intra_negatives: bool,
    adjust: &ScoreAdjust,
) -> Result<LossReport> {
    check_dim(batch.len(), adjust.offsets.len())?;
    evaluate(batch, bundle, intra_negatives, Some(adjust), true).map(|(loss, grads)| LossReport {
        loss,
        grads: grads.expect("gradients requested"),
    })
}

/// Loss value only.
pub fn contrastive_loss_value(batch: &GroundingBatch, bundle: &ProjectionBundle, intra_negatives: bool) -> Result<f64> {
    evaluate(batch, bundle, intra_negatives, None, false).map(|(loss, _)| loss)
}

struct Term {
    image: usize,
    anchor: usize,
    score: f64,
}

fn evaluate(
    batch: &GroundingBatch,
    bundle: &ProjectionBundle,
    intra_negatives: bool,
    adjust: Option<&ScoreAdjust>,
    want_grads: bool,
) -> Result<(f64, Option<Gradients>)> {
    if batch.is_empty() {
        return Err(Error::domain("grounding batch is empty"));
    }
    let dim = bundle.dim();
    check_dim(dim, batch.dim())?;

    let anchors: Vec<Vec<Projected>> = batch
        .images
        .iter()
        .map(|im| im.anchors.iter().map(|a| bundle.project_visual(a)).collect())
        .collect();
    let texts: Vec<Projected> = batch.images.iter().map(|im| bundle.project_text(&im.text)).collect();

    let alpha = bundle.alpha();
    let tau = bundle.tau();
    let n_images = batch.len();
    let inv_batch = 1.0 / n_images as f64;

    // Accumulated upstream gradients on projection outputs, pushed through
    // the projections once per feature at the end.
    let mut g_anchor_e: Vec<Vec<Vec<f64>>> = anchors.iter().map(|a| vec![vec![0.0; dim]; a.len()]).collect();
    let mut g_anchor_h = g_anchor_e.clone();
    let mut g_text_e = vec![vec![0.0; dim]; n_images];
    let mut g_text_h = g_text_e.clone();

    let mut total = 0.0;
    let mut terms = Vec::new();
    for (i, text) in texts.iter().enumerate() {
        let (scale, offset) = match adjust {
            Some(a) => (a.scale, a.offsets[i]),
            None => (1.0, 0.0),
        };
        terms.clear();
        for (j, image_anchors) in anchors.iter().enumerate() {
            for (n, anchor) in image_anchors.iter().enumerate() {
                if i == j && n != 0 && !intra_negatives {
                    continue;
                }
                let (se, sh) = bundle.pair_sims(anchor, text);
                let h = bundle.mix(se, sh);
                terms.push(Term {
                    image: j,
                    anchor: n,
                    score: (scale * h + offset) / tau,
                });
            }
        }
        let max = terms.iter().fold(f64::NEG_INFINITY, |m, t| m.max(t.score));
        let sum: f64 = terms.iter().map(|t| (t.score - max).exp()).sum();
        let lse = max + sum.ln();
        let positive = terms
            .iter()
            .find(|t| t.image == i && t.anchor == 0)
            .expect("positive term always present")
            .score;
        total += lse - positive;

        if !want_grads {
            continue;
        }
        for t in &terms {
            let softmax = (t.score - max).exp() / sum;
            let target = if t.image == i && t.anchor == 0 { 1.0 } else { 0.0 };
            // d loss / d h for this pair
            let g = (softmax - target) * scale / tau * inv_batch;
            if g == 0.0 {
                continue;
            }
            let anchor = &anchors[t.image][t.anchor];
            let ge = g * (1.0 - alpha);
            let gh = g * alpha;
            axpy(&mut g_anchor_e[t.image][t.anchor], ge, &text.euclid);
            axpy(&mut g_text_e[i], ge, &anchor.euclid);
            if gh != 0.0 {
                // d sim_H / d s_v = s_t - (x0_t / x0_v) s_v, symmetric for s_t
                let ratio_v = text.time / anchor.time;
                let ratio_t = anchor.time / text.time;
                let gav = &mut g_anchor_h[t.image][t.anchor];
                for k in 0..dim {
                    gav[k] += gh * (text.spatial[k] - ratio_v * anchor.spatial[k]);
                }
                let gtv = &mut g_text_h[i];
                for k in 0..dim {
                    gtv[k] += gh * (anchor.spatial[k] - ratio_t * text.spatial[k]);
                }
            }
        }
    }

    let loss = total * inv_batch;
    if !want_grads {
        return Ok((loss, None));
    }

    let mut grads = Gradients::zeros(dim);
    for (j, im) in batch.images.iter().enumerate() {
        for (n, a) in im.anchors.iter().enumerate() {
            grads.w_ev.add_outer(a.as_slice(), &g_anchor_e[j][n], 1.0);
            let back = bundle.hyper_backprop(&anchors[j][n].raw, &g_anchor_h[j][n]);
            grads.w_hv.add_outer(a.as_slice(), &back, 1.0);
        }
        grads.w_et.add_outer(im.text.as_slice(), &g_text_e[j], 1.0);
        let back = bundle.hyper_backprop(&texts[j].raw, &g_text_h[j]);
        grads.w_ht.add_outer(im.text.as_slice(), &back, 1.0);
    }
    Ok((loss, Some(grads)))
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Sum of geodesic distances from the category and decomposed-phrase
/// embeddings to the raw-expression embedding, all through the text
/// hyperbolic projection.
pub fn hierarchical_loss(
    f_cat: &FeatureVector,
    f_base_ref: &FeatureVector,
    f_ref: &FeatureVector,
    bundle: &ProjectionBundle,
) -> Result<f64> {
    let base = bundle.embed_point(f_base_ref, bundle.w_ht())?;
    let cat = bundle.embed_point(f_cat, bundle.w_ht())?;
    let reference = bundle.embed_point(f_ref, bundle.w_ht())?;
    Ok(distance_unchecked(&cat, &base) + distance_unchecked(&reference, &base))
}

/// Largest relative disagreement between analytic gradients and central
/// finite differences over every entry of all four projections.
///
/// Relative error uses `max(|analytic|, |numeric|, 1e-8)` as denominator.
pub fn gradient_check(
    batch: &GroundingBatch,
    bundle: &ProjectionBundle,
    epsilon: f64,
    intra_negatives: bool,
) -> Result<f64> {
    if !(1e-6..=1e-4).contains(&epsilon) {
        return Err(Error::domain(format!("finite-difference step {epsilon} outside [1e-6, 1e-4]")));
    }
    let analytic = contrastive_loss(batch, bundle, intra_negatives)?.grads;
    let mut probe = bundle.clone();
    let mut worst: f64 = 0.0;
    for m in 0..4 {
        let len = analytic.matrices()[m].as_slice().len();
        for idx in 0..len {
            let orig = probe.matrices_mut()[m].as_slice()[idx];
            probe.matrices_mut()[m].as_mut_slice()[idx] = orig + epsilon;
            let plus = contrastive_loss_value(batch, &probe, intra_negatives)?;
            probe.matrices_mut()[m].as_mut_slice()[idx] = orig - epsilon;
            let minus = contrastive_loss_value(batch, &probe, intra_negatives)?;
            probe.matrices_mut()[m].as_mut_slice()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic.matrices()[m].as_slice()[idx];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
