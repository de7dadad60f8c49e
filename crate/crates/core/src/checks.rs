//! Seeded randomized property suites behind the `geom-check` and
//! `grad-check` commands.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::contrastive::{gradient_check, GroundingBatch, ImageRecord};
use crate::error::Result;
use crate::hemix::{EmbedStrategy, FeatureVector, MixParams, ProjectionBundle};
use crate::lorentz::{exp_map, geodesic_distance, is_on_hyperboloid, lorentz_inner, log_map, tangent_project, CurvedPoint};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyOutcome {
    pub name: &'static str,
    pub cases: usize,
    pub failures: usize,
    /// Largest observed violation measure (property specific).
    pub worst: f64,
}

impl PropertyOutcome {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

struct Tally {
    name: &'static str,
    cases: usize,
    failures: usize,
    worst: f64,
}

impl Tally {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            cases: 0,
            failures: 0,
            worst: 0.0,
        }
    }

    fn record(&mut self, ok: bool, measure: f64) {
        self.cases += 1;
        if !ok {
            self.failures += 1;
        }
        if measure.is_nan() || measure > self.worst {
            self.worst = measure;
        }
    }

    fn finish(self) -> PropertyOutcome {
        PropertyOutcome {
            name: self.name,
            cases: self.cases,
            failures: self.failures,
            worst: self.worst,
        }
    }
}

fn random_z(rng: &mut ChaCha8Rng, dim: usize, max_norm: f64) -> Vec<f64> {
    let dir: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let r = rng.gen_range(0.0..=max_norm);
    dir.iter().map(|v| v / n * r).collect()
}

fn random_point(rng: &mut ChaCha8Rng, dim: usize, kappa: f64, max_norm: f64) -> Result<CurvedPoint> {
    CurvedPoint::lift(&random_z(rng, dim, max_norm), kappa)
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Runs the geometry properties on `cases` seeded random inputs each.
pub fn geometry_suite(seed: u64, cases: usize) -> Result<Vec<PropertyOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut closure = Tally::new("hyperboloid-closure");
    let mut roundtrip = Tally::new("exp-log-roundtrip");
    let mut symmetry = Tally::new("distance-symmetry");
    let mut identity = Tally::new("distance-identity");
    let mut triangle = Tally::new("triangle-inequality");
    let mut monotone = Tally::new("inner-product-monotonicity");

    for _ in 0..cases {
        let dim = rng.gen_range(1..=8);
        let kappa = rng.gen_range(0.25..=4.0);

        let z = random_z(&mut rng, dim, 10.0);
        let zn2: f64 = z.iter().map(|v| v * v).sum();
        let p = CurvedPoint::lift(&z, kappa)?;
        let tol = 1e-8 * zn2.max(1.0);
        let err = (lorentz_inner(&p.coords(), &p.coords())? + 1.0 / kappa).abs() / zn2.max(1.0);
        closure.record(is_on_hyperboloid(&p.coords(), kappa, tol), err);

        let base = random_point(&mut rng, dim, kappa, 2.0)?;
        let raw: Vec<f64> = (0..=dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v = tangent_project(&base, &raw)?;
        let len = v.lorentz_norm();
        let target = rng.gen_range(0.0..=5.0);
        let v = if len > 0.0 {
            v.scaled(target / len)
        } else {
            v
        };
        let back = log_map(&base, &exp_map(&base, &v)?)?;
        let diff = euclid(back.coords(), v.coords()) / (1.0 + v.lorentz_norm());
        roundtrip.record(diff <= 1e-6, diff);

        let x = random_point(&mut rng, dim, kappa, 5.0)?;
        let y = random_point(&mut rng, dim, kappa, 5.0)?;
        let w = random_point(&mut rng, dim, kappa, 5.0)?;
        let dxy = geodesic_distance(&x, &y)?;
        let dyx = geodesic_distance(&y, &x)?;
        symmetry.record(dxy == dyx, (dxy - dyx).abs());
        let dxx = geodesic_distance(&x, &x)?;
        identity.record(dxx == 0.0, dxx);
        let excess = dxy - (geodesic_distance(&x, &w)? + geodesic_distance(&w, &y)?);
        triangle.record(excess <= 1e-8, excess.max(0.0));

        let ixy = x.inner(&y)?;
        let ixw = x.inner(&w)?;
        let dxw = geodesic_distance(&x, &w)?;
        let ok = if ixy > ixw {
            dxy < dxw
        } else if ixw > ixy {
            dxw < dxy
        } else {
            true
        };
        monotone.record(ok, if ok { 0.0 } else { 1.0 });
    }
    Ok(vec![
        closure.finish(),
        roundtrip.finish(),
        symmetry.finish(),
        identity.finish(),
        triangle.finish(),
        monotone.finish(),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckCase {
    pub dim: usize,
    pub images: usize,
    pub anchors: usize,
    pub alpha: f64,
    pub tau: f64,
    pub kappa: f64,
    pub embed: EmbedStrategy,
    pub intra_negatives: bool,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradSuiteConfig {
    pub batches: usize,
    pub max_dim: usize,
    pub max_images: usize,
    pub max_anchors: usize,
    pub epsilon: f64,
}

impl Default for GradSuiteConfig {
    fn default() -> Self {
        Self {
            batches: 50,
            max_dim: 16,
            max_images: 4,
            max_anchors: 4,
            epsilon: 1e-5,
        }
    }
}

/// Random batch of uniform features in `[-1, 1]`.
pub fn random_batch(rng: &mut impl Rng, dim: usize, images: usize, anchors: usize) -> Result<GroundingBatch> {
    let feature = |rng: &mut _| FeatureVector::new((0..dim).map(|_| Rng::gen_range(rng, -1.0..1.0)).collect());
    let records = (0..images)
        .map(|_| {
            let a = (0..anchors).map(|_| feature(rng)).collect::<Result<Vec<_>>>()?;
            ImageRecord::new(a, feature(rng)?)
        })
        .collect::<Result<Vec<_>>>()?;
    GroundingBatch::new(records)
}

/// Finite-difference check of the contrastive gradients on seeded random
/// batches and bundles, alternating embedding and negative policies.
pub fn gradient_suite(seed: u64, cfg: &GradSuiteConfig) -> Result<Vec<GradCheckCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cfg.batches);
    for b in 0..cfg.batches {
        let dim = rng.gen_range(2..=cfg.max_dim.max(2));
        let images = rng.gen_range(1..=cfg.max_images.max(1));
        let anchors = rng.gen_range(1..=cfg.max_anchors.max(1));
        let params = MixParams {
            alpha: rng.gen_range(0.05..0.95),
            tau: rng.gen_range(0.1..1.0),
            kappa: rng.gen_range(0.5..2.0),
            embed: if b % 2 == 0 { EmbedStrategy::Linear } else { EmbedStrategy::ExpMap },
            allow_endpoint_alpha: false,
        };
        let intra = (b / 2) % 2 == 1;
        let batch = random_batch(&mut rng, dim, images, anchors)?;
        let bundle = ProjectionBundle::random(dim, params, rng.gen())?;
        let err = gradient_check(&batch, &bundle, cfg.epsilon, intra)?;
        out.push(GradCheckCase {
            dim,
            images,
            anchors,
            alpha: params.alpha,
            tau: params.tau,
            kappa: params.kappa,
            embed: params.embed,
            intra_negatives: intra,
            max_rel_err: err,
        });
    }
    Ok(out)
}
