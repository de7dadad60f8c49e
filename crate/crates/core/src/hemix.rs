//! Euclidean, hyperbolic and mixed similarity between visual and text
//! features through learnable square projections.
//!
//! Features are row vectors and every projection is applied as `f * W`
//! with `W` stored row-major, so `(f * W)_j = sum_i f_i W_ij`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::lorentz::CurvedPoint;

pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_TAU: f64 = 0.07;
pub const DEFAULT_KAPPA: f64 = 1.0;
pub const DEFAULT_DIM: usize = 512;

/// Square row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    dim: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.data[i * dim + i] = 1.0;
        }
        m
    }

    pub fn from_row_major(dim: usize, data: Vec<f64>) -> Result<Self> {
        check_dim(dim * dim, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("matrix entries must be finite"));
        }
        Ok(Self { dim, data })
    }

    /// Uniform entries in `[-gain, gain]`.
    pub fn uniform(dim: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let data = (0..dim * dim).map(|_| rng.gen_range(-gain..=gain)).collect();
        Self { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.dim + col]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `f * W` for a row vector `f`.
    pub fn apply_row(&self, f: &[f64]) -> Vec<f64> {
        debug_assert_eq!(f.len(), self.dim);
        let mut out = vec![0.0; self.dim];
        for (fi, row) in f.iter().zip(self.data.chunks_exact(self.dim)) {
            if *fi == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(row) {
                *o += fi * w;
            }
        }
        out
    }

    /// `W += scale * a^T b`, the gradient of `(a * W) . b` with respect to `W`.
    pub fn add_outer(&mut self, a: &[f64], b: &[f64], scale: f64) {
        for (ai, row) in a.iter().zip(self.data.chunks_exact_mut(self.dim)) {
            let s = scale * ai;
            if s == 0.0 {
                continue;
            }
            for (r, bj) in row.iter_mut().zip(b) {
                *r += s * bj;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// A finite feature vector of the joint space.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::domain("feature vector is empty"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("feature vector has non-finite entries"));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl TryFrom<Vec<f64>> for FeatureVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

/// How projected features are placed on the hyperboloid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedStrategy {
    /// Projection output is the spatial part; the time part is solved for.
    #[default]
    Linear,
    /// Projection output is a tangent vector at the apex, pushed through the
    /// exponential map.
    ExpMap,
}

/// The four projections plus the mixing weight, temperature and curvature.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionBundle {
    pub(crate) w_ev: Matrix,
    pub(crate) w_et: Matrix,
    pub(crate) w_hv: Matrix,
    pub(crate) w_ht: Matrix,
    alpha: f64,
    tau: f64,
    kappa: f64,
    embed: EmbedStrategy,
    endpoint_alpha: bool,
}

/// Scalar hyperparameters of a bundle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixParams {
    pub alpha: f64,
    pub tau: f64,
    pub kappa: f64,
    pub embed: EmbedStrategy,
    /// Permits `alpha` in `{0, 1}`; off for regular use.
    pub allow_endpoint_alpha: bool,
}

impl Default for MixParams {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            tau: DEFAULT_TAU,
            kappa: DEFAULT_KAPPA,
            embed: EmbedStrategy::Linear,
            allow_endpoint_alpha: false,
        }
    }
}

impl MixParams {
    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    /// Same parameters with endpoint `alpha` values permitted.
    pub fn diagnostic(mut self) -> Self {
        self.allow_endpoint_alpha = true;
        self
    }

    fn validate(&self) -> Result<()> {
        let alpha_ok = if self.allow_endpoint_alpha {
            (0.0..=1.0).contains(&self.alpha)
        } else {
            self.alpha > 0.0 && self.alpha < 1.0
        };
        if !alpha_ok {
            return Err(Error::domain(format!(
                "alpha {} outside {}",
                self.alpha,
                if self.allow_endpoint_alpha { "[0, 1]" } else { "(0, 1)" }
            )));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::domain(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.kappa.is_finite() && self.kappa > 0.0) {
            return Err(Error::domain(format!("kappa must be positive, got {}", self.kappa)));
        }
        Ok(())
    }
}

/// Cached projections of one feature vector; reused across all pairs it
/// takes part in.
#[derive(Debug, Clone)]
pub(crate) struct Projected {
    /// Euclidean branch output `f * W_E`.
    pub euclid: Vec<f64>,
    /// Hyperbolic branch pre-activation `f * W_H`.
    pub raw: Vec<f64>,
    /// Spatial part on the hyperboloid (equals `raw` for linear embedding).
    pub spatial: Vec<f64>,
    /// Time component `sqrt(|spatial|^2 + 1/kappa)`.
    pub time: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `sinh(a r)/(a r)` and `(g'(r))/r` for the exponential-map embedding.
fn exp_scale(r: f64, sqrt_k: f64) -> (f64, f64) {
    let t = sqrt_k * r;
    if t < 1e-4 {
        let t2 = t * t;
        let g = 1.0 + t2 / 6.0 + t2 * t2 / 120.0;
        let dg_over_r = sqrt_k * sqrt_k * (1.0 / 3.0 + t2 / 30.0);
        (g, dg_over_r)
    } else {
        let g = t.sinh() / t;
        let dg_over_r = (t * t.cosh() - t.sinh()) / (sqrt_k * r * r * r);
        (g, dg_over_r)
    }
}

impl ProjectionBundle {
    pub fn new(w_ev: Matrix, w_et: Matrix, w_hv: Matrix, w_ht: Matrix, params: MixParams) -> Result<Self> {
        params.validate()?;
        let dim = w_ev.dim();
        for m in [&w_et, &w_hv, &w_ht] {
            check_dim(dim, m.dim())?;
        }
        if dim == 0 {
            return Err(Error::domain("projection dimension must be >= 1"));
        }
        Ok(Self {
            w_ev,
            w_et,
            w_hv,
            w_ht,
            alpha: params.alpha,
            tau: params.tau,
            kappa: params.kappa,
            embed: params.embed,
            endpoint_alpha: params.allow_endpoint_alpha,
        })
    }

    pub fn identity(dim: usize, params: MixParams) -> Result<Self> {
        let id = Matrix::identity(dim);
        Self::new(id.clone(), id.clone(), id.clone(), id, params)
    }

    /// Seeded uniform initialization with gain `1/sqrt(D)`.
    pub fn random(dim: usize, params: MixParams, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = 1.0 / (dim as f64).sqrt();
        let w_ev = Matrix::uniform(dim, gain, &mut rng);
        let w_et = Matrix::uniform(dim, gain, &mut rng);
        let w_hv = Matrix::uniform(dim, gain, &mut rng);
        let w_ht = Matrix::uniform(dim, gain, &mut rng);
        Self::new(w_ev, w_et, w_hv, w_ht, params)
    }

    pub fn dim(&self) -> usize {
        self.w_ev.dim()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn embed(&self) -> EmbedStrategy {
        self.embed
    }

    pub fn params(&self) -> MixParams {
        MixParams {
            alpha: self.alpha,
            tau: self.tau,
            kappa: self.kappa,
            embed: self.embed,
            allow_endpoint_alpha: self.endpoint_alpha,
        }
    }

    /// Returns a copy with different scalar parameters, validated.
    pub fn with_params(&self, params: MixParams) -> Result<Self> {
        params.validate()?;
        let mut out = self.clone();
        out.alpha = params.alpha;
        out.tau = params.tau;
        out.kappa = params.kappa;
        out.embed = params.embed;
        out.endpoint_alpha = params.allow_endpoint_alpha;
        Ok(out)
    }

    /// Matrices in the fixed order `W_EV, W_ET, W_HV, W_HT`.
    pub fn matrices(&self) -> [&Matrix; 4] {
        [&self.w_ev, &self.w_et, &self.w_hv, &self.w_ht]
    }

    pub fn matrices_mut(&mut self) -> [&mut Matrix; 4] {
        [&mut self.w_ev, &mut self.w_et, &mut self.w_hv, &mut self.w_ht]
    }

    fn check_feature(&self, f: &FeatureVector) -> Result<()> {
        check_dim(self.dim(), f.dim())
    }

    pub(crate) fn hyper_spatial(&self, raw: &[f64]) -> Vec<f64> {
        match self.embed {
            EmbedStrategy::Linear => raw.to_vec(),
            EmbedStrategy::ExpMap => {
                let r = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
                let (g, _) = exp_scale(r, self.kappa.sqrt());
                raw.iter().map(|v| g * v).collect()
            }
        }
    }

    /// Pulls a gradient on the spatial coordinates back to the raw
    /// projection output.
    pub(crate) fn hyper_backprop(&self, raw: &[f64], grad_spatial: &[f64]) -> Vec<f64> {
        match self.embed {
            EmbedStrategy::Linear => grad_spatial.to_vec(),
            EmbedStrategy::ExpMap => {
                let r = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
                let (g, dg_over_r) = exp_scale(r, self.kappa.sqrt());
                let proj = dot(raw, grad_spatial);
                raw.iter()
                    .zip(grad_spatial)
                    .map(|(z, gs)| g * gs + dg_over_r * proj * z)
                    .collect()
            }
        }
    }

    fn project(&self, f: &[f64], w_e: &Matrix, w_h: &Matrix) -> Projected {
        let euclid = w_e.apply_row(f);
        let raw = w_h.apply_row(f);
        let spatial = self.hyper_spatial(&raw);
        let time = (spatial.iter().map(|v| v * v).sum::<f64>() + 1.0 / self.kappa).sqrt();
        Projected {
            euclid,
            raw,
            spatial,
            time,
        }
    }

    pub(crate) fn project_visual(&self, f: &FeatureVector) -> Projected {
        self.project(f.as_slice(), &self.w_ev, &self.w_hv)
    }

    pub(crate) fn project_text(&self, f: &FeatureVector) -> Projected {
        self.project(f.as_slice(), &self.w_et, &self.w_ht)
    }

    /// `(sim_E, sim_H)` from cached projections.
    pub(crate) fn pair_sims(&self, v: &Projected, t: &Projected) -> (f64, f64) {
        let se = dot(&v.euclid, &t.euclid);
        let sh = dot(&v.spatial, &t.spatial) - v.time * t.time;
        (se, sh)
    }

    pub(crate) fn mix(&self, sim_e: f64, sim_h: f64) -> f64 {
        (1.0 - self.alpha) * sim_e + self.alpha * sim_h
    }

    /// Embeds a feature through one of the hyperbolic projections using this
    /// bundle's curvature and embedding strategy.
    pub fn embed_point(&self, f: &FeatureVector, w: &Matrix) -> Result<CurvedPoint> {
        self.check_feature(f)?;
        let raw = w.apply_row(f.as_slice());
        let spatial = self.hyper_spatial(&raw);
        CurvedPoint::lift(&spatial, self.kappa)
    }

    pub fn w_ht(&self) -> &Matrix {
        &self.w_ht
    }

    pub fn w_hv(&self) -> &Matrix {
        &self.w_hv
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&WeightsFile::from(self)).map_err(|source| Error::Json {
            context: path.display().to_string(),
            source,
        })?;
        fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let file: WeightsFile = serde_json::from_str(&text).map_err(|source| Error::Json {
            context: path.display().to_string(),
            source,
        })?;
        file.into_bundle()
    }
}

/// Euclidean similarity `<f_v W_EV, f_t W_ET>`.
pub fn sim_euclidean(f_v: &FeatureVector, f_t: &FeatureVector, bundle: &ProjectionBundle) -> Result<f64> {
    bundle.check_feature(f_v)?;
    bundle.check_feature(f_t)?;
    Ok(dot(&bundle.w_ev.apply_row(f_v.as_slice()), &bundle.w_et.apply_row(f_t.as_slice())))
}

/// Lifts `f * W` onto the hyperboloid of curvature `-kappa`.
pub fn hyperbolic_embed(f: &FeatureVector, w: &Matrix, kappa: f64) -> Result<CurvedPoint> {
    check_dim(w.dim(), f.dim())?;
    let z = w.apply_row(f.as_slice());
    CurvedPoint::lift(&z, kappa)
}

/// Lorentzian inner product of the two hyperbolic embeddings; always
/// `<= -1/kappa`.
pub fn sim_hyperbolic(f_v: &FeatureVector, f_t: &FeatureVector, bundle: &ProjectionBundle) -> Result<f64> {
    let v = bundle.embed_point(f_v, &bundle.w_hv)?;
    let t = bundle.embed_point(f_t, &bundle.w_ht)?;
    v.inner(&t)
}

/// `(1 - alpha) sim_E + alpha sim_H`.
pub fn hemix(f_v: &FeatureVector, f_t: &FeatureVector, bundle: &ProjectionBundle) -> Result<f64> {
    let se = sim_euclidean(f_v, f_t, bundle)?;
    let sh = sim_hyperbolic(f_v, f_t, bundle)?;
    Ok(bundle.mix(se, sh))
}

/// On-disk weights: a header plus the four matrices in the fixed order
/// `W_EV, W_ET, W_HV, W_HT`, each flattened row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightsFile {
    pub header: WeightsHeader,
    pub matrices: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightsHeader {
    #[serde(rename = "D")]
    pub dim: usize,
    pub kappa: f64,
    pub alpha: f64,
    pub tau: f64,
    pub layout: String,
    pub order: Vec<String>,
    #[serde(default)]
    pub embed: EmbedStrategy,
    #[serde(default)]
    pub diagnostic_alpha: bool,
}

const MATRIX_ORDER: [&str; 4] = ["W_EV", "W_ET", "W_HV", "W_HT"];

impl From<&ProjectionBundle> for WeightsFile {
    fn from(b: &ProjectionBundle) -> Self {
        Self {
            header: WeightsHeader {
                dim: b.dim(),
                kappa: b.kappa,
                alpha: b.alpha,
                tau: b.tau,
                layout: "row-major".into(),
                order: MATRIX_ORDER.iter().map(|s| s.to_string()).collect(),
                embed: b.embed,
                diagnostic_alpha: b.endpoint_alpha,
            },
            matrices: b.matrices().iter().map(|m| m.as_slice().to_vec()).collect(),
        }
    }
}

impl WeightsFile {
    pub fn into_bundle(self) -> Result<ProjectionBundle> {
        let h = self.header;
        if h.layout != "row-major" {
            return Err(Error::domain(format!("unsupported weight layout {:?}", h.layout)));
        }
        if h.order.iter().map(String::as_str).ne(MATRIX_ORDER) {
            return Err(Error::domain(format!("unexpected matrix order {:?}", h.order)));
        }
        check_dim(4, self.matrices.len())?;
        let mut it = self
            .matrices
            .into_iter()
            .map(|data| Matrix::from_row_major(h.dim, data));
        let mut next = || it.next().expect("four matrices checked above");
        let (w_ev, w_et, w_hv, w_ht) = (next()?, next()?, next()?, next()?);
        let params = MixParams {
            alpha: h.alpha,
            tau: h.tau,
            kappa: h.kappa,
            embed: h.embed,
            allow_endpoint_alpha: h.diagnostic_alpha,
        };
        ProjectionBundle::new(w_ev, w_et, w_hv, w_ht, params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lorentz::is_on_hyperboloid;

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector::new(v.to_vec()).unwrap()
    }

    fn id_bundle(dim: usize, alpha: f64, kappa: f64) -> ProjectionBundle {
        let params = MixParams {
            alpha,
            kappa,
            ..MixParams::default()
        }
        .diagnostic();
        ProjectionBundle::identity(dim, params).unwrap()
    }

    #[test]
    fn euclidean_examples() {
        let b = id_bundle(2, 0.5, 1.0);
        assert_eq!(sim_euclidean(&fv(&[1.0, 0.0]), &fv(&[0.0, 1.0]), &b).unwrap(), 0.0);
        assert_eq!(sim_euclidean(&fv(&[1.0, 2.0]), &fv(&[1.0, 2.0]), &b).unwrap(), 5.0);
        let r = ProjectionBundle::random(2, MixParams::default(), 3).unwrap();
        assert_eq!(sim_euclidean(&FeatureVector::zeros(2), &fv(&[0.3, -2.0]), &r).unwrap(), 0.0);
    }

    #[test]
    fn euclidean_rejects_dimension_mismatch() {
        let b = id_bundle(2, 0.5, 1.0);
        assert!(matches!(
            sim_euclidean(&fv(&[1.0, 0.0, 0.0]), &fv(&[0.0, 1.0]), &b),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn embed_examples() {
        let w = Matrix::identity(2);
        let p = hyperbolic_embed(&FeatureVector::zeros(2), &w, 4.0).unwrap();
        assert_eq!(p.coords(), vec![0.5, 0.0, 0.0]);
        let p = hyperbolic_embed(&fv(&[3.0, 0.0]), &w, 1.0).unwrap();
        assert!((p.time() - 10f64.sqrt()).abs() < 1e-12);
        assert!(is_on_hyperboloid(&p.coords(), 1.0, 1e-9 * 9.0));
    }

    #[test]
    fn embed_rejects_overflow() {
        let w = Matrix::from_row_major(1, vec![f64::MAX]).unwrap();
        assert!(hyperbolic_embed(&fv(&[10.0]), &w, 1.0).is_err());
    }

    #[test]
    fn hyperbolic_examples() {
        let b = id_bundle(2, 0.5, 1.0);
        let z = FeatureVector::zeros(2);
        assert_eq!(sim_hyperbolic(&z, &z, &b).unwrap(), -1.0);
        let s = 1f64.sinh();
        let v = sim_hyperbolic(&fv(&[s, 0.0]), &z, &b).unwrap();
        assert!((v + 1f64.cosh()).abs() < 1e-12);
        let b2 = id_bundle(2, 0.5, 2.0);
        let f = fv(&[0.4, -1.1]);
        assert!((sim_hyperbolic(&f, &f, &b2).unwrap() + 0.5).abs() < 1e-12);
    }

    #[test]
    fn hemix_endpoints_and_midpoint() {
        let f_v = fv(&[0.2, -0.4, 1.0]);
        let f_t = fv(&[1.5, 0.1, -0.3]);
        let base = ProjectionBundle::random(3, MixParams::default(), 9).unwrap();
        let b0 = base.with_params(base.params().with_alpha(0.0).diagnostic()).unwrap();
        let b1 = base.with_params(base.params().with_alpha(1.0).diagnostic()).unwrap();
        assert_eq!(hemix(&f_v, &f_t, &b0).unwrap(), sim_euclidean(&f_v, &f_t, &b0).unwrap());
        assert_eq!(hemix(&f_v, &f_t, &b1).unwrap(), sim_hyperbolic(&f_v, &f_t, &b1).unwrap());
        let b = id_bundle(1, 0.5, 1.0);
        assert_eq!(b.mix(2.0, -1.0), 0.5);
    }

    #[test]
    fn alpha_endpoints_need_diagnostic_flag() {
        let p = MixParams::default().with_alpha(0.0);
        assert!(ProjectionBundle::identity(2, p).is_err());
        assert!(ProjectionBundle::identity(2, p.diagnostic()).is_ok());
        assert!(ProjectionBundle::identity(2, MixParams::default().with_alpha(1.5).diagnostic()).is_err());
        let bad_tau = MixParams {
            tau: 0.0,
            ..MixParams::default()
        };
        assert!(ProjectionBundle::identity(2, bad_tau).is_err());
    }

    #[test]
    fn exp_map_strategy_matches_geometry() {
        use crate::lorentz::{exp_map, tangent_project};
        let params = MixParams {
            embed: EmbedStrategy::ExpMap,
            kappa: 2.0,
            ..MixParams::default()
        };
        let b = ProjectionBundle::random(3, params, 1).unwrap();
        let f = fv(&[0.5, -1.0, 2.0]);
        let got = b.embed_point(&f, b.w_ht()).unwrap();
        let apex = CurvedPoint::apex(3, 2.0).unwrap();
        let mut tangent = vec![0.0];
        tangent.extend(b.w_ht().apply_row(f.as_slice()));
        let v = tangent_project(&apex, &tangent).unwrap();
        let want = exp_map(&apex, &v).unwrap();
        for (a, w) in got.coords().iter().zip(want.coords()) {
            assert!((a - w).abs() < 1e-12, "{a} vs {w}");
        }
    }

    #[test]
    fn weights_roundtrip_through_file() {
        let dir = std::env::temp_dir().join(format!("hg-weights-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("w.json");
        let b = ProjectionBundle::random(4, MixParams::default(), 11).unwrap();
        b.save(&path).unwrap();
        let back = ProjectionBundle::load(&path).unwrap();
        assert_eq!(b, back);
        std::fs::remove_dir_all(dir).ok();
    }
}
