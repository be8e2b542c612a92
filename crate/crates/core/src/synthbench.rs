//! Semi-synthetic MNAR benchmark with noisy feedback.
//!
//! A dense score matrix is cut into five preference levels, a prediction
//! matrix is derived from the levels, observation probabilities shrink
//! geometrically for low ratings, and the sampled true feedback is flipped
//! with the configured error rates.

use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::true_inaccuracy;
use crate::io::{read_matrix_csv, sha256_hex, write_matrix_csv, Triple};
use crate::losses::LossKind;
use crate::models::{FactorParams, Optimizer, SgdConfig};
use crate::types::{ErrorParams, PredictionMatrix, PropensityMatrix, RatingDataset, SeededRng, DEFAULT_PROPENSITY_FLOOR};

/// Positive-feedback probability of each level, lowest first.
pub const GAMMA_LEVELS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

const LEVEL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "UPPERCASE")]
pub enum PredKind {
    #[default]
    Rotate,
    Skew,
    Crs,
    One,
    Three,
    Five,
}

impl PredKind {
    pub const ALL: [PredKind; 6] = [PredKind::Rotate, PredKind::Skew, PredKind::Crs, PredKind::One, PredKind::Three, PredKind::Five];

    pub fn name(self) -> &'static str {
        match self {
            PredKind::Rotate => "ROTATE",
            PredKind::Skew => "SKEW",
            PredKind::Crs => "CRS",
            PredKind::One => "ONE",
            PredKind::Three => "THREE",
            PredKind::Five => "FIVE",
        }
    }

    /// Level whose cells get flipped to 0.9 by the flip kinds.
    fn flip_level(self) -> Option<f64> {
        match self {
            PredKind::One => Some(0.1),
            PredKind::Three => Some(0.3),
            PredKind::Five => Some(0.5),
            _ => None,
        }
    }
}

impl fmt::Display for PredKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PredKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PredKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown prediction matrix `{s}`")))
    }
}

/// How the perturbation weight between true and average propensity is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BetaMode {
    /// No perturbation: the estimate equals the true propensity.
    None,
    #[default]
    UniformPerPair,
    UniformPerRun,
}

/// Where the preference levels come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GammaSource {
    /// Quantiles of a random Gaussian score matrix of the given rank.
    LowRank { rank: usize },
    /// Quantiles of a caller-supplied score matrix.
    Scores,
    /// A caller-supplied preference matrix with entries in [0, 1].
    Gamma,
}

impl Default for GammaSource {
    fn default() -> Self {
        GammaSource::LowRank { rank: 4 }
    }
}

/// How the observation mask is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObservationMode {
    /// Rating-dependent propensities `p_base * alpha^min(4, 6 - r)`.
    #[default]
    Propensity,
    /// Every pair observed with the same probability.
    Uniform { ratio: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub gamma_proportions: [f64; 5],
    pub p_base: f64,
    pub alpha: f64,
    pub rho: ErrorParams,
    pub pred_kind: PredKind,
    pub beta_mode: BetaMode,
    pub seed: u64,
    pub gamma_source: GammaSource,
    pub observation: ObservationMode,
    pub propensity_floor: f64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            n_users: 500,
            n_items: 500,
            gamma_proportions: [0.2; 5],
            p_base: 1.0,
            alpha: 0.5,
            rho: ErrorParams::new(0.2, 0.1).expect("valid default rates"),
            pred_kind: PredKind::Rotate,
            beta_mode: BetaMode::UniformPerPair,
            seed: 0,
            gamma_source: GammaSource::default(),
            observation: ObservationMode::Propensity,
            propensity_floor: DEFAULT_PROPENSITY_FLOOR,
        }
    }
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_items == 0 {
            return Err(Error::config("n_users", "n_users and n_items must be positive"));
        }
        check_proportions(&self.gamma_proportions)?;
        if !(self.p_base > 0.0 && self.p_base.is_finite()) {
            return Err(Error::config("p_base", "must be a positive number"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config("alpha", "must lie in (0, 1]"));
        }
        if !(self.propensity_floor > 0.0 && self.propensity_floor <= 1.0) {
            return Err(Error::config("propensity_floor", "must lie in (0, 1]"));
        }
        if let GammaSource::LowRank { rank } = self.gamma_source {
            if rank == 0 {
                return Err(Error::config("gamma_source.rank", "must be at least 1"));
            }
        }
        if let ObservationMode::Uniform { ratio } = self.observation {
            if !(ratio > 0.0 && ratio <= 1.0) {
                return Err(Error::config("observation.ratio", "must lie in (0, 1]"));
            }
        }
        Ok(())
    }

    /// Parses a `key = value` config and validates it.
    pub fn from_config(text: &str) -> Result<Self> {
        let spec: BenchmarkSpec = crate::io::from_kv(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }

    pub fn sha256(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }
}

fn check_proportions(p: &[f64; 5]) -> Result<()> {
    if p.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
        return Err(Error::config("gamma_proportions", "entries must be non-negative"));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::config("gamma_proportions", format!("must sum to 1, got {sum}")));
    }
    Ok(())
}

/// Preference levels with their 1..5 rating.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaAssignment {
    pub gamma: Array2<f64>,
    pub five_scale: Array2<u8>,
}

/// Product of two `N(0, 1)` factor matrices of the given rank.
pub fn random_scores(n_users: usize, n_items: usize, rank: usize, rng: &mut SeededRng) -> Array2<f64> {
    let u = Array2::from_shape_fn((n_users, rank), |_| rng.sample::<f64, _>(StandardNormal));
    let v = Array2::from_shape_fn((n_items, rank), |_| rng.sample::<f64, _>(StandardNormal));
    u.dot(&v.t())
}

/// Sorts the scores ascending (ties by row-major index) and assigns the
/// lowest `proportions[0]` share to level 0.1, the next share to 0.3, and
/// so on. Level boundaries are rounded cumulative counts.
pub fn build_gamma(scores: &Array2<f64>, proportions: &[f64; 5]) -> Result<GammaAssignment> {
    check_proportions(proportions)?;
    if let Some(v) = scores.iter().find(|v| !v.is_finite()) {
        return Err(Error::Domain {
            what: "scores must be finite",
            value: *v,
        });
    }
    let (n, m) = scores.dim();
    let total = n * m;
    let flat: Vec<f64> = scores.iter().copied().collect();
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_unstable_by(|&a, &b| flat[a].total_cmp(&flat[b]).then(a.cmp(&b)));

    let mut gamma = Array2::zeros((n, m));
    let mut five = Array2::zeros((n, m));
    let mut cum = 0.0;
    let mut start = 0;
    for (level, share) in proportions.iter().enumerate() {
        cum += share;
        let end = if level == 4 { total } else { ((cum * total as f64).round() as usize).min(total) };
        for &j in &order[start..end.max(start)] {
            gamma[[j / m, j % m]] = GAMMA_LEVELS[level];
            five[[j / m, j % m]] = level as u8 + 1;
        }
        start = end.max(start);
    }
    Ok(GammaAssignment { gamma, five_scale: five })
}

/// Accepts any preference matrix in [0, 1]; each entry's rating is that
/// of the nearest level, ties going to the lower level.
pub fn gamma_from_supplied(gamma: Array2<f64>) -> Result<GammaAssignment> {
    if let Some(v) = gamma.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain {
            what: "supplied preference probabilities must lie in [0, 1]",
            value: *v,
        });
    }
    let five_scale = gamma.mapv(|g| {
        let mut best = 0;
        for (k, level) in GAMMA_LEVELS.iter().enumerate() {
            if (g - level).abs() < (g - GAMMA_LEVELS[best]).abs() - LEVEL_TOL {
                best = k;
            }
        }
        best as u8 + 1
    });
    Ok(GammaAssignment { gamma, five_scale })
}

/// Regression MF on five-scale triples (squared loss, linear output),
/// returning the dense completed score matrix.
pub fn complete_ratings_mf(triples: &[Triple], n_users: usize, n_items: usize, dim: usize, sgd: &SgdConfig) -> Result<Array2<f64>> {
    sgd.validate()?;
    if triples.is_empty() {
        return Err(Error::EmptyObservedSet);
    }
    if let Some(&(u, i, _)) = triples.iter().find(|t| t.0 >= n_users || t.1 >= n_items) {
        return Err(Error::InvalidDataset(format!("pair ({u},{i}) outside {n_users}x{n_items}")));
    }
    let root = SeededRng::new(sgd.seed);
    let mut params = FactorParams::init(n_users, n_items, dim, &mut root.fork(0))?;
    let mut opt = Optimizer::new(sgd, params.as_slice().len());
    let mut rng = root.fork(1);
    let mut order: Vec<usize> = (0..triples.len()).collect();
    let batch = sgd.effective_batch(triples.len());
    let mut grad = vec![0.0; params.as_slice().len()];
    for epoch in 0..sgd.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / chunk.len() as f64;
            for &t in chunk {
                let (u, i, r) = triples[t];
                let resid = params.score(u, i) - r;
                params.add_score_gradient(u, i, 2.0 * scale * resid, &mut grad);
            }
            params.add_l2_gradient(sgd.weight_decay, &mut grad);
            opt.apply(params.as_mut_slice(), &grad).map_err(|e| match e {
                Error::Divergence { what, .. } => Error::Divergence { epoch, what },
                other => other,
            })?;
        }
        if !params.is_finite() {
            return Err(Error::Divergence {
                epoch,
                what: "completion parameters are not finite".into(),
            });
        }
    }
    Ok(Array2::from_shape_fn((n_users, n_items), |(u, i)| params.score(u, i)))
}

fn is_level(g: f64, level: f64) -> bool {
    (g - level).abs() < LEVEL_TOL
}

/// Prediction matrix of the given kind plus any warnings.
pub fn build_prediction_matrix(kind: PredKind, gamma: &Array2<f64>, rng: &mut SeededRng) -> Result<(PredictionMatrix, Vec<String>)> {
    let mut warnings = Vec::new();
    let values = match kind {
        PredKind::Rotate => gamma.mapv(|g| if g >= 0.3 - LEVEL_TOL { g - 0.2 } else { 0.9 }),
        PredKind::Skew => {
            let mut out = Array2::zeros(gamma.dim());
            for (slot, &g) in out.iter_mut().zip(gamma.iter()) {
                let normal = Normal::new(g, (1.0 - g) / 2.0).map_err(|_| Error::Domain {
                    what: "skew spread must be non-negative",
                    value: g,
                })?;
                *slot = normal.sample(rng).clamp(0.1, 0.9);
            }
            out
        }
        PredKind::Crs => gamma.mapv(|g| if g <= 0.6 { 0.2 } else { 0.6 }),
        PredKind::One | PredKind::Three | PredKind::Five => {
            let level = kind.flip_level().expect("flip kinds have a level");
            let want = gamma.iter().filter(|&&g| is_level(g, 0.9)).count();
            let chosen = reservoir(gamma.iter().enumerate().filter(|(_, &g)| is_level(g, level)).map(|(j, _)| j), want, rng);
            if chosen.len() < want {
                warnings.push(format!(
                    "{kind}: only {} cells at level {level}, fewer than the {want} cells at 0.9; flipped all of them",
                    chosen.len()
                ));
            }
            let mut out = gamma.clone();
            let m = gamma.ncols();
            for j in chosen {
                out[[j / m, j % m]] = 0.9;
            }
            out
        }
    };
    Ok((PredictionMatrix::new(values)?, warnings))
}

/// Uniform `k`-subset of a stream (Algorithm R), in stream order of
/// replacement slots.
fn reservoir(items: impl Iterator<Item = usize>, k: usize, rng: &mut SeededRng) -> Vec<usize> {
    let mut res = Vec::with_capacity(k);
    if k == 0 {
        return res;
    }
    for (seen, item) in items.enumerate() {
        if seen < k {
            res.push(item);
        } else {
            let j = rng.random_range(0..=seen);
            if j < k {
                res[j] = item;
            }
        }
    }
    res
}

/// `p_base * alpha^min(4, 6 - r)`, clipped to 1 with a warning.
pub fn assign_propensities(p_base: f64, alpha: f64, five_scale: &Array2<u8>) -> (Array2<f64>, Vec<String>) {
    let p = five_scale.mapv(|r| {
        let exponent = 4.min(6 - i32::from(r.clamp(1, 5)));
        p_base * alpha.powi(exponent)
    });
    let over = p.iter().filter(|&&x| x > 1.0).count();
    let mut warnings = Vec::new();
    if over > 0 {
        warnings.push(format!("{over} propensities above 1 clipped to 1"));
    }
    (p.mapv(|x| x.min(1.0)), warnings)
}

/// Share of observed pairs.
pub fn observed_rate(mask: &Array2<f64>) -> f64 {
    mask.sum() / mask.len().max(1) as f64
}

/// Per-pair interpolation weights for the propensity perturbation.
pub fn draw_betas(mode: BetaMode, dim: (usize, usize), rng: &mut SeededRng) -> Array2<f64> {
    match mode {
        BetaMode::None => Array2::zeros(dim),
        BetaMode::UniformPerPair => Array2::from_shape_fn(dim, |_| rng.random::<f64>()),
        BetaMode::UniformPerRun => Array2::from_elem(dim, rng.random::<f64>()),
    }
}

/// `1 / p_hat = (1 - beta) / p + beta / p_e`, then the floor.
pub fn perturb_propensities(p_true: &Array2<f64>, p_e: f64, betas: &Array2<f64>, floor: f64) -> Result<PropensityMatrix> {
    if !(p_e > 0.0) {
        return Err(Error::Domain {
            what: "average observation rate must be positive",
            value: p_e,
        });
    }
    crate::types::check_dim("perturbation weights", p_true.dim(), betas.dim())?;
    let mut inv = Array2::zeros(p_true.dim());
    ndarray::Zip::from(&mut inv).and(p_true).and(betas).for_each(|v, &p, &b| {
        *v = if b == 0.0 {
            p
        } else if b == 1.0 {
            p_e
        } else {
            1.0 / ((1.0 - b) / p + b / p_e)
        };
    });
    PropensityMatrix::new(inv, floor)
}

/// One generated benchmark.
#[derive(Debug, Clone)]
pub struct BenchmarkInstance {
    pub spec: BenchmarkSpec,
    pub gamma: Array2<f64>,
    pub five_scale: Array2<u8>,
    pub prediction: PredictionMatrix,
    pub p_true: PropensityMatrix,
    pub p_hat: PropensityMatrix,
    /// Observation mask, noisy observed ratings and the true preferences.
    pub dataset: RatingDataset,
    /// Noisy ratings over all pairs, observed or not.
    pub noisy_ratings: Array2<f64>,
    pub warnings: Vec<String>,
}

/// Stream ids of the instance generator.
mod stream {
    pub const SCORES: u64 = 0;
    pub const PREDICTION: u64 = 1;
    pub const OBSERVATION: u64 = 2;
    pub const TRUTH: u64 = 3;
    pub const FLIPS: u64 = 4;
    pub const BETA: u64 = 5;
}

pub fn sample_instance(spec: &BenchmarkSpec) -> Result<BenchmarkInstance> {
    sample_instance_with(spec, None)
}

/// Generates an instance. `supplied` is the score matrix for
/// [`GammaSource::Scores`] or the preference matrix for [`GammaSource::Gamma`].
pub fn sample_instance_with(spec: &BenchmarkSpec, supplied: Option<&Array2<f64>>) -> Result<BenchmarkInstance> {
    spec.validate()?;
    let dim = (spec.n_users, spec.n_items);
    let root = SeededRng::new(spec.seed);
    let supplied_matrix = || -> Result<&Array2<f64>> {
        let s = supplied.ok_or(Error::MissingComponent("supplied matrix for the gamma source"))?;
        crate::types::check_dim("supplied matrix", dim, s.dim())?;
        Ok(s)
    };
    let levels = match spec.gamma_source {
        GammaSource::LowRank { rank } => build_gamma(&random_scores(dim.0, dim.1, rank, &mut root.fork(stream::SCORES)), &spec.gamma_proportions)?,
        GammaSource::Scores => build_gamma(supplied_matrix()?, &spec.gamma_proportions)?,
        GammaSource::Gamma => gamma_from_supplied(supplied_matrix()?.clone())?,
    };
    let (prediction, mut warnings) = build_prediction_matrix(spec.pred_kind, &levels.gamma, &mut root.fork(stream::PREDICTION))?;

    let p_true = match spec.observation {
        ObservationMode::Propensity => {
            let (p, w) = assign_propensities(spec.p_base, spec.alpha, &levels.five_scale);
            warnings.extend(w);
            p
        }
        ObservationMode::Uniform { ratio } => Array2::from_elem(dim, ratio),
    };

    let mut obs_rng = root.fork(stream::OBSERVATION);
    let mask = p_true.mapv(|p| if obs_rng.random_bool(p) { 1.0 } else { 0.0 });
    let mut truth_rng = root.fork(stream::TRUTH);
    let truth = levels.gamma.mapv(|g| if truth_rng.random_bool(g) { 1.0 } else { 0.0 });
    let mut flip_rng = root.fork(stream::FLIPS);
    let (r01, r10) = (spec.rho.rho01(), spec.rho.rho10());
    let noisy = truth.mapv(|t| {
        let u: f64 = flip_rng.random();
        if t == 1.0 {
            if u < r01 {
                0.0
            } else {
                1.0
            }
        } else if u < r10 {
            1.0
        } else {
            0.0
        }
    });
    let observed = &noisy * &mask;

    let p_e = observed_rate(&mask);
    let betas = draw_betas(spec.beta_mode, dim, &mut root.fork(stream::BETA));
    let p_hat = perturb_propensities(&p_true, p_e, &betas, spec.propensity_floor)?;
    let true_floor = p_true.iter().copied().fold(spec.propensity_floor, f64::min);
    let p_true = PropensityMatrix::new(p_true, true_floor)?;
    let dataset = RatingDataset::new(mask, observed, Some(truth))?;

    Ok(BenchmarkInstance {
        spec: spec.clone(),
        gamma: levels.gamma,
        five_scale: levels.five_scale,
        prediction,
        p_true,
        p_hat,
        dataset,
        noisy_ratings: noisy,
        warnings,
    })
}

const FORMAT: &str = "omedr-instance";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: String,
    pub spec: BenchmarkSpec,
    pub spec_sha256: String,
    pub n_observed: usize,
    pub warnings: Vec<String>,
}

impl BenchmarkInstance {
    /// Mean clean loss of the prediction matrix against the true preferences.
    pub fn true_inaccuracy(&self, loss: LossKind) -> Result<f64> {
        true_inaccuracy(&self.prediction, self.dataset.require_truth()?, loss)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format: FORMAT.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            spec: self.spec.clone(),
            spec_sha256: self.spec.sha256(),
            n_observed: self.dataset.n_observed(),
            warnings: self.warnings.clone(),
        }
    }

    /// Writes the instance files into `dir`, creating it if needed.
    /// Returns the SHA-256 of the manifest.
    pub fn write_dir(&self, dir: &Path) -> Result<String> {
        fs::create_dir_all(dir)?;
        let put = |name: &str, m: &Array2<f64>| -> Result<()> {
            let mut w = BufWriter::new(fs::File::create(dir.join(name))?);
            write_matrix_csv(m, &mut w)?;
            std::io::Write::flush(&mut w)?;
            Ok(())
        };
        put("gamma.csv", &self.gamma)?;
        put("five_scale.csv", &self.five_scale.mapv(f64::from))?;
        put("pred.csv", self.prediction.values())?;
        put("p_true.csv", self.p_true.values())?;
        put("p_hat.csv", self.p_hat.values())?;
        put("o.csv", &self.dataset.observed_mask)?;
        put("r_true.csv", self.dataset.require_truth()?)?;
        put("r_obs.csv", &self.dataset.observed_ratings)?;
        put("r_noisy.csv", &self.noisy_ratings)?;
        let manifest = serde_json::to_string_pretty(&self.manifest())? + "\n";
        fs::write(dir.join("manifest.json"), &manifest)?;
        Ok(sha256_hex(manifest.as_bytes()))
    }
}

/// SHA-256 of an instance directory's manifest file.
pub fn manifest_hash(dir: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(dir.join("manifest.json"))?))
}

/// Instance files as read back from disk. Propensity and prediction files
/// are optional so that callers can report what is missing.
#[derive(Debug, Clone)]
pub struct LoadedInstance {
    pub manifest: Manifest,
    pub manifest_sha256: String,
    pub dataset: RatingDataset,
    pub prediction: Option<PredictionMatrix>,
    pub p_true: Option<PropensityMatrix>,
    pub p_hat: Option<PropensityMatrix>,
    pub gamma: Option<Array2<f64>>,
}

fn read_optional(dir: &Path, name: &str) -> Result<Option<Array2<f64>>> {
    let path = dir.join(name);
    if !path.exists() {
        return Ok(None);
    }
    let m = read_matrix_csv(BufReader::new(fs::File::open(&path)?)).map_err(|e| match e {
        Error::Parse { line, msg } => Error::Parse {
            line,
            msg: format!("{name}: {msg}"),
        },
        other => other,
    })?;
    Ok(Some(m))
}

fn read_required(dir: &Path, name: &str) -> Result<Array2<f64>> {
    read_optional(dir, name)?.ok_or_else(|| Error::InvalidDataset(format!("{} is missing", dir.join(name).display())))
}

pub fn read_instance_dir(dir: &Path) -> Result<LoadedInstance> {
    let bytes = fs::read(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes)?;
    if manifest.format != FORMAT {
        return Err(Error::InvalidDataset(format!("manifest format `{}` is not {FORMAT}", manifest.format)));
    }
    let mask = read_required(dir, "o.csv")?;
    let ratings = read_required(dir, "r_obs.csv")?;
    let truth = read_optional(dir, "r_true.csv")?;
    let dataset = RatingDataset::new(mask, ratings, truth)?;
    let floor = manifest.spec.propensity_floor;
    let p_true = read_optional(dir, "p_true.csv")?
        .map(|p| {
            let f = p.iter().copied().fold(floor, f64::min);
            PropensityMatrix::new(p, f)
        })
        .transpose()?;
    Ok(LoadedInstance {
        manifest_sha256: sha256_hex(&bytes),
        prediction: read_optional(dir, "pred.csv")?.map(PredictionMatrix::new).transpose()?,
        p_hat: read_optional(dir, "p_hat.csv")?.map(|p| PropensityMatrix::new(p, floor)).transpose()?,
        gamma: read_optional(dir, "gamma.csv")?,
        p_true,
        dataset,
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_level_proportions() {
        let scores = Array2::from_shape_fn((3, 4), |(u, i)| (u * 7 + i) as f64);
        let g = build_gamma(&scores, &[1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(g.gamma.iter().all(|&x| x == 0.1));
        assert!(g.five_scale.iter().all(|&r| r == 1));
    }

    #[test]
    fn descending_scores_get_descending_levels() {
        let g = build_gamma(&array![[5.0, 4.0, 3.0, 2.0, 1.0]], &[0.2; 5]).unwrap();
        assert_eq!(g.gamma, array![[0.9, 0.7, 0.5, 0.3, 0.1]]);
        assert_eq!(g.five_scale, array![[5, 4, 3, 2, 1]]);
    }

    #[test]
    fn uniform_scores_split_into_fifths() {
        let mut rng = SeededRng::new(3);
        let scores = Array2::from_shape_fn((37, 29), |_| rng.random::<f64>());
        let g = build_gamma(&scores, &[0.2; 5]).unwrap();
        let exact = 37.0 * 29.0 / 5.0;
        for level in GAMMA_LEVELS {
            let c = g.gamma.iter().filter(|&&x| x == level).count() as f64;
            assert!((c - exact).abs() <= 1.0, "{level}: {c}");
        }
    }

    #[test]
    fn row_permutation_commutes_with_gamma() {
        let mut rng = SeededRng::new(4);
        let scores = Array2::from_shape_fn((6, 5), |_| rng.random::<f64>());
        let perm = [3usize, 0, 5, 1, 4, 2];
        let permuted = Array2::from_shape_fn((6, 5), |(u, i)| scores[[perm[u], i]]);
        let a = build_gamma(&scores, &[0.1, 0.2, 0.3, 0.25, 0.15]).unwrap();
        let b = build_gamma(&permuted, &[0.1, 0.2, 0.3, 0.25, 0.15]).unwrap();
        for u in 0..6 {
            assert_eq!(b.gamma.row(u), a.gamma.row(perm[u]));
        }
    }

    #[test]
    fn bad_proportions_name_the_field() {
        let err = build_gamma(&array![[1.0]], &[0.5, 0.5, 0.5, 0.0, 0.0]).unwrap_err();
        assert!(err.to_string().contains("gamma_proportions"), "{err}");
    }

    #[test]
    fn rotate_and_crs_rules() {
        let gamma = array![[0.1, 0.3, 0.5, 0.7, 0.9]];
        let mut rng = SeededRng::new(0);
        let (p, _) = build_prediction_matrix(PredKind::Rotate, &gamma, &mut rng).unwrap();
        let expect = [0.9, 0.1, 0.3, 0.5, 0.7];
        for (a, b) in p.values().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        let (p, _) = build_prediction_matrix(PredKind::Crs, &gamma, &mut rng).unwrap();
        assert_eq!(p.values(), &array![[0.2, 0.2, 0.2, 0.6, 0.6]]);
    }

    #[test]
    fn flip_kinds_move_as_many_cells_as_the_top_level() {
        let mut rng = SeededRng::new(1);
        let scores = Array2::from_shape_fn((20, 25), |_| rng.random::<f64>());
        let g = build_gamma(&scores, &[0.2; 5]).unwrap();
        let top = g.gamma.iter().filter(|&&x| x == 0.9).count();
        for (kind, level) in [(PredKind::One, 0.1), (PredKind::Three, 0.3), (PredKind::Five, 0.5)] {
            let (p, warnings) = build_prediction_matrix(kind, &g.gamma, &mut rng).unwrap();
            assert!(warnings.is_empty());
            let flipped = ndarray::Zip::from(p.values()).and(&g.gamma).fold(0, |c, &p, &g| c + usize::from(g == level && p == 0.9));
            let unchanged = ndarray::Zip::from(p.values()).and(&g.gamma).fold(0, |c, &p, &g| c + usize::from(p == g));
            assert_eq!(flipped, top);
            assert_eq!(unchanged, 500 - top);
        }
    }

    #[test]
    fn short_flip_level_warns() {
        let gamma = array![[0.9, 0.9, 0.9, 0.1]];
        let (p, warnings) = build_prediction_matrix(PredKind::One, &gamma, &mut SeededRng::new(0)).unwrap();
        assert_eq!(warnings.len(), 1);
        assert!(p.values().iter().all(|&x| x == 0.9));
    }

    #[test]
    fn propensity_rule() {
        let (p, w) = assign_propensities(1.0, 0.5, &array![[5, 1, 3]]);
        assert_eq!(p, array![[0.5, 0.0625, 0.125]]);
        assert!(w.is_empty());
        let (p, _) = assign_propensities(0.7, 1.0, &array![[1, 2, 5]]);
        assert!(p.iter().all(|&x| x == 0.7));
        let (p, w) = assign_propensities(4.0, 0.5, &array![[5, 1]]);
        assert_eq!(p, array![[1.0, 0.25]]);
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn propensities_increase_with_rating() {
        let five = array![[1, 2, 3, 4, 5]];
        for alpha in [0.1, 0.5, 0.9, 1.0] {
            let (p, _) = assign_propensities(1.0, alpha, &five);
            for w in p.row(0).to_vec().windows(2) {
                assert!(w[0] <= w[1]);
            }
        }
    }

    #[test]
    fn perturbation_endpoints_and_midpoint() {
        let p = array![[0.5, 0.2], [0.9, 0.0625]];
        let exact = perturb_propensities(&p, 0.3, &Array2::zeros((2, 2)), 0.05).unwrap();
        assert_eq!(exact.values(), &p);
        let flat = perturb_propensities(&p, 0.3, &Array2::ones((2, 2)), 0.05).unwrap();
        assert!(flat.values().iter().all(|&x| (x - 0.3).abs() < 1e-15));
        let mid = perturb_propensities(&array![[0.5]], 0.25, &array![[0.5]], 0.05).unwrap();
        assert!((mid.get(0, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!(perturb_propensities(&p, 0.0, &Array2::zeros((2, 2)), 0.05).is_err());
    }

    #[test]
    fn noiseless_instance_exposes_truth() {
        let spec = BenchmarkSpec {
            n_users: 30,
            n_items: 40,
            rho: ErrorParams::noiseless(),
            seed: 5,
            ..BenchmarkSpec::default()
        };
        let inst = sample_instance(&spec).unwrap();
        let truth = inst.dataset.require_truth().unwrap();
        for (u, i) in inst.dataset.observed_pairs() {
            assert_eq!(inst.dataset.observed_ratings[[u, i]], truth[[u, i]]);
        }
    }

    #[test]
    fn instances_are_deterministic() {
        let spec = BenchmarkSpec {
            n_users: 20,
            n_items: 15,
            pred_kind: PredKind::Skew,
            seed: 42,
            ..BenchmarkSpec::default()
        };
        let a = sample_instance(&spec).unwrap();
        let b = sample_instance(&spec).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.prediction, b.prediction);
        assert_eq!(a.p_hat, b.p_hat);
    }

    #[test]
    fn spec_round_trips_through_config_text() {
        let text = "n_users = 10\nn_items = 12\ngamma_proportions = 0.1, 0.2, 0.3, 0.2, 0.2\nalpha = 0.25\n\
                    rho.rho01 = 0.3\nrho.rho10 = 0.05\npred_kind = THREE\nbeta_mode = uniform_per_run\nseed = 9\n\
                    gamma_source.kind = low_rank\ngamma_source.rank = 2\nobservation.kind = uniform\nobservation.ratio = 0.4\n";
        let spec = BenchmarkSpec::from_config(text).unwrap();
        assert_eq!(spec.pred_kind, PredKind::Three);
        assert_eq!(spec.observation, ObservationMode::Uniform { ratio: 0.4 });
        assert_eq!(spec.rho, ErrorParams::new(0.3, 0.05).unwrap());
        let back: BenchmarkSpec = serde_json::from_str(&spec.to_json()).unwrap();
        assert_eq!(back, spec);

        let err = BenchmarkSpec::from_config("gamma_proportions = 0.5, 0.5, 0.5, 0, 0\n").unwrap_err();
        assert!(err.to_string().contains("gamma_proportions"));
        assert!(BenchmarkSpec::from_config("rho.rho01 = 0.6\nrho.rho10 = 0.5\n").is_err());
    }

    #[test]
    fn instance_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = BenchmarkSpec {
            n_users: 8,
            n_items: 9,
            seed: 1,
            ..BenchmarkSpec::default()
        };
        let inst = sample_instance(&spec).unwrap();
        let hash = inst.write_dir(dir.path()).unwrap();
        let back = read_instance_dir(dir.path()).unwrap();
        assert_eq!(back.manifest_sha256, hash);
        assert_eq!(back.manifest.spec, spec);
        assert_eq!(back.dataset, inst.dataset);
        assert_eq!(back.prediction.unwrap(), inst.prediction);
        assert_eq!(back.p_hat.unwrap(), inst.p_hat);
        assert_eq!(back.p_true.unwrap().values(), inst.p_true.values());
    }
}
