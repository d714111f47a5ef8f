//! Regression of the rate parameter `k` from image features.
//!
//! Three model families share one interface: ridge-regularized linear and
//! per-feature cubic least squares, and epsilon-insensitive support vector
//! regression with a Gaussian kernel. Features are standardized with
//! constants taken from the training rows.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::colorspace::ColorSpace;
use crate::error::{Error, Result};
use crate::features::FeatureVector;
use crate::study::k_max;
use crate::transform::DistanceMetric;

/// Smallest k returned by [`TrainedPredictor::predict_k`].
pub const K_FLOOR: f64 = 1e-3;

pub const LINEAR_MIN_ROWS: usize = 5;
pub const CUBIC_PARAMS: usize = 13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegressorKind {
    Linear,
    Cubic,
    Svr,
}

impl RegressorKind {
    pub const ALL: [RegressorKind; 3] = [RegressorKind::Linear, RegressorKind::Cubic, RegressorKind::Svr];

    pub fn as_str(self) -> &'static str {
        match self {
            RegressorKind::Linear => "linear",
            RegressorKind::Cubic => "cubic",
            RegressorKind::Svr => "svr",
        }
    }
}

impl fmt::Display for RegressorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RegressorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear" => Ok(RegressorKind::Linear),
            "cubic" => Ok(RegressorKind::Cubic),
            "svr" | "svm" => Ok(RegressorKind::Svr),
            other => Err(Error::Input(format!("unknown regressor kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRow {
    pub image: String,
    pub space: ColorSpace,
    pub metric: DistanceMetric,
    pub features: FeatureVector,
    pub k: f64,
}

#[derive(Debug, Deserialize)]
struct TrainingCsvRow {
    image: String,
    space: String,
    metric: String,
    mean_lum: f64,
    std_lum: f64,
    std_sat: f64,
    std_hue: f64,
    k: f64,
}

pub const TRAINING_HEADER: &str = "image,space,metric,mean_lum,std_lum,std_sat,std_hue,k";

pub fn parse_training<R: std::io::Read>(reader: R, origin: &Path) -> Result<Vec<TrainingRow>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut rows = Vec::new();
    for (i, row) in rdr.deserialize::<TrainingCsvRow>().enumerate() {
        let row = row.map_err(|e| Error::csv(origin, e))?;
        let at = |e: Error| Error::Malformed(format!("{} row {}: {e}", origin.display(), i + 1));
        if !row.k.is_finite() {
            return Err(at(Error::Numeric(format!("k = {}", row.k))));
        }
        rows.push(TrainingRow {
            space: row.space.parse().map_err(at)?,
            metric: row.metric.parse().map_err(at)?,
            features: FeatureVector::new(row.mean_lum, row.std_lum, row.std_sat, row.std_hue).map_err(at)?,
            image: row.image,
            k: row.k,
        });
    }
    Ok(rows)
}

pub fn read_training_csv(path: impl AsRef<Path>) -> Result<Vec<TrainingRow>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_training(file, path)
}

pub fn write_training_csv(path: impl AsRef<Path>, rows: &[TrainingRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(TRAINING_HEADER.split(',')).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        let f = r.features.as_array();
        w.write_record([
            r.image.clone(),
            r.space.to_string(),
            r.metric.to_string(),
            f[0].to_string(),
            f[1].to_string(),
            f[2].to_string(),
            f[3].to_string(),
            r.k.to_string(),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Rows of one (space, metric) configuration.
pub fn select_rows(rows: &[TrainingRow], space: Option<ColorSpace>, metric: Option<DistanceMetric>) -> Vec<TrainingRow> {
    rows.iter()
        .filter(|r| space.is_none_or(|s| s == r.space) && metric.is_none_or(|m| m == r.metric))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvrParams {
    pub epsilon: f64,
    pub c: f64,
    /// Kernel bandwidth; `None` uses the median pairwise distance of the
    /// standardized training features.
    #[serde(default)]
    pub bandwidth: Option<f64>,
    pub tolerance: f64,
    pub max_sweeps: usize,
}

impl Default for SvrParams {
    fn default() -> Self {
        SvrParams {
            epsilon: 0.05,
            c: 10.0,
            bandwidth: None,
            tolerance: 1e-4,
            max_sweeps: 100_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub ridge: f64,
    /// Ridge weight for the cubic model when it has fewer rows than parameters.
    pub cubic_fallback_ridge: f64,
    pub svr: SvrParams,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            ridge: 1e-8,
            cubic_fallback_ridge: 1e-3,
            svr: SvrParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: [f64; 4],
    pub scale: [f64; 4],
}

impl Standardizer {
    /// Population mean and standard deviation per feature; a zero deviation
    /// becomes 1 so constant features map to 0.
    pub fn fit(xs: &[[f64; 4]]) -> Self {
        let n = xs.len() as f64;
        let mean: [f64; 4] = std::array::from_fn(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n);
        let scale = std::array::from_fn(|j| {
            let var = xs.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        });
        Standardizer { mean, scale }
    }

    pub fn apply(&self, x: [f64; 4]) -> [f64; 4] {
        std::array::from_fn(|j| (x[j] - self.mean[j]) / self.scale[j])
    }

    pub fn invert(&self, z: [f64; 4]) -> [f64; 4] {
        std::array::from_fn(|j| z[j] * self.scale[j] + self.mean[j])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum Model {
    /// Intercept followed by one weight per standardized feature.
    Linear { coef: Vec<f64> },
    /// Intercept followed by `z, z^2, z^3` weights for each feature in turn.
    Cubic { coef: Vec<f64> },
    Svr {
        support: Vec<[f64; 4]>,
        dual: Vec<f64>,
        bandwidth: f64,
        offset: f64,
    },
}

fn linear_design(z: &[f64; 4]) -> Vec<f64> {
    let mut row = Vec::with_capacity(5);
    row.push(1.0);
    row.extend_from_slice(z);
    row
}

fn cubic_design(z: &[f64; 4]) -> Vec<f64> {
    let mut row = Vec::with_capacity(CUBIC_PARAMS);
    row.push(1.0);
    for &v in z {
        row.extend([v, v * v, v * v * v]);
    }
    row
}

fn rbf(a: &[f64; 4], b: &[f64; 4], bandwidth: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-d2 / (2.0 * bandwidth * bandwidth)).exp()
}

impl Model {
    fn eval(&self, z: &[f64; 4]) -> f64 {
        let dot = |coef: &[f64], row: Vec<f64>| coef.iter().zip(row).map(|(c, r)| c * r).sum::<f64>();
        match self {
            Model::Linear { coef } => dot(coef, linear_design(z)),
            Model::Cubic { coef } => dot(coef, cubic_design(z)),
            Model::Svr {
                support,
                dual,
                bandwidth,
                offset,
            } => {
                offset
                    + support
                        .iter()
                        .zip(dual)
                        .map(|(s, b)| b * rbf(s, z, *bandwidth))
                        .sum::<f64>()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub k: f64,
    pub raw: f64,
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedPredictor {
    pub kind: RegressorKind,
    pub standardizer: Standardizer,
    pub model: Model,
    pub hyper: Hyper,
    pub n_train: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub space: Option<ColorSpace>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<DistanceMetric>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub provenance: String,
}

impl TrainedPredictor {
    pub fn predict_raw(&self, f: &FeatureVector) -> f64 {
        self.model.eval(&self.standardizer.apply(f.as_array()))
    }

    /// Prediction clamped into `(0, ln 1001]`.
    pub fn predict_k(&self, f: &FeatureVector) -> Result<Prediction> {
        if f.as_array().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite feature value".into()));
        }
        Ok(clamp_k(self.predict_raw(f)))
    }

    /// Intercept and per-feature weights on unstandardized features, for
    /// linear models only.
    pub fn raw_linear_coefficients(&self) -> Option<[f64; 5]> {
        let Model::Linear { coef } = &self.model else {
            return None;
        };
        let s = &self.standardizer;
        let mut out = [0.0; 5];
        out[0] = coef[0];
        for j in 0..4 {
            out[j + 1] = coef[j + 1] / s.scale[j];
            out[0] -= coef[j + 1] * s.mean[j] / s.scale[j];
        }
        Some(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

pub fn clamp_k(raw: f64) -> Prediction {
    let (k, clamped) = if raw.is_nan() || raw <= 0.0 {
        (K_FLOOR, true)
    } else if raw > k_max() {
        (k_max(), true)
    } else {
        (raw, false)
    };
    Prediction { k, raw, clamped }
}

/// Least squares with an unpenalized intercept (column 0) and ridge weight
/// `tau` on the remaining columns.
fn ridge(design: &[Vec<f64>], y: &[f64], tau: f64) -> Result<Vec<f64>> {
    let (n, p) = (design.len(), design[0].len());
    let mut a = DMatrix::zeros(n + p - 1, p);
    let mut b = DVector::zeros(n + p - 1);
    for (i, row) in design.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            a[(i, j)] = *v;
        }
        b[i] = y[i];
    }
    for j in 1..p {
        a[(n + j - 1, j)] = tau.sqrt();
    }
    let sol = a
        .svd(true, true)
        .solve(&b, 1e-14)
        .map_err(|e| Error::Training(e.to_string()))?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::Training("least-squares solution is not finite".into()));
    }
    Ok(sol.iter().copied().collect())
}

fn median_pairwise_distance(zs: &[[f64; 4]]) -> f64 {
    let mut d = Vec::with_capacity(zs.len() * zs.len().saturating_sub(1) / 2);
    for i in 0..zs.len() {
        for j in i + 1..zs.len() {
            let d2: f64 = zs[i].iter().zip(&zs[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d.push(d2.sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    let med = if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    };
    if med > 1e-12 {
        med
    } else {
        1.0
    }
}

/// Dual coordinate descent for epsilon-insensitive regression with the
/// offset fixed at the target mean:
/// `min 1/2 b'Kb - b'(y - mean) + eps |b|_1` subject to `|b_i| <= C`.
fn train_svr(zs: &[[f64; 4]], y: &[f64], p: &SvrParams) -> Result<Model> {
    if !(p.epsilon >= 0.0 && p.c > 0.0 && p.tolerance > 0.0) {
        return Err(Error::Config(format!(
            "SVR needs epsilon >= 0, C > 0 and a positive tolerance, got {p:?}"
        )));
    }
    let n = zs.len();
    let offset = y.iter().sum::<f64>() / n as f64;
    let bandwidth = match p.bandwidth {
        Some(b) if b > 0.0 => b,
        Some(b) => return Err(Error::Config(format!("kernel bandwidth must be positive, got {b}"))),
        None => median_pairwise_distance(zs),
    };
    let k: Vec<Vec<f64>> = zs
        .iter()
        .map(|a| zs.iter().map(|b| rbf(a, b, bandwidth)).collect())
        .collect();
    let r: Vec<f64> = y.iter().map(|v| v - offset).collect();
    let mut beta = vec![0.0; n];
    let mut kb = vec![0.0; n];
    let mut converged = false;
    for _ in 0..p.max_sweeps {
        let mut max_step: f64 = 0.0;
        for i in 0..n {
            let g = kb[i] - r[i];
            let kii = k[i][i];
            let u = beta[i] - g / kii;
            let shrink = p.epsilon / kii;
            let soft = u.signum() * (u.abs() - shrink).max(0.0);
            let next = soft.clamp(-p.c, p.c);
            let step = next - beta[i];
            if step != 0.0 {
                for (j, v) in kb.iter_mut().enumerate() {
                    *v += step * k[i][j];
                }
                beta[i] = next;
            }
            max_step = max_step.max(step.abs());
        }
        if max_step < p.tolerance {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Training(format!(
            "SVR did not converge within {} sweeps",
            p.max_sweeps
        )));
    }
    let (support, dual) = zs
        .iter()
        .zip(&beta)
        .filter(|(_, b)| **b != 0.0)
        .map(|(z, b)| (*z, *b))
        .unzip();
    Ok(Model::Svr {
        support,
        dual,
        bandwidth,
        offset,
    })
}

pub fn train(rows: &[TrainingRow], kind: RegressorKind, hyper: &Hyper) -> Result<TrainedPredictor> {
    if rows.is_empty() {
        return Err(Error::Training("no training rows".into()));
    }
    if kind == RegressorKind::Linear && rows.len() < LINEAR_MIN_ROWS {
        return Err(Error::Training(format!(
            "linear regression needs at least {LINEAR_MIN_ROWS} rows, got {}",
            rows.len()
        )));
    }
    if let Some(r) = rows.iter().find(|r| !r.k.is_finite()) {
        return Err(Error::Training(format!("row `{}` has non-finite k", r.image)));
    }
    let xs: Vec<[f64; 4]> = rows.iter().map(|r| r.features.as_array()).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.k).collect();
    let standardizer = Standardizer::fit(&xs);
    let zs: Vec<[f64; 4]> = xs.iter().map(|x| standardizer.apply(*x)).collect();

    let model = match kind {
        RegressorKind::Linear => Model::Linear {
            coef: ridge(&zs.iter().map(linear_design).collect::<Vec<_>>(), &y, hyper.ridge)?,
        },
        RegressorKind::Cubic => {
            let tau = if rows.len() < CUBIC_PARAMS {
                hyper.cubic_fallback_ridge.max(hyper.ridge)
            } else {
                hyper.ridge
            };
            Model::Cubic {
                coef: ridge(&zs.iter().map(cubic_design).collect::<Vec<_>>(), &y, tau)?,
            }
        }
        RegressorKind::Svr => train_svr(&zs, &y, &hyper.svr)?,
    };
    let same = |f: &dyn Fn(&TrainingRow) -> String| rows.iter().all(|r| f(r) == f(&rows[0]));
    Ok(TrainedPredictor {
        kind,
        standardizer,
        model,
        hyper: *hyper,
        n_train: rows.len(),
        space: same(&|r| r.space.to_string()).then_some(rows[0].space),
        metric: same(&|r| r.metric.to_string()).then_some(rows[0].metric),
        provenance: String::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub kind: RegressorKind,
    pub folds: usize,
    pub fold_mse: Vec<f64>,
    pub mse_mean: f64,
    /// Population variance of the per-fold MSEs.
    pub mse_variance: f64,
    /// Max minus min k over the whole dataset.
    pub k_range: f64,
    /// `100 * mse_mean / k_range`.
    pub pct_error: f64,
    pub seed: u64,
}

/// Mean and population variance.
pub fn mean_variance(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (mean, v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n)
}

pub fn pct_error(mse: f64, k_range: f64) -> Result<f64> {
    if !(k_range > 0.0) {
        return Err(Error::Training(format!(
            "percentage error needs a positive k range, got {k_range}"
        )));
    }
    Ok(100.0 * mse / k_range)
}

/// `folds`-fold cross validation over a seeded shuffle of the rows. Fold
/// sizes differ by at most one.
pub fn cross_validate(rows: &[TrainingRow], kind: RegressorKind, hyper: &Hyper, folds: usize, seed: u64) -> Result<CvReport> {
    if folds < 2 {
        return Err(Error::Config(format!("cross validation needs at least 2 folds, got {folds}")));
    }
    if rows.len() < folds {
        return Err(Error::Training(format!(
            "{} rows cannot fill {folds} folds",
            rows.len()
        )));
    }
    let (kmin, kmax) = rows
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.k), hi.max(r.k)));
    let k_range = kmax - kmin;

    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut fold_mse = Vec::with_capacity(folds);
    let (base, extra) = (rows.len() / folds, rows.len() % folds);
    let mut start = 0;
    for f in 0..folds {
        let len = base + usize::from(f < extra);
        let test = &order[start..start + len];
        let train_rows: Vec<TrainingRow> = order[..start]
            .iter()
            .chain(&order[start + len..])
            .map(|&i| rows[i].clone())
            .collect();
        start += len;
        let p = train(&train_rows, kind, hyper)?;
        let mut se = 0.0;
        for &i in test {
            let k = p.predict_k(&rows[i].features)?.k;
            se += (k - rows[i].k).powi(2);
        }
        fold_mse.push(se / test.len() as f64);
    }
    let (mse_mean, mse_variance) = mean_variance(&fold_mse);
    Ok(CvReport {
        kind,
        folds,
        pct_error: pct_error(mse_mean, k_range)?,
        fold_mse,
        mse_mean,
        mse_variance,
        k_range,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaveOneOut {
    pub image: String,
    pub kind: RegressorKind,
    pub predicted_k: f64,
    pub true_k: f64,
    pub squared_error: f64,
    pub clamped: bool,
}

/// Trains on every row but the first one with image id `image` and
/// evaluates on that row.
pub fn leave_one_image_out(rows: &[TrainingRow], image: &str, kind: RegressorKind, hyper: &Hyper) -> Result<LeaveOneOut> {
    let idx = rows
        .iter()
        .position(|r| r.image == image)
        .ok_or_else(|| Error::Lookup(image.to_string()))?;
    let rest: Vec<TrainingRow> = rows
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != idx)
        .map(|(_, r)| r.clone())
        .collect();
    let p = train(&rest, kind, hyper)?;
    let pred = p.predict_k(&rows[idx].features)?;
    Ok(LeaveOneOut {
        image: image.to_string(),
        kind,
        predicted_k: pred.k,
        true_k: rows[idx].k,
        squared_error: (pred.k - rows[idx].k).powi(2),
        clamped: pred.clamped,
    })
}
