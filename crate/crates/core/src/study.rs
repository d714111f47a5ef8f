//! Rating data pipeline: control validation, mean opinion scores, the lower
//! boundary of (MOS, lambda) points and the exponential lower-bound fit
//! `lambda_lb(s) = (exp(k s) - 1) / 1000`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::colorspace::ColorSpace;
use crate::error::{Error, Result};
use crate::transform::DistanceMetric;

/// Upper end of the rate parameter; keeps `lambda_lb(1) <= 1`.
pub fn k_max() -> f64 {
    1001f64.ln()
}

pub const RATINGS_HEADER: [&str; 8] = [
    "participant",
    "batch",
    "image",
    "metric",
    "space",
    "lambda_norm",
    "score",
    "control",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlKind {
    None,
    Identical,
    Black,
}

impl ControlKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ControlKind::None => "none",
            ControlKind::Identical => "identical",
            ControlKind::Black => "black",
        }
    }
}

impl fmt::Display for ControlKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ControlKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "" | "none" => Ok(ControlKind::None),
            "identical" => Ok(ControlKind::Identical),
            "black" => Ok(ControlKind::Black),
            other => Err(Error::Malformed(format!("unknown control kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatingRecord {
    pub participant: String,
    pub batch: String,
    pub image: String,
    pub metric: DistanceMetric,
    pub space: ColorSpace,
    pub lambda_norm: f64,
    pub score: u8,
    pub control: ControlKind,
}

impl RatingRecord {
    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.score) {
            return Err(Error::Malformed(format!("score {} outside 1..=5", self.score)));
        }
        if !(0.0..=1.0).contains(&self.lambda_norm) {
            return Err(Error::Malformed(format!(
                "lambda_norm {} outside [0, 1]",
                self.lambda_norm
            )));
        }
        Ok(())
    }

    fn csv_fields(&self) -> [String; 8] {
        [
            self.participant.clone(),
            self.batch.clone(),
            self.image.clone(),
            self.metric.to_string(),
            self.space.to_string(),
            self.lambda_norm.to_string(),
            self.score.to_string(),
            self.control.to_string(),
        ]
    }
}

#[derive(Debug, Deserialize)]
struct RatingRow {
    participant: String,
    batch: String,
    image: String,
    metric: String,
    space: String,
    lambda_norm: f64,
    score: i64,
    control: String,
}

pub fn parse_ratings<R: std::io::Read>(reader: R, origin: &Path) -> Result<Vec<RatingRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<RatingRow>().enumerate() {
        let row = row.map_err(|e| Error::csv(origin, e))?;
        let at = |e: Error| {
            let msg = match e {
                Error::Malformed(m) => m,
                other => other.to_string(),
            };
            Error::Malformed(format!("{} row {}: {msg}", origin.display(), i + 1))
        };
        let score = u8::try_from(row.score)
            .map_err(|_| Error::Malformed(format!("score {} outside 1..=5", row.score)))
            .map_err(at)?;
        let rec = RatingRecord {
            participant: row.participant,
            batch: row.batch,
            image: row.image,
            metric: row.metric.parse().map_err(at)?,
            space: row.space.parse().map_err(at)?,
            lambda_norm: row.lambda_norm,
            score,
            control: row.control.parse().map_err(at)?,
        };
        rec.validate().map_err(at)?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_ratings_csv(path: impl AsRef<Path>) -> Result<Vec<RatingRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_ratings(file, path)
}

/// Writes rows without a header; see [`write_ratings_header`].
pub fn write_rating_rows<W: Write>(out: W, records: &[RatingRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for r in records {
        w.write_record(r.csv_fields()).map_err(|e| Error::csv("<ratings>", e))?;
    }
    w.flush().map_err(|e| Error::io("<ratings>", e))
}

pub fn write_ratings_header<W: Write>(out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(RATINGS_HEADER).map_err(|e| Error::csv("<ratings>", e))?;
    w.flush().map_err(|e| Error::io("<ratings>", e))
}

pub fn write_ratings_csv(path: impl AsRef<Path>, records: &[RatingRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_ratings_header(&mut buf)?;
    write_rating_rows(&mut buf, records)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Scores a submission's controls must carry to be kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlRule {
    pub identical_score: u8,
    pub black_score: u8,
}

impl Default for ControlRule {
    fn default() -> Self {
        ControlRule {
            identical_score: 5,
            black_score: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    /// Non-control records of submissions that passed, in input order.
    pub records: Vec<RatingRecord>,
    /// `(participant, batch)` pairs that passed.
    pub kept: Vec<(String, String)>,
    /// `(participant, batch)` pairs dropped for a wrong control score.
    pub dropped: Vec<(String, String)>,
}

/// Keeps the batches whose identical control scored `rule.identical_score`
/// and whose black control scored `rule.black_score`. One batch is one
/// participant's submission of one batch id; each must carry exactly one
/// control of each kind.
pub fn filter_batches(records: &[RatingRecord], rule: ControlRule) -> Result<FilterOutcome> {
    let mut controls: BTreeMap<(String, String), (Vec<u8>, Vec<u8>)> = BTreeMap::new();
    for r in records {
        let entry = controls
            .entry((r.participant.clone(), r.batch.clone()))
            .or_default();
        match r.control {
            ControlKind::Identical => entry.0.push(r.score),
            ControlKind::Black => entry.1.push(r.score),
            ControlKind::None => {}
        }
    }
    let mut kept = BTreeSet::new();
    let mut dropped = Vec::new();
    for (key, (identical, black)) in &controls {
        if identical.len() != 1 || black.len() != 1 {
            return Err(Error::Malformed(format!(
                "participant `{}` batch `{}` has {} identical and {} black controls; expected one of each",
                key.0,
                key.1,
                identical.len(),
                black.len()
            )));
        }
        if identical[0] == rule.identical_score && black[0] == rule.black_score {
            kept.insert(key.clone());
        } else {
            dropped.push(key.clone());
        }
    }
    let records = records
        .iter()
        .filter(|r| r.control == ControlKind::None)
        .filter(|r| kept.contains(&(r.participant.clone(), r.batch.clone())))
        .cloned()
        .collect();
    Ok(FilterOutcome {
        records,
        kept: kept.into_iter().collect(),
        dropped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MosEntry {
    pub image: String,
    pub metric: DistanceMetric,
    pub space: ColorSpace,
    pub lambda_norm: f64,
    pub mos: f64,
    pub mos_norm: f64,
    pub n_ratings: usize,
}

pub fn normalize_mos(mos: f64) -> f64 {
    (mos - 1.0) / 4.0
}

/// Lambda values are grouped at a resolution of 1e-9.
fn lambda_key(l: f64) -> i64 {
    (l * 1e9).round() as i64
}

/// Mean score per (image, metric, space, lambda), sorted by those keys.
pub fn aggregate_mos(records: &[RatingRecord]) -> Vec<MosEntry> {
    let mut groups: BTreeMap<(String, &str, &str, i64), (f64, f64, usize)> = BTreeMap::new();
    let mut tags = BTreeMap::new();
    for r in records.iter().filter(|r| r.control == ControlKind::None) {
        let key = (r.image.clone(), r.metric.as_str(), r.space.as_str(), lambda_key(r.lambda_norm));
        tags.entry(key.clone()).or_insert((r.metric, r.space));
        let g = groups.entry(key).or_insert((r.lambda_norm, 0.0, 0));
        g.1 += r.score as f64;
        g.2 += 1;
    }
    groups
        .into_iter()
        .map(|(key, (lambda_norm, sum, n))| {
            let (metric, space) = tags[&key];
            let mos = sum / n as f64;
            MosEntry {
                image: key.0,
                metric,
                space,
                lambda_norm,
                mos,
                mos_norm: normalize_mos(mos),
                n_ratings: n,
            }
        })
        .collect()
}

/// `(mos_norm, lambda_norm)` point.
pub type BoundaryPoint = (f64, f64);

/// Lower boundary of `(mos_norm, lambda_norm)` points.
///
/// MOS values are snapped to the levels reachable as means of `raters`
/// five-point scores (`4 * raters + 1` levels on `[0, 1]`); each occupied
/// level keeps its smallest lambda. A point is then dropped if another kept
/// point reaches at least its MOS with no larger lambda. What remains is a
/// staircase increasing in both coordinates, returned in ascending MOS order.
pub fn lower_boundary(points: &[BoundaryPoint], raters: usize) -> Vec<BoundaryPoint> {
    let steps = 4 * raters.max(1);
    let mut bins: BTreeMap<usize, f64> = BTreeMap::new();
    for &(s, l) in points {
        let bin = (s.clamp(0.0, 1.0) * steps as f64).round() as usize;
        let slot = bins.entry(bin).or_insert(l);
        if l < *slot {
            *slot = l;
        }
    }
    let mut kept = Vec::new();
    let mut min_lambda = f64::INFINITY;
    for (&bin, &l) in bins.iter().rev() {
        if l < min_lambda {
            kept.push((bin as f64 / steps as f64, l));
            min_lambda = l;
        }
    }
    kept.reverse();
    kept
}

pub fn lambda_lower_bound(k: f64, s: f64) -> Result<f64> {
    if !(k > 0.0 && k <= k_max()) {
        return Err(Error::range("rate parameter k", k, "(0, ln 1001]"));
    }
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::range("normalized MOS", s, "[0, 1]"));
    }
    Ok(((k * s).exp_m1() / 1000.0).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowerBoundFit {
    pub k: f64,
    pub rmse: f64,
    pub n_boundary: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<DistanceMetric>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub space: Option<ColorSpace>,
    pub boundary: Vec<BoundaryPoint>,
}

impl LowerBoundFit {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Sum of squared lambda residuals of the exponential at rate `k`.
pub fn residual_sum(boundary: &[BoundaryPoint], k: f64) -> f64 {
    boundary
        .iter()
        .map(|&(s, l)| {
            let d = (k * s).exp_m1() / 1000.0 - l;
            d * d
        })
        .sum()
}

const GOLDEN_TOL: f64 = 1e-8;
const K_FLOOR: f64 = 1e-9;

/// Least-squares rate `k` of the exponential lower bound. A coarse scan over
/// `(0, ln 1001]` picks the bracket, golden-section search refines it.
pub fn fit_k(boundary: &[BoundaryPoint]) -> Result<LowerBoundFit> {
    if boundary.len() < 2 {
        return Err(Error::Input(format!(
            "fitting k needs at least 2 boundary points, got {}",
            boundary.len()
        )));
    }
    for &(s, l) in boundary {
        if !(0.0..=1.0).contains(&s) || !l.is_finite() {
            return Err(Error::Input(format!("boundary point ({s}, {l}) out of range")));
        }
    }
    if boundary.iter().all(|&(_, l)| l == 0.0) {
        return Err(Error::DegenerateFit("every boundary lambda is zero".into()));
    }
    let f = |k: f64| residual_sum(boundary, k);
    let (lo, hi) = (K_FLOOR, k_max());

    let n = 400;
    let grid: Vec<f64> = (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect();
    let best = (0..=n).min_by(|&a, &b| f(grid[a]).total_cmp(&f(grid[b]))).unwrap();
    let (mut a, mut b) = (grid[best.saturating_sub(1)], grid[(best + 1).min(n)]);

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > GOLDEN_TOL {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    // The endpoints of the search interval are candidates too.
    let k = [0.5 * (a + b), lo, hi]
        .into_iter()
        .min_by(|x, y| f(*x).total_cmp(&f(*y)))
        .unwrap();
    Ok(LowerBoundFit {
        k,
        rmse: (f(k) / boundary.len() as f64).sqrt(),
        n_boundary: boundary.len(),
        image: None,
        metric: None,
        space: None,
        boundary: boundary.to_vec(),
    })
}

/// Which MOS entries feed one lower-bound fit.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Selection {
    pub image: Option<String>,
    pub metric: Option<DistanceMetric>,
    pub space: Option<ColorSpace>,
}

impl Selection {
    pub fn matches(&self, e: &MosEntry) -> bool {
        self.image.as_ref().is_none_or(|i| *i == e.image)
            && self.metric.is_none_or(|m| m == e.metric)
            && self.space.is_none_or(|s| s == e.space)
    }
}

/// Intermediate tables of the full ratings-to-k pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub filtered: FilterOutcome,
    pub mos: Vec<MosEntry>,
    pub boundary: Vec<BoundaryPoint>,
    pub fit: LowerBoundFit,
}

/// Control filtering, MOS aggregation, boundary extraction and k fit for the
/// entries matching `sel`. The MOS level grid follows the largest number of
/// ratings behind any selected entry.
pub fn fit_lower_bound(records: &[RatingRecord], rule: ControlRule, sel: &Selection) -> Result<PipelineOutput> {
    let filtered = filter_batches(records, rule)?;
    let mos: Vec<MosEntry> = aggregate_mos(&filtered.records)
        .into_iter()
        .filter(|e| sel.matches(e))
        .collect();
    if mos.is_empty() {
        return Err(Error::Input("no surviving ratings match the selection".into()));
    }
    let raters = mos.iter().map(|e| e.n_ratings).max().unwrap_or(1);
    let points: Vec<_> = mos.iter().map(|e| (e.mos_norm, e.lambda_norm)).collect();
    let boundary = lower_boundary(&points, raters);
    let mut fit = fit_k(&boundary)?;
    fit.image = sel.image.clone();
    fit.metric = sel.metric;
    fit.space = sel.space;
    Ok(PipelineOutput {
        filtered,
        mos,
        boundary,
        fit,
    })
}
