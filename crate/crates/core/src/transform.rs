//! Power-minimizing color transforms.
//!
//! Given a power model `P` and an input image `x`, the output `y` minimizes
//! `P(y) + lambda * phi(y - x)` pixel by pixel, where `phi` is either half the
//! squared Euclidean distance ([`DistanceMetric::L22`]) or the Euclidean
//! distance ([`DistanceMetric::L2`]). Both have closed forms, evaluated on the
//! power model's normalized channel coordinates.
//!
//! `lambda` is exposed to users in a normalized form: 0 maps to the raw value
//! at which a white image keeps 40% of its power and 1 to the raw value at
//! which it keeps 95%.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::colorspace::{clamp_unit, convert_image, convert_triple, ColorSpace, ColorTriple, WhitePoint};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::powermodel::{image_power, refit_in_space, PowerModel};

/// Lattice resolution used when an sRGB power model is refitted into LAB/UVW.
pub const REFIT_GRID_STEPS: usize = 16;

/// White-image power ratio reached at `lambda_norm = 1`.
pub const RATIO_AT_MAX: f64 = 0.95;
/// White-image power ratio reached at `lambda_norm = 0`.
pub const RATIO_AT_MIN: f64 = 0.40;

const BRACKET: (f64, f64) = (1e-6, 1e9);
const BISECTION_REL_TOL: f64 = 1e-6;
const CLAMP_TOL: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    /// Half squared Euclidean distance; channels decouple.
    L22,
    /// Euclidean distance; channels couple through the pixel norm.
    L2,
}

impl DistanceMetric {
    pub fn as_str(self) -> &'static str {
        match self {
            DistanceMetric::L22 => "l22",
            DistanceMetric::L2 => "l2",
        }
    }
}

impl fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DistanceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "l22" | "l2sq" | "l2^2" | "squared" => Ok(DistanceMetric::L22),
            "l2" | "euclidean" => Ok(DistanceMetric::L2),
            other => Err(Error::Input(format!("unknown distance metric `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformConfig {
    pub metric: DistanceMetric,
    pub space: ColorSpace,
    pub lambda_norm: f64,
}

impl TransformConfig {
    pub fn new(metric: DistanceMetric, space: ColorSpace, lambda_norm: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda_norm) {
            return Err(Error::range("normalized lambda", lambda_norm, "[0, 1]"));
        }
        if !matches!(space, ColorSpace::Srgb | ColorSpace::Lab | ColorSpace::Uvw) {
            return Err(Error::Config(format!(
                "transforms run in srgb, lab or uvw, not {space}"
            )));
        }
        Ok(TransformConfig {
            metric,
            space,
            lambda_norm,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaRange {
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl LambdaRange {
    pub fn new(lambda_min: f64, lambda_max: f64) -> Result<Self> {
        if !(lambda_min > 0.0 && lambda_min < lambda_max && lambda_max.is_finite()) {
            return Err(Error::Config(format!(
                "lambda range needs 0 < min < max, got [{lambda_min}, {lambda_max}]"
            )));
        }
        Ok(LambdaRange {
            lambda_min,
            lambda_max,
        })
    }
}

/// Normalized lambda values used by the rating study: 0.05, 0.10, ..., 1.00.
pub fn study_lambda_grid() -> Vec<f64> {
    (1..=20).map(|i| i as f64 / 20.0).collect()
}

/// Linear map of `[0, 1]` onto `[lambda_min, lambda_max]`.
pub fn denormalize_lambda(range: &LambdaRange, lambda_norm: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda_norm) {
        return Err(Error::range("normalized lambda", lambda_norm, "[0, 1]"));
    }
    Ok(range.lambda_min + lambda_norm * (range.lambda_max - range.lambda_min))
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::range("lambda", lambda, "finite and > 0"));
    }
    Ok(())
}

/// Closed-form minimizer of `1/2 a y^2 + b y + 1/2 lambda (y - x)^2` per
/// channel, clamped to `[0, 1]`. Input and output are normalized coordinates.
#[inline]
pub fn pixel_l22(model: &PowerModel, t: [f64; 3], lambda: f64) -> [f64; 3] {
    let ch = model.channels();
    std::array::from_fn(|c| {
        ((lambda * t[c] - ch[c].beta) / (lambda + ch[c].alpha)).clamp(0.0, 1.0)
    })
}

/// Closed-form solution for the Euclidean fidelity term with `beta = gamma = 0`:
/// `y = (1 - mu) x`, `mu = max(1 - lambda |x| / (x' D x), 0)`.
///
/// The coefficient is `1 - mu`, not `1 + mu`: minimizing
/// `1/2 (1 - mu)^2 x'Dx + lambda mu |x|` over `mu` gives the `mu` above and a
/// shrink toward the origin. `1 + mu` would scale the pixel up and raise the
/// power. The output is collinear with the input; that is exact when the
/// channel weights are equal and a restriction otherwise.
#[inline]
pub fn pixel_l2(model: &PowerModel, t: [f64; 3], lambda: f64) -> [f64; 3] {
    let ch = model.channels();
    let norm = (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt();
    if norm == 0.0 {
        return t;
    }
    let q = ch[0].alpha * t[0] * t[0] + ch[1].alpha * t[1] * t[1] + ch[2].alpha * t[2] * t[2];
    let mu = (1.0 - lambda * norm / q).max(0.0);
    t.map(|v| ((1.0 - mu) * v).clamp(0.0, 1.0))
}

fn transform_with(
    img: &ImageBuffer,
    model: &PowerModel,
    lambda: f64,
    f: fn(&PowerModel, [f64; 3], f64) -> [f64; 3],
) -> Result<ImageBuffer> {
    check_lambda(lambda)?;
    if img.space() != model.space() {
        return Err(Error::Config(format!(
            "image is tagged {} but the power model is expressed in {}",
            img.space(),
            model.space()
        )));
    }
    let s = model.scaling();
    let pixels = img
        .pixels()
        .iter()
        .map(|p| s.denormalize(f(model, s.normalize(*p), lambda)))
        .collect();
    img.with_pixels(img.space(), pixels)
}

pub fn transform_l22(img: &ImageBuffer, model: &PowerModel, lambda: f64) -> Result<ImageBuffer> {
    for c in model.channels() {
        if lambda + c.alpha <= 0.0 {
            return Err(Error::Numeric(format!(
                "lambda + alpha = {} is not positive",
                lambda + c.alpha
            )));
        }
    }
    transform_with(img, model, lambda, pixel_l22)
}

pub fn transform_l2(img: &ImageBuffer, model: &PowerModel, lambda: f64) -> Result<ImageBuffer> {
    transform_with(img, model, lambda, pixel_l2)
}

pub fn transform(
    img: &ImageBuffer,
    model: &PowerModel,
    metric: DistanceMetric,
    lambda: f64,
) -> Result<ImageBuffer> {
    match metric {
        DistanceMetric::L22 => transform_l22(img, model, lambda),
        DistanceMetric::L2 => transform_l2(img, model, lambda),
    }
}

/// Power of the transformed white pixel relative to the original white pixel.
pub fn white_power_ratio(model: &PowerModel, metric: DistanceMetric, lambda: f64) -> Result<f64> {
    let white = white_in(model.space())?;
    let t = model.scaling().normalize(white);
    let p0 = model.normalized_pixel_power(t);
    if !(p0 > 0.0) {
        return Err(Error::Calibration(format!(
            "white image has non-positive modelled power {p0}"
        )));
    }
    let y = match metric {
        DistanceMetric::L22 => pixel_l22(model, t, lambda),
        DistanceMetric::L2 => pixel_l2(model, t, lambda),
    };
    Ok(model.normalized_pixel_power(y) / p0)
}

fn white_in(space: ColorSpace) -> Result<[f64; 3]> {
    Ok(convert_triple(ColorTriple::new(1.0, 1.0, 1.0), ColorSpace::Srgb, space, &WhitePoint::D65)?.0)
}

/// Raw lambda bounds at which a `width x height` white image keeps 40% and
/// 95% of its power. The ratio does not depend on the canvas size since every
/// pixel is identical; the dimensions are only validated.
pub fn compute_lambda_range(
    model: &PowerModel,
    metric: DistanceMetric,
    width: u32,
    height: u32,
) -> Result<LambdaRange> {
    if width == 0 || height == 0 {
        return Err(Error::Input("calibration canvas must be nonempty".into()));
    }
    let ratio = |l: f64| white_power_ratio(model, metric, l);

    let (mut lo, mut hi) = BRACKET;
    let (mut r_lo, mut r_hi) = (ratio(lo)?, ratio(hi)?);
    while r_lo > RATIO_AT_MIN && lo > 1e-300 {
        lo /= 10.0;
        r_lo = ratio(lo)?;
    }
    while r_hi < RATIO_AT_MAX && hi < 1e300 {
        hi *= 10.0;
        r_hi = ratio(hi)?;
    }
    if !(r_lo <= RATIO_AT_MIN && r_hi >= RATIO_AT_MAX) {
        return Err(Error::Calibration(format!(
            "white-image power ratio only spans [{r_lo:.6}, {r_hi:.6}] for lambda in \
             [{lo:e}, {hi:e}]; targets {RATIO_AT_MIN} and {RATIO_AT_MAX} are unreachable"
        )));
    }

    // Each target must be crossed exactly once. The ratio is monotone for
    // the decoupled metric; the Euclidean one ignores the linear terms, so
    // with a negative beta the ratio can dip below its small-lambda value.
    // That is harmless as long as the dip stays below the target.
    let probes = 512;
    let (llo, lhi) = (lo.ln(), hi.ln());
    let grid: Vec<f64> = (0..=probes)
        .map(|i| (llo + (lhi - llo) * i as f64 / probes as f64).exp())
        .collect();
    let ratios = grid.iter().map(|&l| ratio(l)).collect::<Result<Vec<_>>>()?;

    let solve = |target: f64| -> Result<f64> {
        let first = ratios.iter().position(|&r| r >= target).expect("bracketed");
        if let Some(j) = ratios[first..].iter().position(|&r| r < target) {
            return Err(Error::Calibration(format!(
                "white-image power ratio crosses {target} more than once (again near lambda {:e})",
                grid[first + j]
            )));
        }
        let (mut a, mut b) = (grid[first.saturating_sub(1)], grid[first]);
        while b / a - 1.0 > BISECTION_REL_TOL {
            let m = (a * b).sqrt();
            if ratio(m)? < target {
                a = m;
            } else {
                b = m;
            }
        }
        Ok((a * b).sqrt())
    };
    LambdaRange::new(solve(RATIO_AT_MIN)?, solve(RATIO_AT_MAX)?)
}

/// Power summary of one transform run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformReport {
    pub metric: DistanceMetric,
    pub space: ColorSpace,
    pub lambda_norm: f64,
    pub lambda_raw: f64,
    pub lambda_range: LambdaRange,
    /// Power of the input under the sRGB model.
    pub power_in: f64,
    /// Power of the output under the sRGB model.
    pub power_out: f64,
    pub saving_pct: f64,
    /// Pixels with at least one channel clamped into `[0, 1]`.
    pub clamped_pixels: usize,
    pub pixel_count: usize,
    /// Fit quality of the space-local power model, when it was refitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_model_r_squared: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformResult {
    /// sRGB output.
    pub output: ImageBuffer,
    pub report: TransformReport,
}

/// A metric, working space, space-local power model and calibrated lambda
/// range, ready to transform any number of images.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedTransform {
    metric: DistanceMetric,
    model_srgb: PowerModel,
    local_model: PowerModel,
    range: LambdaRange,
}

impl PreparedTransform {
    pub fn new(metric: DistanceMetric, space: ColorSpace, model_srgb: &PowerModel) -> Result<Self> {
        if model_srgb.space() != ColorSpace::Srgb {
            return Err(Error::Config(format!(
                "expected an sRGB power model, got {}",
                model_srgb.space()
            )));
        }
        TransformConfig::new(metric, space, 0.0)?;
        let local_model = refit_in_space(model_srgb, space, REFIT_GRID_STEPS)?;
        let range = compute_lambda_range(&local_model, metric, 1, 1)?;
        Ok(PreparedTransform {
            metric,
            model_srgb: model_srgb.clone(),
            local_model,
            range,
        })
    }

    pub fn range(&self) -> &LambdaRange {
        &self.range
    }

    pub fn local_model(&self) -> &PowerModel {
        &self.local_model
    }

    pub fn run(&self, img_srgb: &ImageBuffer, lambda_norm: f64) -> Result<TransformResult> {
        if img_srgb.space() != ColorSpace::Srgb {
            return Err(Error::Config(format!(
                "input image must be sRGB, got {}",
                img_srgb.space()
            )));
        }
        if img_srgb.is_empty() {
            return Err(Error::Input("cannot transform an empty image".into()));
        }
        let space = self.local_model.space();
        let lambda = denormalize_lambda(&self.range, lambda_norm)?;
        let wp = WhitePoint::D65;
        let working = convert_image(img_srgb, space, &wp)?;
        let scaling = self.local_model.scaling();

        let mut clamped = vec![false; working.len()];
        let mut out = Vec::with_capacity(working.len());
        for (i, p) in working.pixels().iter().enumerate() {
            let t = scaling.normalize(*p);
            // The range clamp in the closed forms counts as clamping too.
            let raw = match self.metric {
                DistanceMetric::L22 => {
                    let ch = self.local_model.channels();
                    std::array::from_fn(|c| (lambda * t[c] - ch[c].beta) / (lambda + ch[c].alpha))
                }
                DistanceMetric::L2 => pixel_l2(&self.local_model, t, lambda),
            };
            let mut y = ColorTriple(raw);
            clamped[i] |= clamp_unit(&mut y, CLAMP_TOL);
            let native = scaling.denormalize(y.0);
            let mut rgb = convert_triple(ColorTriple(native), space, ColorSpace::Srgb, &wp)
                .map_err(|e| Error::Pixel {
                    index: i,
                    source: Box::new(e),
                })?;
            clamped[i] |= clamp_unit(&mut rgb, CLAMP_TOL);
            out.push(rgb.0);
        }
        let output = img_srgb.with_pixels(ColorSpace::Srgb, out)?;

        let power_in = image_power(&self.model_srgb, img_srgb)?;
        let power_out = image_power(&self.model_srgb, &output)?;
        let saving_pct = if power_in > 0.0 {
            100.0 * (1.0 - power_out / power_in)
        } else {
            0.0
        };
        Ok(TransformResult {
            report: TransformReport {
                metric: self.metric,
                space,
                lambda_norm,
                lambda_raw: lambda,
                lambda_range: self.range,
                power_in,
                power_out,
                saving_pct,
                clamped_pixels: clamped.iter().filter(|&&c| c).count(),
                pixel_count: output.len(),
                local_model_r_squared: (space != ColorSpace::Srgb)
                    .then(|| self.local_model.fit_report().map(|f| f.r_squared))
                    .flatten(),
            },
            output,
        })
    }
}

/// Transforms an sRGB image end to end and reports the power saving measured
/// with the sRGB model on input and output.
pub fn apply(cfg: &TransformConfig, model_srgb: &PowerModel, img_srgb: &ImageBuffer) -> Result<TransformResult> {
    let cfg = TransformConfig::new(cfg.metric, cfg.space, cfg.lambda_norm)?;
    PreparedTransform::new(cfg.metric, cfg.space, model_srgb)?.run(img_srgb, cfg.lambda_norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::powermodel::ChannelPowerParams;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(alpha: [f64; 3], beta: [f64; 3], gamma: [f64; 3]) -> PowerModel {
        let ch = std::array::from_fn(|c| ChannelPowerParams::new(alpha[c], beta[c], gamma[c]).unwrap());
        PowerModel::new(ColorSpace::Srgb, ch, "test").unwrap()
    }

    fn px(p: [f64; 3]) -> ImageBuffer {
        ImageBuffer::uniform(1, 1, ColorSpace::Srgb, p)
    }

    /// Nested grid search for the minimum of a convex 1-D function on [a, b].
    fn grid_min_1d(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
        let n = 100;
        while b - a > 1e-13 {
            let h = (b - a) / n as f64;
            let best = (0..=n)
                .min_by(|&i, &j| f(a + i as f64 * h).total_cmp(&f(a + j as f64 * h)))
                .unwrap();
            let c = a + best as f64 * h;
            let (na, nb) = ((c - 2.0 * h).max(a), (c + 2.0 * h).min(b));
            a = na;
            b = nb;
        }
        0.5 * (a + b)
    }

    /// Nested grid search in 3-D; returns the best objective value found.
    fn grid_min_3d(f: impl Fn([f64; 3]) -> f64, lo: [f64; 3], hi: [f64; 3]) -> f64 {
        let n = 24;
        let (mut lo, mut hi) = (lo, hi);
        let mut best_val = f64::INFINITY;
        for _ in 0..60 {
            let h: [f64; 3] = std::array::from_fn(|k| (hi[k] - lo[k]) / n as f64);
            let mut best = [0.0; 3];
            for i in 0..=n {
                for j in 0..=n {
                    for k in 0..=n {
                        let p = [
                            lo[0] + i as f64 * h[0],
                            lo[1] + j as f64 * h[1],
                            lo[2] + k as f64 * h[2],
                        ];
                        let v = f(p);
                        if v < best_val {
                            best_val = v;
                            best = p;
                        }
                    }
                }
            }
            if h.iter().all(|&w| w < 1e-13) {
                break;
            }
            for k in 0..3 {
                lo[k] = best[k] - 4.0 * h[k];
                hi[k] = best[k] + 4.0 * h[k];
            }
        }
        best_val
    }

    #[test]
    fn l22_examples() {
        let m = model([1.0; 3], [0.0; 3], [0.0; 3]);
        let y = transform_l22(&px([0.8; 3]), &m, 1.0).unwrap();
        assert_abs_diff_eq!(y.pixels()[0][0], 0.4, epsilon = 1e-15);

        let m = model([1.0; 3], [0.1; 3], [0.0; 3]);
        let y = transform_l22(&px([0.8; 3]), &m, 1e9).unwrap();
        assert_abs_diff_eq!(y.pixels()[0][0], 0.8, epsilon = 1e-8);

        let m = model([2.0; 3], [0.2; 3], [0.0; 3]);
        let y = transform_l22(&px([0.5; 3]), &m, 3.0).unwrap();
        assert_abs_diff_eq!(y.pixels()[0][0], 0.26, epsilon = 1e-15);
        let obj = |v: f64| 0.5 * 2.0 * v * v + 0.2 * v + 0.5 * 3.0 * (v - 0.5).powi(2);
        assert_abs_diff_eq!(grid_min_1d(obj, 0.0, 1.0), 0.26, epsilon = 1e-7);
    }

    #[test]
    fn l22_rejects_bad_lambda() {
        let m = model([1.0; 3], [0.0; 3], [0.0; 3]);
        assert!(transform_l22(&px([0.5; 3]), &m, 0.0).is_err());
        assert!(transform_l22(&px([0.5; 3]), &m, f64::NAN).is_err());
    }

    #[test]
    fn l22_matches_grid_minimizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let a = rng.random_range(0.1..5.0);
            let b = rng.random_range(0.0..1.0);
            let l = rng.random_range(0.01..100.0);
            let x = rng.random_range(0.0..1.0);
            let m = model([a; 3], [b; 3], [0.0; 3]);
            let y = pixel_l22(&m, [x; 3], l)[0];
            let obj = |v: f64| 0.5 * a * v * v + b * v + 0.5 * l * (v - x).powi(2);
            let oracle = grid_min_1d(obj, 0.0, 1.0);
            assert!((y - oracle).abs() < 1e-6, "a={a} b={b} l={l} x={x}: {y} vs {oracle}");
            // Unclamped formula against an unconstrained search.
            let raw = (l * x - b) / (l + a);
            assert!((raw - grid_min_1d(obj, -20.0, 2.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn l2_examples() {
        let m = model([1.0; 3], [0.0; 3], [0.0; 3]);
        assert_eq!(transform_l2(&px([0.0; 3]), &m, 0.5).unwrap().pixels()[0], [0.0; 3]);

        let y = pixel_l2(&m, [1.0; 3], 3f64.sqrt());
        for v in y {
            assert_abs_diff_eq!(v, 1.0, epsilon = 1e-12);
        }

        let l = 3f64.sqrt() / 2.0;
        let y = pixel_l2(&m, [1.0; 3], l);
        for v in y {
            assert_abs_diff_eq!(v, 0.5, epsilon = 1e-12);
        }
        let obj = |p: [f64; 3]| {
            0.5 * (p[0] * p[0] + p[1] * p[1] + p[2] * p[2])
                + l * ((p[0] - 1.0).powi(2) + (p[1] - 1.0).powi(2) + (p[2] - 1.0).powi(2)).sqrt()
        };
        let grid = grid_min_3d(obj, [-0.5; 3], [1.5; 3]);
        assert!(obj(y) - grid < 1e-8, "{} vs {grid}", obj(y));
    }

    #[test]
    fn l2_matches_grid_minimizer_for_equal_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let a = rng.random_range(0.1..5.0);
            let x: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
            let l = rng.random_range(0.01..5.0);
            let m = model([a; 3], [0.0; 3], [0.0; 3]);
            let y = pixel_l2(&m, x, l);
            let obj = |p: [f64; 3]| {
                0.5 * a * (p[0] * p[0] + p[1] * p[1] + p[2] * p[2])
                    + l * ((p[0] - x[0]).powi(2) + (p[1] - x[1]).powi(2) + (p[2] - x[2]).powi(2)).sqrt()
            };
            let grid = grid_min_3d(obj, [-0.5; 3], [1.5; 3]);
            assert!(obj(y) - grid < 1e-8, "x={x:?} a={a} l={l}: {} vs {grid}", obj(y));
        }
    }

    #[test]
    fn collinear_solution_is_suboptimal_for_unequal_weights() {
        // With distinct channel weights the exact minimizer leaves the ray
        // through x; the closed form stays on it.
        let alpha = [0.5, 2.0, 4.0];
        let m = model(alpha, [0.0; 3], [0.0; 3]);
        let (x, l) = ([0.9, 0.6, 0.8], 0.8);
        let y = pixel_l2(&m, x, l);
        let obj = |p: [f64; 3]| {
            0.5 * (alpha[0] * p[0] * p[0] + alpha[1] * p[1] * p[1] + alpha[2] * p[2] * p[2])
                + l * ((p[0] - x[0]).powi(2) + (p[1] - x[1]).powi(2) + (p[2] - x[2]).powi(2)).sqrt()
        };
        let grid = grid_min_3d(obj, [-0.5; 3], [1.5; 3]);
        assert!(obj(y) - grid > 1e-3);
    }

    #[test]
    fn l2_is_collinear_shrink() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let alpha: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..5.0));
            let m = model(alpha, [0.0; 3], [0.0; 3]);
            let x: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.01..1.0));
            let y = pixel_l2(&m, x, rng.random_range(0.01..10.0));
            let c = y[0] / x[0];
            assert!((0.0..=1.0).contains(&c));
            for k in 0..3 {
                assert_abs_diff_eq!(y[k], c * x[k], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn gamma_never_changes_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pixels: Vec<_> = (0..64).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let img = ImageBuffer::new(8, 8, ColorSpace::Srgb, pixels).unwrap();
        let m = model([1.5, 2.0, 3.0], [0.1, 0.05, 0.2], [0.0; 3]);
        let m2 = m.with_gammas([0.7, 1.3, 0.01]).unwrap();
        for metric in [DistanceMetric::L22, DistanceMetric::L2] {
            let a = transform(&img, &m, metric, 2.5).unwrap();
            let b = transform(&img, &m2, metric, 2.5).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn lambda_range_closed_form() {
        let m = model([2.0; 3], [0.0; 3], [0.0; 3]);
        let r = compute_lambda_range(&m, DistanceMetric::L22, 4, 4).unwrap();
        let max = 2.0 / (0.95f64.powf(-0.5) - 1.0);
        let min = 2.0 / (0.40f64.powf(-0.5) - 1.0);
        assert!((r.lambda_max / max - 1.0).abs() < 1e-4);
        assert!((r.lambda_min / min - 1.0).abs() < 1e-4);
        assert_abs_diff_eq!(max, 76.99, epsilon = 0.01);
        assert_abs_diff_eq!(min, 3.44, epsilon = 0.01);
    }

    #[test]
    fn lambda_range_l2_against_scan() {
        let m = model([1.0; 3], [0.0; 3], [0.0; 3]);
        let r = compute_lambda_range(&m, DistanceMetric::L2, 1, 1).unwrap();
        // Brute-force scan of the ratio on a fine log grid.
        let ratio = |l: f64| {
            let c = (l * 3f64.sqrt() / 3.0).min(1.0);
            c * c
        };
        let scan = |target: f64| {
            (0..2_000_000)
                .map(|i| 10f64.powf(-3.0 + 6.0 * i as f64 / 2_000_000.0))
                .find(|&l| ratio(l) >= target)
                .unwrap()
        };
        assert!((r.lambda_max / scan(0.95) - 1.0).abs() < 1e-4);
        assert!((r.lambda_min / scan(0.40) - 1.0).abs() < 1e-4);
    }

    #[test]
    fn offset_only_model_is_uncalibratable() {
        let m = model([1e-12; 3], [0.0; 3], [1.0; 3]);
        let err = compute_lambda_range(&m, DistanceMetric::L22, 1, 1).unwrap_err();
        assert!(matches!(err, Error::Calibration(_)), "{err}");
        assert!(err.to_string().contains("unreachable"));
    }

    #[test]
    fn denormalize_examples() {
        let r = LambdaRange::new(3.44, 76.97).unwrap();
        assert_eq!(denormalize_lambda(&r, 0.0).unwrap(), 3.44);
        assert_eq!(denormalize_lambda(&r, 1.0).unwrap(), 76.97);
        assert_abs_diff_eq!(denormalize_lambda(&r, 0.5).unwrap(), 40.205, epsilon = 1e-12);
        assert!(denormalize_lambda(&r, 1.01).is_err());
        assert!(LambdaRange::new(2.0, 1.0).is_err());
    }

    #[test]
    fn study_grid_is_twenty_steps() {
        let g = study_lambda_grid();
        assert_eq!(g.len(), 20);
        assert_eq!(g[0], 0.05);
        assert_eq!(g[19], 1.0);
    }

    #[test]
    fn apply_white_anchors() {
        let m = PowerModel::uniform_srgb(2.0, 0.0, 0.0).unwrap();
        let white = ImageBuffer::uniform(4, 4, ColorSpace::Srgb, [1.0; 3]);
        let at = |metric, norm| {
            apply(&TransformConfig::new(metric, ColorSpace::Srgb, norm).unwrap(), &m, &white)
                .unwrap()
                .report
                .saving_pct
        };
        assert!((at(DistanceMetric::L22, 1.0) - 5.0).abs() < 0.5);
        assert!((at(DistanceMetric::L22, 0.0) - 60.0).abs() < 0.5);
        assert!((at(DistanceMetric::L22, 1.0) - at(DistanceMetric::L2, 1.0)).abs() < 1.0);
    }

    #[test]
    fn apply_in_lab_and_uvw() {
        let m = PowerModel::synthetic_oled();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pixels: Vec<_> = (0..48).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let img = ImageBuffer::new(8, 6, ColorSpace::Srgb, pixels).unwrap();
        for space in [ColorSpace::Lab, ColorSpace::Uvw] {
            for metric in [DistanceMetric::L22, DistanceMetric::L2] {
                let cfg = TransformConfig::new(metric, space, 0.3).unwrap();
                let a = apply(&cfg, &m, &img).unwrap();
                let b = apply(&cfg, &m, &img).unwrap();
                assert_eq!(a, b);
                let r = &a.report;
                assert_eq!(a.output.space(), ColorSpace::Srgb);
                assert!(r.clamped_pixels <= r.pixel_count);
                assert_abs_diff_eq!(r.saving_pct, 100.0 * (1.0 - r.power_out / r.power_in), epsilon = 1e-12);
                assert!(a.output.pixels().iter().flatten().all(|v| (0.0..=1.0).contains(v)));
                assert!(r.local_model_r_squared.is_some());
            }
        }
    }

    #[test]
    fn apply_rejects_non_srgb_input() {
        let m = PowerModel::synthetic_oled();
        let lab = ImageBuffer::uniform(1, 1, ColorSpace::Lab, [50.0, 0.0, 0.0]);
        let cfg = TransformConfig::new(DistanceMetric::L22, ColorSpace::Srgb, 0.5).unwrap();
        assert!(apply(&cfg, &m, &lab).is_err());
        assert!(TransformConfig::new(DistanceMetric::L22, ColorSpace::Xyz, 0.5).is_err());
        assert!(TransformConfig::new(DistanceMetric::L22, ColorSpace::Srgb, 1.5).is_err());
    }

    #[test]
    fn report_json_round_trip() {
        let m = PowerModel::synthetic_oled();
        let img = ImageBuffer::uniform(2, 2, ColorSpace::Srgb, [0.3, 0.6, 0.9]);
        let cfg = TransformConfig::new(DistanceMetric::L2, ColorSpace::Lab, 0.5).unwrap();
        let r = apply(&cfg, &m, &img).unwrap().report;
        let back: TransformReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
