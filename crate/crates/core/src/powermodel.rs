//! Per-channel quadratic display power model.
//!
//! The power to show one pixel is `sum_c 1/2 alpha_c t_c^2 + beta_c t_c + gamma_c`
//! where `t_c` is the channel intensity. For sRGB models `t` is the drive
//! level in `[0, 1]`. Models refitted into LAB or UVW carry a per-channel
//! affine [`ChannelScaling`] that maps native coordinates (L* in 0..100 and
//! so on) onto `[0, 1]` over the sRGB gamut's bounding box.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::colorspace::{convert_triple, ColorSpace, ColorTriple, WhitePoint};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelPowerParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl ChannelPowerParams {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let p = ChannelPowerParams { alpha, beta, gamma };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.beta.is_finite() && self.gamma.is_finite()) {
            return Err(Error::Config(format!("non-finite power parameters {self:?}")));
        }
        if self.alpha <= 0.0 {
            return Err(Error::Config(format!(
                "alpha must be positive (power strictly convex), got {}",
                self.alpha
            )));
        }
        if self.gamma < 0.0 {
            return Err(Error::Config(format!(
                "gamma must be non-negative, got {}",
                self.gamma
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn power(&self, t: f64) -> f64 {
        0.5 * self.alpha * t * t + self.beta * t + self.gamma
    }
}

/// `normalized = (native - offset) / scale`, per channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelScaling {
    pub offset: [f64; 3],
    pub scale: [f64; 3],
}

impl ChannelScaling {
    pub const IDENTITY: ChannelScaling = ChannelScaling {
        offset: [0.0; 3],
        scale: [1.0; 3],
    };

    #[inline]
    pub fn normalize(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.offset[0]) / self.scale[0],
            (p[1] - self.offset[1]) / self.scale[1],
            (p[2] - self.offset[2]) / self.scale[2],
        ]
    }

    #[inline]
    pub fn denormalize(&self, t: [f64; 3]) -> [f64; 3] {
        [
            t[0] * self.scale[0] + self.offset[0],
            t[1] * self.scale[1] + self.offset[1],
            t[2] * self.scale[2] + self.offset[2],
        ]
    }
}

impl Default for ChannelScaling {
    fn default() -> Self {
        ChannelScaling::IDENTITY
    }
}

/// Goodness of fit for a calibrated or refitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub samples: usize,
    pub rms_residual: f64,
    pub r_squared: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_channel_rms: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PowerModelFile")]
pub struct PowerModel {
    space: ColorSpace,
    channels: [ChannelPowerParams; 3],
    #[serde(default)]
    scaling: ChannelScaling,
    provenance: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fit: Option<FitReport>,
}

#[derive(Deserialize)]
struct PowerModelFile {
    space: ColorSpace,
    channels: [ChannelPowerParams; 3],
    #[serde(default)]
    scaling: ChannelScaling,
    #[serde(default)]
    provenance: String,
    #[serde(default)]
    fit: Option<FitReport>,
}

impl TryFrom<PowerModelFile> for PowerModel {
    type Error = Error;

    fn try_from(f: PowerModelFile) -> Result<Self> {
        let mut m = PowerModel::new(f.space, f.channels, f.provenance)?;
        if f.scaling.scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Config(format!("invalid channel scaling {:?}", f.scaling)));
        }
        m.scaling = f.scaling;
        m.fit = f.fit;
        Ok(m)
    }
}

impl PowerModel {
    pub fn new(
        space: ColorSpace,
        channels: [ChannelPowerParams; 3],
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if !matches!(space, ColorSpace::Srgb | ColorSpace::Lab | ColorSpace::Uvw) {
            return Err(Error::Config(format!(
                "power models live in srgb, lab or uvw, not {space}"
            )));
        }
        for c in &channels {
            c.validate()?;
        }
        Ok(PowerModel {
            space,
            channels,
            scaling: ChannelScaling::IDENTITY,
            provenance: provenance.into(),
            fit: None,
        })
    }

    /// Same quadratic on every sRGB channel.
    pub fn uniform_srgb(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let p = ChannelPowerParams::new(alpha, beta, gamma)?;
        PowerModel::new(ColorSpace::Srgb, [p; 3], "synthetic")
    }

    /// Quadratic-dominant synthetic sRGB panel model shipped with the tools.
    /// Not a measurement of any real device.
    pub fn synthetic_oled() -> Self {
        let c = |alpha, beta, gamma| ChannelPowerParams { alpha, beta, gamma };
        PowerModel {
            space: ColorSpace::Srgb,
            channels: [c(1.6, 0.08, 0.01), c(2.0, 0.10, 0.01), c(3.2, 0.16, 0.01)],
            scaling: ChannelScaling::IDENTITY,
            provenance: "synthetic: quadratic-dominant model, not measured on a device".into(),
            fit: None,
        }
    }

    pub fn space(&self) -> ColorSpace {
        self.space
    }

    pub fn channels(&self) -> &[ChannelPowerParams; 3] {
        &self.channels
    }

    pub fn scaling(&self) -> &ChannelScaling {
        &self.scaling
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn fit_report(&self) -> Option<&FitReport> {
        self.fit.as_ref()
    }

    /// Returns a copy with every `gamma` replaced.
    pub fn with_gammas(&self, gammas: [f64; 3]) -> Result<Self> {
        let mut m = self.clone();
        for (c, g) in m.channels.iter_mut().zip(gammas) {
            c.gamma = g;
            c.validate()?;
        }
        Ok(m)
    }

    /// Power of one pixel given in normalized channel coordinates.
    #[inline]
    pub fn normalized_pixel_power(&self, t: [f64; 3]) -> f64 {
        self.channels[0].power(t[0]) + self.channels[1].power(t[1]) + self.channels[2].power(t[2])
    }

    /// Power of one pixel given in the model's native coordinates.
    #[inline]
    pub fn pixel_power(&self, p: [f64; 3]) -> f64 {
        self.normalized_pixel_power(self.scaling.normalize(p))
    }

    pub fn image_power(&self, img: &ImageBuffer) -> Result<f64> {
        image_power(self, img)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

/// Total display power of `img` under `model`.
pub fn image_power(model: &PowerModel, img: &ImageBuffer) -> Result<f64> {
    if img.space() != model.space {
        return Err(Error::Config(format!(
            "image is tagged {} but the power model is expressed in {}",
            img.space(),
            model.space
        )));
    }
    Ok(img.pixels().iter().map(|p| model.pixel_power(*p)).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    R,
    G,
    B,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::R, Channel::G, Channel::B];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Channel::R => "r",
            Channel::G => "g",
            Channel::B => "b",
        })
    }
}

impl FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "r" | "red" => Ok(Channel::R),
            "g" | "green" => Ok(Channel::G),
            "b" | "blue" => Ok(Channel::B),
            other => Err(Error::Input(format!("unknown channel `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementSample {
    pub channel: Channel,
    /// Normalized drive level in `[0, 1]`.
    pub intensity: f64,
    pub power_w: f64,
}

impl MeasurementSample {
    pub fn new(channel: Channel, intensity: f64, power_w: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&intensity) {
            return Err(Error::range("drive intensity", intensity, "[0, 1]"));
        }
        if !(power_w >= 0.0 && power_w.is_finite()) {
            return Err(Error::range("measured power", power_w, ">= 0"));
        }
        Ok(MeasurementSample {
            channel,
            intensity,
            power_w,
        })
    }
}

#[derive(Debug, Deserialize)]
struct CalibrationRow {
    channel: String,
    code: i64,
    power_w: f64,
}

/// Reads a `channel,code,power_w` CSV; 0..255 codes become `[0, 1]` intensities.
pub fn read_calibration_csv(path: impl AsRef<Path>) -> Result<Vec<MeasurementSample>> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    let mut out = Vec::new();
    for (line, row) in rdr.deserialize::<CalibrationRow>().enumerate() {
        let row = row.map_err(|e| Error::csv(path, e))?;
        if !(0..=255).contains(&row.code) {
            return Err(Error::Input(format!(
                "{}: row {}: code {} outside 0..=255",
                path.display(),
                line + 1,
                row.code
            )));
        }
        let channel = row.channel.parse()?;
        out.push(MeasurementSample::new(channel, row.code as f64 / 255.0, row.power_w)?);
    }
    if out.is_empty() {
        return Err(Error::Input(format!(
            "{}: calibration file has no measurements",
            path.display()
        )));
    }
    Ok(out)
}

fn solve_least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    a.clone()
        .svd(true, true)
        .solve(b, 1e-14)
        .map_err(|e| Error::Fit(e.to_string()))
}

/// Per-channel ordinary least squares on `1/2 alpha v^2 + beta v + gamma`.
pub fn fit_from_measurements(samples: &[MeasurementSample]) -> Result<PowerModel> {
    let mut by_channel: BTreeMap<Channel, Vec<&MeasurementSample>> = BTreeMap::new();
    for s in samples {
        by_channel.entry(s.channel).or_default().push(s);
    }
    let mut channels = [ChannelPowerParams {
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
    }; 3];
    let mut per_channel_rms = [0.0; 3];
    let mut sse = 0.0;
    let mut sst = 0.0;
    for ch in Channel::ALL {
        let rows = by_channel
            .get(&ch)
            .ok_or_else(|| Error::Fit(format!("no measurements for channel {ch}")))?;
        let mut levels: Vec<f64> = rows.iter().map(|s| s.intensity).collect();
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        if levels.len() < 3 {
            return Err(Error::Fit(format!(
                "channel {ch} has {} distinct intensities; a quadratic needs at least 3",
                levels.len()
            )));
        }
        let a = DMatrix::from_fn(rows.len(), 3, |i, j| {
            let v = rows[i].intensity;
            [0.5 * v * v, v, 1.0][j]
        });
        let b = DVector::from_iterator(rows.len(), rows.iter().map(|s| s.power_w));
        let x = solve_least_squares(&a, &b)?;
        let params = ChannelPowerParams {
            alpha: x[0],
            beta: x[1],
            gamma: x[2],
        };
        params
            .validate()
            .map_err(|e| Error::Fit(format!("channel {ch}: {e}")))?;
        let mean = b.mean();
        let mut ch_sse = 0.0;
        for s in rows {
            let r = params.power(s.intensity) - s.power_w;
            ch_sse += r * r;
            sst += (s.power_w - mean).powi(2);
        }
        sse += ch_sse;
        per_channel_rms[ch.index()] = (ch_sse / rows.len() as f64).sqrt();
        channels[ch.index()] = params;
    }
    let mut model = PowerModel::new(ColorSpace::Srgb, channels, "calibrated from measurements")?;
    model.fit = Some(FitReport {
        samples: samples.len(),
        rms_residual: (sse / samples.len() as f64).sqrt(),
        r_squared: if sst > 0.0 { 1.0 - sse / sst } else { 1.0 },
        per_channel_rms: Some(per_channel_rms),
    });
    Ok(model)
}

/// Re-expresses an sRGB model as a diagonal quadratic in `to`'s coordinates.
///
/// The sRGB cube is sampled on a `grid_steps^3` lattice, mapped into `to`,
/// rescaled per channel onto `[0, 1]`, and the sRGB power of each lattice
/// point is fitted by bounded least squares with `alpha_c >= 1e-6 * max(alpha)`
/// and a non-negative shared offset. Cross-channel coupling is lost; the fit
/// quality is attached as a [`FitReport`].
pub fn refit_in_space(model: &PowerModel, to: ColorSpace, grid_steps: usize) -> Result<PowerModel> {
    if model.space != ColorSpace::Srgb {
        return Err(Error::Config(format!(
            "refit expects an sRGB model, got {}",
            model.space
        )));
    }
    if to == ColorSpace::Srgb {
        return Ok(model.clone());
    }
    if !matches!(to, ColorSpace::Lab | ColorSpace::Uvw) {
        return Err(Error::Config(format!("cannot refit a power model into {to}")));
    }
    if grid_steps < 4 {
        return Err(Error::Config(format!(
            "grid_steps must be at least 4, got {grid_steps}"
        )));
    }
    let wp = WhitePoint::D65;
    let step = 1.0 / (grid_steps - 1) as f64;
    let n = grid_steps * grid_steps * grid_steps;
    let mut coords = Vec::with_capacity(n);
    let mut power = Vec::with_capacity(n);
    for r in 0..grid_steps {
        for g in 0..grid_steps {
            for b in 0..grid_steps {
                let rgb = [r as f64 * step, g as f64 * step, b as f64 * step];
                let c = convert_triple(ColorTriple(rgb), ColorSpace::Srgb, to, &wp)?;
                coords.push(c.0);
                power.push(model.pixel_power(rgb));
            }
        }
    }

    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for c in &coords {
        for i in 0..3 {
            lo[i] = lo[i].min(c[i]);
            hi[i] = hi[i].max(c[i]);
        }
    }
    let scaling = ChannelScaling {
        offset: lo,
        scale: [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]],
    };

    // Columns: [t0^2/2, t0, t1^2/2, t1, t2^2/2, t2, 1]
    let design = DMatrix::from_fn(n, 7, |i, j| {
        let t = scaling.normalize(coords[i]);
        match j {
            6 => 1.0,
            j if j % 2 == 0 => 0.5 * t[j / 2] * t[j / 2],
            j => t[j / 2],
        }
    });
    let target = DVector::from_vec(power);
    let alpha_floor = 1e-6
        * model
            .channels
            .iter()
            .map(|c| c.alpha)
            .fold(f64::NEG_INFINITY, f64::max);
    let bounded: [(usize, f64); 4] = [(0, alpha_floor), (2, alpha_floor), (4, alpha_floor), (6, 0.0)];
    let w = bounded_least_squares(&design, &target, &bounded)?;

    let residual = &design * &w - &target;
    let sse = residual.norm_squared();
    let mean = target.mean();
    let sst: f64 = target.iter().map(|p| (p - mean).powi(2)).sum();
    let offset = w[6] / 3.0;
    let channels = [0, 1, 2].map(|c| ChannelPowerParams {
        alpha: w[2 * c],
        beta: w[2 * c + 1],
        gamma: offset,
    });
    let mut out = PowerModel::new(
        to,
        channels,
        format!("refit of [{}] into {to} on a {grid_steps}^3 lattice", model.provenance),
    )?;
    out.scaling = scaling;
    out.fit = Some(FitReport {
        samples: n,
        rms_residual: (sse / n as f64).sqrt(),
        r_squared: if sst > 0.0 { 1.0 - sse / sst } else { 1.0 },
        per_channel_rms: None,
    });
    Ok(out)
}

/// Least squares with lower bounds on a few coefficients, solved exactly by
/// enumerating which bounds are active. Only viable for a handful of bounds.
fn bounded_least_squares(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    bounds: &[(usize, f64)],
) -> Result<DVector<f64>> {
    let ncols = a.ncols();
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0u32..(1 << bounds.len()) {
        let fixed: Vec<(usize, f64)> = bounds
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, &b)| b)
            .collect();
        let free: Vec<usize> = (0..ncols)
            .filter(|j| !fixed.iter().any(|(f, _)| f == j))
            .collect();
        let mut rhs = b.clone();
        for &(j, v) in &fixed {
            rhs -= a.column(j) * v;
        }
        let sub = a.select_columns(&free);
        let x = solve_least_squares(&sub, &rhs)?;
        let mut w = DVector::zeros(ncols);
        for &(j, v) in &fixed {
            w[j] = v;
        }
        for (k, &j) in free.iter().enumerate() {
            w[j] = x[k];
        }
        if bounds.iter().any(|&(j, lo)| w[j] < lo - 1e-12) {
            continue;
        }
        let r = (a * &w - b).norm_squared();
        if best.as_ref().is_none_or(|(br, _)| r < *br) {
            best = Some((r, w));
        }
    }
    best.map(|(_, w)| w)
        .ok_or_else(|| Error::Fit("no feasible bounded least-squares solution".into()))
}
