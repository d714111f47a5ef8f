//! Color space conversions.
//!
//! Every conversion is routed through a fixed graph:
//!
//! ```text
//! HSL <-> sRGB <-> linear RGB <-> XYZ <-> { LAB, UVW }
//! ```
//!
//! sRGB uses the IEC 61966-2-1 transfer function and the D65 primaries
//! matrix. LAB is CIE 1976 L*a*b*. UVW is the CIE 1964 U*V*W* space built on
//! the 1960 UCS (u, v) chromaticities. Below the W* formula's validity floor
//! (Y < 1 on the 0..100 scale) the lightness is continued linearly as
//! `W* = 8 Y` so the transform stays invertible down to black.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorSpace {
    Srgb,
    LinearRgb,
    Xyz,
    Lab,
    Uvw,
    Hsl,
}

impl ColorSpace {
    pub fn as_str(self) -> &'static str {
        match self {
            ColorSpace::Srgb => "srgb",
            ColorSpace::LinearRgb => "linear_rgb",
            ColorSpace::Xyz => "xyz",
            ColorSpace::Lab => "lab",
            ColorSpace::Uvw => "uvw",
            ColorSpace::Hsl => "hsl",
        }
    }
}

impl fmt::Display for ColorSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ColorSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "srgb" | "rgb" => Ok(ColorSpace::Srgb),
            "linear_rgb" | "linear" => Ok(ColorSpace::LinearRgb),
            "xyz" => Ok(ColorSpace::Xyz),
            "lab" | "cielab" => Ok(ColorSpace::Lab),
            "uvw" | "cieuvw" => Ok(ColorSpace::Uvw),
            "hsl" => Ok(ColorSpace::Hsl),
            other => Err(Error::Input(format!("unknown color space `{other}`"))),
        }
    }
}

/// Three channel components in the units of their color space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorTriple(pub [f64; 3]);

impl ColorTriple {
    pub const fn new(c0: f64, c1: f64, c2: f64) -> Self {
        ColorTriple([c0, c1, c2])
    }

    pub fn c0(&self) -> f64 {
        self.0[0]
    }

    pub fn c1(&self) -> f64 {
        self.0[1]
    }

    pub fn c2(&self) -> f64 {
        self.0[2]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl From<[f64; 3]> for ColorTriple {
    fn from(v: [f64; 3]) -> Self {
        ColorTriple(v)
    }
}

/// Reference white, normalized so that `y == 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WhitePoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl WhitePoint {
    pub const D65: WhitePoint = WhitePoint {
        x: 0.95047,
        y: 1.0,
        z: 1.08883,
    };

    pub fn new(x: f64, y: f64, z: f64) -> Result<Self> {
        if !(x > 0.0 && y > 0.0 && z > 0.0) || !(x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(Error::Input(format!(
                "white point components must be positive and finite, got ({x}, {y}, {z})"
            )));
        }
        Ok(WhitePoint {
            x: x / y,
            y: 1.0,
            z: z / y,
        })
    }

    fn uv(&self) -> (f64, f64) {
        let d = self.x + 15.0 * self.y + 3.0 * self.z;
        (4.0 * self.x / d, 6.0 * self.y / d)
    }
}

impl Default for WhitePoint {
    fn default() -> Self {
        WhitePoint::D65
    }
}

const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

const XYZ_TO_SRGB: [[f64; 3]; 3] = [
    [3.2404542, -1.5371385, -0.4985314],
    [-0.9692660, 1.8760108, 0.0415560],
    [0.0556434, -0.2040259, 1.0572252],
];

const LAB_EPSILON: f64 = 216.0 / 24389.0;
const LAB_KAPPA: f64 = 24389.0 / 27.0;

/// Below this Y (on the 0..100 scale) W* is continued linearly.
const UVW_Y_FLOOR: f64 = 1.0;

fn mul3(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

// Odd-symmetric extensions so that out-of-gamut intermediates survive a
// round trip and can be clamped (and counted) by the caller.
fn decode_channel(v: f64) -> f64 {
    let a = v.abs();
    let l = if a <= 0.04045 {
        a / 12.92
    } else {
        ((a + 0.055) / 1.055).powf(2.4)
    };
    l.copysign(v)
}

fn encode_channel(l: f64) -> f64 {
    let a = l.abs();
    let v = if a <= 0.003_130_8 {
        a * 12.92
    } else {
        1.055 * a.powf(1.0 / 2.4) - 0.055
    };
    v.copysign(l)
}

/// sRGB EOTF: decodes a gamma-encoded channel in `[0, 1]` to linear light.
pub fn srgb_to_linear(v: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::range("sRGB channel", v, "[0, 1]"));
    }
    Ok(decode_channel(v))
}

/// Inverse of [`srgb_to_linear`].
pub fn linear_to_srgb(l: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&l) {
        return Err(Error::range("linear channel", l, "[0, 1]"));
    }
    Ok(encode_channel(l))
}

/// Hexcone HSL decomposition of an sRGB triple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hsl {
    /// Degrees in `[0, 360)`; 0 for achromatic input.
    pub hue: f64,
    pub saturation: f64,
    pub luminance: f64,
    /// Set when the input has no chroma (max == min) and the hue is undefined.
    pub achromatic: bool,
}

impl Hsl {
    pub fn to_triple(self) -> ColorTriple {
        ColorTriple([self.hue, self.saturation, self.luminance])
    }
}

pub fn srgb_to_hsl(t: ColorTriple) -> Result<Hsl> {
    for &c in &t.0 {
        if !c.is_finite() {
            return Err(Error::Numeric(format!("non-finite sRGB component {c}")));
        }
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::range("sRGB channel", c, "[0, 1]"));
        }
    }
    Ok(hsl_unchecked(t.0))
}

fn hsl_unchecked([r, g, b]: [f64; 3]) -> Hsl {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let l = 0.5 * (max + min);
    let d = max - min;
    if d <= 0.0 {
        return Hsl {
            hue: 0.0,
            saturation: 0.0,
            luminance: l,
            achromatic: true,
        };
    }
    let s = d / (1.0 - (2.0 * l - 1.0).abs());
    let h = if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    let mut hue = 60.0 * h;
    if hue >= 360.0 {
        hue -= 360.0;
    }
    Hsl {
        hue,
        saturation: s.clamp(0.0, 1.0),
        luminance: l,
        achromatic: false,
    }
}

pub fn hsl_to_srgb(t: ColorTriple) -> Result<ColorTriple> {
    let [h, s, l] = t.0;
    if !t.is_finite() {
        return Err(Error::Numeric(format!("non-finite HSL triple {:?}", t.0)));
    }
    let h = h.rem_euclid(360.0) / 60.0;
    let s = s.clamp(0.0, 1.0);
    let l = l.clamp(0.0, 1.0);
    let c = (1.0 - (2.0 * l - 1.0).abs()) * s;
    let x = c * (1.0 - (h.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = l - 0.5 * c;
    Ok(ColorTriple([r + m, g + m, b + m]))
}

fn lab_f(t: f64) -> f64 {
    if t > LAB_EPSILON {
        t.cbrt()
    } else {
        (LAB_KAPPA * t + 16.0) / 116.0
    }
}

fn lab_f_inv(f: f64) -> f64 {
    let f3 = f * f * f;
    if f3 > LAB_EPSILON {
        f3
    } else {
        (116.0 * f - 16.0) / LAB_KAPPA
    }
}

fn xyz_to_lab([x, y, z]: [f64; 3], wp: &WhitePoint) -> [f64; 3] {
    let fx = lab_f(x / wp.x);
    let fy = lab_f(y / wp.y);
    let fz = lab_f(z / wp.z);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

fn lab_to_xyz([l, a, b]: [f64; 3], wp: &WhitePoint) -> [f64; 3] {
    let fy = (l + 16.0) / 116.0;
    let fx = fy + a / 500.0;
    let fz = fy - b / 200.0;
    let yr = if l > LAB_KAPPA * LAB_EPSILON {
        fy * fy * fy
    } else {
        l / LAB_KAPPA
    };
    [lab_f_inv(fx) * wp.x, yr * wp.y, lab_f_inv(fz) * wp.z]
}

fn uvw_lightness(y100: f64) -> f64 {
    if y100 >= UVW_Y_FLOOR {
        25.0 * y100.cbrt() - 17.0
    } else {
        8.0 * y100
    }
}

fn uvw_lightness_inv(w: f64) -> f64 {
    if w >= 8.0 {
        let c = (w + 17.0) / 25.0;
        c * c * c
    } else {
        w / 8.0
    }
}

fn xyz_to_uvw([x, y, z]: [f64; 3], wp: &WhitePoint) -> [f64; 3] {
    let (u0, v0) = wp.uv();
    let w = uvw_lightness(100.0 * y / wp.y);
    let d = x + 15.0 * y + 3.0 * z;
    let (u, v) = if d.abs() > 1e-300 {
        (4.0 * x / d, 6.0 * y / d)
    } else {
        (u0, v0)
    };
    [13.0 * w * (u - u0), 13.0 * w * (v - v0), w]
}

fn uvw_to_xyz([cu, cv, w]: [f64; 3], wp: &WhitePoint) -> Result<[f64; 3]> {
    let y = uvw_lightness_inv(w) / 100.0 * wp.y;
    if w == 0.0 {
        return Ok([0.0, 0.0, 0.0]);
    }
    let (u0, v0) = wp.uv();
    let u = cu / (13.0 * w) + u0;
    let v = cv / (13.0 * w) + v0;
    if v.abs() < 1e-300 {
        return Err(Error::Numeric(format!(
            "UVW triple ({cu}, {cv}, {w}) has degenerate chromaticity"
        )));
    }
    let x = 1.5 * u * y / v;
    let d = 6.0 * y / v;
    let z = (d - x - 15.0 * y) / 3.0;
    Ok([x, y, z])
}

fn to_xyz(t: [f64; 3], from: ColorSpace, wp: &WhitePoint) -> Result<[f64; 3]> {
    Ok(match from {
        ColorSpace::Xyz => t,
        ColorSpace::LinearRgb => mul3(&SRGB_TO_XYZ, t),
        ColorSpace::Srgb => mul3(&SRGB_TO_XYZ, t.map(decode_channel)),
        ColorSpace::Hsl => {
            let rgb = hsl_to_srgb(ColorTriple(t))?;
            mul3(&SRGB_TO_XYZ, rgb.0.map(decode_channel))
        }
        ColorSpace::Lab => lab_to_xyz(t, wp),
        ColorSpace::Uvw => uvw_to_xyz(t, wp)?,
    })
}

fn from_xyz(xyz: [f64; 3], to: ColorSpace, wp: &WhitePoint) -> [f64; 3] {
    match to {
        ColorSpace::Xyz => xyz,
        ColorSpace::LinearRgb => mul3(&XYZ_TO_SRGB, xyz),
        ColorSpace::Srgb => mul3(&XYZ_TO_SRGB, xyz).map(encode_channel),
        // HSL is only defined on the sRGB cube.
        ColorSpace::Hsl => {
            let rgb = mul3(&XYZ_TO_SRGB, xyz).map(|c| encode_channel(c).clamp(0.0, 1.0));
            hsl_unchecked(rgb).to_triple().0
        }
        ColorSpace::Lab => xyz_to_lab(xyz, wp),
        ColorSpace::Uvw => xyz_to_uvw(xyz, wp),
    }
}

/// Converts `t` from `from` to `to`. sRGB outputs are not clamped here; see
/// [`clamp_unit`].
pub fn convert_triple(
    t: ColorTriple,
    from: ColorSpace,
    to: ColorSpace,
    wp: &WhitePoint,
) -> Result<ColorTriple> {
    if !t.is_finite() {
        return Err(Error::Numeric(format!("non-finite input {:?}", t.0)));
    }
    if from == to {
        return Ok(t);
    }
    // Short paths that avoid the matrix round trip.
    let out = match (from, to) {
        (ColorSpace::Srgb, ColorSpace::LinearRgb) => t.0.map(decode_channel),
        (ColorSpace::LinearRgb, ColorSpace::Srgb) => t.0.map(encode_channel),
        (ColorSpace::Srgb, ColorSpace::Hsl) => hsl_unchecked(t.0.map(|c| c.clamp(0.0, 1.0)))
            .to_triple()
            .0,
        (ColorSpace::Hsl, ColorSpace::Srgb) => hsl_to_srgb(t)?.0,
        _ => from_xyz(to_xyz(t.0, from, wp)?, to, wp),
    };
    let out = ColorTriple(out);
    if !out.is_finite() {
        return Err(Error::Numeric(format!(
            "conversion {from} -> {to} of {:?} produced non-finite output",
            t.0
        )));
    }
    Ok(out)
}

/// Clamps every component to `[0, 1]`; returns whether anything moved by
/// more than `tol`.
pub fn clamp_unit(t: &mut ColorTriple, tol: f64) -> bool {
    let mut clamped = false;
    for c in t.0.iter_mut() {
        let v = c.clamp(0.0, 1.0);
        if (v - *c).abs() > tol {
            clamped = true;
        }
        *c = v;
    }
    clamped
}

pub fn convert_image(img: &ImageBuffer, to: ColorSpace, wp: &WhitePoint) -> Result<ImageBuffer> {
    if img.is_empty() {
        return Err(Error::Input("cannot convert an empty image".into()));
    }
    if img.space() == to {
        return Ok(img.clone());
    }
    let from = img.space();
    let pixels = img
        .pixels()
        .iter()
        .enumerate()
        .map(|(index, p)| {
            convert_triple(ColorTriple(*p), from, to, wp)
                .map(|t| t.0)
                .map_err(|e| Error::Pixel {
                    index,
                    source: Box::new(e),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    ImageBuffer::new(img.width(), img.height(), to, pixels)
}
