//! Color heuristics of an image and correlation statistics.

use serde::{Deserialize, Serialize};

use crate::colorspace::{srgb_to_hsl, ColorSpace, ColorTriple};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;

/// Pixels below this saturation carry no usable hue.
pub const ACHROMATIC_SATURATION: f64 = 0.01;

pub const FEATURE_NAMES: [&str; 4] = ["mean_lum", "std_lum", "std_sat", "std_hue"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub mean_lum: f64,
    pub std_lum: f64,
    pub std_sat: f64,
    /// Circular standard deviation of hue over chromatic pixels, scaled to `[0, 1]`.
    pub std_hue: f64,
}

impl FeatureVector {
    pub fn new(mean_lum: f64, std_lum: f64, std_sat: f64, std_hue: f64) -> Result<Self> {
        let f = FeatureVector {
            mean_lum,
            std_lum,
            std_sat,
            std_hue,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self> {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.mean_lum, self.std_lum, self.std_sat, self.std_hue]
    }

    pub fn validate(&self) -> Result<()> {
        let bounds = [1.0, 0.5, 0.5, 1.0];
        for ((v, hi), name) in self.as_array().into_iter().zip(bounds).zip(FEATURE_NAMES) {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("{name} is {v}")));
            }
            if !(0.0..=hi + 1e-12).contains(&v) {
                return Err(Error::Input(format!("{name} = {v} outside [0, {hi}]")));
            }
        }
        Ok(())
    }

    /// `mean_lum,std_lum,std_sat,std_hue` values without a header.
    pub fn to_csv_record(&self) -> String {
        let a = self.as_array();
        format!("{},{},{},{}", a[0], a[1], a[2], a[3])
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Circular standard deviation `sqrt(-2 ln R)` of angles in degrees, mapped
/// by `min(., sqrt 2) / sqrt 2`. Empty input gives 0.
pub fn circular_dispersion(hues_deg: &[f64]) -> f64 {
    if hues_deg.is_empty() {
        return 0.0;
    }
    let n = hues_deg.len() as f64;
    let (s, c) = hues_deg.iter().fold((0.0, 0.0), |(s, c), h| {
        let r = h.to_radians();
        (s + r.sin(), c + r.cos())
    });
    let r_bar = ((s / n).hypot(c / n)).min(1.0);
    let sd = if r_bar <= 0.0 {
        f64::INFINITY
    } else {
        (-2.0 * r_bar.ln()).max(0.0).sqrt()
    };
    sd.min(std::f64::consts::SQRT_2) / std::f64::consts::SQRT_2
}

pub fn extract_features(img: &ImageBuffer) -> Result<FeatureVector> {
    if img.space() != ColorSpace::Srgb {
        return Err(Error::Config(format!(
            "features are defined on sRGB images, got {}",
            img.space()
        )));
    }
    if img.is_empty() {
        return Err(Error::Input("cannot extract features from an empty image".into()));
    }
    let hsl = img
        .pixels()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            srgb_to_hsl(ColorTriple(*p)).map_err(|e| Error::Pixel {
                index: i,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let (mean_lum, std_lum) = mean_std(hsl.iter().map(|h| h.luminance));
    let (_, std_sat) = mean_std(hsl.iter().map(|h| h.saturation));
    let hues: Vec<f64> = hsl
        .iter()
        .filter(|h| !h.achromatic && h.saturation >= ACHROMATIC_SATURATION)
        .map(|h| h.hue)
        .collect();
    FeatureVector::new(mean_lum, std_lum, std_sat, circular_dispersion(&hues))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub pearson: f64,
    pub spearman: f64,
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::UndefinedCorrelation("an input has zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the average of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn correlations(xs: &[f64], ys: &[f64]) -> Result<Correlation> {
    if xs.len() != ys.len() {
        return Err(Error::Input(format!(
            "correlation inputs differ in length ({} vs {})",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 3 {
        return Err(Error::Input(format!(
            "correlation needs at least 3 pairs, got {}",
            xs.len()
        )));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite correlation input".into()));
    }
    Ok(Correlation {
        pearson: pearson(xs, ys)?,
        spearman: pearson(&average_ranks(xs), &average_ranks(ys))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::colorspace::hsl_to_srgb;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn img(pixels: Vec<[f64; 3]>) -> ImageBuffer {
        ImageBuffer::new(pixels.len() as u32, 1, ColorSpace::Srgb, pixels).unwrap()
    }

    #[test]
    fn constant_images() {
        let f = extract_features(&img(vec![[1.0; 3]; 4])).unwrap();
        assert_eq!(f.as_array(), [1.0, 0.0, 0.0, 0.0]);
        let f = extract_features(&img(vec![[1.0, 0.0, 0.0]; 4])).unwrap();
        assert_eq!(f.mean_lum, 0.5);
        assert_abs_diff_eq!(f.std_hue, 0.0, epsilon = 1e-7);
        assert_eq!(f.std_lum, 0.0);
        assert_eq!(f.std_sat, 0.0);
    }

    #[test]
    fn antipodal_hues_have_maximal_dispersion() {
        let f = extract_features(&img(vec![[1.0, 0.0, 0.0], [0.0, 1.0, 1.0]])).unwrap();
        assert_eq!(f.std_hue, 1.0);
    }

    #[test]
    fn quarter_circle_dispersion_by_hand() {
        // Hues 0 and 90: R = |(1 + i)/2| = 1/sqrt 2, sd = sqrt(ln 2).
        let expected = 2f64.ln().sqrt() / 2f64.sqrt();
        assert_abs_diff_eq!(circular_dispersion(&[0.0, 90.0]), expected, epsilon = 1e-12);
    }

    #[test]
    fn grays_are_excluded_from_hue() {
        let f = extract_features(&img(vec![[1.0, 0.0, 0.0], [0.5; 3], [0.2; 3]])).unwrap();
        assert_abs_diff_eq!(f.std_hue, 0.0, epsilon = 1e-7);
        // Saturation just under the cutoff also drops out.
        let faint = [0.500, 0.500, 0.506];
        let f = extract_features(&img(vec![[1.0, 0.0, 0.0], faint])).unwrap();
        assert_abs_diff_eq!(f.std_hue, 0.0, epsilon = 1e-7);
    }

    #[test]
    fn luminance_statistics_by_hand() {
        // Luminances 0, 0.5, 1 -> mean 0.5, population sd sqrt(1/6).
        let f = extract_features(&img(vec![[0.0; 3], [0.5; 3], [1.0; 3]])).unwrap();
        assert_abs_diff_eq!(f.mean_lum, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(f.std_lum, (1.0f64 / 6.0).sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn empty_and_non_srgb_rejected() {
        assert!(extract_features(&ImageBuffer::new(0, 0, ColorSpace::Srgb, vec![]).unwrap()).is_err());
        assert!(extract_features(&ImageBuffer::uniform(1, 1, ColorSpace::Lab, [50.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn csv_record() {
        let f = FeatureVector::new(0.5, 0.25, 0.125, 1.0).unwrap();
        assert_eq!(f.to_csv_record(), "0.5,0.25,0.125,1");
        assert!(FeatureVector::new(0.5, 0.75, 0.0, 0.0).is_err());
    }

    #[test]
    fn perfect_correlations() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let lin: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        let c = correlations(&xs, &lin).unwrap();
        assert_abs_diff_eq!(c.pearson, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.spearman, 1.0, epsilon = 1e-12);
        let xs = [0.5, 1.0, 2.0, 3.0, 5.0];
        let cube: Vec<f64> = xs.iter().map(|x| x * x * x).collect();
        let c = correlations(&xs, &cube).unwrap();
        assert_eq!(c.spearman, 1.0);
        assert!(c.pearson < 1.0);
    }

    #[test]
    fn five_point_fixture_by_hand() {
        // Deviations from the mean 3: x (-2,-1,0,1,2), y (-1,-2,1,0,2).
        // Sxy = 8, Sxx = Syy = 10, so r = 0.8; ranks equal the values.
        let c = correlations(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 1.0, 4.0, 3.0, 5.0]).unwrap();
        assert_abs_diff_eq!(c.pearson, 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(c.spearman, 0.8, epsilon = 1e-12);
        // With a tie: x ranks (1, 2.5, 2.5, 4, 5), y ranks (1, 3, 2, 5, 4).
        // Rank deviations give Sxy = 8.5, Sxx = 9.5, Syy = 10.
        let c = correlations(&[1.0, 2.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 5.0, 4.0]).unwrap();
        assert_abs_diff_eq!(c.spearman, 8.5 / 95f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn correlation_errors() {
        assert!(matches!(
            correlations(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(correlations(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(correlations(&[1.0, 2.0, 3.0], &[1.0, 2.0]).is_err());
    }

    fn pixel() -> impl Strategy<Value = [f64; 3]> {
        prop::array::uniform3(0.0f64..=1.0)
    }

    proptest! {
        #[test]
        fn features_ignore_pixel_order(mut pixels in prop::collection::vec(pixel(), 1..40), seed in any::<u64>()) {
            let a = extract_features(&img(pixels.clone())).unwrap();
            let k = (seed as usize) % pixels.len();
            pixels.rotate_left(k);
            pixels.reverse();
            let b = extract_features(&img(pixels)).unwrap();
            for (x, y) in a.as_array().iter().zip(b.as_array()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn hue_rotation_keeps_dispersion(
            hsl in prop::collection::vec((0.0f64..360.0, 0.05f64..=1.0, 0.1f64..0.9), 1..30),
            shift in 0.0f64..360.0,
        ) {
            let build = |shift: f64| -> ImageBuffer {
                img(hsl.iter().map(|&(h, s, l)| {
                    hsl_to_srgb(ColorTriple([(h + shift) % 360.0, s, l])).unwrap().0
                }).collect())
            };
            let a = extract_features(&build(0.0)).unwrap().std_hue;
            let b = extract_features(&build(shift)).unwrap().std_hue;
            prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
        }

        #[test]
        fn mean_lum_scales_with_luminance(
            hsl in prop::collection::vec((0.0f64..360.0, 0.0f64..=1.0, 0.0f64..=0.5), 1..30),
            c in 0.0f64..=1.0,
        ) {
            let build = |c: f64| -> ImageBuffer {
                img(hsl.iter().map(|&(h, s, l)| hsl_to_srgb(ColorTriple([h, s, c * l])).unwrap().0).collect())
            };
            let a = extract_features(&build(1.0)).unwrap().mean_lum;
            let b = extract_features(&build(c)).unwrap().mean_lum;
            prop_assert!((b - c * a).abs() < 1e-9);
        }

        #[test]
        fn spearman_ignores_monotone_maps(xs in prop::collection::vec(-5.0f64..5.0, 3..30), ys in prop::collection::vec(-5.0f64..5.0, 30)) {
            let ys = &ys[..xs.len()];
            if let Ok(c) = correlations(&xs, ys) {
                let ex: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
                let cy: Vec<f64> = ys.iter().map(|y| y * y * y + y).collect();
                let d = correlations(&ex, &cy).unwrap();
                prop_assert!((c.spearman - d.spearman).abs() < 1e-12);
            }
        }

        #[test]
        fn features_in_range(pixels in prop::collection::vec(pixel(), 1..40)) {
            let f = extract_features(&img(pixels)).unwrap();
            prop_assert!(f.validate().is_ok());
        }
    }
}
