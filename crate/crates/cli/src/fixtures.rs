//! Seeded synthetic inputs: procedural images, a calibration table, a
//! feature/k training table and a study manifest. Nothing here is measured
//! data; every file says so where its format allows.

use std::f64::consts::TAU;
use std::path::Path;

use anyhow::Context;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use powerhue::colorspace::hsl_to_srgb;
use powerhue::powermodel::Channel;
use powerhue::predictor::{self, Hyper, TrainingRow};
use powerhue::{extract_features, ColorSpace, ColorTriple, DistanceMetric, ImageBuffer, PowerModel, RegressorKind};

use crate::session::{ManifestImage, Setting, StudyManifest};

/// Smooth hue/saturation/luminance fields with a few random frequencies.
pub fn procedural_image(width: u32, height: u32, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hue0 = rng.random_range(0.0..360.0);
    let hue_spread = rng.random_range(0.0..180.0);
    let lum0 = rng.random_range(0.15..0.85);
    let lum_slope = rng.random_range(-0.4..0.4);
    let sat0 = rng.random_range(0.0..1.0);
    let sat_amp = rng.random_range(0.0..0.5);
    let (fx, fy) = (rng.random_range(0.5..3.0), rng.random_range(0.5..3.0));
    let (px, py) = (rng.random_range(0.0..TAU), rng.random_range(0.0..TAU));

    let mut pixels = Vec::with_capacity((width * height) as usize);
    for y in 0..height {
        for x in 0..width {
            let u = (x as f64 + 0.5) / width as f64;
            let v = (y as f64 + 0.5) / height as f64;
            let wave = (TAU * fx * u + px).sin() * (TAU * fy * v + py).cos();
            let hue = (hue0 + hue_spread * wave).rem_euclid(360.0);
            let sat = (sat0 + sat_amp * wave).clamp(0.0, 1.0);
            let lum = (lum0 + lum_slope * (u - 0.5) + 0.1 * (TAU * fy * v).sin()).clamp(0.0, 1.0);
            let rgb = hsl_to_srgb(ColorTriple([hue, sat, lum])).expect("valid HSL");
            // Quantize so the buffer equals its own PNG encoding.
            pixels.push(rgb.0.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() / 255.0));
        }
    }
    ImageBuffer::new(width, height, ColorSpace::Srgb, pixels).expect("sized")
}

/// Smooth made-up dependence of k on the features, plus uniform noise.
pub fn synthetic_k(f: &[f64; 4], noise: f64) -> f64 {
    (1.5 + 3.0 * f[0] + 1.2 * (TAU * f[3]).sin() - 2.0 * f[2] + 4.0 * f[1] * f[1] + noise).clamp(0.2, 6.8)
}

pub fn training_rows(n: usize, seed: u64) -> Vec<TrainingRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let img = procedural_image(32, 24, rng.random());
            let features = extract_features(&img).expect("nonempty sRGB image");
            let k = synthetic_k(&features.as_array(), rng.random_range(-0.1..0.1));
            TrainingRow {
                image: format!("synthetic{i:02}"),
                space: ColorSpace::Srgb,
                metric: DistanceMetric::L22,
                features,
                k,
            }
        })
        .collect()
}

/// `channel,code,power_w` rows sampled from `model` every 15 codes.
pub fn calibration_csv(model: &PowerModel) -> String {
    let mut out = String::from("channel,code,power_w\n");
    for ch in Channel::ALL {
        let p = model.channels()[ch.index()];
        for code in (0..=255).step_by(15) {
            out.push_str(&format!("{ch},{code},{}\n", p.power(code as f64 / 255.0)));
        }
    }
    out
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> anyhow::Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Writes the full synthetic fixture set into `dir`; returns the file names.
pub fn write_all(dir: &Path, seed: u64) -> anyhow::Result<Vec<String>> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let model = PowerModel::synthetic_oled();
    model.save(dir.join("model.json"))?;
    write(&dir.join("calibration.csv"), calibration_csv(&model))?;
    procedural_image(64, 48, seed).write_png(dir.join("sample.png"))?;

    let rows = training_rows(40, seed.wrapping_add(1));
    predictor::write_training_csv(dir.join("training.csv"), &rows)?;
    let mut p = predictor::train(&rows, RegressorKind::Svr, &Hyper::default())?;
    p.provenance = "synthetic: trained on generated images with made-up k targets".into();
    p.save(dir.join("predictor.json"))?;

    let mut images = Vec::new();
    for (i, id) in ["study_a", "study_b"].iter().enumerate() {
        let name = format!("{id}.png");
        procedural_image(48, 32, seed.wrapping_add(10 + i as u64)).write_png(dir.join(&name))?;
        images.push(ManifestImage {
            id: id.to_string(),
            path: name.into(),
        });
    }
    let manifest = StudyManifest {
        model: "model.json".into(),
        images,
        configs: vec![
            Setting {
                metric: DistanceMetric::L22,
                space: ColorSpace::Srgb,
            },
            Setting {
                metric: DistanceMetric::L2,
                space: ColorSpace::Lab,
            },
        ],
        lambda_grid: powerhue::transform::study_lambda_grid(),
        batch_size: crate::session::DEFAULT_BATCH_SIZE,
        seed,
    };
    write(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;

    Ok([
        "model.json",
        "calibration.csv",
        "sample.png",
        "training.csv",
        "predictor.json",
        "study_a.png",
        "study_b.png",
        "manifest.json",
    ]
    .map(String::from)
    .to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn procedural_images_are_seeded() {
        assert_eq!(procedural_image(8, 8, 3), procedural_image(8, 8, 3));
        assert_ne!(procedural_image(8, 8, 3), procedural_image(8, 8, 4));
    }

    #[test]
    fn quantized_pixels_survive_png() {
        let img = procedural_image(16, 8, 1);
        let back = ImageBuffer::decode_png(&img.encode_png().unwrap(), Path::new("m.png")).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn training_targets_vary() {
        let rows = training_rows(20, 2);
        let ks: Vec<f64> = rows.iter().map(|r| r.k).collect();
        let spread = ks.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - ks.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(spread > 1.0, "{spread}");
    }
}
