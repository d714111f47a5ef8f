//! Rating sessions: batch planning from a study manifest, control injection
//! and the append-only score log.

use std::collections::BTreeSet;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use powerhue::study::{write_rating_rows, write_ratings_header, ControlKind, RatingRecord};
use powerhue::transform::study_lambda_grid;
use powerhue::{ColorSpace, DistanceMetric};

pub const DEFAULT_BATCH_SIZE: usize = 20;
pub const ADVISORY_SECONDS: u32 = 20;

pub const SCALE: [(u8, &str); 5] = [
    (5, "Imperceptible"),
    (4, "Perceptible, but not annoying"),
    (3, "Slightly annoying"),
    (2, "Annoying"),
    (1, "Very annoying"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestImage {
    pub id: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Setting {
    pub metric: DistanceMetric,
    pub space: ColorSpace,
}

fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}

/// Study description. Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyManifest {
    /// sRGB power model used to render transformed images.
    pub model: PathBuf,
    pub images: Vec<ManifestImage>,
    pub configs: Vec<Setting>,
    #[serde(default = "study_lambda_grid")]
    pub lambda_grid: Vec<f64>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Fixes the split of stimuli into batches and the control positions.
    #[serde(default)]
    pub seed: u64,
}

impl StudyManifest {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut m: StudyManifest =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        m.model = base.join(&m.model);
        for img in &mut m.images {
            img.path = base.join(&img.path);
        }
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        ensure!(!self.images.is_empty(), "manifest lists no images");
        ensure!(!self.configs.is_empty(), "manifest lists no configurations");
        ensure!(!self.lambda_grid.is_empty(), "manifest lambda grid is empty");
        ensure!(self.batch_size > 0, "batch size must be positive");
        let mut ids = BTreeSet::new();
        for img in &self.images {
            ensure!(ids.insert(img.id.as_str()), "duplicate image id `{}`", img.id);
        }
        for &l in &self.lambda_grid {
            ensure!((0.0..=1.0).contains(&l), "lambda {l} outside [0, 1]");
        }
        Ok(())
    }

    /// Every (image, config, lambda) stimulus, shuffled with the manifest seed.
    pub fn stimuli(&self) -> Vec<Stimulus> {
        let mut all = Vec::new();
        for img in &self.images {
            for cfg in &self.configs {
                for &lambda_norm in &self.lambda_grid {
                    all.push(Stimulus {
                        image: img.id.clone(),
                        setting: *cfg,
                        lambda_norm,
                    });
                }
            }
        }
        all.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
        all
    }

    pub fn batch_count(&self) -> usize {
        self.stimuli().len().div_ceil(self.batch_size)
    }

    pub fn image_path(&self, id: &str) -> Option<&Path> {
        self.images.iter().find(|i| i.id == id).map(|i| i.path.as_path())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stimulus {
    pub image: String,
    pub setting: Setting,
    pub lambda_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub stimulus: Stimulus,
    pub control: ControlKind,
    /// Whether the transformed image is shown on the left.
    pub transformed_left: bool,
}

pub fn batch_id(index: usize) -> String {
    format!("b{index}")
}

/// Pairs of batch `index`: its stimuli plus one identical and one black
/// control at positions drawn from the manifest seed. Left/right placement
/// is drawn from `session_seed`, so raters of one batch share the pair list
/// but not necessarily the placement.
pub fn plan_batch(manifest: &StudyManifest, index: usize, session_seed: u64) -> anyhow::Result<Vec<Pair>> {
    let stimuli = manifest.stimuli();
    let batches = stimuli.len().div_ceil(manifest.batch_size);
    if index >= batches {
        bail!("batch {index} does not exist; the manifest yields {batches} batches");
    }
    let chunk = &stimuli[index * manifest.batch_size..((index + 1) * manifest.batch_size).min(stimuli.len())];

    let mut rng = ChaCha8Rng::seed_from_u64(manifest.seed);
    rng.set_stream(index as u64 + 1);
    let mut pairs: Vec<Pair> = chunk
        .iter()
        .map(|s| Pair {
            stimulus: s.clone(),
            control: ControlKind::None,
            transformed_left: false,
        })
        .collect();
    for (kind, lambda_norm) in [(ControlKind::Identical, 1.0), (ControlKind::Black, 0.0)] {
        let base = &chunk[rng.random_range(0..chunk.len())];
        let at = rng.random_range(0..=pairs.len());
        pairs.insert(
            at,
            Pair {
                stimulus: Stimulus {
                    image: base.image.clone(),
                    setting: base.setting,
                    lambda_norm,
                },
                control: kind,
                transformed_left: false,
            },
        );
    }
    let mut placement = ChaCha8Rng::seed_from_u64(session_seed);
    placement.set_stream(index as u64 + 1);
    for p in &mut pairs {
        p.transformed_left = placement.random();
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreError {
    OutOfRange(i64),
    NoSuchPair(usize),
    Duplicate(usize),
}

impl std::fmt::Display for ScoreError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScoreError::OutOfRange(s) => write!(f, "score {s} outside 1..=5"),
            ScoreError::NoSuchPair(i) => write!(f, "no pair with index {i}"),
            ScoreError::Duplicate(i) => write!(f, "pair {i} is already scored"),
        }
    }
}

impl std::error::Error for ScoreError {}

/// One rater's pass over one batch. Scores are appended to the ratings file
/// as they arrive.
#[derive(Debug)]
pub struct SessionState {
    pub participant: String,
    pub batch_index: usize,
    pub seed: u64,
    pub pairs: Vec<Pair>,
    pub scores: Vec<Option<u8>>,
    pub out: PathBuf,
    pub rows_written: usize,
}

impl SessionState {
    pub fn new(participant: String, batch_index: usize, seed: u64, pairs: Vec<Pair>, out: PathBuf) -> Self {
        let n = pairs.len();
        SessionState {
            participant,
            batch_index,
            seed,
            pairs,
            scores: vec![None; n],
            out,
            rows_written: 0,
        }
    }

    pub fn batch(&self) -> String {
        batch_id(self.batch_index)
    }

    pub fn scored(&self) -> usize {
        self.scores.iter().filter(|s| s.is_some()).count()
    }

    pub fn complete(&self) -> bool {
        self.scored() == self.pairs.len()
    }

    pub fn record(&self, index: usize, score: u8) -> RatingRecord {
        let p = &self.pairs[index];
        RatingRecord {
            participant: self.participant.clone(),
            batch: self.batch(),
            image: p.stimulus.image.clone(),
            metric: p.stimulus.setting.metric,
            space: p.stimulus.setting.space,
            lambda_norm: p.stimulus.lambda_norm,
            score,
            control: p.control,
        }
    }

    /// Validates, appends one CSV row and marks the pair scored. The row is
    /// on disk before the pair counts as scored.
    pub fn submit(&mut self, index: usize, score: i64) -> anyhow::Result<Result<(), ScoreError>> {
        if !(1..=5).contains(&score) {
            return Ok(Err(ScoreError::OutOfRange(score)));
        }
        let Some(slot) = self.scores.get(index) else {
            return Ok(Err(ScoreError::NoSuchPair(index)));
        };
        if slot.is_some() {
            return Ok(Err(ScoreError::Duplicate(index)));
        }
        let score = score as u8;
        let rec = self.record(index, score);
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.out)
            .with_context(|| format!("opening {}", self.out.display()))?;
        let empty = file.metadata().map(|m| m.len() == 0).unwrap_or(true);
        if empty {
            write_ratings_header(&mut file)?;
        }
        write_rating_rows(&mut file, &[rec])?;
        file.sync_data().ok();
        self.scores[index] = Some(score);
        self.rows_written += 1;
        Ok(Ok(()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(images: usize) -> StudyManifest {
        StudyManifest {
            model: "model.json".into(),
            images: (0..images)
                .map(|i| ManifestImage {
                    id: format!("img{i}"),
                    path: format!("img{i}.png").into(),
                })
                .collect(),
            configs: vec![Setting {
                metric: DistanceMetric::L22,
                space: ColorSpace::Srgb,
            }],
            lambda_grid: study_lambda_grid(),
            batch_size: 20,
            seed: 4,
        }
    }

    #[test]
    fn every_batch_has_two_controls() {
        let m = manifest(3);
        assert_eq!(m.batch_count(), 3);
        for b in 0..3 {
            let pairs = plan_batch(&m, b, 1).unwrap();
            assert_eq!(pairs.len(), 22);
            let count = |k| pairs.iter().filter(|p| p.control == k).count();
            assert_eq!(count(ControlKind::Identical), 1);
            assert_eq!(count(ControlKind::Black), 1);
        }
        assert!(plan_batch(&m, 3, 1).is_err());
    }

    #[test]
    fn placement_varies_with_session_seed_only() {
        let m = manifest(2);
        let a = plan_batch(&m, 1, 1).unwrap();
        let b = plan_batch(&m, 1, 2).unwrap();
        let strip = |v: &[Pair]| v.iter().map(|p| (p.stimulus.clone(), p.control)).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b));
        assert_ne!(
            a.iter().map(|p| p.transformed_left).collect::<Vec<_>>(),
            b.iter().map(|p| p.transformed_left).collect::<Vec<_>>()
        );
        assert_eq!(a, plan_batch(&m, 1, 1).unwrap());
    }

    #[test]
    fn stimuli_cover_grid_once() {
        let m = manifest(2);
        let s = m.stimuli();
        assert_eq!(s.len(), 40);
        let unique: BTreeSet<_> = s.iter().map(|x| (x.image.clone(), (x.lambda_norm * 100.0) as i64)).collect();
        assert_eq!(unique.len(), 40);
    }

    #[test]
    fn submit_validates_and_appends() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("r.csv");
        let m = manifest(1);
        let mut s = SessionState::new("p".into(), 0, 0, plan_batch(&m, 0, 0).unwrap(), out.clone());
        assert_eq!(s.submit(0, 7).unwrap(), Err(ScoreError::OutOfRange(7)));
        assert!(!out.exists());
        assert_eq!(s.submit(99, 3).unwrap(), Err(ScoreError::NoSuchPair(99)));
        assert_eq!(s.submit(0, 3).unwrap(), Ok(()));
        assert_eq!(s.submit(0, 4).unwrap(), Err(ScoreError::Duplicate(0)));
        let rows = powerhue::study::read_ratings_csv(&out).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].score, 3);
    }
}
