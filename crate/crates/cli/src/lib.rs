//! Command-line workflows around the `powerhue` library.

use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use powerhue::powermodel::{fit_from_measurements, read_calibration_csv};
use powerhue::predictor::{self, Hyper, Prediction, SvrParams};
use powerhue::study::{self, ControlRule, Selection};
use powerhue::transform::{apply, TransformReport};
use powerhue::{
    extract_features, ColorSpace, DistanceMetric, FeatureVector, ImageBuffer, PowerModel, RegressorKind,
    TrainedPredictor, TransformConfig,
};

pub mod fixtures;
pub mod server;
pub mod session;

/// Bad arguments; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// 2 for usage errors and unreadable or empty inputs, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<powerhue::Error>() {
        Some(powerhue::Error::Input(_) | powerhue::Error::Io { .. } | powerhue::Error::Range { .. }) => 2,
        _ => 1,
    }
}

#[derive(Debug, Parser)]
#[command(name = "powerhue", version, about = "Power-saving color transforms for emissive displays")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct HyperArgs {
    /// Ridge weight of the linear and cubic models.
    #[arg(long, default_value_t = 1e-8)]
    pub ridge: f64,
    /// Ridge weight of the cubic model when it has fewer than 13 rows.
    #[arg(long, default_value_t = 1e-3)]
    pub cubic_fallback_ridge: f64,
    #[arg(long, default_value_t = 0.05)]
    pub svr_epsilon: f64,
    #[arg(long, default_value_t = 10.0)]
    pub svr_c: f64,
    /// Gaussian kernel bandwidth; defaults to the median pairwise distance.
    #[arg(long)]
    pub svr_bandwidth: Option<f64>,
}

impl HyperArgs {
    pub fn hyper(&self) -> Hyper {
        Hyper {
            ridge: self.ridge,
            cubic_fallback_ridge: self.cubic_fallback_ridge,
            svr: SvrParams {
                epsilon: self.svr_epsilon,
                c: self.svr_c,
                bandwidth: self.svr_bandwidth,
                ..SvrParams::default()
            },
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit an sRGB power model from a `channel,code,power_w` CSV.
    Calibrate {
        measurements: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Transform one image at a given normalized lambda.
    Transform {
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "l22")]
        metric: DistanceMetric,
        #[arg(long, default_value = "srgb")]
        space: ColorSpace,
        #[arg(long)]
        lambda_norm: f64,
        #[arg(long, short)]
        out: PathBuf,
        /// Where to write the JSON report; stdout when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Pick lambda from a target opinion score via the k predictor, then transform.
    AutoTransform {
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        predictor: PathBuf,
        /// Target mean opinion score in [1, 5].
        #[arg(long)]
        target_mos: f64,
        /// Defaults to the predictor's training metric, else l22.
        #[arg(long)]
        metric: Option<DistanceMetric>,
        /// Defaults to the predictor's training space, else srgb.
        #[arg(long)]
        space: Option<ColorSpace>,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Fit the exponential lower bound of lambda over opinion score from ratings.
    FitLb {
        ratings: PathBuf,
        #[arg(long)]
        image: Option<String>,
        #[arg(long)]
        metric: Option<DistanceMetric>,
        #[arg(long)]
        space: Option<ColorSpace>,
        /// Score the identical control must receive for a batch to count.
        #[arg(long, default_value_t = 5)]
        identical_score: u8,
        /// Score the black control must receive for a batch to count.
        #[arg(long, default_value_t = 1)]
        black_score: u8,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Train a k predictor from an `image,space,metric,<features>,k` CSV.
    Train {
        data: PathBuf,
        #[arg(long, default_value = "svr")]
        model_kind: RegressorKind,
        #[arg(long)]
        space: Option<ColorSpace>,
        #[arg(long)]
        metric: Option<DistanceMetric>,
        #[command(flatten)]
        hyper: HyperArgs,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Cross-validate a predictor family, or hold out one image.
    Evaluate {
        data: PathBuf,
        #[arg(long, default_value = "svr")]
        model_kind: RegressorKind,
        #[arg(long, default_value_t = 5, conflicts_with = "leave_out")]
        folds: usize,
        /// Image id to hold out instead of cross-validating.
        #[arg(long)]
        leave_out: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        space: Option<ColorSpace>,
        #[arg(long)]
        metric: Option<DistanceMetric>,
        #[command(flatten)]
        hyper: HyperArgs,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Serve one rating batch to a browser over a local HTTP API.
    ServeStudy {
        manifest: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// 0 picks a free port.
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value = "anonymous")]
        participant: String,
        /// Index of the batch to serve.
        #[arg(long, default_value_t = 0)]
        batch: usize,
        /// Seeds left/right placement; defaults to the manifest seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory with the harness UI, served at `/`.
        #[arg(long)]
        assets: Option<PathBuf>,
    },
    /// Write synthetic sample inputs (model, images, training data, manifest).
    SynthFixtures {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn write_json<T: Serialize>(value: &T, path: Option<&Path>) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoReport {
    pub features: FeatureVector,
    pub predictor_kind: RegressorKind,
    pub predicted_k: f64,
    pub k_clamped: bool,
    pub target_mos: f64,
    pub target_mos_norm: f64,
    pub lambda_lb: f64,
    pub transform: TransformReport,
}

pub fn auto_transform(
    img: &ImageBuffer,
    model: &PowerModel,
    predictor: &TrainedPredictor,
    target_mos: f64,
    metric: DistanceMetric,
    space: ColorSpace,
) -> anyhow::Result<(ImageBuffer, AutoReport)> {
    if !(1.0..=5.0).contains(&target_mos) {
        return Err(usage(format!("--target-mos must lie in [1, 5], got {target_mos}")));
    }
    let features = extract_features(img)?;
    let Prediction { k, clamped, .. } = predictor.predict_k(&features)?;
    let s = study::normalize_mos(target_mos);
    let lambda_lb = study::lambda_lower_bound(k, s)?;
    let result = apply(&TransformConfig::new(metric, space, lambda_lb)?, model, img)?;
    Ok((
        result.output,
        AutoReport {
            features,
            predictor_kind: predictor.kind,
            predicted_k: k,
            k_clamped: clamped,
            target_mos,
            target_mos_norm: s,
            lambda_lb,
            transform: result.report,
        },
    ))
}

#[derive(Debug, Serialize)]
struct FitLbReport<'a> {
    #[serde(flatten)]
    fit: &'a powerhue::LowerBoundFit,
    surviving_ratings: usize,
    kept_batches: usize,
    dropped_batches: usize,
    mos_entries: usize,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Calibrate { measurements, out } => {
            let samples = read_calibration_csv(&measurements)?;
            let model = fit_from_measurements(&samples)?;
            model.save(&out)?;
            eprintln!("wrote {} ({} samples)", out.display(), samples.len());
        }
        Command::Transform {
            input,
            model,
            metric,
            space,
            lambda_norm,
            out,
            report,
        } => {
            if !(0.0..=1.0).contains(&lambda_norm) {
                return Err(usage(format!("--lambda-norm must lie in [0, 1], got {lambda_norm}")));
            }
            let model = PowerModel::load(&model)?;
            let img = ImageBuffer::read_png(&input)?;
            let result = apply(&TransformConfig::new(metric, space, lambda_norm)?, &model, &img)?;
            result.output.write_png(&out)?;
            write_json(&result.report, report.as_deref())?;
        }
        Command::AutoTransform {
            input,
            model,
            predictor,
            target_mos,
            metric,
            space,
            out,
            report,
        } => {
            let model = PowerModel::load(&model)?;
            let predictor = TrainedPredictor::load(&predictor)?;
            let img = ImageBuffer::read_png(&input)?;
            let metric = metric.or(predictor.metric).unwrap_or(DistanceMetric::L22);
            let space = space.or(predictor.space).unwrap_or(ColorSpace::Srgb);
            let (output, rep) = auto_transform(&img, &model, &predictor, target_mos, metric, space)?;
            output.write_png(&out)?;
            write_json(&rep, report.as_deref())?;
        }
        Command::FitLb {
            ratings,
            image,
            metric,
            space,
            identical_score,
            black_score,
            out,
        } => {
            let records = study::read_ratings_csv(&ratings)?;
            let rule = ControlRule {
                identical_score,
                black_score,
            };
            let sel = Selection { image, metric, space };
            let res = study::fit_lower_bound(&records, rule, &sel)?;
            let report = FitLbReport {
                fit: &res.fit,
                surviving_ratings: res.filtered.records.len(),
                kept_batches: res.filtered.kept.len(),
                dropped_batches: res.filtered.dropped.len(),
                mos_entries: res.mos.len(),
            };
            write_json(&report, out.as_deref())?;
        }
        Command::Train {
            data,
            model_kind,
            space,
            metric,
            hyper,
            out,
        } => {
            let rows = predictor::select_rows(&predictor::read_training_csv(&data)?, space, metric);
            if rows.is_empty() {
                return Err(usage(format!("{}: no rows match the selection", data.display())));
            }
            let mut p = predictor::train(&rows, model_kind, &hyper.hyper())?;
            p.provenance = format!("trained on {} ({} rows)", data.display(), rows.len());
            p.save(&out)?;
            eprintln!("wrote {} ({model_kind}, {} rows)", out.display(), rows.len());
        }
        Command::Evaluate {
            data,
            model_kind,
            folds,
            leave_out,
            seed,
            space,
            metric,
            hyper,
            out,
        } => {
            let rows = predictor::select_rows(&predictor::read_training_csv(&data)?, space, metric);
            if rows.is_empty() {
                return Err(usage(format!("{}: no rows match the selection", data.display())));
            }
            let hyper = hyper.hyper();
            match leave_out {
                Some(id) => write_json(
                    &predictor::leave_one_image_out(&rows, &id, model_kind, &hyper)?,
                    out.as_deref(),
                )?,
                None => write_json(
                    &predictor::cross_validate(&rows, model_kind, &hyper, folds, seed)?,
                    out.as_deref(),
                )?,
            }
        }
        Command::ServeStudy {
            manifest,
            host,
            port,
            out,
            participant,
            batch,
            seed,
            assets,
        } => {
            let manifest = session::StudyManifest::load(&manifest)?;
            let model = PowerModel::load(&manifest.model)?;
            let seed = seed.unwrap_or(manifest.seed);
            let pairs = session::plan_batch(&manifest, batch, seed).map_err(|e| usage(e.to_string()))?;
            let state = Arc::new(server::AppState {
                session: Mutex::new(session::SessionState::new(participant, batch, seed, pairs, out)),
                renderer: server::Renderer::new(manifest, model),
            });
            let addr: SocketAddr = format!("{host}:{port}")
                .parse()
                .map_err(|e| usage(format!("bad listen address {host}:{port}: {e}")))?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(addr)
                    .await
                    .with_context(|| format!("binding {addr}"))?;
                eprintln!("listening on http://{}", listener.local_addr()?);
                axum::serve(listener, server::router(state, assets))
                    .with_graceful_shutdown(async {
                        tokio::signal::ctrl_c().await.ok();
                    })
                    .await?;
                anyhow::Ok(())
            })?;
        }
        Command::SynthFixtures { out_dir, seed } => {
            for name in fixtures::write_all(&out_dir, seed)? {
                eprintln!("wrote {}", out_dir.join(name).display());
            }
        }
    }
    Ok(())
}

/// Parses `args` and runs; returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
