//! Command-line front end.
//!
//! Exit codes: 0 success, 2 bad arguments or config, 3 malformed or
//! missing data, 4 numerical divergence.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use aatracker::cine::{normalize, CineSequence};
use aatracker::config::RunConfig;
use aatracker::estimator::{
    estimate_direct, refine_anatomy_aware, train_siamese, Anatomy, Parameterization, SiameseArch,
    SiameseNet,
};
use aatracker::io::{
    encode_pgm, encode_tensor, load_mask, load_tensor, read_cine, save_mask, write_dir_atomic, Checkpoint,
};
use aatracker::metrics::{format_mean_std, MetricReport};
use aatracker::pipeline::{consecutive_pairs, read_dataset, run_pipeline, synthesize_dataset, write_dataset};
use aatracker::shape_prior::{train_vae, VaeModel};
use aatracker::synth::generate_phantom;
use aatracker::tracker::{
    evaluate_tracking, prepare_weak_labels, track_sequence, AnatomyGuide, MaskCorrector, MotionModel, TrackOptions,
    TrackingResult, METRICS_CSV_HEADER,
};
use aatracker::{Error, MaskImage, Result};

#[derive(Parser)]
#[command(name = "aatracker", version, about = "Anatomy-aware myocardium tracking on cine sequences")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (key=value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 is the determinism reference.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate phantom cines, or a whole pipeline dataset with --dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        amplitude: Option<f64>,
        #[arg(long)]
        drift: Option<f64>,
        /// `standard` or `distractor_heavy`.
        #[arg(long)]
        suite: Option<String>,
        #[arg(long)]
        dataset: bool,
    },
    /// Estimate the flows between two AAT1 images.
    Register {
        #[arg(long)]
        i1: PathBuf,
        #[arg(long)]
        i2: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Masks and shape prior for the anatomy-aware objective.
        #[arg(long, requires_all = ["mask2", "vae"])]
        mask1: Option<PathBuf>,
        #[arg(long)]
        mask2: Option<PathBuf>,
        #[arg(long)]
        vae: Option<PathBuf>,
    },
    /// Track the ED mask through a cine.
    Track {
        #[arg(long)]
        cine: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Network checkpoint; the direct solver is used without one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        compensate: bool,
        /// Shape-prior checkpoint: re-track with VAE-corrected weak labels.
        #[arg(long)]
        anatomy: Option<PathBuf>,
    },
    /// Train the shape prior on a directory of PGM masks.
    TrainVae {
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Project one mask onto the shape prior.
    CorrectMask {
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the Siamese network on consecutive frames of cines.
    TrainBaseline {
        #[arg(long)]
        cines: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a network with VAE-corrected weak labels.
    Refine {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        cines: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score tracked masks against ground truth; pairs --cine with --tracked.
    Evaluate {
        #[arg(long, required = true)]
        cine: Vec<PathBuf>,
        #[arg(long, required = true)]
        tracked: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full weakly-supervised run with the ablation report.
    Pipeline {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::InvalidArgument(_) => 2,
        Error::Divergence(_) | Error::NonFinite { .. } => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(common: &Common, extra: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let text = match &common.config {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| Error::InvalidArgument(format!("{}: {e}", p.display())))?),
        None => None,
    };
    let mut overrides = Vec::new();
    for s in &common.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("--set expects KEY=VALUE, got `{s}`")))?;
        overrides.push((k.to_string(), v.to_string()));
    }
    if let Some(seed) = common.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    for (k, v) in extra {
        if let Some(v) = v {
            overrides.push((k.to_string(), v.clone()));
        }
    }
    RunConfig::from_sources(text.as_deref(), &overrides)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.common.jobs {
        if jobs == 0 {
            return Err(Error::InvalidArgument("--jobs must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }
    let common = &cli.common;
    match cli.command {
        Command::Synth {
            out,
            count,
            frames,
            amplitude,
            drift,
            suite,
            dataset,
        } => {
            let cfg = load_config(
                common,
                &[
                    ("frames", frames.map(|v| v.to_string())),
                    ("contraction_amplitude", amplitude.map(|v| v.to_string())),
                    ("drift", drift.map(|v| v.to_string())),
                    ("suite", suite),
                    ("out", Some(out.display().to_string())),
                ],
            )?;
            if dataset {
                return write_dataset(&out, &synthesize_dataset(&cfg)?);
            }
            if count == 0 {
                return Err(Error::InvalidArgument("--count must be >= 1".into()));
            }
            let mut files = vec![("config.resolved".to_string(), cfg.resolved().into_bytes())];
            for i in 0..count {
                let p = generate_phantom(&cfg.phantom(cfg.seed + i as u64))?;
                for (name, bytes) in aatracker::io::cine_files(&p.cine) {
                    files.push((format!("cine_{i:03}/{name}"), bytes));
                }
            }
            write_dir_atomic(&out, &files)
        }
        Command::Register {
            i1,
            i2,
            out,
            mask1,
            mask2,
            vae,
        } => {
            let cfg = load_config(common, &[])?;
            let a = normalize(&load_tensor(&i1)?);
            let b = normalize(&load_tensor(&i2)?);
            let (masks, prior) = match (mask1, mask2, vae) {
                (Some(m1), Some(m2), Some(v)) => (Some((load_mask(&m1)?, load_mask(&m2)?)), Some(load_vae(&v)?)),
                _ => (None, None),
            };
            let anatomy = match (&masks, &prior) {
                (Some((m1, m2)), Some(p)) => Some(Anatomy { m1, m2, prior: p }),
                _ => None,
            };
            let weights = if anatomy.is_some() {
                cfg.aatracker_weights()
            } else {
                cfg.baseline_weights()
            };
            let pair = estimate_direct(&a, &b, &cfg.estimator(weights), anatomy.as_ref(), &cfg.direct_options())?;
            let mut curve = String::from("iteration,total,consistency,smoothness,anatomy,reconstruction\n");
            for (i, t) in pair.history.iter().enumerate() {
                curve.push_str(&format!(
                    "{i},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}\n",
                    t.total, t.consistency, t.smoothness, t.anatomy, t.reconstruction
                ));
            }
            write_dir_atomic(
                &out,
                &[
                    ("config.resolved".into(), cfg.resolved().into_bytes()),
                    ("f12.aat".into(), encode_tensor(pair.f12.as_tensor())),
                    ("f21.aat".into(), encode_tensor(pair.f21.as_tensor())),
                    ("loss.csv".into(), curve.into_bytes()),
                ],
            )
        }
        Command::Track {
            cine,
            out,
            checkpoint,
            compensate,
            anatomy,
        } => {
            let cfg = load_config(common, &[])?;
            let cine = read_cine(&cine)?;
            let baseline = match &checkpoint {
                Some(p) => MotionModel::Siamese(SiameseNet::from_checkpoint(&Checkpoint::load(p)?)?),
                None => MotionModel::Direct {
                    config: cfg.estimator(cfg.baseline_weights()),
                    options: cfg.direct_options(),
                },
            };
            let result = match &anatomy {
                None => track_sequence(&cine, &baseline, &TrackOptions { compensate, anatomy: None })?,
                Some(v) => {
                    if checkpoint.is_some() {
                        return Err(Error::InvalidArgument(
                            "--anatomy drives the direct solver; pass a refined checkpoint instead".into(),
                        ));
                    }
                    let vae = load_vae(v)?;
                    let labels = prepare_weak_labels(std::slice::from_ref(&cine), &baseline, &vae, compensate)?.remove(0);
                    let model = MotionModel::Direct {
                        config: cfg.estimator(cfg.aatracker_weights()),
                        options: cfg.direct_options(),
                    };
                    track_sequence(
                        &cine,
                        &model,
                        &TrackOptions {
                            compensate,
                            anatomy: Some(AnatomyGuide {
                                labels: &labels,
                                prior: &vae,
                            }),
                        },
                    )?
                }
            };
            write_dir_atomic(&out, &tracking_files(&cfg, &cine, &result)?)
        }
        Command::TrainVae { masks, out } => {
            let cfg = load_config(common, &[])?;
            let data = load_mask_dir(&masks)?;
            let (vae, report) = train_vae(&data, cfg.vae_arch(), &cfg.vae_train_config())?;
            write_dir_atomic(
                &out,
                &[
                    ("config.resolved".into(), cfg.resolved().into_bytes()),
                    ("vae.ckpt".into(), vae.to_checkpoint().encode()),
                    ("vae_train.csv".into(), report.to_csv().into_bytes()),
                ],
            )
        }
        Command::CorrectMask { vae, mask, out } => {
            let vae = load_vae(&vae)?;
            let m = load_mask(&mask)?;
            save_mask(&out, &MaskCorrector::correct(&vae, &m)?)
        }
        Command::TrainBaseline { cines, out } => {
            let cfg = load_config(common, &[])?;
            let cines = load_cine_dir(&cines)?;
            let pairs = consecutive_pairs(&cines, None);
            let est = aatracker::estimator::EstimatorConfig {
                learning_rate: cfg.net_learning_rate,
                parameterization: Parameterization::SiameseNet,
                ..cfg.estimator(cfg.baseline_weights())
            };
            let (net, report) = train_siamese(&pairs, SiameseArch::default(), &est, cfg.net_steps, cfg.net_batch)?;
            write_dir_atomic(
                &out,
                &[
                    ("config.resolved".into(), cfg.resolved().into_bytes()),
                    ("baseline.ckpt".into(), net.to_checkpoint().encode()),
                    ("baseline_train.csv".into(), report.to_csv().into_bytes()),
                ],
            )
        }
        Command::Refine {
            checkpoint,
            vae,
            cines,
            out,
        } => {
            let cfg = load_config(common, &[])?;
            let net = SiameseNet::from_checkpoint(&Checkpoint::load(&checkpoint)?)?;
            let vae = load_vae(&vae)?;
            let cines: Vec<CineSequence> = load_cine_dir(&cines)?.iter().map(CineSequence::weakly_labelled).collect();
            let labels = prepare_weak_labels(&cines, &MotionModel::Siamese(net.clone()), &vae, cfg.compensate)?;
            let pairs = consecutive_pairs(&cines, Some(&labels));
            let est = aatracker::estimator::EstimatorConfig {
                learning_rate: cfg.net_learning_rate,
                parameterization: Parameterization::SiameseNet,
                ..cfg.estimator(cfg.aatracker_weights())
            };
            let (refined, report) = refine_anatomy_aware(&net, &pairs, &vae, &est, cfg.refine_steps, cfg.net_batch)?;
            write_dir_atomic(
                &out,
                &[
                    ("config.resolved".into(), cfg.resolved().into_bytes()),
                    ("aatracker.ckpt".into(), refined.to_checkpoint().encode()),
                    ("refine_train.csv".into(), report.to_csv().into_bytes()),
                ],
            )
        }
        Command::Evaluate { cine, tracked, out } => {
            if cine.len() != tracked.len() {
                return Err(Error::InvalidArgument("give one --tracked directory per --cine".into()));
            }
            let mut csv = METRICS_CSV_HEADER.to_string();
            let (mut d, mut h, mut a) = (Vec::new(), Vec::new(), Vec::new());
            for (c, t) in cine.iter().zip(&tracked) {
                let seq = read_cine(c)?;
                let gt = seq
                    .ground_truth
                    .as_ref()
                    .ok_or_else(|| Error::Malformed {
                        what: format!("cine {}", c.display()),
                        detail: "no ground truth to evaluate against".into(),
                    })?;
                let id = c.file_name().map_or_else(|| c.display().to_string(), |n| n.to_string_lossy().into_owned());
                for n in 1..seq.len() {
                    let m = load_mask(&t.join(format!("tracked_{n:03}.pgm")))?;
                    let r = MetricReport::compute(&m, &gt.masks[n], seq.pixel_spacing)?;
                    csv.push_str(&format!("{id},{n},{:.6},{:.6},{:.6}\n", r.dsc, r.hd_mm, r.assd_mm));
                    d.push(r.dsc);
                    h.push(r.hd_mm);
                    a.push(r.assd_mm);
                }
            }
            csv.push_str(&format!(
                "mean(std),all,{},{},{}\n",
                format_mean_std(&d),
                format_mean_std(&h),
                format_mean_std(&a)
            ));
            aatracker::io::write_atomic(&out, csv.as_bytes())
        }
        Command::Pipeline { dataset, out } => {
            let cfg = load_config(common, &[("out", Some(out.display().to_string()))])?;
            if out.exists() {
                return Err(Error::InvalidArgument(format!("output `{}` already exists", out.display())));
            }
            let data = read_dataset(&dataset)?;
            let result = run_pipeline(&data, &cfg)?;
            write_dir_atomic(&out, &result.files)?;
            print!("{}", result.report.render());
            Ok(())
        }
    }
}

fn load_vae(path: &Path) -> Result<VaeModel> {
    VaeModel::from_checkpoint(&Checkpoint::load(path)?)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

fn load_mask_dir(dir: &Path) -> Result<Vec<MaskImage>> {
    let masks: Vec<MaskImage> = sorted_entries(dir)?
        .iter()
        .filter(|p| p.extension().is_some_and(|e| e == "pgm"))
        .map(|p| load_mask(p))
        .collect::<Result<_>>()?;
    if masks.is_empty() {
        return Err(Error::InsufficientData(format!("no .pgm masks in {}", dir.display())));
    }
    Ok(masks)
}

/// Every subdirectory holding a cine manifest.
fn load_cine_dir(dir: &Path) -> Result<Vec<CineSequence>> {
    let cines: Vec<CineSequence> = sorted_entries(dir)?
        .iter()
        .filter(|p| p.join(aatracker::io::MANIFEST).is_file())
        .map(|p| read_cine(p))
        .collect::<Result<_>>()?;
    if cines.is_empty() {
        return Err(Error::InsufficientData(format!("no cine directories in {}", dir.display())));
    }
    Ok(cines)
}

fn tracking_files(cfg: &RunConfig, cine: &CineSequence, r: &TrackingResult) -> Result<Vec<(String, Vec<u8>)>> {
    let mut files = vec![("config.resolved".to_string(), cfg.resolved().into_bytes())];
    for (i, f) in r.composite.iter().enumerate() {
        files.push((format!("composite_{:03}.aat", i + 1), encode_tensor(f.as_tensor())));
    }
    if let Some(comp) = &r.compensated {
        for (i, f) in comp.iter().enumerate() {
            files.push((format!("compensated_{:03}.aat", i + 1), encode_tensor(f.as_tensor())));
        }
    }
    for (i, m) in r.tracked_masks.iter().enumerate() {
        files.push((format!("tracked_{i:03}.pgm"), encode_pgm(m)));
    }
    if let Some(gt) = &cine.ground_truth {
        let table = evaluate_tracking(r, &gt.masks, cine.pixel_spacing)?;
        let mut csv = METRICS_CSV_HEADER.to_string();
        csv.push_str(&table.csv_rows("cine"));
        let [d, h, a] = table.summary();
        csv.push_str(&format!("mean(std),all,{d},{h},{a}\n"));
        files.push(("metrics.csv".into(), csv.into_bytes()));
    }
    Ok(files)
}
