//! The weakly-supervised loop end to end: shape-prior training, baseline
//! tracking, weak-label preparation, anatomy-aware tracking and the
//! ablation report.
//!
//! Dataset layout on disk:
//!
//! ```text
//! dataset.txt            vae_masks=, weak_cines=, eval_cines=
//! vae_masks/mask_000.pgm ...
//! weak/cine_000/         ED mask only
//! eval/cine_000/         full ground truth
//! ```

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::cine::CineSequence;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::estimator::{train_siamese, refine_anatomy_aware, Parameterization, PairSample, SiameseArch, SiameseNet};
use crate::io::{cine_files, encode_pgm, load_mask, parse_key_values, read_cine, write_dir_atomic};
use crate::losses::LossWeights;
use crate::mask::MaskImage;
use crate::metrics::{format_mean_std, median, wilcoxon_signed_rank};
use crate::shape_prior::{train_vae, VaeModel};
use crate::synth::{generate_mask_family, generate_phantom};
use crate::tracker::{
    evaluate_tracking, prepare_weak_labels, track_sequence, AnatomyGuide, MaskCorrector, MetricTable, MotionModel,
    TrackOptions, METRICS_CSV_HEADER,
};
use crate::cine::normalize;

const DATASET_MANIFEST: &str = "dataset.txt";

/// Row labels of the ablation grid, in report order.
pub const METHODS: [&str; 4] = ["Baseline", "Baseline+anat", "Baseline+recon", "AATracker"];

#[derive(Clone, Debug)]
pub struct Dataset {
    pub vae_masks: Vec<MaskImage>,
    /// Training cines carrying only their ED annotation.
    pub weak: Vec<CineSequence>,
    /// Held-out cines with full ground truth.
    pub eval: Vec<CineSequence>,
}

fn cine_id(n: usize) -> String {
    format!("cine_{n:03}")
}

/// Seeds of the three dataset parts never collide for seeds below 10^5.
fn part_seed(seed: u64, part: u64, index: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(part * 100_000 + index as u64)
}

/// Generates a dataset from the configured phantom suite.
pub fn synthesize_dataset(cfg: &RunConfig) -> Result<Dataset> {
    cfg.validate()?;
    let vae_masks = generate_mask_family(cfg.vae_masks.max(1), &cfg.mask_family(), part_seed(cfg.seed, 0, 0))?;
    let weak = (0..cfg.weak_cines)
        .into_par_iter()
        .map(|i| Ok(generate_phantom(&cfg.phantom(part_seed(cfg.seed, 1, i)))?.cine.weakly_labelled()))
        .collect::<Result<_>>()?;
    let eval = (0..cfg.eval_cines)
        .into_par_iter()
        .map(|i| Ok(generate_phantom(&cfg.phantom(part_seed(cfg.seed, 2, i)))?.cine))
        .collect::<Result<_>>()?;
    Ok(Dataset { vae_masks, weak, eval })
}

pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    let mut files = vec![(
        DATASET_MANIFEST.to_string(),
        format!(
            "vae_masks={}\nweak_cines={}\neval_cines={}\n",
            data.vae_masks.len(),
            data.weak.len(),
            data.eval.len()
        )
        .into_bytes(),
    )];
    for (i, m) in data.vae_masks.iter().enumerate() {
        files.push((format!("vae_masks/mask_{i:03}.pgm"), encode_pgm(m)));
    }
    for (part, cines) in [("weak", &data.weak), ("eval", &data.eval)] {
        for (i, c) in cines.iter().enumerate() {
            for (name, bytes) in cine_files(c) {
                files.push((format!("{part}/{}/{name}", cine_id(i)), bytes));
            }
        }
    }
    write_dir_atomic(dir, &files)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(DATASET_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let what = format!("dataset manifest {}", path.display());
    let kv = parse_key_values(&text, &what)?;
    let count = |k: &str| -> Result<usize> {
        kv.get(k)
            .ok_or_else(|| Error::malformed(what.clone(), format!("missing key `{k}`")))?
            .parse()
            .map_err(|_| Error::malformed(what.clone(), format!("`{k}` is not a count")))
    };
    let vae_masks = (0..count("vae_masks")?)
        .map(|i| load_mask(&dir.join(format!("vae_masks/mask_{i:03}.pgm"))))
        .collect::<Result<_>>()?;
    let weak = (0..count("weak_cines")?)
        .map(|i| Ok(read_cine(&dir.join("weak").join(cine_id(i)))?.weakly_labelled()))
        .collect::<Result<_>>()?;
    let eval: Vec<CineSequence> = (0..count("eval_cines")?)
        .map(|i| read_cine(&dir.join("eval").join(cine_id(i))))
        .collect::<Result<_>>()?;
    if eval.iter().any(|c| c.ground_truth.is_none()) {
        return Err(Error::malformed(what, "evaluation cines need ground truth"));
    }
    Ok(Dataset { vae_masks, weak, eval })
}

/// Per-cine results of one method.
#[derive(Clone, Debug)]
pub struct MethodResult {
    pub name: &'static str,
    pub tables: Vec<MetricTable>,
}

impl MethodResult {
    fn all(&self, f: impl Fn(&MetricTable) -> Vec<f64>) -> Vec<f64> {
        self.tables.iter().flat_map(f).collect()
    }

    pub fn end_hd(&self) -> Vec<f64> {
        self.tables
            .iter()
            .map(|t| t.end_frame().map_or(f64::NAN, |r| r.hd_mm))
            .collect()
    }

    pub fn median_end_hd(&self) -> f64 {
        median(&self.end_hd())
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = METRICS_CSV_HEADER.to_string();
        for (i, t) in self.tables.iter().enumerate() {
            s.push_str(&t.csv_rows(&cine_id(i)));
        }
        let [d, h, a] = [
            format_mean_std(&self.all(MetricTable::dsc)),
            format_mean_std(&self.all(MetricTable::hd)),
            format_mean_std(&self.all(MetricTable::assd)),
        ];
        s.push_str(&format!("mean(std),all,{d},{h},{a}\n"));
        s
    }
}

#[derive(Clone, Debug)]
pub struct PipelineReport {
    pub methods: Vec<MethodResult>,
}

impl PipelineReport {
    pub fn method(&self, name: &str) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.name == name)
    }

    /// Two-sided Wilcoxon p of per-cine end-frame HD against the baseline;
    /// `None` when there are too few non-zero differences.
    pub fn p_value(&self, name: &str) -> Option<f64> {
        let base = self.method(METHODS[0])?.end_hd();
        let other = self.method(name)?.end_hd();
        wilcoxon_signed_rank(&other, &base).ok()
    }

    /// Table of `mean(std)` over all non-ED frames of all evaluation cines.
    pub fn render(&self) -> String {
        let mut s = format!(
            "{:<16}{:<16}{:<16}{:<16}{:>14}{:>12}\n",
            "Method", "DSC", "HD (mm)", "ASSD (mm)", "end HD med", "p vs base"
        );
        for m in &self.methods {
            let p = if m.name == METHODS[0] {
                "-".to_string()
            } else {
                self.p_value(m.name).map_or_else(|| "n/a".to_string(), |p| format!("{p:.4}"))
            };
            s.push_str(&format!(
                "{:<16}{:<16}{:<16}{:<16}{:>14.3}{:>12}\n",
                m.name,
                format_mean_std(&m.all(MetricTable::dsc)),
                format_mean_std(&m.all(MetricTable::hd)),
                format_mean_std(&m.all(MetricTable::assd)),
                m.median_end_hd(),
                p
            ));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,dsc_mean,dsc_std,hd_mean,hd_std,assd_mean,assd_std,end_hd_median,p_end_hd\n");
        for m in &self.methods {
            let cells: Vec<String> = [m.all(MetricTable::dsc), m.all(MetricTable::hd), m.all(MetricTable::assd)]
                .iter()
                .map(|v| {
                    let (mu, sd) = crate::metrics::mean_std(v);
                    format!("{mu:.6},{sd:.6}")
                })
                .collect();
            let p = if m.name == METHODS[0] {
                String::new()
            } else {
                self.p_value(m.name).map_or_else(String::new, |p| format!("{p:.6}"))
            };
            s.push_str(&format!("{},{},{:.6},{p}\n", m.name, cells.join(","), m.median_end_hd()));
        }
        s
    }
}

/// Everything the pipeline produces, as `(relative path, bytes)`.
pub struct PipelineOutput {
    pub report: PipelineReport,
    pub files: Vec<(String, Vec<u8>)>,
}

fn ablation_weights(cfg: &RunConfig) -> [LossWeights; 3] {
    let full = cfg.aatracker_weights();
    [
        LossWeights {
            lambda_recon: 0.0,
            ..full
        },
        LossWeights {
            lambda_anat: 0.0,
            ..full
        },
        full,
    ]
}

fn evaluate_model(
    cines: &[CineSequence],
    model: &MotionModel,
    labels: Option<(&[Vec<MaskImage>], &dyn crate::estimator::ShapePrior)>,
    compensate: bool,
) -> Result<Vec<(Vec<MaskImage>, MetricTable)>> {
    cines
        .par_iter()
        .enumerate()
        .map(|(i, cine)| {
            let anatomy = labels.map(|(l, prior)| AnatomyGuide { labels: &l[i], prior });
            let r = track_sequence(cine, model, &TrackOptions { compensate, anatomy })?;
            let gt = cine
                .ground_truth
                .as_ref()
                .ok_or_else(|| Error::invalid("evaluation cines need ground truth"))?;
            let table = evaluate_tracking(&r, &gt.masks, cine.pixel_spacing)?;
            Ok((r.tracked_masks, table))
        })
        .collect()
}

fn tables(results: Vec<(Vec<MaskImage>, MetricTable)>) -> (Vec<Vec<MaskImage>>, Vec<MetricTable>) {
    results.into_iter().unzip()
}

/// Normalized consecutive-frame pairs of every cine, with the matching
/// labels when given.
pub fn consecutive_pairs(cines: &[CineSequence], labels: Option<&[Vec<MaskImage>]>) -> Vec<PairSample> {
    let mut out = Vec::new();
    for (c, cine) in cines.iter().enumerate() {
        let frames: Vec<_> = cine.frames.iter().map(normalize).collect();
        for k in 1..frames.len() {
            out.push(PairSample {
                i1: frames[k - 1].clone(),
                i2: frames[k].clone(),
                masks: labels.map(|l| (l[c][k - 1].clone(), l[c][k].clone())),
            });
        }
    }
    out
}

/// Runs every stage on `data`. Stage failures are labelled.
pub fn run_pipeline(data: &Dataset, cfg: &RunConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    if data.eval.is_empty() {
        return Err(Error::InsufficientData("the pipeline needs evaluation cines".into()));
    }
    let mut files = vec![("config.resolved".to_string(), cfg.resolved().into_bytes())];

    let (vae, vae_report) =
        train_vae(&data.vae_masks, cfg.vae_arch(), &cfg.vae_train_config()).map_err(|e| e.in_stage("train-vae"))?;
    files.push(("vae.ckpt".into(), vae.to_checkpoint().encode()));
    files.push(("vae_train.csv".into(), vae_report.to_csv().into_bytes()));

    let base_cfg = cfg.estimator(cfg.baseline_weights());
    let mut methods = Vec::with_capacity(4);
    match cfg.parameterization {
        Parameterization::DirectField => {
            // per-pair solver: weak labels come from each evaluation cine's
            // own ED annotation, then the same cines are re-tracked
            let baseline = MotionModel::Direct {
                config: base_cfg,
                options: cfg.direct_options(),
            };
            let (tracked, base_tables) = tables(
                evaluate_model(&data.eval, &baseline, None, cfg.compensate).map_err(|e| e.in_stage("baseline"))?,
            );
            methods.push(MethodResult {
                name: METHODS[0],
                tables: base_tables,
            });
            let labels: Vec<Vec<MaskImage>> = tracked
                .par_iter()
                .map(|masks| masks.iter().map(|m| MaskCorrector::correct(&vae, m)).collect())
                .collect::<Result<_>>()
                .map_err(|e| e.in_stage("weak-labels"))?;
            for (name, weights) in METHODS[1..].iter().zip(ablation_weights(cfg)) {
                let model = MotionModel::Direct {
                    config: cfg.estimator(weights),
                    options: cfg.direct_options(),
                };
                let (_, t) = tables(
                    evaluate_model(&data.eval, &model, Some((&labels, &vae)), cfg.compensate)
                        .map_err(|e| e.in_stage("anatomy-aware"))?,
                );
                methods.push(MethodResult { name, tables: t });
            }
        }
        Parameterization::SiameseNet => {
            if data.weak.is_empty() {
                return Err(Error::InsufficientData("network training needs weak cines".into()).in_stage("train-baseline"));
            }
            let net_cfg = |w: LossWeights| crate::estimator::EstimatorConfig {
                learning_rate: cfg.net_learning_rate,
                ..cfg.estimator(w)
            };
            let pairs = consecutive_pairs(&data.weak, None);
            let (net, rep) = train_siamese(&pairs, SiameseArch::default(), &net_cfg(cfg.baseline_weights()), cfg.net_steps, cfg.net_batch)
                .map_err(|e| e.in_stage("train-baseline"))?;
            files.push(("baseline.ckpt".into(), net.to_checkpoint().encode()));
            files.push(("baseline_train.csv".into(), rep.to_csv().into_bytes()));
            let baseline = MotionModel::Siamese(net.clone());
            let labels = prepare_weak_labels(&data.weak, &baseline, &vae, cfg.compensate)
                .map_err(|e| e.in_stage("weak-labels"))?;
            let refine_pairs = consecutive_pairs(&data.weak, Some(&labels));
            let mut nets: Vec<(&'static str, SiameseNet)> = vec![(METHODS[0], net.clone())];
            for ((name, weights), file) in METHODS[1..]
                .iter()
                .zip(ablation_weights(cfg))
                .zip(["baseline_anat", "baseline_recon", "aatracker"])
            {
                let (refined, rep) = refine_anatomy_aware(&net, &refine_pairs, &vae, &net_cfg(weights), cfg.refine_steps, cfg.net_batch)
                    .map_err(|e| e.in_stage("refine"))?;
                files.push((format!("{file}.ckpt"), refined.to_checkpoint().encode()));
                files.push((format!("{file}_train.csv"), rep.to_csv().into_bytes()));
                nets.push((name, refined));
            }
            for (name, n) in nets {
                let (_, t) = tables(
                    evaluate_model(&data.eval, &MotionModel::Siamese(n), None, cfg.compensate)
                        .map_err(|e| e.in_stage("evaluate"))?,
                );
                methods.push(MethodResult { name, tables: t });
            }
        }
    }
    let report = PipelineReport { methods };
    for m in &report.methods {
        let slug = m.name.to_lowercase().replace('+', "_");
        files.push((format!("metrics_{slug}.csv"), m.metrics_csv().into_bytes()));
    }
    files.push(("report.txt".into(), report.render().into_bytes()));
    files.push(("report.csv".into(), report.to_csv().into_bytes()));
    Ok(PipelineOutput { report, files })
}

/// Loads the shape prior from a checkpoint written by the pipeline.
pub fn load_vae(path: &Path) -> Result<VaeModel> {
    VaeModel::from_checkpoint(&crate::io::Checkpoint::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        RunConfig::from_sources(
            Some(
                "height=32\nwidth=32\nframes=3\nvae_masks=6\nvae_epochs=1\nvae_batch=3\n\
                 weak_cines=1\neval_cines=2\niters_per_level=5\nlevels=1\ncontraction_amplitude=0.2\n\
                 net_steps=2\nrefine_steps=2\nnet_batch=2\n",
            ),
            &[],
        )
        .unwrap()
    }

    #[test]
    fn dataset_round_trip() {
        let cfg = tiny();
        let data = synthesize_dataset(&cfg).unwrap();
        assert!(data.weak.iter().all(|c| c.ground_truth.is_none()));
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("ds");
        write_dataset(&dir, &data).unwrap();
        let back = read_dataset(&dir).unwrap();
        assert_eq!(back.vae_masks, data.vae_masks);
        assert_eq!(back.eval.len(), 2);
        assert!(back.weak[0].ground_truth.is_none());
        assert!(write_dataset(&dir, &data).is_err());
    }

    #[test]
    fn report_rows_and_files() {
        let cfg = tiny();
        let data = synthesize_dataset(&cfg).unwrap();
        let out = run_pipeline(&data, &cfg).unwrap();
        let names: Vec<_> = out.report.methods.iter().map(|m| m.name).collect();
        assert_eq!(names, METHODS);
        let text = out.report.render();
        for m in METHODS {
            assert!(text.contains(m));
        }
        assert!(out.files.iter().any(|(n, _)| n == "vae.ckpt"));
        assert!(out.files.iter().any(|(n, _)| n == "config.resolved"));
        let again = run_pipeline(&data, &cfg).unwrap();
        assert_eq!(out.files, again.files);
    }

    #[test]
    fn siamese_pipeline_runs() {
        let mut cfg = tiny();
        cfg.parameterization = Parameterization::SiameseNet;
        let data = synthesize_dataset(&cfg).unwrap();
        let out = run_pipeline(&data, &cfg).unwrap();
        assert_eq!(out.report.methods.len(), 4);
        assert!(out.files.iter().any(|(n, _)| n == "aatracker.ckpt"));
    }

    #[test]
    fn stage_labels() {
        let mut cfg = tiny();
        cfg.parameterization = Parameterization::SiameseNet;
        let mut data = synthesize_dataset(&cfg).unwrap();
        data.weak.clear();
        let err = run_pipeline(&data, &cfg).err().unwrap();
        assert!(err.to_string().starts_with("train-baseline:"));
        assert!(matches!(err.root(), Error::InsufficientData(_)));
    }
}
