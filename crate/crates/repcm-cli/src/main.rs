//! Operator CLI for the bi-ventricular motion completion pipeline:
//! synthetic data generation, Stage-I partitioning, Stage-II training,
//! single-frame completion, evaluation and plot emission.
//!
//! Every command writes its fully-resolved configuration next to its
//! outputs as `run_config.json`; re-running a deterministic command from
//! that file reproduces the outputs bit-for-bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use repcm_core::io::{self, GateRecord, SubjectGates};
use repcm_core::mesh::{Chamber, MeshSequence, Phenotype};
use repcm_core::metrics::{self, EvaluationReport};
use repcm_core::model::layers::MaskMode;
use repcm_core::model::{ModelConfig, RepcmModel};
use repcm_core::partition::{
    extract_motion_descriptors, partition_cohort, DescriptorBackend, DescriptorSource,
};
use repcm_core::plot::{heatmap_svg, line_chart_svg, Series};
use repcm_core::synthdata::{default_programs, generate_cohort, GeneratorConfig};
use repcm_core::training::{self, fit, DescriptorAeConfig, TrainConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct PartitionSettings {
    regions: usize,
    descriptor_dim: usize,
    backend: DescriptorBackend,
}

impl Default for PartitionSettings {
    fn default() -> Self {
        PartitionSettings {
            regions: 16,
            descriptor_dim: 16,
            backend: DescriptorBackend::Pca,
        }
    }
}

/// One file configures the whole pipeline; CLI flags override fields.
/// Unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    seed: u64,
    generator: GeneratorConfig,
    partition: PartitionSettings,
    model: ModelConfig,
    train: TrainConfig,
    descriptor_ae: DescriptorAeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            generator: GeneratorConfig::default(),
            partition: PartitionSettings::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            descriptor_ae: DescriptorAeConfig::default(),
        }
    }
}

fn load_run_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let bytes = fs::read(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_slice(&bytes).with_context(|| format!("parsing config {}", p.display()))
        }
        None => Ok(RunConfig::default()),
    }
}

#[derive(Parser)]
#[command(
    name = "repcm",
    about = "Region-aware, phenotype-adaptive bi-ventricular motion completion pipeline",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MaskModeArg {
    Additive,
    Literal,
}

impl From<MaskModeArg> for MaskMode {
    fn from(m: MaskModeArg) -> MaskMode {
        match m {
            MaskModeArg::Additive => MaskMode::Additive,
            MaskModeArg::Literal => MaskMode::LiteralHadamard,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BackendArg {
    Pca,
    Learned,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum NoiseArg {
    Zero,
    Sample,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Test,
    Val,
    Train,
    All,
}

#[derive(Args)]
struct CommonArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for every stochastic draw of this command.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic bi-ventricular cohort (container format).
    GenerateData {
        #[command(flatten)]
        common: CommonArgs,
        /// Subjects per phenotype program.
        #[arg(long)]
        subjects: Option<usize>,
        /// Icosphere subdivision level per lobe.
        #[arg(long)]
        resolution: Option<usize>,
        /// Planted motion groups (even).
        #[arg(long)]
        planted_groups: Option<usize>,
    },
    /// Stage I: descriptors, k-means regions and the adjacency prior.
    Partition {
        #[command(flatten)]
        common: CommonArgs,
        /// Cohort directory (from generate-data).
        #[arg(long)]
        data: PathBuf,
        /// Number of functional regions R.
        #[arg(long)]
        regions: Option<usize>,
        /// Descriptor backend.
        #[arg(long, value_enum)]
        backend: Option<BackendArg>,
        /// Descriptor dimensionality d.
        #[arg(long)]
        descriptor_dim: Option<usize>,
    },
    /// Stage II: train the completion model.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
        /// partition.json produced by `partition`.
        #[arg(long)]
        partition: PathBuf,
        /// Mixture-of-experts expert count E.
        #[arg(long)]
        experts: Option<usize>,
        /// Adjacency mask mode.
        #[arg(long, value_enum)]
        mask_mode: Option<MaskModeArg>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        anchors: Option<usize>,
        #[arg(long)]
        channels: Option<usize>,
        /// Encoder and decoder layer count.
        #[arg(long)]
        layers: Option<usize>,
    },
    /// Complete full sequences from ED frames with a trained checkpoint.
    Complete {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory (from `train`).
        #[arg(long)]
        checkpoint: PathBuf,
        /// partition.json; must hash-match the checkpoint.
        #[arg(long)]
        partition: PathBuf,
        /// zero = deterministic prior mean; sample = draw prior noise.
        #[arg(long, value_enum, default_value = "zero")]
        noise: NoiseArg,
        /// Which subjects to complete.
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Compare predictions against ground truth: report.json / report.csv.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
        /// Predictions directory (from `complete`).
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Emit SVG plots from an evaluation report.
    Plot {
        #[command(flatten)]
        common: CommonArgs,
        /// Directory holding report.json (from `evaluate`).
        #[arg(long)]
        report: PathBuf,
    },
}

fn main() {
    repcm_core::init_workers();
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    };
    std::process::exit(code);
}

fn write_resolved_config(out: &Path, config: &RunConfig) -> Result<()> {
    io::write_json(&out.join("run_config.json"), config)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData {
            common,
            subjects,
            resolution,
            planted_groups,
        } => {
            let mut cfg = load_run_config(common.config.as_ref())?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            cfg.generator.seed = cfg.seed;
            if let Some(v) = subjects {
                cfg.generator.subjects_per_phenotype = v;
            }
            if let Some(v) = resolution {
                cfg.generator.resolution = v;
            }
            if let Some(v) = planted_groups {
                cfg.generator.planted_groups = v;
            }
            fs::create_dir_all(&common.out)?;
            let programs = default_programs(cfg.generator.planted_groups);
            let cohort = generate_cohort(&cfg.generator, &programs)?;
            io::write_cohort(&common.out, &cohort.topology, &cohort.sequences)?;
            io::write_json(&common.out.join("programs.json"), &cohort.programs)?;
            // planted ground truth for partition-recovery experiments
            let planted = io::PartitionFile::from_partition(&cohort.planted, cfg.seed, "PLANTED");
            io::save_partition(&common.out.join("planted_partition.json"), &planted)?;
            write_resolved_config(&common.out, &cfg)?;
            println!(
                "generated {} subjects ({} phenotypes x {}), N={}, T={} -> {}",
                cohort.sequences.len(),
                cohort.programs.len(),
                cfg.generator.subjects_per_phenotype,
                cohort.topology.vertex_count(),
                cfg.generator.frames,
                common.out.display()
            );
            Ok(())
        }
        Command::Partition {
            common,
            data,
            regions,
            backend,
            descriptor_dim,
        } => {
            let mut cfg = load_run_config(common.config.as_ref())?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            if let Some(r) = regions {
                cfg.partition.regions = r;
            }
            if let Some(b) = backend {
                cfg.partition.backend = match b {
                    BackendArg::Pca => DescriptorBackend::Pca,
                    BackendArg::Learned => DescriptorBackend::Learned,
                };
            }
            if let Some(d) = descriptor_dim {
                cfg.partition.descriptor_dim = d;
            }
            fs::create_dir_all(&common.out)?;
            let (topology, sequences) = io::load_cohort(&data)?;
            let d = cfg.partition.descriptor_dim;
            let field = match cfg.partition.backend {
                DescriptorBackend::Pca => extract_motion_descriptors(&sequences, DescriptorSource::Pca, d)?,
                DescriptorBackend::Learned => {
                    let mut ae_cfg = cfg.descriptor_ae.clone();
                    ae_cfg.seed = cfg.seed;
                    let encoder = training::fit_descriptor_autoencoder(&sequences, d, &ae_cfg)?;
                    extract_motion_descriptors(&sequences, DescriptorSource::Learned(&encoder), d)?
                }
            };
            let partition = partition_cohort(&field, &topology, cfg.partition.regions, cfg.seed)?;
            let file = io::PartitionFile::from_partition(&partition, cfg.seed, field.backend.as_str());
            io::save_partition(&common.out.join("partition.json"), &file)?;
            write_resolved_config(&common.out, &cfg)?;
            println!(
                "partitioned N={} into R={} regions ({} backend) -> {}",
                topology.vertex_count(),
                cfg.partition.regions,
                field.backend.as_str(),
                common.out.join("partition.json").display()
            );
            Ok(())
        }
        Command::Train {
            common,
            data,
            partition,
            experts,
            mask_mode,
            epochs,
            batch_size,
            anchors,
            channels,
            layers,
        } => {
            let mut cfg = load_run_config(common.config.as_ref())?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            cfg.train.seed = cfg.seed;
            if let Some(v) = experts {
                cfg.model.experts = v;
            }
            if let Some(m) = mask_mode {
                cfg.model.mask_mode = m.into();
            }
            if let Some(v) = epochs {
                cfg.train.max_epochs = v;
            }
            if let Some(v) = batch_size {
                cfg.train.batch_size = v;
            }
            if let Some(v) = anchors {
                cfg.model.anchors = v;
            }
            if let Some(v) = channels {
                cfg.model.channels = v;
            }
            if let Some(v) = layers {
                cfg.model.encoder_layers = v;
                cfg.model.decoder_layers = v;
            }
            fs::create_dir_all(&common.out)?;
            let (_, sequences) = io::load_cohort(&data)?;
            let (region_partition, _) = io::load_partition(&partition)?;
            let partition_hash = io::sha256_file(&partition)?;
            // the partition defines R and the manifest defines T
            cfg.model.regions = region_partition.region_count;
            cfg.model.frames = sequences
                .first()
                .map(|s| s.num_frames())
                .ok_or_else(|| anyhow!("cohort {} is empty", data.display()))?;

            let model = RepcmModel::new(cfg.model.clone(), cfg.seed)?;
            let result = fit(model, &sequences, &region_partition, &cfg.train)?;
            result.model.save_checkpoint(&common.out, &partition_hash)?;
            io::write_json(&common.out.join("split.json"), &result.split)?;
            let mut epoch_log = String::new();
            for e in &result.epochs {
                epoch_log.push_str(&serde_json::to_string(e)?);
                epoch_log.push('\n');
            }
            io::write_text(&common.out.join("train.log.jsonl"), &epoch_log)?;
            let mut step_log = String::new();
            for s in &result.steps {
                step_log.push_str(&serde_json::to_string(s)?);
                step_log.push('\n');
            }
            io::write_text(&common.out.join("steps.log.jsonl"), &step_log)?;
            write_resolved_config(&common.out, &cfg)?;
            println!(
                "trained {} epochs (best epoch {}, val {:.6}) -> {}",
                result.epochs.len(),
                result.best_epoch,
                result.best_val,
                common.out.display()
            );
            Ok(())
        }
        Command::Complete {
            common,
            data,
            checkpoint,
            partition,
            noise,
            split,
        } => {
            let mut cfg = load_run_config(common.config.as_ref())?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            fs::create_dir_all(&common.out)?;
            let (topology, sequences) = io::load_cohort(&data)?;
            let (region_partition, _) = io::load_partition(&partition)?;
            let (model, meta) = RepcmModel::load_checkpoint(&checkpoint)?;
            let partition_hash = io::sha256_file(&partition)?;
            if meta.partition_sha256 != partition_hash {
                bail!(
                    "partition hash mismatch: checkpoint was trained against {}, got {} — refusing to complete",
                    meta.partition_sha256,
                    partition_hash
                );
            }
            let selected = select_subjects(&sequences, &checkpoint, split)?;
            if selected.is_empty() {
                bail!("no subjects selected for split {:?}", split);
            }
            let mut gates = GateRecord::default();
            let mut predicted = Vec::new();
            for seq in &selected {
                let eps = match noise {
                    NoiseArg::Zero => None,
                    NoiseArg::Sample => Some(subject_noise(cfg.seed, &seq.subject_id, model.config.latent_dim)),
                };
                let completion = model.complete(&seq.ed_frame(), &region_partition, eps.as_ref())?;
                io::write_frames(&io::prediction_path(&common.out, &seq.subject_id), &completion.frames)?;
                gates.subjects.push(SubjectGates {
                    id: seq.subject_id.clone(),
                    phenotype: seq.phenotype,
                    gates: completion.gates.to_vec(),
                });
                predicted.push(io::SubjectEntry {
                    id: seq.subject_id.clone(),
                    phenotype: seq.phenotype,
                    file: format!("{}.traj.bin", seq.subject_id),
                });
            }
            io::write_topology(&common.out.join(io::TOPOLOGY_FILE), &topology)?;
            io::write_json(
                &common.out.join(io::MANIFEST_FILE),
                &io::CohortManifest {
                    topology: io::TOPOLOGY_FILE.into(),
                    t: model.config.frames,
                    n: topology.vertex_count(),
                    r: Some(region_partition.region_count),
                    subjects: predicted,
                },
            )?;
            io::write_json(&common.out.join("gates.json"), &gates)?;
            write_resolved_config(&common.out, &cfg)?;
            println!(
                "completed {} subjects ({:?} noise) -> {}",
                gates.subjects.len(),
                noise,
                common.out.display()
            );
            Ok(())
        }
        Command::Evaluate {
            common,
            data,
            predictions,
        } => {
            let cfg = load_run_config(common.config.as_ref())?;
            fs::create_dir_all(&common.out)?;
            let (_, truth) = io::load_cohort(&data)?;
            let pred_manifest = io::read_manifest(&predictions)?;
            let truth_by_id: BTreeMap<&str, &MeshSequence> =
                truth.iter().map(|s| (s.subject_id.as_str(), s)).collect();
            let mut pred_frames = Vec::new();
            for entry in &pred_manifest.subjects {
                let frames = io::read_frames(&predictions.join(&entry.file))?;
                let seq = truth_by_id
                    .get(entry.id.as_str())
                    .ok_or_else(|| anyhow!("prediction {} has no ground-truth subject", entry.id))?;
                pred_frames.push((*seq, frames));
            }
            let pairs: Vec<(&MeshSequence, &ndarray::Array3<f64>)> =
                pred_frames.iter().map(|(s, f)| (*s, f)).collect();
            let gates_path = predictions.join("gates.json");
            let gate_data: Option<GateRecord> = if gates_path.exists() {
                Some(serde_json::from_slice(&fs::read(&gates_path)?)?)
            } else {
                None
            };
            let gate_pairs: Option<Vec<(Phenotype, Vec<f64>)>> = gate_data
                .as_ref()
                .map(|g| g.subjects.iter().map(|s| (s.phenotype, s.gates.clone())).collect());
            let experts = gate_data
                .as_ref()
                .and_then(|g| g.subjects.first())
                .map(|s| s.gates.len());
            let report = metrics::evaluate_cohort(
                &pairs,
                match (&gate_pairs, experts) {
                    (Some(gp), Some(e)) => Some((gp.as_slice(), e)),
                    _ => None,
                },
            )?;
            io::write_json(&common.out.join("report.json"), &report)?;
            io::write_text(&common.out.join("report.csv"), &metrics::report_csv(&report))?;
            let curves_dir = common.out.join("curves");
            fs::create_dir_all(&curves_dir)?;
            let mut by_subject: BTreeMap<&str, Vec<&metrics::VolumeCurveRecord>> = BTreeMap::new();
            for rec in &report.volume_curves {
                by_subject.entry(rec.subject.as_str()).or_default().push(rec);
            }
            for (subject, records) in &by_subject {
                io::write_text(
                    &curves_dir.join(format!("{subject}.csv")),
                    &metrics::volume_curves_csv(records),
                )?;
            }
            write_resolved_config(&common.out, &cfg)?;
            for s in &report.summary {
                println!(
                    "{}: ASSD {:.3}±{:.3} mm, HD95 {:.3}±{:.3} mm, vtxRMSE {:.3}±{:.3} mm",
                    s.chamber, s.assd.mean, s.assd.std, s.hd95.mean, s.hd95.std, s.vtx_rmse.mean, s.vtx_rmse.std
                );
            }
            println!("report -> {}", common.out.display());
            Ok(())
        }
        Command::Plot { common, report } => {
            let cfg = load_run_config(common.config.as_ref())?;
            fs::create_dir_all(&common.out)?;
            let report: EvaluationReport =
                serde_json::from_slice(&fs::read(report.join("report.json"))?)
                    .context("reading report.json")?;
            emit_plots(&common.out, &report)?;
            write_resolved_config(&common.out, &cfg)?;
            println!("plots -> {}", common.out.display());
            Ok(())
        }
    }
}

/// Deterministic per-subject latent noise for `--noise sample`.
fn subject_noise(seed: u64, subject_id: &str, latent: usize) -> ndarray::Array1<f64> {
    use rand::SeedableRng;
    use rand_distr::Distribution;
    let mut bytes = seed.to_le_bytes().to_vec();
    bytes.extend_from_slice(subject_id.as_bytes());
    let hex = io::sha256_hex(&bytes);
    let sub_seed = u64::from_str_radix(&hex[..16], 16).expect("hex digest");
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(sub_seed);
    ndarray::Array1::from_shape_fn(latent, |_| rand_distr::StandardNormal.sample(&mut rng))
}

/// Resolve the subject subset for `complete`, using split.json written by
/// `train` when available.
fn select_subjects(
    sequences: &[MeshSequence],
    checkpoint: &Path,
    split: SplitArg,
) -> Result<Vec<MeshSequence>> {
    let ids: Vec<String> = match split {
        SplitArg::All => return Ok(sequences.to_vec()),
        _ => {
            let split_path = checkpoint.join("split.json");
            let data = fs::read(&split_path).with_context(|| {
                format!(
                    "reading {} (needed for --split {:?}; use --split all without it)",
                    split_path.display(),
                    split
                )
            })?;
            let s: training::CohortSplit = serde_json::from_slice(&data)?;
            match split {
                SplitArg::Test => s.test,
                SplitArg::Val => s.val,
                SplitArg::Train => s.train,
                SplitArg::All => unreachable!(),
            }
        }
    };
    let mut selected = Vec::new();
    for id in &ids {
        let seq = sequences
            .iter()
            .find(|s| &s.subject_id == id)
            .ok_or_else(|| anyhow!("split subject {id} not present in the cohort"))?;
        selected.push(seq.clone());
    }
    Ok(selected)
}

fn emit_plots(out: &Path, report: &EvaluationReport) -> Result<()> {
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    for chamber in Chamber::ALL {
        let records: Vec<_> = report.volume_curves.iter().filter(|r| r.chamber == chamber).collect();
        if records.is_empty() {
            continue;
        }
        let frames = records[0].truth_mm3.len();
        let band_of = |get: &dyn Fn(&metrics::VolumeCurveRecord) -> &Vec<f64>| {
            let mut mean = vec![0.0; frames];
            let mut std = vec![0.0; frames];
            for t in 0..frames {
                let values: Vec<f64> = records.iter().map(|r| get(r)[t]).collect();
                let m = values.iter().sum::<f64>() / values.len() as f64;
                let v = values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / values.len() as f64;
                mean[t] = m;
                std[t] = v.sqrt();
            }
            let lo: Vec<f64> = mean.iter().zip(&std).map(|(m, s)| m - s).collect();
            let hi: Vec<f64> = mean.iter().zip(&std).map(|(m, s)| m + s).collect();
            (mean, lo, hi)
        };
        let (tm, tl, th) = band_of(&|r| &r.truth_mm3);
        let (pm, pl, ph) = band_of(&|r| &r.predicted_mm3);
        let svg = line_chart_svg(
            &format!("{chamber} volume over the cycle (mean ± std)"),
            "volume (mm³)",
            &[
                Series {
                    label: "reference".into(),
                    color: "#444444".into(),
                    mean: tm,
                    band: Some((tl, th)),
                },
                Series {
                    label: "predicted".into(),
                    color: "#d62728".into(),
                    mean: pm,
                    band: Some((pl, ph)),
                },
            ],
        );
        io::write_text(&out.join(format!("{}_volume_curves.svg", chamber.as_str().to_lowercase())), &svg)?;
    }

    // normalized LV volume by phenotype (predicted, solid) vs reference (grey)
    let mut phenos: Vec<Phenotype> = report
        .volume_curves
        .iter()
        .filter(|r| r.chamber == Chamber::Lv)
        .map(|r| r.phenotype)
        .collect();
    phenos.sort();
    phenos.dedup();
    let mut series = Vec::new();
    for (pi, ph) in phenos.iter().enumerate() {
        let records: Vec<_> = report
            .volume_curves
            .iter()
            .filter(|r| r.chamber == Chamber::Lv && r.phenotype == *ph)
            .collect();
        let frames = records[0].truth_normalized.len();
        let mean_of = |get: &dyn Fn(&metrics::VolumeCurveRecord) -> &Vec<f64>| -> Vec<f64> {
            (0..frames)
                .map(|t| records.iter().map(|r| get(r)[t]).sum::<f64>() / records.len() as f64)
                .collect()
        };
        series.push(Series {
            label: format!("{ph} predicted"),
            color: colors[pi % colors.len()].into(),
            mean: mean_of(&|r| &r.predicted_normalized),
            band: None,
        });
        series.push(Series {
            label: format!("{ph} reference"),
            color: "#999999".into(),
            mean: mean_of(&|r| &r.truth_normalized),
            band: None,
        });
    }
    if !series.is_empty() {
        let svg = line_chart_svg("Normalized LV volume (LVV/EDV) by phenotype", "LVV / EDV", &series);
        io::write_text(&out.join("normalized_lv_by_phenotype.svg"), &svg)?;
    }

    if let Some(usage) = &report.usage {
        let rows: Vec<String> = usage.phenotypes.iter().map(|p| p.to_string()).collect();
        let cols: Vec<String> = (0..usage.experts).map(|e| format!("expert {e}")).collect();
        let svg = heatmap_svg("Expert usage by phenotype (argmax gate)", &rows, &cols, &usage.matrix);
        io::write_text(&out.join("usage_matrix.svg"), &svg)?;
    }
    Ok(())
}
