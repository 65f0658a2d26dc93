//! `vos`: batch front end for inference, perturbation, evaluation and the
//! robustness benchmark.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use vos_core::calibration::CascadeConfig;
use vos_core::dataset::{load_dataset, read_mask, SequenceRecord};
use vos_core::metrics::{
    f_mean, j_mean, jf_mean, score_sequence, split_scores, temporal_decay_curve, write_decay_csv, write_scores_csv,
    CategoryManifest,
};
use vos_core::perturbation::{perturb_dataset, Perturbation, PerturbationSpec};
use vos_core::pipeline::{
    infer_dataset, load_ground_truth, run_robustness, LoadedSequence, Mode, Model, PipelineConfig, ReferenceMode,
};
use vos_core::proxy::ClusterSchedule;
use vos_core::weights::save_weights;
use vos_core::{synth, VosError};

#[derive(Parser)]
#[command(name = "vos", version, about = "Adaptive-proxy video object segmentation toolkit")]
struct Cli {
    /// Worker threads (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Propagate first-frame masks through every sequence of a dataset.
    Infer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Write a perturbed copy of a dataset.
    Perturb {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        kind: Kind,
        /// Noise sigma, salt-and-pepper point count or blur kernel size.
        #[arg(long)]
        param: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// CSV with columns sequence,object,category (seen|unseen).
        #[arg(long)]
        categories: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        /// Decay-curve CSV; defaults to `<report>_decay.csv`.
        #[arg(long)]
        decay: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        /// Boundary tolerance in pixels; defaults to 0.8% of the image diagonal.
        #[arg(long)]
        tolerance: Option<usize>,
    },
    /// Clean run plus the six benchmark perturbations, summarised as Q_p and R_p.
    Robustness {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Seed of the perturbation noise.
        #[arg(long, default_value_t = 0)]
        perturb_seed: u64,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Generate a synthetic sliding-squares sequence in dataset layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        frames: usize,
        #[arg(long, default_value_t = 2)]
        objects: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write seeded weights for the configured model.
    InitWeights {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print the effective configuration.
    PrintConfig {
        #[command(flatten)]
        model: ModelArgs,
    },
}

#[derive(Copy, Clone, ValueEnum)]
enum Kind {
    Identity,
    GaussianNoise,
    SaltPepper,
    GaussianBlur,
}

#[derive(Copy, Clone, ValueEnum)]
enum ModeArg {
    Full,
    MatchingOnly,
}

#[derive(Copy, Clone, ValueEnum)]
enum RefsArg {
    Base,
    Mf,
}

/// Configuration file plus per-key overrides.
#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    refs: Option<RefsArg>,
    #[arg(long)]
    delta: Option<usize>,
    /// Comma-separated granularities, e.g. `1,16,full`.
    #[arg(long)]
    clusters: Option<String>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    weights: Option<PathBuf>,
}

impl ModelArgs {
    fn resolve(&self) -> vos_core::Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(m) = self.mode {
            cfg.mode = match m {
                ModeArg::Full => Mode::Full,
                ModeArg::MatchingOnly => Mode::MatchingOnly,
            };
        }
        if let Some(r) = self.refs {
            cfg.references.mode = match r {
                RefsArg::Base => ReferenceMode::Base,
                RefsArg::Mf => ReferenceMode::MultiFrame,
            };
        }
        if let Some(d) = self.delta {
            cfg.references.delta = d;
        }
        if let Some(c) = &self.clusters {
            cfg.clusters = c.parse::<ClusterSchedule>()?;
        }
        if let Some(n) = self.stages {
            let beta = cfg.cascade.beta;
            cfg.cascade = CascadeConfig {
                beta,
                ..CascadeConfig::with_stages(n)
            };
        }
        if let Some(b) = self.beta {
            cfg.cascade.beta = b;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(w) = &self.weights {
            cfg.weights = Some(w.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn perturbation(kind: Kind, param: Option<f64>) -> vos_core::Result<Perturbation> {
    let need =
        |name: &str| param.ok_or_else(|| VosError::Argument(format!("--param ({name}) is required for this kind")));
    let count = |v: f64, name: &str| {
        if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
            Ok(v as usize)
        } else {
            Err(VosError::Argument(format!(
                "{name} must be a non-negative integer, got {v}"
            )))
        }
    };
    let p = match kind {
        Kind::Identity => Perturbation::Identity,
        Kind::GaussianNoise => Perturbation::GaussianNoise { sigma: need("sigma")? },
        Kind::SaltPepper => Perturbation::SaltPepper {
            points: count(need("point count")?, "point count")?,
        },
        Kind::GaussianBlur => Perturbation::GaussianBlur {
            kernel: count(need("kernel size")?, "kernel size")?,
        },
    };
    p.validate()?;
    Ok(p)
}

fn decay_path(report: &Path) -> PathBuf {
    let stem = report.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    report.with_file_name(format!("{stem}_decay.csv"))
}

fn load_predictions(pred: &Path, rec: &SequenceRecord) -> vos_core::Result<Vec<vos_core::LabelMask>> {
    rec.stems
        .iter()
        .map(|stem| {
            let p = pred.join(&rec.id).join(format!("{stem}.png"));
            if !p.is_file() {
                return Err(VosError::Data(format!("missing prediction {}", p.display())));
            }
            read_mask(&p)
        })
        .collect()
}

fn eval(
    pred: &Path,
    gt: &Path,
    categories: Option<&Path>,
    report: &Path,
    decay: Option<&Path>,
    bins: usize,
    tolerance: Option<usize>,
) -> anyhow::Result<()> {
    let records = load_dataset(gt)?;
    if records.is_empty() {
        return Err(VosError::Data(format!("no sequences under {}", gt.display())).into());
    }
    let mut scores = Vec::with_capacity(records.len());
    for rec in &records {
        let preds = load_predictions(pred, rec)?;
        let gts = load_ground_truth(rec)?;
        scores.push(score_sequence(&rec.id, &preds, &gts, rec.num_objects, tolerance)?);
    }
    let split = categories
        .map(|p| CategoryManifest::load(p).and_then(|m| split_scores(&scores, &m)))
        .transpose()?;
    write_scores_csv(report, &scores, split.as_ref())?;
    let series: Vec<Vec<f64>> = scores
        .iter()
        .map(|s| s.frame_series())
        .filter(|s| !s.is_empty())
        .collect();
    let decay_out = decay.map(Path::to_path_buf).unwrap_or_else(|| decay_path(report));
    write_decay_csv(&decay_out, &temporal_decay_curve(&series, bins)?)?;

    println!("J      {:.4}", j_mean(&scores)?);
    println!("F      {:.4}", f_mean(&scores)?);
    println!("J&F    {:.4}", jf_mean(&scores)?);
    if let Some(s) = split {
        for (name, v) in [
            ("J_s", s.j_seen),
            ("J_u", s.j_unseen),
            ("F_s", s.f_seen),
            ("F_u", s.f_unseen),
        ] {
            match v {
                Some(v) => println!("{name:<6} {v:.4}"),
                None => println!("{name:<6} -"),
            }
        }
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    match cli.command {
        Command::Infer { data, out, model } => {
            let cfg = model.resolve()?;
            let records = load_dataset(&data)?;
            let start = Instant::now();
            let model = Model::from_config(cfg)?;
            infer_dataset(&records, &model, &out)?;
            eprintln!(
                "predicted {} sequences in {:.1}s -> {}",
                records.len(),
                start.elapsed().as_secs_f64(),
                out.display()
            );
        }
        Command::Perturb {
            data,
            out,
            kind,
            param,
            seed,
        } => {
            let spec = PerturbationSpec::new(perturbation(kind, param)?, seed);
            perturb_dataset(&data, &spec, &out)?;
            eprintln!("wrote {} copy -> {}", spec.kind, out.display());
        }
        Command::Eval {
            pred,
            gt,
            categories,
            report,
            decay,
            bins,
            tolerance,
        } => {
            eval(
                &pred,
                &gt,
                categories.as_deref(),
                &report,
                decay.as_deref(),
                bins,
                tolerance,
            )?;
        }
        Command::Robustness {
            data,
            report,
            perturb_seed,
            model,
        } => {
            let cfg = model.resolve()?;
            let records = load_dataset(&data)?;
            if records.is_empty() {
                return Err(VosError::Data(format!("no sequences under {}", data.display())).into());
            }
            let sequences = records
                .iter()
                .map(LoadedSequence::load)
                .collect::<vos_core::Result<Vec<_>>>()?;
            let model = Model::from_config(cfg)?;
            let r = run_robustness(&sequences, &model, perturb_seed)?;
            r.write_csv(&report)?;
            println!("{:<20} {:>8} {:>8}", "row", "score", "drop");
            println!("{:<20} {:>8.4} {:>8.4}", "clean", r.q_c, 0.0);
            for row in r.control.iter().chain(&r.rows) {
                println!("{:<20} {:>8.4} {:>8.4}", row.perturbation, row.score, r.q_c - row.score);
            }
            println!("{:<20} {:>8.4} {:>8.4}", "Q_p", r.q_p, r.r_p);
        }
        Command::Synth {
            out,
            frames,
            objects,
            seed,
        } => {
            let seq = synth::generate(frames, objects, seed)?;
            synth::write_dataset(&out, &seq)?;
            eprintln!(
                "wrote `{}` ({frames} frames, {objects} objects) -> {}",
                seq.id,
                out.display()
            );
        }
        Command::InitWeights { out, seed, config } => {
            let cfg = match config {
                Some(p) => PipelineConfig::load(&p)?,
                None => PipelineConfig::default(),
            };
            let bundle = cfg.synthesize_weights(seed)?;
            save_weights(&bundle, &out)?;
            eprintln!("wrote {} arrays -> {}", bundle.len(), out.display());
        }
        Command::PrintConfig { model } => {
            print!("{}", model.resolve()?.to_toml());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // VosError's message already includes its source
            let mut parts = Vec::new();
            for cause in e.chain() {
                parts.push(cause.to_string());
                if cause.is::<VosError>() {
                    break;
                }
            }
            eprintln!("error: {}", parts.join(": "));
            let code = e.downcast_ref::<VosError>().map_or(1, VosError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
