//! Command-line entry point: data preparation, training, conversion,
//! evaluation, probing, projection.
//!
//! Exit status: 0 on success, 2 on usage errors, 1 on runtime failures.
//! Every command prints a single-line JSON summary on success.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use nrvc::audio::manifest::{build_manifest, read_manifest, BuildManifestConfig, DomainLabel};
use nrvc::audio::mel::write_feature_cache;
use nrvc::audio::save_waveform;
use nrvc::error::{Error, Result};
use nrvc::eval::{
    collect_probe_vectors, convert, domain_probe, extract_mcc, invert_to_waveform, mcd,
    project_vectors, write_projection_csv, ConversionRequest, ProbeKind, Scenario,
};
use nrvc::model::checkpoint::load_checkpoint;
use nrvc::train::{load_train_config, FeatureStore, Trainer};

#[derive(Parser)]
#[command(
    name = "nrvc",
    version,
    about = "Noise-robust voice conversion: preparation, training, conversion, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan a clean corpus, synthesize noisy mixtures, write the manifest.
    Prepare(PrepareArgs),
    /// Run or resume the training loop.
    Train(TrainArgs),
    /// Convert a source utterance to a target speaker's voice.
    Convert(ConvertArgs),
    /// Score converted/target WAV pairs with MCD.
    Evaluate(EvaluateArgs),
    /// Train a linear domain probe on a chosen representation.
    Probe(ProbeArgs),
    /// Export a 2-D projection of representation vectors.
    Project(ProjectArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Directory of clean WAV files (speaker per subdirectory).
    #[arg(long)]
    clean_dir: PathBuf,
    /// Directory of noise WAV files.
    #[arg(long)]
    noise_dir: PathBuf,
    /// Manifest output path; noisy mixtures land in a `noisy/` directory
    /// next to it.
    #[arg(long)]
    out_manifest: PathBuf,
    /// Lower SNR bound in dB for the uniform draw.
    #[arg(long, default_value_t = 5.0)]
    snr_min: f64,
    /// Upper SNR bound in dB.
    #[arg(long, default_value_t = 20.0)]
    snr_max: f64,
    /// Noisy variants per clean utterance.
    #[arg(long, default_value_t = 1)]
    augmentations: usize,
    /// Fraction of noise files used for augmentation; the rest is held out.
    #[arg(long, default_value_t = 1.0)]
    noise_train_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// TOML training configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoints, loss log and run metadata.
    #[arg(long)]
    out_dir: PathBuf,
    /// Checkpoint to resume from; training continues toward max_steps.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Utterance supplying the content.
    #[arg(long)]
    source: PathBuf,
    /// Utterance supplying the speaker identity.
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    out_wav: PathBuf,
    /// Scenario tag recorded in the sidecar metadata: SC-TC, SC-TN, SN-TC
    /// or SN-TN.
    #[arg(long, default_value = "SC-TC")]
    scenario: String,
    /// Also write the converted spectrogram as a feature cache file.
    #[arg(long)]
    out_mel: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// CSV with header `converted,target`, one WAV pair per row.
    #[arg(long)]
    pairs_file: PathBuf,
    /// JSONL report: one line per pair plus an aggregate line.
    #[arg(long)]
    out_report: PathBuf,
}

#[derive(Args)]
struct ProbeArgs {
    /// Required for the speaker and content kinds; the mel kind probes raw
    /// features and runs without one.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    /// Representation to probe: speaker, content or mel.
    #[arg(long)]
    kind: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the report as a JSON document.
    #[arg(long)]
    out_report: Option<PathBuf>,
}

#[derive(Args)]
struct ProjectArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    /// Representation to project: speaker, content or mel.
    #[arg(long, default_value = "speaker")]
    kind: String,
    #[arg(long)]
    out_csv: PathBuf,
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Prepare(args) => cmd_prepare(args),
        Command::Train(args) => cmd_train(args),
        Command::Convert(args) => cmd_convert(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Probe(args) => cmd_probe(args),
        Command::Project(args) => cmd_project(args),
    }
}

fn cmd_prepare(args: PrepareArgs) -> Result<()> {
    let out_dir = args.out_manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let cfg = BuildManifestConfig {
        snr_range: (args.snr_min, args.snr_max),
        noise_train_fraction: args.noise_train_frac,
        augmentations: args.augmentations,
        seed: args.seed,
    };
    let entries = build_manifest(&args.clean_dir, &args.noise_dir, &out_dir, &cfg)?;
    nrvc::audio::manifest::write_manifest(&args.out_manifest, &entries)?;
    let clean = entries.iter().filter(|e| e.domain == DomainLabel::Clean).count();
    println!(
        "{}",
        json!({
            "command": "prepare",
            "manifest": args.out_manifest,
            "entries": entries.len(),
            "clean": clean,
            "noisy": entries.len() - clean,
        })
    );
    Ok(())
}

/// Audio paths in a manifest resolve against the manifest's directory.
fn manifest_base(manifest: &Path) -> PathBuf {
    manifest.parent().unwrap_or(Path::new(".")).to_path_buf()
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let entries = read_manifest(&args.manifest)?;
    let features = FeatureStore::load(&manifest_base(&args.manifest), &entries)?;
    let config = args.config.as_deref().map(load_train_config).transpose()?;
    let mut trainer = match &args.resume {
        Some(ckpt) => Trainer::from_checkpoint_with(ckpt, config, entries, features)?,
        None => Trainer::new(config.unwrap_or_default(), entries, features)?,
    };
    let summary = trainer.run(&args.out_dir)?;
    println!(
        "{}",
        json!({
            "command": "train",
            "final_step": summary.final_step,
            "steps_run": summary.steps_run,
            "checkpoint": summary.checkpoint,
            "log": summary.log,
        })
    );
    Ok(())
}

fn cmd_convert(args: ConvertArgs) -> Result<()> {
    let scenario: Scenario = args.scenario.parse()?;
    let req = ConversionRequest {
        source_audio: args.source.clone(),
        target_audio: args.target.clone(),
        scenario,
        checkpoint: args.checkpoint.clone(),
    };
    let outcome = convert(&req)?;
    let wave = invert_to_waveform(&outcome.mel)?;
    if let Some(dir) = args.out_wav.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    save_waveform(&args.out_wav, &wave)?;
    if let Some(mel_path) = &args.out_mel {
        write_feature_cache(mel_path, &outcome.mel)?;
    }
    let sidecar = args.out_wav.with_extension("meta.json");
    let meta = json!({
        "scenario": scenario.tag(),
        "checkpoint": args.checkpoint,
        "checkpoint_step": outcome.meta.step,
        "source": args.source,
        "target": args.target,
        "frames": outcome.mel.num_frames(),
        "samples": wave.len(),
    });
    std::fs::write(&sidecar, serde_json::to_string_pretty(&meta).expect("serializable") + "\n")
        .map_err(|e| Error::io(&sidecar, e))?;
    println!(
        "{}",
        json!({
            "command": "convert",
            "out_wav": args.out_wav,
            "sidecar": sidecar,
            "scenario": scenario.tag(),
            "frames": outcome.mel.num_frames(),
            "samples": wave.len(),
        })
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(&args.pairs_file)
        .map_err(|e| Error::Usage(format!("cannot read {}: {e}", args.pairs_file.display())))?;
    {
        let headers = reader.headers().map_err(|e| Error::Usage(e.to_string()))?;
        if headers.iter().ne(["converted", "target"]) {
            return Err(Error::Usage(format!(
                "pairs file must have header `converted,target`, found `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
    }
    let base = args.pairs_file.parent().unwrap_or(Path::new(".")).to_path_buf();
    let resolve = |s: &str| {
        let p = PathBuf::from(s);
        if p.is_absolute() {
            p
        } else {
            base.join(p)
        }
    };
    let mut lines = Vec::new();
    let mut values = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Usage(e.to_string()))?;
        let (conv_path, targ_path) = (resolve(&row[0]), resolve(&row[1]));
        let conv = extract_mcc(&nrvc::audio::load_waveform(&conv_path)?)?;
        let targ = extract_mcc(&nrvc::audio::load_waveform(&targ_path)?)?;
        let detail = mcd(&conv, &targ)?;
        values.push(detail.mcd_db);
        lines.push(
            json!({
                "converted": row[0].to_string(),
                "target": row[1].to_string(),
                "mcd_db": detail.mcd_db,
                "path_length": detail.path_length,
            })
            .to_string(),
        );
    }
    if values.is_empty() {
        return Err(Error::Usage("pairs file contains no rows".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    lines.push(
        json!({ "pairs": values.len(), "mean_mcd_db": mean, "std_mcd_db": std }).to_string(),
    );
    std::fs::write(&args.out_report, lines.join("\n") + "\n")
        .map_err(|e| Error::io(&args.out_report, e))?;
    println!(
        "{}",
        json!({
            "command": "evaluate",
            "report": args.out_report,
            "pairs": values.len(),
            "mean_mcd_db": mean,
            "std_mcd_db": std,
        })
    );
    Ok(())
}

/// Loads the model when a kind needs it, the manifest, and its features.
fn probe_inputs(
    checkpoint: &Option<PathBuf>,
    manifest: &Path,
    kind: ProbeKind,
) -> Result<(Option<nrvc::model::Model>, Vec<nrvc::audio::manifest::ManifestEntry>, FeatureStore)> {
    let model = match checkpoint {
        Some(path) => Some(load_checkpoint(path)?.0),
        None if kind != ProbeKind::Mel => {
            return Err(Error::Usage(format!(
                "--checkpoint is required for the {} kind",
                kind.name()
            )))
        }
        None => None,
    };
    let entries = read_manifest(manifest)?;
    let features = FeatureStore::load(&manifest_base(manifest), &entries)?;
    Ok((model, entries, features))
}

fn cmd_probe(args: ProbeArgs) -> Result<()> {
    let kind: ProbeKind = args.kind.parse()?;
    let (model, entries, features) = probe_inputs(&args.checkpoint, &args.manifest, kind)?;
    let report = domain_probe(model.as_ref(), &entries, &features, kind, args.seed)?;
    let mut summary = serde_json::to_value(&report).expect("serializable");
    summary["command"] = json!("probe");
    if let Some(path) = &args.out_report {
        std::fs::write(path, serde_json::to_string_pretty(&report).expect("serializable") + "\n")
            .map_err(|e| Error::io(path, e))?;
    }
    println!("{summary}");
    Ok(())
}

fn cmd_project(args: ProjectArgs) -> Result<()> {
    let kind: ProbeKind = args.kind.parse()?;
    let (model, entries, features) = probe_inputs(&args.checkpoint, &args.manifest, kind)?;
    let vectors = collect_probe_vectors(model.as_ref(), &entries, &features, kind)?;
    let projection = project_vectors(&vectors)?;
    write_projection_csv(&args.out_csv, &projection)?;
    println!(
        "{}",
        json!({
            "command": "project",
            "out_csv": args.out_csv,
            "kind": kind.name(),
            "points": projection.points.len(),
            "variance_captured": projection.variance_captured,
        })
    );
    Ok(())
}
