use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use boxforge::config::PipelineConfig;
use boxforge::pipeline::{self, Ctx, PipelineError};
use boxforge::synth::{self, files, SynthConfig};

#[derive(Parser)]
#[command(name = "boxforge", version, about = "Pseudo ground-truth boxes from weakly labeled images and videos")]
struct Cli {
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Cluster proposals and keep positive regions of the top clusters.
    Mine(StageArgs),
    /// Pick the best candidate track in each video frame.
    SelectTracks(StageArgs),
    /// Match mined regions into video frames and transfer track boxes back.
    Match(StageArgs),
    /// Vote over transferred boxes for one pseudo ground-truth box per image.
    Vote(StageArgs),
    /// Train the detector on the pseudo ground truth.
    Train(StageArgs),
    /// Re-localize pseudo ground truth with the detector and retrain.
    Update(StageArgs),
    /// Fit the box regressor.
    Regress(StageArgs),
    /// Write metrics.json.
    Eval(StageArgs),
    /// Choose the voting bandwidth from the configured grid.
    CvBandwidth(StageArgs),
    /// Run every stage in order.
    Pipeline(StageArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Images holding two instances each, for bandwidth experiments.
    #[arg(long)]
    multi_instance: bool,
    /// Generator overrides as key=value, e.g. noise=0.2.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct StageArgs {
    /// Dataset directory holding manifest.json.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for every stage.
    #[arg(long)]
    out: PathBuf,
    /// key = value settings file; defaults to the dataset's pipeline.conf.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Setting overrides applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn invalid(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::ConfigInvalid(e.to_string())
}

fn load_config(args: &StageArgs) -> Result<PipelineConfig, PipelineError> {
    let path = args.config.clone().or_else(|| {
        let p = args.data.join(files::PIPELINE_CONF);
        p.exists().then_some(p)
    });
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(&p).map_err(|_| PipelineError::MissingInput(p.display().to_string()))?;
            PipelineConfig::parse_str(&text).map_err(invalid)?
        }
        None => PipelineConfig::default(),
    };
    for s in &args.sets {
        let (k, v) = s.split_once('=').ok_or_else(|| invalid(format!("expected key=value, got {s:?}")))?;
        cfg.set(k, v).map_err(invalid)?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = Some(seed);
    }
    Ok(cfg)
}

fn set_synth(cfg: &mut SynthConfig, key: &str, value: &str) -> Result<(), PipelineError> {
    let mut v = serde_json::to_value(&*cfg).map_err(invalid)?;
    let slot = v
        .get_mut(key.trim())
        .ok_or_else(|| invalid(format!("unknown key {:?}", key.trim())))?;
    *slot = serde_json::from_str(value.trim()).map_err(|_| invalid(format!("bad value for {key}: {value:?}")))?;
    *cfg = serde_json::from_value(v).map_err(|_| invalid(format!("bad value for {key}: {value:?}")))?;
    Ok(())
}

fn run_synth(args: &SynthArgs) -> Result<serde_json::Value, PipelineError> {
    let mut cfg = SynthConfig { seed: args.seed, ..SynthConfig::default() };
    for s in &args.sets {
        let (k, v) = s.split_once('=').ok_or_else(|| invalid(format!("expected key=value, got {s:?}")))?;
        set_synth(&mut cfg, k, v)?;
    }
    let fail = |e: synth::SynthError| PipelineError::StageFailure { stage: "synth", message: e.to_string() };
    let manifest = if args.multi_instance {
        synth::gen_multi_instance_case(&cfg, &args.out).map_err(fail)?
    } else {
        synth::gen_dataset(&cfg, &args.out).map_err(fail)?
    };
    Ok(json!({
        "stage": "synth",
        "images": manifest.images.len(),
        "videos": manifest.videos.len(),
        "out": args.out,
    }))
}

fn run_stage(cmd: &Cmd, args: &StageArgs) -> Result<serde_json::Value, PipelineError> {
    let ctx = Ctx::new(&args.data, &args.out, load_config(args)?)?;
    match cmd {
        Cmd::Mine(_) => pipeline::run_mine(&ctx),
        Cmd::SelectTracks(_) => pipeline::run_select_tracks(&ctx),
        Cmd::Match(_) => pipeline::run_match(&ctx),
        Cmd::Vote(_) => pipeline::run_vote(&ctx),
        Cmd::Train(_) => pipeline::run_train(&ctx),
        Cmd::Update(_) => pipeline::run_update(&ctx),
        Cmd::Regress(_) => pipeline::run_regress(&ctx),
        Cmd::Eval(_) => pipeline::run_eval(&ctx),
        Cmd::CvBandwidth(_) => pipeline::run_cv_bandwidth(&ctx),
        Cmd::Pipeline(_) => pipeline::run_pipeline(&ctx).and_then(|m| serde_json::to_value(m).map_err(invalid)),
        Cmd::Synth(_) => unreachable!(),
    }
}

fn out_dir(cmd: &Cmd) -> &Path {
    match cmd {
        Cmd::Synth(a) => &a.out,
        Cmd::Mine(a)
        | Cmd::SelectTracks(a)
        | Cmd::Match(a)
        | Cmd::Vote(a)
        | Cmd::Train(a)
        | Cmd::Update(a)
        | Cmd::Regress(a)
        | Cmd::Eval(a)
        | Cmd::CvBandwidth(a)
        | Cmd::Pipeline(a) => &a.out,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BOXFORGE_LOG", "warn")).init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global() {
            log::warn!("thread pool: {e}");
        }
    }
    let result = match &cli.cmd {
        Cmd::Synth(a) => run_synth(a),
        Cmd::Mine(a)
        | Cmd::SelectTracks(a)
        | Cmd::Match(a)
        | Cmd::Vote(a)
        | Cmd::Train(a)
        | Cmd::Update(a)
        | Cmd::Regress(a)
        | Cmd::Eval(a)
        | Cmd::CvBandwidth(a)
        | Cmd::Pipeline(a) => run_stage(&cli.cmd, a),
    };
    match result {
        Ok(v) => {
            log::debug!("wrote {}", out_dir(&cli.cmd).display());
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
