use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use dial_cli::brca::{self, BrcaEvalCmd, BrcaExtractCmd, BrcaPredictCmd, BrcaTrainCmd};
use dial_cli::seg::{self, SegEvalCmd, SegInferCmd, SegTrainCmd};
use dial_cli::sim::{self, DialSimCmd};
use dial_cli::{
    check_schema, default_schema, dial_replay, exit_code, load_config, require_out, synth_cohort, usage, ReplayConfig,
    Report, SynthCohortConfig,
};

#[derive(Parser)]
#[command(name = "dial", version, about = "Interactive segmentation and mutation prediction pipelines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML (or .json) run config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; must not exist or be empty.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Render a labeled synthetic cohort.
    SynthCohort(Common),
    /// Train a segmentation model from random parameters.
    SegTrain(Common),
    /// Continue training a segmentation model.
    SegFinetune(Common),
    /// Segment slides with a model.
    SegInfer(Common),
    /// Score segmentations against ground truth.
    SegEval(Common),
    /// Run an interactive-learning project with a scripted annotator.
    DialSimulate(Common),
    /// Replay a project's correction log and verify the project directory.
    DialReplay {
        #[command(flatten)]
        common: Common,
        /// Project directory (instead of a config).
        #[arg(long)]
        project: Option<PathBuf>,
    },
    /// Extract cancer patches for mutation prediction.
    BrcaExtract(Common),
    /// Train a mutation classifier at one magnification.
    BrcaTrain(Common),
    /// Score slides with a mutation classifier.
    BrcaPredict(Common),
    /// Slide-level AUC table for one or more classifiers.
    BrcaEval(Common),
    /// Serve a project over HTTP.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        project: Option<PathBuf>,
        /// Address to bind, e.g. 127.0.0.1:8080 (port 0 picks a free one).
        #[arg(long)]
        addr: Option<String>,
        /// Bearer token required on every request.
        #[arg(long, env = "DIAL_TOKEN")]
        token: Option<String>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ServeConfig {
    #[serde(default = "default_schema")]
    schema_version: u32,
    #[serde(default)]
    project: Option<PathBuf>,
    #[serde(default = "default_addr")]
    addr: String,
    #[serde(default)]
    token: Option<String>,
}

fn default_addr() -> String {
    "127.0.0.1:8080".into()
}

fn seeded<T>(mut cfg: T, seed: Option<u64>, set: impl FnOnce(&mut T, u64)) -> T {
    if let Some(s) = seed {
        set(&mut cfg, s);
    }
    cfg
}

fn run(command: Command) -> anyhow::Result<Option<(Report, bool)>> {
    let report = match command {
        Command::SynthCohort(c) => {
            let cfg: SynthCohortConfig = seeded(load_config(c.config.as_deref())?, c.seed, |x, s| x.seed = s);
            (synth_cohort(&cfg, require_out(c.out.as_deref())?)?, c.json)
        }
        Command::SegTrain(c) => {
            let cfg: SegTrainCmd = seeded(load_config(c.config.as_deref())?, c.seed, |x, s| x.seed = s);
            (seg::seg_train(&cfg, require_out(c.out.as_deref())?)?, c.json)
        }
        Command::SegFinetune(c) => {
            let cfg: SegTrainCmd = seeded(load_config(c.config.as_deref())?, c.seed, |x, s| x.seed = s);
            (seg::seg_finetune(&cfg, require_out(c.out.as_deref())?)?, c.json)
        }
        Command::SegInfer(c) => {
            let cfg: SegInferCmd = load_config(c.config.as_deref())?;
            (seg::seg_infer(&cfg, require_out(c.out.as_deref())?)?, c.json)
        }
        Command::SegEval(c) => {
            let cfg: SegEvalCmd = load_config(c.config.as_deref())?;
            (seg::seg_eval(&cfg, c.out.as_deref())?, c.json)
        }
        Command::DialSimulate(c) => {
            let cfg: DialSimCmd = seeded(load_config(c.config.as_deref())?, c.seed, |x, s| x.seed = s);
            (sim::dial_simulate(&cfg, require_out(c.out.as_deref())?)?, c.json)
        }
        Command::DialReplay { common: c, project } => {
            let cfg = match (project, &c.config) {
                (Some(project), None) => ReplayConfig {
                    schema_version: default_schema(),
                    project,
                },
                (None, Some(_)) => load_config(c.config.as_deref())?,
                (Some(_), Some(_)) => return Err(usage("give either --project or --config")),
                (None, None) => return Err(usage("dial-replay needs --project or --config")),
            };
            (dial_replay(&cfg, c.out.as_deref())?, c.json)
        }
        Command::BrcaExtract(c) => {
            let cfg: BrcaExtractCmd = load_config(c.config.as_deref())?;
            (brca::brca_extract(&cfg, require_out(c.out.as_deref())?)?, c.json)
        }
        Command::BrcaTrain(c) => {
            let cfg: BrcaTrainCmd = seeded(load_config(c.config.as_deref())?, c.seed, |x, s| x.seed = s);
            (brca::brca_train(&cfg, require_out(c.out.as_deref())?)?, c.json)
        }
        Command::BrcaPredict(c) => {
            let cfg: BrcaPredictCmd = load_config(c.config.as_deref())?;
            (brca::brca_predict(&cfg, c.out.as_deref())?, c.json)
        }
        Command::BrcaEval(c) => {
            let cfg: BrcaEvalCmd = load_config(c.config.as_deref())?;
            (brca::brca_eval(&cfg, c.out.as_deref())?, c.json)
        }
        Command::Serve {
            common: c,
            project,
            addr,
            token,
        } => {
            let mut cfg: ServeConfig = match &c.config {
                Some(p) => load_config(Some(p))?,
                None => ServeConfig {
                    schema_version: default_schema(),
                    project: None,
                    addr: default_addr(),
                    token: None,
                },
            };
            check_schema(cfg.schema_version)?;
            cfg.project = project.or(cfg.project);
            cfg.addr = addr.unwrap_or(cfg.addr);
            cfg.token = token.or(cfg.token);
            let project_root = cfg.project.ok_or_else(|| usage("serve needs --project"))?;
            let service = dial_service::ServiceConfig {
                project_root,
                token: cfg.token,
            };
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(dial_service::serve(service, &cfg.addr))?;
            return Ok(None);
        }
    };
    Ok(Some(report))
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(Some((report, json))) => {
            if json {
                println!("{}", serde_json::to_string_pretty(&report.json).expect("report serializes"));
            } else {
                println!("{}", report.text);
            }
        }
        Ok(None) => {}
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(exit_code(&e));
        }
    }
}
