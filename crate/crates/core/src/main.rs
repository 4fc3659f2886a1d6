use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use wmlab::attacks::{AttackContext, AttackSpec};
use wmlab::corpus::{read_resized, write_image};
use wmlab::harness::report::{read_attack_rows, read_mi_curves, read_sweep, ATTACK_REPORT_FILE, MI_FILE, SWEEP_FILE};
use wmlab::harness::{emit_report, CodecKind, Evaluation, Lab, Metric, ReportBundle, RunConfig, SummaryTable};
use wmlab::rng::derived_rng;
use wmlab::watermark::Payload;
use wmlab::{LabError, Result};

#[derive(Parser)]
#[command(name = "wmlab", version, about = "Watermark removal by diffusion regeneration: train, attack, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML); built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or load from the cache) the learned watermark codec.
    TrainCodec(Common),
    /// Train (or load from the cache) the diffusion model.
    TrainDdpm(Common),
    /// Embed a payload into one image.
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// `ss` or `learned`.
        #[arg(long, default_value = "learned")]
        codec: String,
        /// Hex payload; random from the seed when absent.
        #[arg(long)]
        payload: Option<String>,
    },
    /// Apply one attack to one image.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// Attack as JSON, e.g. '{"kind":"jpeg_like","quality":50}'.
        #[arg(long)]
        attack: String,
        /// Codec whose decoder guided removal steers against; also decodes
        /// the result.
        #[arg(long)]
        codec: Option<String>,
    },
    /// Run the evaluation grid and write the report.
    Evaluate(Common),
    /// Accuracy and PSNR against diffusion strength.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated strengths; the config's list when absent.
        #[arg(long, value_delimiter = ',')]
        strengths: Vec<f64>,
    },
    /// Analytic MI curve plus the empirical plug-in comparison.
    MiCurve {
        #[command(flatten)]
        common: Common,
        /// Skip the empirical points (no diffusion model needed).
        #[arg(long)]
        analytic_only: bool,
    },
    /// Rebuild the summary and plots from CSVs already in the output directory.
    Report(Common),
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.out {
        config.out = out.clone();
    }
    Ok(config)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

fn print_summary(summary: &SummaryTable) {
    println!("{:<10}{}", "codec", summary.columns.iter().map(|c| format!("{c:>16}")).collect::<String>());
    for codec in &summary.codecs {
        let cells: String = summary
            .columns
            .iter()
            .map(|col| format!("{:>16.4}", summary.get(codec, col, Metric::BitAcc).unwrap_or(f64::NAN)))
            .collect();
        println!("{codec:<10}{cells}");
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainCodec(common) => {
            let mut config = load_config(&common)?;
            config.codec.enabled = vec![CodecKind::Learned];
            let lab = Lab::prepare(&config)?;
            println!("learned codec checkpoint: {}", lab.learned_checkpoint_path()?.display());
        }
        Command::TrainDdpm(common) => {
            let mut config = load_config(&common)?;
            config.codec.enabled = vec![CodecKind::Ss];
            let mut lab = Lab::prepare(&config)?;
            let report = lab.ensure_model()?.report().cloned();
            println!("diffusion checkpoint: {}", lab.ddpm_checkpoint_path()?.display());
            if let Some(r) = report {
                println!("{r:?}");
            }
        }
        Command::Embed { common, input, codec, payload } => {
            let mut config = load_config(&common)?;
            let kind = CodecKind::parse(&codec)?;
            config.codec.enabled = vec![kind];
            let lab = Lab::prepare(&config)?;
            let image = read_resized(&input, config.corpus.image_size)?;
            let payload = match payload {
                Some(hex) => Payload::from_hex(&hex, config.payload_length)
                    .ok_or_else(|| LabError::InvalidParam(format!("{hex:?} is not {} hex-coded bits", config.payload_length)))?,
                None => Payload::random(config.payload_length, &mut derived_rng(config.seed, "cli-payload", 0)),
            };
            let marked = lab.codec(kind)?.embed(&image, &payload)?;
            std::fs::create_dir_all(&config.out)?;
            let path = config.out.join(format!("{}__{}.png", stem(&input), kind.as_str()));
            write_image(&marked, &path)?;
            println!("{} payload {}", path.display(), payload.to_hex());
        }
        Command::Attack { common, input, attack, codec } => {
            let mut config = load_config(&common)?;
            let spec: AttackSpec = serde_json::from_str(&attack)?;
            spec.validate()?;
            let kind = codec.as_deref().map(CodecKind::parse).transpose()?;
            config.codec.enabled = kind.into_iter().collect();
            if config.codec.enabled.is_empty() {
                config.codec.enabled = vec![CodecKind::Ss];
            }
            let mut lab = Lab::prepare(&config)?;
            if spec.strength().is_some() {
                lab.ensure_model()?;
            }
            let image = read_resized(&input, config.corpus.image_size)?;
            let decoder = kind.map(|k| lab.codec(k)).transpose()?;
            let ctx = AttackContext { model: lab.model(), decoder: decoder.map(|d| d as _) };
            let attacked = spec.apply(&image, ctx, 0)?;
            std::fs::create_dir_all(&config.out)?;
            let path = config.out.join(spec.file_name(&stem(&input)));
            write_image(&attacked, &path)?;
            match decoder {
                Some(d) => println!("{} decoded {}", path.display(), d.decode(&attacked)?.to_hex()),
                None => println!("{}", path.display()),
            }
        }
        Command::Evaluate(common) => {
            let config = load_config(&common)?;
            let mut lab = Lab::prepare(&config)?;
            let evaluation = lab.evaluate()?;
            let out = &lab.config().out;
            lab.write_manifest(out)?;
            std::fs::write(out.join("run_config.toml"), lab.config().to_toml()?)?;
            print_summary(&evaluation.summary);
            let files = emit_report(&ReportBundle { evaluation: Some(evaluation), ..Default::default() }, out)?;
            files.iter().for_each(|f| println!("wrote {}", f.display()));
        }
        Command::Sweep { common, strengths } => {
            let config = load_config(&common)?;
            let strengths = if strengths.is_empty() { config.attacks.sweep_strengths.clone() } else { strengths };
            let mut lab = Lab::prepare(&config)?;
            let sweep = lab.sweep(&strengths)?;
            for p in &sweep {
                println!("{:<8} {:<15} s={:.3} bit_acc={:.4} psnr={:.2}", p.codec, p.attack, p.strength, p.bit_acc, p.psnr_vs_wm);
            }
            let files = emit_report(&ReportBundle { sweep, ..Default::default() }, &lab.config().out)?;
            files.iter().for_each(|f| println!("wrote {}", f.display()));
        }
        Command::MiCurve { common, analytic_only } => {
            let mut config = load_config(&common)?;
            config.codec.enabled = vec![CodecKind::Ss];
            let mut lab = Lab::prepare(&config)?;
            let mut bundle = ReportBundle { mi_curves: vec![lab.analytic_mi()?], ..Default::default() };
            if !analytic_only {
                let dpi = lab.dpi_report()?;
                for p in &dpi.points {
                    println!(
                        "s={:.2} t={} analytic={:.4} empirical={:.4} {}",
                        p.strength,
                        p.timestep,
                        p.analytic_bits,
                        p.empirical_bits,
                        if p.holds { "ok" } else { "VIOLATED" }
                    );
                }
                let [_, empirical] = dpi.curves();
                bundle.mi_curves.push(empirical);
                bundle.dpi = Some(dpi);
            }
            let files = emit_report(&bundle, &lab.config().out)?;
            files.iter().for_each(|f| println!("wrote {}", f.display()));
        }
        Command::Report(common) => {
            let out = load_config(&common)?.out;
            let mut bundle = ReportBundle::default();
            if out.join(ATTACK_REPORT_FILE).exists() {
                let rows = read_attack_rows(&out.join(ATTACK_REPORT_FILE))?;
                let summary = SummaryTable::from_rows(&rows);
                print_summary(&summary);
                bundle.evaluation = Some(Evaluation { rows, summary });
            }
            if out.join(SWEEP_FILE).exists() {
                bundle.sweep = read_sweep(&out.join(SWEEP_FILE))?;
            }
            if out.join(MI_FILE).exists() {
                bundle.mi_curves = read_mi_curves(&out.join(MI_FILE))?;
            }
            let files = emit_report(&bundle, &out)?;
            if files.is_empty() {
                return Err(LabError::Config(format!("no report CSVs in {}", out.display())));
            }
            files.iter().for_each(|f| println!("wrote {}", f.display()));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
