mod dataset;
mod sidecar;

use std::io::IsTerminal;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use latmark::attacks::{apply, AttackAction, AttackContext, AttackRegistry};
use latmark::embedder::MessageMode;
use latmark::eval::{self, EvalReport};
use latmark::extractor::calibrate_threshold_scored;
use latmark::model::key_derived_message;
use latmark::train::{self, Ablation, Trainer};
use latmark::{synth, Image, Message, RunConfig, Watermarker};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use dataset::{load_at, DatasetManifest};
use sidecar::Sidecar;

const KEY_VAR: &str = "LATMARK_KEY";
const CHECKPOINT: &str = "checkpoint.lmk";

#[derive(Parser)]
#[command(name = "latmark", version, about = "Semi-fragile latent-space image watermarking")]
struct Cli {
    /// TOML run configuration (unknown keys are rejected).
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the watermarker against the attack curriculum.
    Train {
        /// Output directory for checkpoint, metrics and effective config.
        #[arg(short, long)]
        out: PathBuf,
        /// Directory of training images (defaults to procedural images).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Ablation variant, e.g. fixed_directions.
        #[arg(long)]
        ablation: Option<String>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Watermark one image.
    Embed {
        #[arg(short, long)]
        model: PathBuf,
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// `random` or a hex string of L/4 characters.
        #[arg(long, default_value = "random")]
        message: String,
        /// Seed for `--message random`.
        #[arg(long)]
        seed: Option<u64>,
        /// Sidecar path (defaults to `<output>.msg.json`).
        #[arg(long)]
        sidecar: Option<PathBuf>,
    },
    /// Print the recovered message bits as hex.
    Extract {
        #[arg(short, long)]
        model: PathBuf,
        #[arg(short, long)]
        input: PathBuf,
    },
    /// Check an image: exit 0 when genuine, 2 when flagged as fake, 1 on error.
    Verify {
        #[arg(short, long)]
        model: PathBuf,
        #[arg(short, long)]
        input: PathBuf,
        /// Sidecar written by `embed` (defaults to `<input>.msg.json`).
        #[arg(long)]
        sidecar: Option<PathBuf>,
        /// Override the detection threshold.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Apply registry attacks to an image.
    Attack {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Attack name, optionally `name=strength`; repeatable, applied in registry order.
        #[arg(short, long = "attack")]
        attacks: Vec<String>,
        /// Strength for attacks given without one.
        #[arg(long, default_value_t = 0.5)]
        strength: f64,
        /// Donor image for mixing attacks (defaults to the input).
        #[arg(long)]
        donor: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Robustness and fragility report on a held-out set.
    Evaluate {
        #[arg(short, long)]
        model: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Pick the detection threshold that best separates benign from malicious edits.
    Calibrate {
        #[arg(short, long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// JSON file with `benign` and `malicious` BER lists, instead of a model.
        #[arg(long, conflicts_with = "model")]
        scores: Option<PathBuf>,
    },
    /// Re-render plots from a saved report.json.
    Report {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn echo_config(cfg: &RunConfig) -> Result<String> {
    let s = cfg.to_toml()?;
    log::info!("effective config:\n{s}");
    Ok(s)
}

fn read_key() -> Result<String> {
    if let Ok(k) = std::env::var(KEY_VAR) {
        if !k.is_empty() {
            return Ok(k);
        }
    }
    if !std::io::stdin().is_terminal() {
        bail!("no watermark key: set {KEY_VAR}");
    }
    let k = rpassword::prompt_password("watermark key: ").context("cannot read key")?;
    if k.is_empty() {
        bail!("watermark key must not be empty");
    }
    Ok(k)
}

fn parse_ablation(s: &str) -> Result<Ablation> {
    #[derive(Deserialize)]
    struct W {
        a: Ablation,
    }
    let w: W = serde_json::from_value(serde_json::json!({ "a": s })).with_context(|| {
        let names: Vec<String> = Ablation::ALL.iter().map(|a| serde_json::to_string(a).unwrap_or_default()).collect();
        format!("unknown ablation {s:?}; expected one of {}", names.join(", "))
    })?;
    Ok(w.a)
}

fn load_model(path: &Path, key: &str) -> Result<(Watermarker, latmark::DirectionSet)> {
    train::load_for_key(path, key).with_context(|| format!("cannot load model {}", path.display()))
}

/// Loads an image at the model resolution, resizing with a notice.
fn load_input(path: &Path, res: usize) -> Result<Image> {
    let (img, resized) = load_at(path, res)?;
    if resized {
        log::info!("{} resized to {res}x{res} to match the model", path.display());
    }
    Ok(img)
}

fn reference_message(m: &Watermarker, key: &str, sidecar: &Path) -> Result<Message> {
    match m.cfg.embed.message_mode {
        MessageMode::KeyDerived => Ok(key_derived_message(key, m.message_bits())),
        MessageMode::RandomSidecar => {
            let sc = Sidecar::read(sidecar)?;
            if sc.bits != m.message_bits() {
                bail!("sidecar holds {} bits, model carries {}", sc.bits, m.message_bits());
            }
            sc.message()
        }
    }
}

fn test_images(cfg: &RunConfig, data: Option<&Path>) -> Result<Vec<Image>> {
    let r = cfg.backbone.resolution();
    match data.map(Path::to_path_buf).or_else(|| cfg.eval.data_dir.as_ref().map(PathBuf::from)) {
        Some(d) => DatasetManifest::scan(&d, r, "test")?.load(),
        None => Ok(synth::dataset(cfg.eval.test_images, r, cfg.eval.test_seed)),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Command::Train { out, data, epochs, seed, ablation, resume } => {
            let mut cfg = load_config(cli.config.as_deref())?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(a) = ablation {
                cfg.train.ablation = parse_ablation(&a)?;
            }
            if let Some(d) = &data {
                cfg.train.data_dir = Some(d.display().to_string());
            }
            cfg.validate()?;
            let key = read_key()?;
            let r = cfg.backbone.resolution();
            let images = match &cfg.train.data_dir {
                Some(d) => DatasetManifest::scan(Path::new(d), r, "train")?.load()?,
                None => synth::dataset(cfg.train.synthetic_images, r, cfg.train.seed.wrapping_add(1000)),
            };
            let ckpt = out.join(CHECKPOINT);
            let mut trainer = if resume && ckpt.exists() {
                let t = Trainer::resume(&ckpt, &key, images)?;
                if t.config() != &cfg {
                    log::warn!("resuming with the configuration stored in the checkpoint");
                }
                log::info!("resuming after epoch {}", t.epoch);
                t
            } else {
                Trainer::new(&cfg, &key, images)?
            };
            std::fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
            let effective = echo_config(trainer.config())?;
            write_file(&out.join("config.toml"), &effective)?;
            let history = trainer.train(Some(&ckpt))?;
            let lines: Vec<String> = history.iter().map(serde_json::to_string).collect::<std::result::Result<_, _>>()?;
            write_file(&out.join("metrics.jsonl"), &(lines.join("\n") + "\n"))?;
            println!("checkpoint written to {}", ckpt.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Embed { model, input, output, message, seed, sidecar } => {
            let key = read_key()?;
            let (m, dirs) = load_model(&model, &key)?;
            echo_config(&m.cfg)?;
            let x = load_input(&input, m.resolution())?;
            let l = m.message_bits();
            let msg = match m.cfg.embed.message_mode {
                MessageMode::KeyDerived => {
                    if message != "random" {
                        log::warn!("message_mode = key_derived: ignoring --message");
                    }
                    key_derived_message(&key, l)
                }
                MessageMode::RandomSidecar if message == "random" => {
                    let mut rng = match seed {
                        Some(s) => ChaCha8Rng::seed_from_u64(s),
                        None => ChaCha8Rng::from_os_rng(),
                    };
                    Message::random(l, &mut rng)
                }
                MessageMode::RandomSidecar => Message::from_hex(&message, l).context("invalid --message")?,
            };
            let y = m.embed(&x, &msg, &dirs)?;
            y.save(&output).with_context(|| format!("cannot write {}", output.display()))?;
            if m.cfg.embed.message_mode == MessageMode::RandomSidecar {
                let sp = sidecar.unwrap_or_else(|| sidecar::default_path(&output));
                Sidecar::new(&msg).write(&sp)?;
                println!("wrote {} and {}", output.display(), sp.display());
            } else {
                println!("wrote {}", output.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Extract { model, input } => {
            let key = read_key()?;
            let (m, dirs) = load_model(&model, &key)?;
            echo_config(&m.cfg)?;
            let x = load_input(&input, m.resolution())?;
            println!("{}", m.extract(&x, &dirs)?.to_hex());
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { model, input, sidecar, lambda } => {
            let key = read_key()?;
            let (mut m, dirs) = load_model(&model, &key)?;
            if let Some(l) = lambda {
                if !(0.0..=1.0).contains(&l) {
                    bail!("--lambda must lie in [0, 1]");
                }
                m.cfg.detector.lambda = l;
            }
            echo_config(&m.cfg)?;
            let reference = reference_message(&m, &key, &sidecar.unwrap_or_else(|| sidecar::default_path(&input)))?;
            let x = load_input(&input, m.resolution())?;
            let v = m.verify(&x, &dirs, &reference)?;
            let verdict = if v.is_fake { "fake" } else { "genuine" };
            println!("{}", serde_json::json!({ "ber": v.ber, "lambda": v.threshold, "verdict": verdict }));
            Ok(if v.is_fake { ExitCode::from(2) } else { ExitCode::SUCCESS })
        }
        Command::Attack { input, output, attacks, strength, donor, seed } => {
            let cfg = load_config(cli.config.as_deref())?;
            echo_config(&cfg)?;
            let reg = AttackRegistry::from_config(&cfg.attacks)?;
            let x = Image::load(&input).with_context(|| format!("cannot load image {}", input.display()))?;
            let mut action = AttackAction::none(reg.len());
            for a in &attacks {
                let (name, tau) = match a.split_once('=') {
                    Some((n, t)) => (n, t.parse::<f64>().with_context(|| format!("bad strength in {a:?}"))?),
                    None => (a.as_str(), strength),
                };
                if !(0.0..=1.0).contains(&tau) {
                    bail!("strength for {name} must lie in [0, 1]");
                }
                let Some(l) = reg.index_of(name) else {
                    let names: Vec<&str> = reg.specs.iter().map(|s| s.name.as_str()).collect();
                    bail!("unknown attack {name:?}; registry has {}", names.join(", "));
                };
                action.selected[l] = 1;
                action.strengths[l] = tau;
            }
            let d = match donor {
                Some(p) => Some(Image::load(&p)?.resize(x.h, x.w)),
                None => None,
            };
            let ctx = AttackContext { seed, donor: Some(d.as_ref().unwrap_or(&x)) };
            let y = apply(&x, &action, &reg, &ctx)?;
            y.save(&output).with_context(|| format!("cannot write {}", output.display()))?;
            println!("wrote {}", output.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Evaluate { model, out, data } => {
            let key = read_key()?;
            let (m, dirs) = load_model(&model, &key)?;
            let effective = echo_config(&m.cfg)?;
            let images = test_images(&m.cfg, data.as_deref())?;
            let report = eval::evaluate(&m, &dirs, &images, &m.cfg.eval)?;
            eval::write_report(&report, &out, m.cfg.report.plots)?;
            write_file(&out.join("config.toml"), &effective)?;
            print_summary(&report);
            Ok(ExitCode::SUCCESS)
        }
        Command::Calibrate { model, data, scores } => {
            let (lambda, acc) = match (model, scores) {
                (_, Some(p)) => {
                    #[derive(Deserialize)]
                    struct Scores {
                        benign: Vec<f64>,
                        malicious: Vec<f64>,
                    }
                    let s: Scores = serde_json::from_str(
                        &std::fs::read_to_string(&p).with_context(|| format!("cannot read {}", p.display()))?,
                    )
                    .with_context(|| format!("cannot parse {}", p.display()))?;
                    calibrate_threshold_scored(&s.benign, &s.malicious)?
                }
                (Some(mp), None) => {
                    let key = read_key()?;
                    let (m, dirs) = load_model(&mp, &key)?;
                    echo_config(&m.cfg)?;
                    let images = test_images(&m.cfg, data.as_deref())?;
                    eval::calibrate(&m, &dirs, &images, &m.cfg.eval)?
                }
                (None, None) => bail!("calibrate needs --model or --scores"),
            };
            println!("{}", serde_json::json!({ "lambda": lambda, "balanced_accuracy": acc }));
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { input, out } => {
            let report: EvalReport = serde_json::from_str(
                &std::fs::read_to_string(&input).with_context(|| format!("cannot read {}", input.display()))?,
            )
            .with_context(|| format!("{} is not an evaluation report", input.display()))?;
            eval::write_report(&report, &out, true)?;
            print_summary(&report);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn print_summary(r: &EvalReport) {
    println!("images {}  psnr {:.2}  clean bra {:.3}", r.images, r.psnr, r.clean_bra);
    for a in &r.attacks {
        println!("  {:<14} {:<9} strength {:.2}  bra {:.3}  flagged {:.3}", a.attack, format!("{:?}", a.kind).to_lowercase(), a.strength, a.bra, a.flagged);
    }
    for s in &r.strengths {
        println!(
            "strength {:.2}: benign {:.3}  malicious {:.3}  gap {:.3}  f1 {:.3}",
            s.strength, s.benign_bra, s.malicious_bra, s.gap, s.detection.f1
        );
    }
}
