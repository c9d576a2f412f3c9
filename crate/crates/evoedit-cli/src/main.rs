//! `evoedit` command-line driver.
//!
//! Artifacts of the training phases live in one work directory (`--workdir`,
//! else `$V4E_CACHE`, else `./v4e-work`) with fixed names, and every command
//! that writes there updates `manifest.json`.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use evoedit::backbone::Dit;
use evoedit::check::run_checks;
use evoedit::evalbench::{
    report_csv, report_table, run_ablations, run_benchmark, write_report, AblationVariant, BenchSettings,
};
use evoedit::icg;
use evoedit::image::Image;
use evoedit::pipeline::{
    build_training_set, infer_edit_counted, precompute_tail_cache, pretrain_teacher, pretrain_vae, train_student,
    training_triplets, JsonlLog, Prepared, StudentSetup, TrainConfig, TrainedModel, TAIL_CACHE_FILE,
    TEACHER_FILE, VAE_FILE,
};
use evoedit::synthworld::{balanced_sampler, export_dataset, EditTask, TaskDistribution};
use evoedit::vae3d::Vae3d;

use manifest::RunManifest;

const VAE: &str = VAE_FILE;
const TAIL_CACHE: &str = TAIL_CACHE_FILE;
const TEACHER: &str = TEACHER_FILE;

#[derive(Parser)]
#[command(name = "evoedit", version, about = "Image editing as a short video: synthetic data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat TOML training config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Artifact directory (default: $V4E_CACHE or ./v4e-work).
    #[arg(long)]
    workdir: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => TrainConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn workdir(&self) -> PathBuf {
        self.workdir
            .clone()
            .or_else(|| std::env::var_os("V4E_CACHE").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("v4e-work"))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Export synthetic triplets (PNGs plus manifest.json).
    Synth {
        #[arg(long)]
        n: usize,
        /// `all` or a comma-separated list of task names / slugs.
        #[arg(long, default_value = "all")]
        tasks: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        resolution: usize,
        /// Also export evolution clips with this many frames.
        #[arg(long)]
        clip_frames: Option<usize>,
    },
    /// Compile an instruction into a refined evolution caption.
    Caption {
        instruction: Vec<String>,
        #[arg(long)]
        json: bool,
    },
    /// Train the video autoencoder.
    PretrainVae(Common),
    /// Encode every training target into the tail-latent cache.
    PrecomputeTail(Common),
    /// Train the first+last frame teacher.
    PretrainTeacher(Common),
    /// Distill the student from the frozen teacher.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "full")]
        variant: String,
        /// Overrides the config's student step budget.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Edit one image with a trained student.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        instruction: String,
        #[arg(long, default_value_t = evoedit::flow::DEFAULT_SAMPLING_STEPS)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        /// Student checkpoint (default: <workdir>/student-full.ckpt).
        #[arg(long)]
        student: Option<PathBuf>,
    },
    /// Benchmark a student on held-out triplets.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        student: Option<PathBuf>,
        /// Triplets per task (default from config).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        csv: bool,
        /// Also write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train and benchmark the ablation variants.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// `all` or a comma-separated subset of full,no_distill,no_tail,teacher_no_icg.
        #[arg(long, default_value = "all")]
        variants: String,
        #[arg(long)]
        csv: bool,
    },
    /// Run the invariant suite.
    Check {
        #[arg(long)]
        json: bool,
    },
}

fn parse_tasks(s: &str) -> Result<Vec<EditTask>> {
    s.split(',').map(|t| Ok(t.trim().parse::<EditTask>()?)).collect()
}

fn parse_variants(s: &str) -> Result<Vec<AblationVariant>> {
    if s == "all" {
        return Ok(AblationVariant::ALL.to_vec());
    }
    s.split(',').map(|v| Ok(v.trim().parse::<AblationVariant>()?)).collect()
}

fn need(dir: &Path, name: &str, producer: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    if !p.exists() {
        bail!("{} not found; run `evoedit {producer}` first", p.display());
    }
    Ok(p)
}

fn progress(every: usize) -> impl FnMut(&evoedit::pipeline::StepLog) {
    move |l| {
        if every > 0 && l.step % every == 0 {
            eprintln!("{} step {} loss {:.5} lr {:.2e}", l.phase, l.step, l.loss, l.lr);
        }
    }
}

fn load_prepared(cfg: &TrainConfig, dir: &Path) -> Result<Prepared> {
    need(dir, VAE, "pretrain-vae")?;
    need(dir, TAIL_CACHE, "precompute-tail")?;
    need(dir, TEACHER, "pretrain-teacher")?;
    Ok(Prepared::load(cfg, dir)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            n,
            tasks,
            out,
            seed,
            resolution,
            clip_frames,
        } => {
            let dist = if tasks == "all" {
                TaskDistribution::published_shares()
            } else {
                TaskDistribution::only(&parse_tasks(&tasks)?)?
            };
            let triplets: Vec<_> = balanced_sampler(&dist, seed).resolution(resolution).take(n).collect();
            export_dataset(&out, &triplets, clip_frames)?;
            println!("wrote {} triplets to {}", triplets.len(), out.display());
        }
        Command::Caption { instruction, json } => {
            let text = instruction.join(" ");
            let caption = icg::compile(&text)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&caption)?);
            } else {
                println!("{}", caption.text);
            }
        }
        Command::PretrainVae(c) => {
            let cfg = c.config()?;
            let dir = c.workdir();
            let mut manifest = RunManifest::open(&dir, &cfg)?;
            let mut log = JsonlLog::create(&dir.join("logs/vae.jsonl"))?;
            let mut echo = progress(250);
            let vae = pretrain_vae(&cfg, &training_triplets(&cfg, cfg.train_triplets), |l| {
                let _ = log.write(l);
                echo(l);
            })?;
            log.flush()?;
            vae.save(&dir.join(VAE))?;
            manifest.record("pretrain-vae", &[VAE, "logs/vae.jsonl"])?;
            println!("{}", dir.join(VAE).display());
        }
        Command::PrecomputeTail(c) => {
            let cfg = c.config()?;
            let dir = c.workdir();
            let mut manifest = RunManifest::open(&dir, &cfg)?;
            let vae = Vae3d::load(&need(&dir, VAE, "pretrain-vae")?)?;
            let triplets = training_triplets(&cfg, cfg.train_triplets);
            let cache = precompute_tail_cache(&triplets, &vae)?;
            cache.save(&dir.join(TAIL_CACHE))?;
            manifest.record("precompute-tail", &[TAIL_CACHE])?;
            println!("cached {} tail latents in {}", cache.len(), dir.join(TAIL_CACHE).display());
        }
        Command::PretrainTeacher(c) => {
            let cfg = c.config()?;
            let dir = c.workdir();
            let mut manifest = RunManifest::open(&dir, &cfg)?;
            let vae = Vae3d::load(&need(&dir, VAE, "pretrain-vae")?)?;
            let data = build_training_set(&cfg, &vae, training_triplets(&cfg, cfg.train_triplets))?;
            let mut log = JsonlLog::create(&dir.join("logs/teacher.jsonl"))?;
            let mut echo = progress(100);
            let ckpt = dir.join("checkpoints");
            let teacher = pretrain_teacher(&cfg, &data, cfg.teacher_steps, Some(&ckpt), |l| {
                let _ = log.write(l);
                echo(l);
            })?;
            log.flush()?;
            teacher.save(&dir.join(TEACHER), cfg.teacher_steps)?;
            manifest.record("pretrain-teacher", &[TEACHER, "logs/teacher.jsonl"])?;
            println!("{}", dir.join(TEACHER).display());
        }
        Command::Train { common, variant, steps } => {
            let variant: AblationVariant = variant.parse()?;
            let base = common.config()?;
            let cfg = variant.apply(&base);
            let dir = common.workdir();
            let mut manifest = RunManifest::open(&dir, &base)?;
            let p = load_prepared(&cfg, &dir)?;
            let setup = StudentSetup {
                teacher: &p.teacher.ema,
                vae: &p.vae,
                data: &p.data,
                cache: &p.cache,
            };
            let log_name = format!("logs/student-{}.jsonl", variant.name());
            let mut log = JsonlLog::create(&dir.join(&log_name))?;
            let mut echo = progress(25);
            let ckpt = dir.join("checkpoints");
            let model = train_student(&cfg, &setup, steps.unwrap_or(cfg.student_steps), Some(&ckpt), |l| {
                let _ = log.write(l);
                echo(l);
            })?;
            log.flush()?;
            let name = format!("student-{}.ckpt", variant.name());
            model.save(&dir.join(&name), model.history.len())?;
            manifest.record("train", &[name.as_str(), log_name.as_str()])?;
            println!("{}", dir.join(name).display());
        }
        Command::Infer {
            common,
            src,
            instruction,
            steps,
            out,
            student,
        } => {
            let cfg = common.config()?;
            let dir = common.workdir();
            let student = match student {
                Some(p) => p,
                None => need(&dir, "student-full.ckpt", "train")?,
            };
            let model: Dit = TrainedModel::load(&student)?.ema;
            let vae = Vae3d::load(&need(&dir, VAE, "pretrain-vae")?)?;
            let source = Image::load_png(&src)?;
            let (edited, calls) =
                infer_edit_counted(&model, &vae, &source, &instruction, cfg.frames, steps, cfg.seed)?;
            edited.save_png(&out)?;
            println!("wrote {} ({calls} model evaluations)", out.display());
        }
        Command::Eval {
            common,
            student,
            n,
            csv,
            report,
        } => {
            let cfg = common.config()?;
            let dir = common.workdir();
            let student = match student {
                Some(p) => p,
                None => need(&dir, "student-full.ckpt", "train")?,
            };
            let model = TrainedModel::load(&student)?.ema;
            let vae = Vae3d::load(&need(&dir, VAE, "pretrain-vae")?)?;
            let mut settings = BenchSettings::from_config(&cfg);
            if let Some(n) = n {
                settings.n_per_task = n;
            }
            let r = run_benchmark(&model, &vae, &settings)?;
            if let Some(path) = report {
                write_report(&path, &r)?;
            }
            print!("{}", if csv { report_csv(&r) } else { report_table(&r) });
        }
        Command::Ablate { common, variants, csv } => {
            let cfg = common.config()?;
            let dir = common.workdir();
            let variants = parse_variants(&variants)?;
            let mut manifest = RunManifest::open(&dir, &cfg)?;
            let p = load_prepared(&cfg, &dir)?;
            let settings = BenchSettings::from_config(&cfg);
            let (table, models) = run_ablations(&variants, &p, &cfg, &settings, |v, l| {
                if l.step % 50 == 0 {
                    eprintln!("{} step {} loss {:.5}", v.name(), l.step, l.loss);
                }
            })?;
            let mut names = vec!["ablation.json".to_string()];
            for (v, m) in &models {
                let name = format!("student-{}.ckpt", v.name());
                m.save(&dir.join(&name), m.history.len())?;
                names.push(name);
            }
            write_report(&dir.join("ablation.json"), &table)?;
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            manifest.record("ablate", &refs)?;
            print!("{}", if csv { table.to_csv() } else { table.to_text() });
        }
        Command::Check { json } => {
            let outcomes = run_checks();
            if json {
                println!("{}", serde_json::to_string_pretty(&outcomes)?);
            } else {
                for o in &outcomes {
                    println!("{} {:<46} {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
                }
            }
            let failed = outcomes.iter().filter(|o| !o.passed).count();
            if failed > 0 {
                bail!("{failed} check(s) failed");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
