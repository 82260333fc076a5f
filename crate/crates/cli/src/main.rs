use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mscff::harness::step2::{run_step2, Step2Output};
use mscff::harness::suite::gradient_suite;
use mscff::harness::{
    configure_threads, gen_dataset, run_ablation, run_step1, Checkpoint, Domain, ExperimentConfig,
    PrefinetuneDomain, Step1Output,
};
use mscff::{Error, Result};

#[derive(Parser)]
#[command(
    name = "mscff",
    version,
    about = "Cross-attention fusion experiments on synthetic data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as CSV.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = DataDomain::TaskA)]
        domain: DataDomain,
        /// Number of images (default: the config's train_size).
        #[arg(long)]
        size: Option<usize>,
    },
    /// Self-supervised pre-fine-tune of both backbones.
    Step1 {
        #[command(flatten)]
        common: Common,
    },
    /// Fusion and target-task training. Reuses step-1 checkpoints found in
    /// the output directory, otherwise runs step 1 first.
    Step2 {
        #[command(flatten)]
        common: Common,
    },
    /// The fusion × pre-fine-tune × seed grid.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of every backward pass.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// Quick gradient and pipeline sanity checks.
    Selftest {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// JSON config; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    fusion: Option<Switch>,
    #[arg(long)]
    prefinetune: Option<PrefinetuneDomain>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum DataDomain {
    TaskA,
    TaskB,
    Mismatched,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(f) = self.fusion {
            cfg.fusion_on = matches!(f, Switch::On);
        }
        if let Some(d) = self.prefinetune {
            cfg.prefinetune = d;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn step1(cfg: &ExperimentConfig) -> Result<Step1Output> {
    let out = run_step1(cfg)?;
    let dir = &cfg.out_dir;
    write(&dir.join("step1_losses.csv"), &out.loss_csv())?;
    out.global.save(&dir.join("global.ckpt"))?;
    out.windowed.save(&dir.join("windowed.ckpt"))?;
    println!("wrote {0}/global.ckpt and {0}/windowed.ckpt", dir.display());
    if let (Some(r), Some(c)) = (
        out.reconstruction_curve.last(),
        out.contrastive_curve.last(),
    ) {
        println!("final reconstruction loss {r:.6}, contrastive loss {c:.6}");
    }
    Ok(out)
}

fn step2(cfg: &ExperimentConfig) -> Result<Step2Output> {
    let dir = &cfg.out_dir;
    let (g, w) = (dir.join("global.ckpt"), dir.join("windowed.ckpt"));
    let s1 = if g.exists() && w.exists() {
        println!("using step-1 checkpoints from {}", dir.display());
        Step1Output {
            global: Checkpoint::load(&g)?,
            windowed: Checkpoint::load(&w)?,
            reconstruction_curve: Vec::new(),
            contrastive_curve: Vec::new(),
        }
    } else {
        step1(cfg)?
    };
    let out = run_step2(cfg, &s1)?;
    write(&dir.join("metrics.csv"), &out.report.to_csv())?;
    write(&dir.join("confusion.csv"), &out.report.confusion_csv())?;
    out.checkpoint.save(&dir.join("model.ckpt"))?;
    println!("wrote {}", dir.join("model.ckpt").display());
    println!(
        "final val accuracy {:.4} (fusion {}, pre-fine-tune {}, seed {})",
        out.report.final_val_accuracy(),
        if cfg.fusion_on { "on" } else { "off" },
        cfg.prefinetune,
        cfg.seed
    );
    Ok(out)
}

fn run(cli: Cli) -> Result<bool> {
    configure_threads()?;
    match cli.command {
        Command::GenData {
            common,
            domain,
            size,
        } => {
            let cfg = common.config()?;
            let domain = match domain {
                DataDomain::TaskA => Domain::TaskA,
                DataDomain::TaskB => Domain::TaskB,
                DataDomain::Mismatched => Domain::Mismatched,
            };
            let size = size.unwrap_or(cfg.train_size);
            let data =
                gen_dataset(domain, size, cfg.seed).map_err(|e| Error::Config(e.to_string()))?;
            let path = cfg.out_dir.join(format!("{domain}_seed{}.csv", cfg.seed));
            write(&path, &data.to_csv())?;
        }
        Command::Step1 { common } => {
            step1(&common.config()?)?;
        }
        Command::Step2 { common } => {
            step2(&common.config()?)?;
        }
        Command::Ablate { common } => {
            let cfg = common.config()?;
            let report = run_ablation(&cfg)?;
            let dir = cfg.out_dir.join("ablation");
            report.write(&dir)?;
            println!("wrote {} runs to {}", report.runs.len(), dir.display());
            for fusion_on in [true, false] {
                for d in PrefinetuneDomain::ALL {
                    println!(
                        "fusion {:<3} pre-fine-tune {:<10} median val accuracy {:.4}",
                        if fusion_on { "on" } else { "off" },
                        d,
                        report.median_accuracy(Some(fusion_on), Some(d))
                    );
                }
            }
        }
        Command::Gradcheck { common, instances } => {
            let cfg = common.config()?;
            let reports = gradient_suite(instances, cfg.seed)?;
            let failed = reports.iter().filter(|r| !r.pass).count();
            for r in &reports {
                println!("{r}");
            }
            println!("{} checks, {failed} failed", reports.len());
            return Ok(failed == 0);
        }
        Command::Selftest { common } => {
            let cfg = common.config()?;
            return selftest(&cfg);
        }
    }
    Ok(true)
}

fn selftest(cfg: &ExperimentConfig) -> Result<bool> {
    let mut ok = true;
    let mut line = |name: &str, pass: bool, detail: String| {
        ok &= pass;
        println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    };

    let reports = gradient_suite(2, cfg.seed)?;
    let failed = reports.iter().filter(|r| !r.pass).count();
    line(
        "gradients",
        failed == 0,
        format!("{} checks, {failed} failed", reports.len()),
    );

    let tiny = ExperimentConfig {
        step1_steps: 2,
        step2_steps: 2,
        pretrain_size: 8,
        train_size: 8,
        val_size: 8,
        batch_size: 4,
        ..cfg.clone()
    };
    let a = run_step1(&tiny)?;
    let b = run_step1(&tiny)?;
    line(
        "step1 determinism",
        a.global.to_bytes() == b.global.to_bytes() && a.loss_csv() == b.loss_csv(),
        "two runs compared byte for byte".into(),
    );
    let s2 = run_step2(&tiny, &a)?;
    let back = Checkpoint::from_bytes(&s2.checkpoint.to_bytes())?;
    line(
        "checkpoint round trip",
        back == s2.checkpoint,
        format!("{} tensors", back.tensors.len()),
    );
    let off = run_step2(
        &ExperimentConfig {
            fusion_on: false,
            ..tiny
        },
        &a,
    )?;
    line(
        "fusion bypass",
        off.report.fusion_evaluations == 0,
        format!("{} fusion evaluations", off.report.fusion_evaluations),
    );
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                e if e.is_numeric() => 3,
                _ => 1,
            })
        }
    }
}
