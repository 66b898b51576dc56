use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use styleswap::config::RunConfig;
use styleswap::eval::MetricsReport;
use styleswap::gradcheck::{self, TOLERANCE};
use styleswap::pipeline::{self, generate_file, run_ablation, run_pipeline, Runner, Variant};
use styleswap::store;
use styleswap::styledata::{PretrainMode, Style, TaskKind};
use styleswap::{Model32, Selector};

#[derive(Args, Clone)]
struct Common {
    /// Run directory holding data, checkpoints, adapters and reports.
    #[arg(long, default_value = "run", global = true)]
    dir: PathBuf,
    /// key=value config file (defaults to the run directory's run.cfg).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// toy or paper.
    #[arg(long, global = true)]
    preset: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Extra key=value override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Args, Clone, Copy)]
struct VariantArgs {
    /// Adapter pretraining mode: inverse-para or denoise.
    #[arg(long, default_value = "inverse-para")]
    mode: PretrainMode,
    /// Step-2 trainable parameters (defaults to the config's `trainable`).
    #[arg(long)]
    trainable: Option<Selector>,
    /// Run Step 2 with fresh identity adapters instead of the style-less set.
    #[arg(long)]
    no_s0: bool,
}

impl VariantArgs {
    fn variant(self, cfg: &RunConfig) -> Variant {
        Variant {
            mode: self.mode,
            selector: self.trainable.unwrap_or(cfg.trainable),
            no_s0: self.no_s0,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write every corpus under <dir>/data.
    GenData,
    /// Step 1: train one style adapter.
    TrainAdapter {
        #[arg(long)]
        style: Style,
        #[arg(long, default_value = "inverse-para")]
        mode: PretrainMode,
    },
    /// Step 2: fine-tune a task with the style-less adapter installed.
    TrainTask {
        #[arg(long)]
        task: TaskKind,
        #[command(flatten)]
        variant: VariantArgs,
    },
    /// Step 3: decode with a task model and a swapped-in style adapter.
    Generate {
        #[arg(long)]
        task: TaskKind,
        #[arg(long)]
        style: Style,
        #[arg(long)]
        beam: Option<usize>,
        #[command(flatten)]
        variant: VariantArgs,
        /// One token sequence per line (defaults to the task's test sources).
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Decode the test split with every adapter and write reports.
    Evaluate {
        #[arg(long)]
        task: TaskKind,
        #[command(flatten)]
        variant: VariantArgs,
    },
    /// Steps 1-3 end to end with the default variant.
    Pipeline {
        #[arg(long, value_delimiter = ',', default_values_t = TaskKind::ALL.to_vec())]
        tasks: Vec<TaskKind>,
    },
    /// Finite-difference check of every op and of the full model loss.
    Gradcheck {
        /// Scalar parameters probed in the full-loss check.
        #[arg(long, default_value_t = 20)]
        probes: usize,
    },
    /// The adapter-mode x trainable-group grid plus the no-s0 variant.
    Ablate {
        #[arg(long, value_delimiter = ',', default_values_t = vec![TaskKind::Headline])]
        tasks: Vec<TaskKind>,
    },
}

#[derive(Parser)]
#[command(
    name = "styleswap",
    version,
    about = "Swappable style adapters for a toy encoder-decoder"
)]
struct Full {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

fn resolve_config(c: &Common) -> Result<RunConfig> {
    let mut text = String::new();
    let stamp = c.dir.join("run.cfg");
    let base = c
        .config
        .as_deref()
        .or_else(|| stamp.exists().then_some(stamp.as_path()));
    if let Some(p) = base {
        text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        text.push('\n');
    }
    if let Some(p) = &c.preset {
        text.push_str(&format!("preset={p}\n"));
    }
    if let Some(s) = c.seed {
        text.push_str(&format!("seed={s}\n"));
    }
    for kv in &c.set {
        if !kv.contains('=') {
            bail!("--set expects KEY=VALUE, got `{kv}`");
        }
        text.push_str(kv);
        text.push('\n');
    }
    Ok(RunConfig::parse(&text)?)
}

fn print_report(label: &str, r: &MetricsReport) {
    let markers: Vec<String> = Style::STYLED
        .iter()
        .map(|s| format!("{s}={:.3}", r.marker_rate(*s)))
        .collect();
    println!(
        "{label}: n={} em={:.4} r1={:.4} r2={:.4} rl={:.4} ppl={:.2} marker[{}]",
        r.n,
        r.exact_match,
        r.r1,
        r.r2,
        r.rl,
        r.ppl,
        markers.join(" ")
    );
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if !path.exists() {
        bail!("{} not found; run `{hint}` first", path.display());
    }
    Ok(())
}

fn run(common: Common, command: Command) -> Result<()> {
    if let Command::Gradcheck { probes } = command {
        let seed = common.seed.unwrap_or(1);
        let started = Instant::now();
        let mut worst = 0.0f64;
        for (name, e) in gradcheck::op_checks(seed)? {
            println!("op {name:<24} rel_error={e:.3e}");
            worst = worst.max(e);
        }
        for p in gradcheck::model_check(gradcheck::check_config(), probes, seed)? {
            println!(
                "param {}[{}] analytic={:.6e} numeric={:.6e} rel_error={:.3e}",
                p.name, p.index, p.analytic, p.numeric, p.rel_error
            );
            worst = worst.max(p.rel_error);
        }
        println!(
            "max relative error {worst:.3e} (tolerance {TOLERANCE:e}) in {:.1}s",
            started.elapsed().as_secs_f64()
        );
        if worst.is_nan() || worst >= TOLERANCE {
            bail!("gradient check failed: max relative error {worst:.3e} >= {TOLERANCE:e}");
        }
        return Ok(());
    }

    let cfg = resolve_config(&common)?;
    let dir = common.dir.as_path();
    let mut log = io::stderr();
    match command {
        Command::Gradcheck { .. } => unreachable!("handled above"),
        Command::GenData => {
            let r = Runner::<f32>::open(cfg, dir, &mut log)?;
            println!("corpora written to {}", r.dir.join("data").display());
        }
        Command::TrainAdapter { style, mode } => {
            let mut r = Runner::<f32>::open(cfg, dir, &mut log)?;
            r.adapter(style, mode)?;
            r.flush();
            println!("{}", r.adapter_path(style, mode).display());
        }
        Command::TrainTask { task, variant } => {
            let v = variant.variant(&cfg);
            let mut r = Runner::<f32>::open(cfg, dir, &mut log)?;
            r.task_model(task, v)?;
            r.flush();
            println!("{}", r.task_path(task, v).display());
        }
        Command::Generate {
            task,
            style,
            beam,
            variant,
            input,
            output,
        } => {
            let v = variant.variant(&cfg);
            let r = Runner::<f32>::open(cfg, dir, &mut log)?;
            let task_path = r.task_path(task, v);
            let adapter_path = r.adapter_path(style, v.mode);
            require(&task_path, &format!("train-task --task {task}"))?;
            require(
                &adapter_path,
                &format!("train-adapter --style {style} --mode {}", v.mode),
            )?;
            let mut model: Model32 = store::load_checkpoint(&task_path)?;
            eprintln!("base checksum {}", model.base_checksum());
            let file = store::read_adapter::<f32>(&adapter_path)?;
            if v.selector == Selector::Enc {
                store::check_fingerprint(&file, &model)?;
            }
            store::install(&file, &mut model)?;
            eprintln!(
                "base checksum {} (adapter {})",
                model.base_checksum(),
                adapter_path.display()
            );
            let mut dc = r.cfg.decode_config();
            if let Some(b) = beam {
                if b == 0 {
                    bail!("--beam must be positive");
                }
                dc.beam_size = b;
            }
            let input = input.unwrap_or_else(|| r.dir.join(format!("data/{task}.test.src")));
            let output = output.unwrap_or_else(|| {
                r.dir
                    .join(format!("outputs/{task}.{}.{style}.beam{}.txt", v.name(), dc.beam_size))
            });
            let n = generate_file(&model, &input, &output, &dc)?;
            println!("{n} outputs written to {}", output.display());
        }
        Command::Evaluate { task, variant } => {
            let v = variant.variant(&cfg);
            let mut r = Runner::<f32>::open(cfg, dir, &mut log)?;
            let mut model = r.task_model(task, v)?;
            let lms = pipeline::metric_lms(&r.corpora, task, &r.cfg)?;
            for s in Style::ALL {
                let file = r.adapter(s, v.mode)?;
                if v.selector == Selector::Enc {
                    store::check_fingerprint(&file, &model)?;
                }
                let rep = r.evaluate(&mut model, task, v, s, file.adapters, &lms)?;
                print_report(&format!("{task} {} {s}", v.name()), &rep);
            }
            r.flush();
        }
        Command::Pipeline { tasks } => {
            let summary = run_pipeline::<f32>(cfg, dir, &tasks, &mut log)?;
            for ((task, style), rep) in &summary.reports {
                print_report(&format!("{task} {style}"), rep);
            }
            println!("base checksum {}", summary.base_checksum);
            println!("finished in {:.1}s", summary.seconds);
        }
        Command::Ablate { tasks } => {
            let rows = run_ablation::<f32>(cfg, dir, &tasks, &mut log)?;
            for row in &rows {
                print_report(&format!("{} {}", row.task, row.variant.label()), &row.report);
            }
            for t in &tasks {
                println!("table: {}", dir.join(format!("ablation/{t}.tsv")).display());
            }
        }
    }
    io::stdout().flush().ok();
    Ok(())
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let Full { common, command } = Full::parse();
    match run(common, command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
