//! End-to-end runs: corpora, base pretraining, Step 1 (style adapters),
//! Step 2 (task fine-tuning with the style-less adapter), Step 3 (adapter
//! swap and generation), and the ablation grid.
//!
//! Every artifact lives under one run directory. Artifacts that already exist
//! are loaded instead of retrained, so `pipeline` followed by `ablate` shares
//! the base, the adapters and the default task models. A run directory is
//! bound to one configuration through its `run.cfg`.
//!
//! ```text
//! run.cfg
//! data/       corpus files and manifest.txt
//! base.ckpt   pretrained base
//! adapters/   <style>.<mode>.adapter
//! tasks/      <task>.<variant>.ckpt
//! outputs/    <task>.<variant>.<style>.txt
//! reports/    <task>.<variant>.<style>.metrics
//! ablation/   <task>.tsv and per-cell reports
//! logs/       train.log
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::RunConfig;
use crate::decode::{generate, DecodeConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate_run, MetricLms, MetricsReport, NgramLm};
use crate::model::{AdapterSet, Model, Selector};
use crate::scalar::Scalar;
use crate::store::{self, AdapterFile};
use crate::styledata::{
    build_pretrain_corpus, build_style_corpus, gen_task_pairs, PretrainMode, SeqPair, Split, Style, StyleCorpus,
    TaskKind, TaskPair, Vocab,
};
use crate::training::{pretrain_base, train_style_adapter, train_task, LineMetrics, TrainReport};

/// Every generated corpus of a run.
#[derive(Clone, Debug)]
pub struct Corpora {
    pub pretrain: Split<SeqPair>,
    pub styles: BTreeMap<Style, StyleCorpus>,
    pub tasks: BTreeMap<TaskKind, Split<TaskPair>>,
}

const SALT_PRETRAIN: u64 = 1;
const SALT_STYLE: u64 = 10;
const SALT_TASK: u64 = 20;

pub fn build_corpora(cfg: &RunConfig) -> Result<Corpora> {
    let pretrain = build_pretrain_corpus(
        cfg.pretrain_sentences,
        cfg.derived_seed(SALT_PRETRAIN),
        cfg.pretrain_noise,
    )?;
    let styles = Style::ALL
        .into_iter()
        .map(|s| {
            let c = build_style_corpus(
                s,
                cfg.style_sentences,
                cfg.derived_seed(SALT_STYLE + s as u64),
                cfg.noise,
            )?;
            Ok((s, c))
        })
        .collect::<Result<_>>()?;
    let tasks = TaskKind::ALL
        .into_iter()
        .map(|t| {
            Ok((
                t,
                gen_task_pairs(cfg.derived_seed(SALT_TASK + t as u64), cfg.task_pairs, t)?,
            ))
        })
        .collect::<Result<_>>()?;
    Ok(Corpora {
        pretrain,
        styles,
        tasks,
    })
}

pub fn task_seq_pairs(split: &Split<TaskPair>) -> Split<SeqPair> {
    let conv = |v: &[TaskPair]| v.iter().map(|p| (p.source.clone(), p.target.clone())).collect();
    Split {
        train: conv(&split.train),
        valid: conv(&split.valid),
        test: conv(&split.test),
    }
}

/// Plain LM on the task's training targets and one LM per styled style on
/// that style's training sentences.
pub fn metric_lms(corpora: &Corpora, task: TaskKind, cfg: &RunConfig) -> Result<MetricLms> {
    let v = cfg.model.vocab_size;
    let targets: Vec<Vec<usize>> = corpora.tasks[&task].train.iter().map(|p| p.target.clone()).collect();
    let plain = NgramLm::train(&targets, 2, cfg.lm_k, v, "plain")?;
    let styles = Style::STYLED
        .into_iter()
        .map(|s| {
            Ok((
                s,
                NgramLm::train(&corpora.styles[&s].sentences.train, 2, cfg.lm_k, v, s.as_str())?,
            ))
        })
        .collect::<Result<_>>()?;
    Ok(MetricLms { plain, styles })
}

// ---------------------------------------------------------------------------
// corpus files

pub fn write_sequences(path: &Path, seqs: &[Vec<usize>]) -> Result<()> {
    let vocab = Vocab::new();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in seqs {
        writeln!(w, "{}", vocab.render(s)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One sequence per line; a bad token is reported with its 1-based line.
pub fn read_sequences(path: &Path) -> Result<Vec<Vec<usize>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let vocab = Vocab::new();
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            vocab.parse(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

fn write_pairs(dir: &Path, stem: &str, split: &Split<SeqPair>) -> Result<()> {
    for (part, pairs) in [("train", &split.train), ("valid", &split.valid), ("test", &split.test)] {
        let src: Vec<Vec<usize>> = pairs.iter().map(|p| p.0.clone()).collect();
        let tgt: Vec<Vec<usize>> = pairs.iter().map(|p| p.1.clone()).collect();
        write_sequences(&dir.join(format!("{stem}.{part}.src")), &src)?;
        write_sequences(&dir.join(format!("{stem}.{part}.tgt")), &tgt)?;
    }
    Ok(())
}

/// Writes every corpus as text files plus `manifest.txt`.
pub fn write_corpora(corpora: &Corpora, cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!("seed={}\n", cfg.seed);
    let mut note = |name: &str, n: usize, seed: u64| {
        let (a, b) = Split::<()>::boundaries(n);
        manifest.push_str(&format!(
            "{name}.seed={seed}\n{name}.size={n}\n{name}.split=0..{a},{a}..{b},{b}..{n}\n"
        ));
    };
    note("pretrain", cfg.pretrain_sentences, cfg.derived_seed(SALT_PRETRAIN));
    for s in Style::ALL {
        note(s.as_str(), cfg.style_sentences, cfg.derived_seed(SALT_STYLE + s as u64));
    }
    for t in TaskKind::ALL {
        note(t.as_str(), cfg.task_pairs, cfg.derived_seed(SALT_TASK + t as u64));
    }
    write_pairs(dir, "pretrain", &corpora.pretrain)?;
    for (s, c) in &corpora.styles {
        for (part, v) in [
            ("train", &c.sentences.train),
            ("valid", &c.sentences.valid),
            ("test", &c.sentences.test),
        ] {
            write_sequences(&dir.join(format!("{s}.{part}.txt")), v)?;
        }
        write_pairs(dir, &format!("{s}.inverse-para"), &c.para)?;
        write_pairs(dir, &format!("{s}.denoise"), &c.noise)?;
    }
    for (t, split) in &corpora.tasks {
        write_pairs(dir, t.as_str(), &task_seq_pairs(split))?;
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| Error::io(path, e))
}

/// Decodes every line of `input` into `output`, in order. An empty input file
/// yields an empty output file.
pub fn generate_file<T: Scalar>(model: &Model<T>, input: &Path, output: &Path, cfg: &DecodeConfig) -> Result<usize> {
    let sources = read_sequences(input)?;
    let mut outs = Vec::with_capacity(sources.len());
    for (i, s) in sources.iter().enumerate() {
        let r = generate(model, s, cfg).map_err(|e| Error::Parse {
            path: input.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        outs.push(r.tokens);
    }
    write_sequences(output, &outs)?;
    Ok(outs.len())
}

// ---------------------------------------------------------------------------
// run directory

/// Which Step-2 model a set of outputs came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Variant {
    /// How the adapters (including the style-less one) were pretrained.
    pub mode: PretrainMode,
    pub selector: Selector,
    /// Step 2 ran with fresh identity adapters instead of the style-less set.
    pub no_s0: bool,
}

impl Variant {
    pub const DEFAULT: Variant = Variant {
        mode: PretrainMode::InversePara,
        selector: Selector::Enc,
        no_s0: false,
    };

    pub fn name(&self) -> String {
        if self.no_s0 {
            format!("{}.{}.no-s0", self.mode, self.selector)
        } else {
            format!("{}.{}", self.mode, self.selector)
        }
    }

    /// Short label used in ablation tables.
    pub fn label(&self) -> String {
        if self.no_s0 {
            "no-s0".to_string()
        } else {
            format!("{}/{}", self.mode, self.selector)
        }
    }
}

/// A run directory plus the state needed to fill it.
pub struct Runner<'a, T> {
    pub cfg: RunConfig,
    pub dir: PathBuf,
    pub corpora: Corpora,
    log: &'a mut dyn Write,
    metrics: LineMetrics<BufWriter<File>>,
    base: Option<Model<T>>,
    started: Instant,
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

impl<'a, T: Scalar> Runner<'a, T> {
    /// Opens (or creates) `dir` for `cfg`. A directory written under a
    /// different configuration is refused.
    pub fn open(cfg: RunConfig, dir: &Path, log: &'a mut dyn Write) -> Result<Self> {
        cfg.validate()?;
        mkdir(dir)?;
        let stamp = dir.join("run.cfg");
        let text = cfg.to_kv();
        if stamp.exists() {
            let old = fs::read_to_string(&stamp).map_err(|e| Error::io(&stamp, e))?;
            if old != text {
                return Err(Error::Config(format!(
                    "{} was created with a different configuration; use a fresh directory",
                    dir.display()
                )));
            }
        } else {
            fs::write(&stamp, &text).map_err(|e| Error::io(&stamp, e))?;
        }
        for sub in ["data", "adapters", "tasks", "outputs", "reports", "ablation", "logs"] {
            mkdir(&dir.join(sub))?;
        }
        let corpora = build_corpora(&cfg)?;
        if !dir.join("data/manifest.txt").exists() {
            write_corpora(&corpora, &cfg, &dir.join("data"))?;
        }
        let log_path = dir.join("logs/train.log");
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        Ok(Self {
            cfg,
            dir: dir.to_path_buf(),
            corpora,
            log,
            metrics: LineMetrics(BufWriter::new(file)),
            base: None,
            started: Instant::now(),
        })
    }

    fn note(&mut self, msg: impl AsRef<str>) {
        let _ = writeln!(
            self.log,
            "[{:7.1}s] {}",
            self.started.elapsed().as_secs_f64(),
            msg.as_ref()
        );
        let _ = self.log.flush();
    }

    fn note_report(&mut self, what: &str, r: &TrainReport) {
        self.note(format!(
            "{what}: {} epochs, {} steps, loss {:.4} -> {:.4}, valid {:?}",
            r.epochs_run,
            r.steps,
            r.initial_loss(),
            r.final_loss(50),
            r.valid.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>()
        ));
    }

    pub fn base_path(&self) -> PathBuf {
        self.dir.join("base.ckpt")
    }

    pub fn adapter_path(&self, style: Style, mode: PretrainMode) -> PathBuf {
        self.dir.join(format!("adapters/{style}.{mode}.adapter"))
    }

    pub fn task_path(&self, task: TaskKind, v: Variant) -> PathBuf {
        self.dir.join(format!("tasks/{task}.{}.ckpt", v.name()))
    }

    /// The pretrained base, trained and saved on first use. Always the
    /// reloaded checkpoint, so fresh and resumed runs behave identically.
    pub fn base(&mut self) -> Result<Model<T>> {
        if let Some(m) = &self.base {
            return Ok(m.clone());
        }
        let path = self.base_path();
        if !path.exists() {
            self.note(format!(
                "pretraining base on {} sentences for {} epochs",
                self.corpora.pretrain.train.len(),
                self.cfg.pretrain_epochs
            ));
            let mut model = Model::<T>::build(self.cfg.model.clone())?;
            let tc = self.cfg.train_config(self.cfg.pretrain_epochs, 1);
            let r = pretrain_base(&mut model, &self.corpora.pretrain, &tc, &mut self.metrics)?;
            self.note_report("pretrain", &r);
            store::save_checkpoint(&model, &path)?;
        }
        let model: Model<T> = store::load_checkpoint(&path)?;
        self.note(format!("base checksum {}", model.base_checksum()));
        self.base = Some(model.clone());
        Ok(model)
    }

    /// Step 1 for one style and mode; loads the adapter file when present.
    pub fn adapter(&mut self, style: Style, mode: PretrainMode) -> Result<AdapterFile<T>> {
        let path = self.adapter_path(style, mode);
        if !path.exists() {
            let mut base = self.base()?;
            let fp = store::base_fingerprint(&base);
            let tc = self
                .cfg
                .train_config(self.cfg.adapter_epochs, 100 + 10 * style as u64 + mode as u64);
            let corpus = &self.corpora.styles[&style];
            let (set, r) = train_style_adapter(&mut base, corpus, mode, &tc, &mut self.metrics)?;
            if r.frozen_checksum_before != r.frozen_checksum_after {
                return Err(Error::Input(format!("step 1 {style}/{mode} changed frozen parameters")));
            }
            self.note_report(&format!("step 1 {style} {mode}"), &r);
            store::save_adapter(&set, mode, &fp, &path)?;
        }
        store::read_adapter(&path)
    }

    /// Step 2 for one task and variant; loads the checkpoint when present.
    pub fn task_model(&mut self, task: TaskKind, v: Variant) -> Result<Model<T>> {
        let path = self.task_path(task, v);
        if !path.exists() {
            let mut model = self.base()?;
            let s0 = if v.no_s0 {
                AdapterSet::fresh(&self.cfg.model, Style::S0.as_str(), self.cfg.derived_seed(0xada9))
            } else {
                self.adapter(Style::S0, v.mode)?.adapters
            };
            let pairs = task_seq_pairs(&self.corpora.tasks[&task]);
            let tc = self.cfg.train_config(self.cfg.task_epochs, 200 + task as u64);
            let r = train_task(&mut model, s0, &pairs, v.selector, &tc, &mut self.metrics)?;
            if r.frozen_checksum_before != r.frozen_checksum_after {
                return Err(Error::Input(format!(
                    "step 2 {task}/{} changed frozen parameters",
                    v.name()
                )));
            }
            self.note_report(&format!("step 2 {task} {}", v.name()), &r);
            store::save_checkpoint(&model, &path)?;
        }
        store::load_checkpoint(&path)
    }

    /// Step 3: installs `adapters` on `model`, decodes the task's test split,
    /// writes outputs and a report.
    pub fn evaluate(
        &mut self,
        model: &mut Model<T>,
        task: TaskKind,
        v: Variant,
        style: Style,
        adapters: AdapterSet<T>,
        lms: &MetricLms,
    ) -> Result<MetricsReport> {
        model.swap_adapters(adapters)?;
        let test = &self.corpora.tasks[&task].test;
        let n = if self.cfg.eval_examples == 0 {
            test.len()
        } else {
            self.cfg.eval_examples.min(test.len())
        };
        let dc = self.cfg.decode_config();
        let mut outputs = Vec::with_capacity(n);
        for p in &test[..n] {
            outputs.push(generate(model, &p.source, &dc)?.tokens);
        }
        let refs: Vec<Vec<usize>> = test[..n].iter().map(|p| p.target.clone()).collect();
        let mut report = evaluate_run(&outputs, &refs, lms, &Style::STYLED)?;
        report.bert_proxy = Some(crate::eval::bert_proxy(
            model.params().get("dec.embed").expect("decoder embedding"),
            &outputs,
            &refs,
        )?);
        let stem = format!("{task}.{}.{style}", v.name());
        write_sequences(&self.dir.join(format!("outputs/{stem}.txt")), &outputs)?;
        report.save(&self.dir.join(format!("reports/{stem}.metrics")))?;
        self.note(format!(
            "step 3 {task} {} {style}: em={:.3} r1={:.3} marker=[{}]",
            v.name(),
            report.exact_match,
            report.r1,
            Style::STYLED
                .iter()
                .map(|s| format!("{s}:{:.2}", report.marker_rate(*s)))
                .collect::<Vec<_>>()
                .join(" ")
        ));
        Ok(report)
    }

    pub fn flush(&mut self) {
        let _ = self.metrics.0.flush();
    }
}

/// Result of [`run_pipeline`].
#[derive(Clone, Debug)]
pub struct PipelineSummary {
    pub reports: BTreeMap<(TaskKind, Style), MetricsReport>,
    pub adapter_files: Vec<PathBuf>,
    pub task_checkpoints: Vec<PathBuf>,
    pub base_checksum: String,
    pub seconds: f64,
}

/// Steps 1–3 with the default variant: four inverse-para adapters, one
/// encoder fine-tuning per task, and a report per (task, style).
pub fn run_pipeline<T: Scalar>(
    cfg: RunConfig,
    dir: &Path,
    tasks: &[TaskKind],
    log: &mut dyn Write,
) -> Result<PipelineSummary> {
    let started = Instant::now();
    let mut r = Runner::<T>::open(cfg, dir, log)?;
    let v = Variant {
        selector: r.cfg.trainable,
        ..Variant::DEFAULT
    };
    let base = r.base()?;
    let base_checksum = base.base_checksum();
    let mut adapters = BTreeMap::new();
    let mut adapter_files = Vec::new();
    for s in Style::ALL {
        adapters.insert(s, r.adapter(s, v.mode)?);
        adapter_files.push(r.adapter_path(s, v.mode));
    }
    let mut reports = BTreeMap::new();
    let mut task_checkpoints = Vec::new();
    for &task in tasks {
        let mut model = r.task_model(task, v)?;
        task_checkpoints.push(r.task_path(task, v));
        let lms = metric_lms(&r.corpora, task, &r.cfg)?;
        for s in Style::ALL {
            let file = &adapters[&s];
            // Only encoder fine-tuning preserves the fingerprint.
            if v.selector == Selector::Enc {
                store::check_fingerprint(file, &model)?;
            }
            let rep = r.evaluate(&mut model, task, v, s, file.adapters.clone(), &lms)?;
            reports.insert((task, s), rep);
        }
    }
    r.flush();
    Ok(PipelineSummary {
        reports,
        adapter_files,
        task_checkpoints,
        base_checksum,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// One cell of the ablation grid. `report` merges the three styled runs:
/// `marker.<s>` and `ppl_s.<s>` come from the outputs of style `s`'s
/// adapter; the remaining fields are means over the three runs.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub task: TaskKind,
    pub variant: Variant,
    pub report: MetricsReport,
}

/// The seven grid variants: two adapter-pretraining modes times three
/// trainable selectors, plus Step 2 without the style-less adapter.
pub fn ablation_variants() -> Vec<Variant> {
    let mut out = Vec::new();
    for mode in PretrainMode::ALL {
        for selector in Selector::TASK {
            out.push(Variant {
                mode,
                selector,
                no_s0: false,
            });
        }
    }
    out.push(Variant {
        no_s0: true,
        ..Variant::DEFAULT
    });
    out
}

fn merge_style_reports(per_style: &BTreeMap<Style, MetricsReport>) -> MetricsReport {
    let n = per_style.len() as f64;
    let mean = |f: &dyn Fn(&MetricsReport) -> f64| per_style.values().map(f).sum::<f64>() / n;
    MetricsReport {
        n: per_style.values().map(|r| r.n).sum(),
        exact_match: mean(&|r| r.exact_match),
        r1: mean(&|r| r.r1),
        r2: mean(&|r| r.r2),
        rl: mean(&|r| r.rl),
        bert_proxy: per_style
            .values()
            .map(|r| r.bert_proxy)
            .sum::<Option<f64>>()
            .map(|b| b / n),
        ppl: mean(&|r| r.ppl),
        ppl_s: per_style
            .iter()
            .filter_map(|(s, r)| Some((*s, *r.ppl_s.get(s)?)))
            .collect(),
        marker: per_style.iter().map(|(s, r)| (*s, r.marker_rate(*s))).collect(),
    }
}

/// Runs the ablation grid for each task, reusing any artifact already in
/// `dir`, and writes `ablation/<task>.tsv`.
pub fn run_ablation<T: Scalar>(
    cfg: RunConfig,
    dir: &Path,
    tasks: &[TaskKind],
    log: &mut dyn Write,
) -> Result<Vec<AblationRow>> {
    let mut r = Runner::<T>::open(cfg, dir, log)?;
    let mut rows = Vec::new();
    for &task in tasks {
        let lms = metric_lms(&r.corpora, task, &r.cfg)?;
        let mut table = String::from("cell\tr1\tr2\trl\tppl");
        for s in Style::STYLED {
            table.push_str(&format!("\tppl_s.{s}\tmarker.{s}"));
        }
        table.push('\n');
        for v in ablation_variants() {
            let mut model = r.task_model(task, v)?;
            let mut per_style = BTreeMap::new();
            for s in Style::STYLED {
                let file = r.adapter(s, v.mode)?;
                per_style.insert(s, r.evaluate(&mut model, task, v, s, file.adapters, &lms)?);
            }
            let report = merge_style_reports(&per_style);
            report.save(&r.dir.join(format!("ablation/{task}.{}.metrics", v.name())))?;
            table.push_str(&format!(
                "{}\t{:.4}\t{:.4}\t{:.4}\t{:.2}",
                v.label(),
                report.r1,
                report.r2,
                report.rl,
                report.ppl
            ));
            for s in Style::STYLED {
                table.push_str(&format!(
                    "\t{:.2}\t{:.3}",
                    report.ppl_s.get(&s).copied().unwrap_or(f64::NAN),
                    report.marker_rate(s)
                ));
            }
            table.push('\n');
            rows.push(AblationRow {
                task,
                variant: v,
                report,
            });
        }
        let path = r.dir.join(format!("ablation/{task}.tsv"));
        fs::write(&path, table).map_err(|e| Error::io(path, e))?;
    }
    r.flush();
    Ok(rows)
}
