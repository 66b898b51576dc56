//! AdamW and the staged training loops.
//!
//! Every stage trains one [`Selector`]'s parameters with teacher forcing and
//! leaves everything else untouched: frozen tensors are never written, and
//! each stage reports checksums taken before and after so callers can check
//! that directly.

use std::collections::HashMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{AdapterSet, Group, Model, Selector};
use crate::scalar::Scalar;
use crate::styledata::{PretrainMode, SeqPair, Split, Style, StyleCorpus, BOS, EOS, PAD};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment estimates for the trainable parameters only.
#[derive(Clone, Debug)]
pub struct OptimState<T> {
    pub config: AdamWConfig,
    pub step: u64,
    moments: HashMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn has_moments(&self, name: &str) -> bool {
        self.moments.contains_key(name)
    }

    pub fn tracked(&self) -> usize {
        self.moments.len()
    }

    /// One bias-corrected AdamW update with decoupled weight decay. Every
    /// parameter in `params` must have an entry in `grads`.
    pub fn adamw_step(&mut self, params: &mut [(&str, &mut Tensor<T>)], grads: &HashMap<String, Vec<T>>) -> Result<()> {
        for (name, _) in params.iter() {
            if !grads.contains_key(*name) {
                return Err(Error::MissingGrad(name.to_string()));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = T::of(1.0 - c.beta1.powi(t));
        let bc2 = T::of(1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        let decay = T::of(1.0 - c.lr * c.weight_decay);
        for (name, w) in params.iter_mut() {
            let g = &grads[*name];
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
            for (((wi, &gi), mi), vi) in w.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *wi = *wi * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optim: AdamWConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Caps the number of training pairs visited per epoch.
    pub max_train: Option<usize>,
    /// Caps the number of validation pairs scored per epoch.
    pub max_valid: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optim: AdamWConfig::default(),
            batch_size: 8,
            epochs: 5,
            patience: 2,
            seed: 17,
            max_train: None,
            max_valid: Some(200),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub steps: usize,
    pub epochs_run: usize,
    /// Per-step training loss.
    pub losses: Vec<f64>,
    /// Mean validation loss after each epoch.
    pub valid: Vec<f64>,
    pub trainable_params: usize,
    pub frozen_checksum_before: String,
    pub frozen_checksum_after: String,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.losses.first().copied().unwrap_or(f64::NAN)
    }

    /// Mean of the last `window` step losses.
    pub fn final_loss(&self, window: usize) -> f64 {
        let n = self.losses.len().min(window).max(1);
        self.losses[self.losses.len().saturating_sub(n)..].iter().sum::<f64>() / n as f64
    }

    /// Moving average of the step losses.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        self.losses
            .windows(window.min(self.losses.len()).max(1))
            .map(|w| w.iter().sum::<f64>() / w.len() as f64)
            .collect()
    }
}

/// Receives one line per optimizer step.
pub trait MetricsSink {
    fn record(&mut self, stage: &str, step: usize, loss: f64, lr: f64);
}

/// Discards metrics.
pub struct NoMetrics;

impl MetricsSink for NoMetrics {
    fn record(&mut self, _: &str, _: usize, _: f64, _: f64) {}
}

/// Writes `stage=.. step=.. loss=.. lr=..` lines.
pub struct LineMetrics<W: Write>(pub W);

impl<W: Write> MetricsSink for LineMetrics<W> {
    fn record(&mut self, stage: &str, step: usize, loss: f64, lr: f64) {
        let _ = writeln!(self.0, "stage={stage} step={step} loss={loss:.6} lr={lr:e}");
    }
}

fn decoder_io(target: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut prefix = Vec::with_capacity(target.len() + 1);
    prefix.push(BOS);
    prefix.extend_from_slice(target);
    let mut gold = target.to_vec();
    gold.push(EOS);
    (prefix, gold)
}

/// Teacher-forced loss of a batch, plus gradients of the trainable tensors
/// keyed by name when `with_grads` is set.
pub fn batch_loss<T: Scalar>(
    model: &Model<T>,
    batch: &[&SeqPair],
    selector: Selector,
    use_adapters: bool,
    dropout_seed: Option<u64>,
) -> Result<(f64, HashMap<String, Vec<T>>)> {
    let mut f = model.forward(selector);
    if let Some(seed) = dropout_seed {
        f = f.with_dropout(seed);
    }
    if !use_adapters {
        f = f.without_adapters();
    }
    let sources: Vec<&[usize]> = batch.iter().map(|(x, _)| x.as_slice()).collect();
    let io: Vec<(Vec<usize>, Vec<usize>)> = batch.iter().map(|(_, y)| decoder_io(y)).collect();
    let prefixes: Vec<&[usize]> = io.iter().map(|(p, _)| p.as_slice()).collect();
    let gold: Vec<usize> = io.iter().flat_map(|(_, g)| g.iter().copied()).collect();
    let enc = f.encode(&sources)?;
    let logits = f.decode(&enc, &prefixes)?;
    let loss = f.tape.cross_entropy(logits, &gold, PAD)?;
    let value = f.tape.value(loss).data()[0].to_f64_lossy();
    f.tape.backward(loss)?;
    let mut grads = HashMap::new();
    let base: Vec<(usize, crate::autograd::Var)> = f.bound_base().collect();
    let adapter: Vec<(usize, crate::autograd::Var)> = f.bound_adapter().collect();
    for (i, v) in base {
        if selector.includes(model.params().group(i)) {
            if let Some(g) = f.tape.take_grad(v) {
                grads.insert(model.params().name(i).to_string(), g);
            }
        }
    }
    if selector == Selector::Adapter {
        let names = AdapterSet::<T>::param_names(model.config().n_dec_layers);
        for (slot, v) in adapter {
            if let Some(g) = f.tape.take_grad(v) {
                grads.insert(names[slot].clone(), g);
            }
        }
    }
    Ok((value, grads))
}

/// Mean teacher-forced loss over `pairs`, batched.
pub fn eval_loss<T: Scalar>(model: &Model<T>, pairs: &[SeqPair], batch_size: usize, use_adapters: bool) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Input("no pairs to evaluate".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in pairs.chunks(batch_size.max(1)) {
        let refs: Vec<&SeqPair> = chunk.iter().collect();
        let mut f = model.forward(Selector::Base);
        if !use_adapters {
            f = f.without_adapters();
        }
        let sources: Vec<&[usize]> = refs.iter().map(|(x, _)| x.as_slice()).collect();
        let io: Vec<(Vec<usize>, Vec<usize>)> = refs.iter().map(|(_, y)| decoder_io(y)).collect();
        let prefixes: Vec<&[usize]> = io.iter().map(|(p, _)| p.as_slice()).collect();
        let gold: Vec<usize> = io.iter().flat_map(|(_, g)| g.iter().copied()).collect();
        let enc = f.encode(&sources)?;
        let logits = f.decode(&enc, &prefixes)?;
        let loss = f.tape.cross_entropy(logits, &gold, PAD)?;
        total += f.tape.value(loss).data()[0].to_f64_lossy() * gold.len() as f64;
        count += gold.len();
    }
    Ok(total / count as f64)
}

/// Checksum of everything a selector leaves frozen (base and adapters).
pub fn frozen_checksum<T: Scalar>(model: &Model<T>, selector: Selector) -> String {
    let base = model.params().checksum(|_, g| !selector.includes(g));
    let adapters = match (selector, model.adapters()) {
        (Selector::Adapter, _) | (_, None) => String::new(),
        (_, Some(a)) => a.checksum(),
    };
    format!("{base}{adapters}")
}

fn snapshot<T: Scalar>(model: &Model<T>, selector: Selector) -> Vec<Tensor<T>> {
    if selector == Selector::Adapter {
        return model
            .adapters()
            .map(|a| a.named().into_iter().map(|(_, t)| t.clone()).collect())
            .unwrap_or_default();
    }
    model
        .params()
        .iter()
        .filter(|(_, g, _)| selector.includes(*g))
        .map(|(_, _, t)| t.clone())
        .collect()
}

fn restore<T: Scalar>(model: &mut Model<T>, selector: Selector, saved: Vec<Tensor<T>>) {
    if selector == Selector::Adapter {
        if let Some(a) = model.adapters_mut() {
            for (slot, t) in a.tensors_mut().into_iter().zip(saved) {
                *slot = t;
            }
        }
        return;
    }
    let idx: Vec<usize> = (0..model.params().len())
        .filter(|&i| selector.includes(model.params().group(i)))
        .collect();
    for (i, t) in idx.into_iter().zip(saved) {
        *model.params_mut().tensor_mut(i) = t;
    }
}

fn apply_update<T: Scalar>(
    model: &mut Model<T>,
    selector: Selector,
    opt: &mut OptimState<T>,
    grads: &HashMap<String, Vec<T>>,
) -> Result<()> {
    if selector == Selector::Adapter {
        let names = AdapterSet::<T>::param_names(model.config().n_dec_layers);
        let set = model
            .adapters_mut()
            .ok_or_else(|| Error::MissingAdapter("adapter training needs an installed set".into()))?;
        let mut params: Vec<(&str, &mut Tensor<T>)> = names.iter().map(String::as_str).zip(set.tensors_mut()).collect();
        return opt.adamw_step(&mut params, grads);
    }
    let mut params = model.params_mut().select_mut(|g| selector.includes(g));
    opt.adamw_step(&mut params, grads)
}

/// Generic teacher-forced training of `selector` on `(input, target)` pairs,
/// with per-epoch validation and early stopping (best epoch restored).
pub fn train_pairs<T: Scalar>(
    model: &mut Model<T>,
    data: &Split<SeqPair>,
    selector: Selector,
    cfg: &TrainConfig,
    use_adapters: bool,
    stage: &str,
    sink: &mut dyn MetricsSink,
) -> Result<TrainReport> {
    if data.train.is_empty() {
        return Err(Error::Input(format!("{stage}: training corpus is empty")));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut report = TrainReport {
        frozen_checksum_before: frozen_checksum(model, selector),
        trainable_params: snapshot(model, selector).iter().map(Tensor::len).sum(),
        ..TrainReport::default()
    };
    let mut opt = OptimState::new(cfg.optim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let valid: &[SeqPair] = match cfg.max_valid {
        Some(n) => &data.valid[..n.min(data.valid.len())],
        None => &data.valid,
    };
    let mut best: Option<(f64, Vec<Tensor<T>>)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let limit = cfg.max_train.unwrap_or(order.len()).min(order.len());
        for chunk in order[..limit].chunks(cfg.batch_size) {
            let batch: Vec<&SeqPair> = chunk.iter().map(|&i| &data.train[i]).collect();
            let dropout_seed = (model.config().dropout > 0.0).then_some(cfg.seed ^ report.steps as u64);
            let (loss, grads) = batch_loss(model, &batch, selector, use_adapters, dropout_seed)?;
            apply_update(model, selector, &mut opt, &grads)?;
            report.steps += 1;
            report.losses.push(loss);
            sink.record(stage, report.steps, loss, cfg.optim.lr);
        }
        report.epochs_run += 1;
        if valid.is_empty() {
            continue;
        }
        let v = eval_loss(model, valid, 32, use_adapters)?;
        report.valid.push(v);
        match &best {
            Some((b, _)) if v >= *b => {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
            _ => {
                best = Some((v, snapshot(model, selector)));
                since_best = 0;
            }
        }
    }
    if let Some((b, saved)) = best {
        if report.valid.last().is_some_and(|&v| v > b) {
            restore(model, selector, saved);
        }
    }
    report.frozen_checksum_after = frozen_checksum(model, selector);
    if report.frozen_checksum_after != report.frozen_checksum_before {
        return Err(Error::Input(format!("{stage}: frozen parameters changed")));
    }
    Ok(report)
}

/// Denoising pretraining of every base parameter, with the adapter
/// computation removed from the graph.
pub fn pretrain_base<T: Scalar>(
    model: &mut Model<T>,
    corpus: &Split<SeqPair>,
    cfg: &TrainConfig,
    sink: &mut dyn MetricsSink,
) -> Result<TrainReport> {
    train_pairs(model, corpus, Selector::Base, cfg, false, "pretrain", sink)
}

/// Trains a fresh adapter set on `corpus` in `mode` with the base frozen.
/// The model's previous adapter slot is restored afterwards.
pub fn train_style_adapter<T: Scalar>(
    model: &mut Model<T>,
    corpus: &StyleCorpus,
    mode: PretrainMode,
    cfg: &TrainConfig,
    sink: &mut dyn MetricsSink,
) -> Result<(AdapterSet<T>, TrainReport)> {
    let fresh = AdapterSet::fresh(model.config(), corpus.style.as_str(), cfg.seed ^ 0xada9);
    let previous = model.take_adapters();
    model.swap_adapters(fresh)?;
    let base_before = model.base_checksum();
    let stage = format!("adapter.{}.{}", corpus.style, mode);
    let result = train_pairs(model, corpus.pairs(mode), Selector::Adapter, cfg, true, &stage, sink);
    let trained = model.take_adapters().expect("installed above");
    if let Some(p) = previous {
        model.swap_adapters(p)?;
    }
    let report = result?;
    if model.base_checksum() != base_before {
        return Err(Error::Input(format!("{stage}: base parameters changed")));
    }
    Ok((trained, report))
}

/// The style-less adapter: [`train_style_adapter`] on the `s0` corpus.
pub fn train_stylefree_adapter<T: Scalar>(
    model: &mut Model<T>,
    corpus: &StyleCorpus,
    cfg: &TrainConfig,
    sink: &mut dyn MetricsSink,
) -> Result<(AdapterSet<T>, TrainReport)> {
    if corpus.style != Style::S0 {
        return Err(Error::Input(format!(
            "style-less adapter needs the s0 corpus, got {}",
            corpus.style
        )));
    }
    train_style_adapter(model, corpus, PretrainMode::InversePara, cfg, sink)
}

/// Task fine-tuning of `selector` with `adapters` installed and frozen.
pub fn train_task<T: Scalar>(
    model: &mut Model<T>,
    adapters: AdapterSet<T>,
    pairs: &Split<SeqPair>,
    selector: Selector,
    cfg: &TrainConfig,
    sink: &mut dyn MetricsSink,
) -> Result<TrainReport> {
    if !Selector::TASK.contains(&selector) {
        return Err(Error::UnknownSelector(format!(
            "{selector} is not a task selector (enc, enc+catt, enc+catt+dec)"
        )));
    }
    model.swap_adapters(adapters)?;
    let stage = format!("task.{selector}");
    train_pairs(model, pairs, selector, cfg, true, &stage, sink)
}

/// Names of the base tensors in one group.
pub fn group_names<T: Scalar>(model: &Model<T>, group: Group) -> Vec<String> {
    model
        .params()
        .iter()
        .filter(|(_, g, _)| *g == group)
        .map(|(n, _, _)| n.to_string())
        .collect()
}
