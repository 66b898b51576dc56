//! Encoder-decoder transformer with one bottleneck adapter after the
//! feed-forward block of every decoder layer.
//!
//! Layers are post-norm: each sublayer is `LN(x + sublayer(x))`. The adapter
//! consumes the output of the decoder layer's final norm and adds its result
//! back onto it, `A(z) = relu(LN(z)·W_down)·W_up + z`.
//!
//! Base parameters live in a [`ParamRegistry`] and are tagged with a
//! [`Group`]; adapters live in a separate [`AdapterSet`] slot so that a style
//! can be swapped without touching the base.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autograd::{Segment, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub adapter_bottleneck: usize,
    pub max_len: usize,
    pub seed: u64,
    pub dropout: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 134,
            d_model: 64,
            n_heads: 4,
            d_ffn: 128,
            n_enc_layers: 2,
            n_dec_layers: 2,
            adapter_bottleneck: 16,
            max_len: 32,
            seed: 7,
            dropout: 0.0,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.d_ffn == 0 || self.max_len == 0 {
            return bad("vocab_size, d_model, d_ffn and max_len must be positive".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 {
            return bad("need at least one encoder and one decoder layer".into());
        }
        if self.adapter_bottleneck == 0 {
            return bad("adapter bottleneck must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.ln_eps <= 0.0 {
            return bad("ln_eps must be positive".into());
        }
        Ok(())
    }
}

/// Partition of the base parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    /// Encoder layers, encoder token embedding, encoder embedding norm.
    Encoder,
    /// Decoder self-attention and its norm.
    DecoderSelf,
    /// Decoder cross-attention and its norm.
    CrossAttn,
    /// Decoder feed-forward blocks and the decoder embedding norm.
    DecoderOther,
    /// Decoder token embedding, tied to the output projection.
    Shared,
}

impl Group {
    pub const ALL: [Group; 5] = [
        Group::Encoder,
        Group::DecoderSelf,
        Group::CrossAttn,
        Group::DecoderOther,
        Group::Shared,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Encoder => "enc",
            Group::DecoderSelf => "dec-self",
            Group::CrossAttn => "dec-catt",
            Group::DecoderOther => "dec-other",
            Group::Shared => "shared",
        }
    }
}

/// Which parameters a training stage may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Selector {
    Enc,
    EncCatt,
    EncCattDec,
    Adapter,
    /// Every base parameter; used only for base pretraining.
    Base,
}

impl Selector {
    pub const TASK: [Selector; 3] = [Selector::Enc, Selector::EncCatt, Selector::EncCattDec];

    pub fn includes(self, g: Group) -> bool {
        match self {
            Selector::Enc => g == Group::Encoder,
            Selector::EncCatt => matches!(g, Group::Encoder | Group::CrossAttn),
            Selector::EncCattDec => g != Group::Shared,
            Selector::Adapter => false,
            Selector::Base => true,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Selector::Enc => "enc",
            Selector::EncCatt => "enc+catt",
            Selector::EncCattDec => "enc+catt+dec",
            Selector::Adapter => "adapter",
            Selector::Base => "base",
        }
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Selector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "enc" => Selector::Enc,
            "enc+catt" => Selector::EncCatt,
            "enc+catt+dec" => Selector::EncCattDec,
            "adapter" => Selector::Adapter,
            "base" => Selector::Base,
            other => return Err(Error::UnknownSelector(other.to_string())),
        })
    }
}

/// Named, grouped base parameters in a fixed registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamRegistry<T> {
    names: Vec<String>,
    groups: Vec<Group>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamRegistry<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            groups: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamRegistry<T> {
    pub fn insert(&mut self, name: impl Into<String>, group: Group, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("parameter `{name}` registered twice")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.groups.push(group);
        self.tensors.push(t);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    pub fn group_of(&self, name: &str) -> Option<Group> {
        self.position(name).map(|i| self.groups[i])
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn group(&self, i: usize) -> Group {
        self.groups[i]
    }

    pub fn tensor(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Group, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.groups)
            .zip(&self.tensors)
            .map(|((n, g), t)| (n.as_str(), *g, t))
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Mutable `(name, tensor)` pairs for every group accepted by `keep`.
    pub fn select_mut(&mut self, keep: impl Fn(Group) -> bool) -> Vec<(&str, &mut Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.groups)
            .zip(self.tensors.iter_mut())
            .filter(|((_, g), _)| keep(**g))
            .map(|((n, _), t)| (n.as_str(), t))
            .collect()
    }

    /// SHA-256 over the names, shapes and little-endian `f64` values of every
    /// parameter accepted by `keep`, in registration order.
    pub fn checksum(&self, keep: impl Fn(&str, Group) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, group, t) in self.iter() {
            if !keep(name, group) {
                continue;
            }
            hash_tensor(&mut h, name, t);
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hash_tensor<T: Scalar>(h: &mut Sha256, name: &str, t: &Tensor<T>) {
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    for &d in t.shape() {
        h.update((d as u64).to_le_bytes());
    }
    for v in t.data() {
        h.update(v.to_f64_lossy().to_le_bytes());
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parameters of one decoder layer's adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterLayer<T> {
    pub ln_gain: Tensor<T>,
    pub ln_bias: Tensor<T>,
    /// `[h × b]`
    pub down: Tensor<T>,
    /// `[b × h]`
    pub up: Tensor<T>,
}

/// One style's adapters for every decoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet<T> {
    pub style_id: String,
    pub layers: Vec<AdapterLayer<T>>,
}

const ADAPTER_PARTS: [&str; 4] = ["ln.g", "ln.b", "down", "up"];

impl<T: Scalar> AdapterSet<T> {
    /// Identity-at-init adapters: unit norm gain, zero bias, small random
    /// down-projection, zero up-projection.
    pub fn fresh(config: &ModelConfig, style_id: &str, seed: u64) -> Self {
        let (h, b) = (config.d_model, config.adapter_bottleneck);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let layers = (0..config.n_dec_layers)
            .map(|_| AdapterLayer {
                ln_gain: Tensor::full(&[h], T::one()),
                ln_bias: Tensor::zeros(&[h]),
                down: Tensor::new(vec![h, b], (0..h * b).map(|_| T::of(normal.sample(&mut rng))).collect())
                    .expect("shape"),
                up: Tensor::zeros(&[b, h]),
            })
            .collect();
        Self {
            style_id: style_id.to_string(),
            layers,
        }
    }

    pub fn param_names(n_layers: usize) -> Vec<String> {
        (0..n_layers)
            .flat_map(|l| ADAPTER_PARTS.iter().map(move |p| format!("adapter.{l}.{p}")))
            .collect()
    }

    /// `(name, tensor)` pairs in canonical order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, a)| {
                [&a.ln_gain, &a.ln_bias, &a.down, &a.up]
                    .into_iter()
                    .zip(ADAPTER_PARTS)
                    .map(move |(t, p)| (format!("adapter.{l}.{p}"), t))
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|a| [&mut a.ln_gain, &mut a.ln_bias, &mut a.down, &mut a.up])
            .collect()
    }

    pub fn numel(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Rebuilds a set from named tensors in any order.
    pub fn from_named(style_id: &str, n_layers: usize, mut named: HashMap<String, Tensor<T>>) -> Result<Self> {
        let mut take = |n: String| named.remove(&n).ok_or(Error::UnknownParam(n));
        let layers = (0..n_layers)
            .map(|l| {
                Ok(AdapterLayer {
                    ln_gain: take(format!("adapter.{l}.ln.g"))?,
                    ln_bias: take(format!("adapter.{l}.ln.b"))?,
                    down: take(format!("adapter.{l}.down"))?,
                    up: take(format!("adapter.{l}.up"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(extra) = named.keys().next() {
            return Err(Error::Format(format!("unexpected adapter record `{extra}`")));
        }
        Ok(Self {
            style_id: style_id.to_string(),
            layers,
        })
    }

    /// Checks layer count and per-layer shapes against `config`.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let (h, b) = (config.d_model, config.adapter_bottleneck);
        if self.layers.len() != config.n_dec_layers {
            return Err(Error::Shape(format!(
                "adapter set has {} layers, model has {} decoder layers",
                self.layers.len(),
                config.n_dec_layers
            )));
        }
        for (l, a) in self.layers.iter().enumerate() {
            let ok = a.ln_gain.shape() == [h]
                && a.ln_bias.shape() == [h]
                && a.down.shape() == [h, b]
                && a.up.shape() == [b, h];
            if !ok {
                return Err(Error::Shape(format!(
                    "adapter layer {l}: expected norm [{h}], down [{h}, {b}], up [{b}, {h}]; got {:?}, {:?}, {:?}",
                    a.ln_gain.shape(),
                    a.down.shape(),
                    a.up.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named() {
            hash_tensor(&mut h, &name, t);
        }
        hex(&h.finalize())
    }
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamRegistry<T>,
    adapters: Option<AdapterSet<T>>,
    positions: Vec<T>,
}

fn sinusoid<T: Scalar>(max_len: usize, h: usize) -> Vec<T> {
    let mut pe = Vec::with_capacity(max_len * h);
    for pos in 0..max_len {
        for j in 0..h {
            let rate = 10000f64.powf((2 * (j / 2)) as f64 / h as f64);
            let a = pos as f64 / rate;
            pe.push(T::of(if j % 2 == 0 { a.sin() } else { a.cos() }));
        }
    }
    pe
}

/// Shapes of every base parameter in registration order.
pub fn base_layout(c: &ModelConfig) -> Vec<(String, Group, Vec<usize>)> {
    let (h, f, v) = (c.d_model, c.d_ffn, c.vocab_size);
    let mut out = Vec::new();
    let mut add = |n: String, g: Group, s: Vec<usize>| out.push((n, g, s));
    let attn = |add: &mut dyn FnMut(String, Group, Vec<usize>), p: &str, g: Group| {
        for w in ["wq", "wk", "wv", "wo"] {
            add(format!("{p}.{w}"), g, vec![h, h]);
        }
        for b in ["bq", "bk", "bv", "bo"] {
            add(format!("{p}.{b}"), g, vec![h]);
        }
        add(format!("{p}.ln.g"), g, vec![h]);
        add(format!("{p}.ln.b"), g, vec![h]);
    };
    let ffn = |add: &mut dyn FnMut(String, Group, Vec<usize>), p: &str, g: Group| {
        add(format!("{p}.w1"), g, vec![h, f]);
        add(format!("{p}.b1"), g, vec![f]);
        add(format!("{p}.w2"), g, vec![f, h]);
        add(format!("{p}.b2"), g, vec![h]);
        add(format!("{p}.ln.g"), g, vec![h]);
        add(format!("{p}.ln.b"), g, vec![h]);
    };
    add("enc.embed".into(), Group::Encoder, vec![v, h]);
    add("enc.ln_emb.g".into(), Group::Encoder, vec![h]);
    add("enc.ln_emb.b".into(), Group::Encoder, vec![h]);
    for l in 0..c.n_enc_layers {
        attn(&mut add, &format!("enc.{l}.attn"), Group::Encoder);
        ffn(&mut add, &format!("enc.{l}.ffn"), Group::Encoder);
    }
    add("dec.embed".into(), Group::Shared, vec![v, h]);
    add("dec.ln_emb.g".into(), Group::DecoderOther, vec![h]);
    add("dec.ln_emb.b".into(), Group::DecoderOther, vec![h]);
    for l in 0..c.n_dec_layers {
        attn(&mut add, &format!("dec.{l}.self"), Group::DecoderSelf);
        attn(&mut add, &format!("dec.{l}.catt"), Group::CrossAttn);
        ffn(&mut add, &format!("dec.{l}.ffn"), Group::DecoderOther);
    }
    out
}

/// One decoder query: a target prefix and the encoder rows it attends to.
#[derive(Clone, Copy, Debug)]
pub struct DecoderInput<'a> {
    pub prefix: &'a [usize],
    pub memory_start: usize,
    pub memory_len: usize,
}

/// Packed encoder output for a batch of sources.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub states: Var,
    /// `(start row, length)` per source.
    pub spans: Vec<(usize, usize)>,
}

impl<T: Scalar> Model<T> {
    /// Deterministically initializes every base parameter from `config.seed`.
    /// The adapter slot starts empty.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamRegistry::default();
        let h = config.d_model;
        for (name, group, shape) in base_layout(&config) {
            let n: usize = shape.iter().product();
            let std = if name.ends_with("embed") {
                Some(1.0 / (h as f64).sqrt())
            } else if shape.len() == 2 {
                Some(1.0 / (shape[0] as f64).sqrt())
            } else {
                None
            };
            let data: Vec<T> = match std {
                Some(s) => {
                    let normal = Normal::new(0.0, s).expect("valid std");
                    (0..n).map(|_| T::of(normal.sample(&mut rng))).collect()
                }
                None if name.ends_with(".g") => vec![T::one(); n],
                None => vec![T::zero(); n],
            };
            params.insert(name, group, Tensor::new(shape, data)?)?;
        }
        let positions = sinusoid(config.max_len, h);
        Ok(Self {
            config,
            params,
            adapters: None,
            positions,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamRegistry<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamRegistry<T> {
        &mut self.params
    }

    pub fn adapters(&self) -> Option<&AdapterSet<T>> {
        self.adapters.as_ref()
    }

    pub fn adapters_mut(&mut self) -> Option<&mut AdapterSet<T>> {
        self.adapters.as_mut()
    }

    /// Installs `set` in the adapter slot, returning the previous occupant.
    /// Base parameters are not touched.
    pub fn swap_adapters(&mut self, set: AdapterSet<T>) -> Result<Option<AdapterSet<T>>> {
        set.check_shapes(&self.config)?;
        Ok(self.adapters.replace(set))
    }

    pub fn take_adapters(&mut self) -> Option<AdapterSet<T>> {
        self.adapters.take()
    }

    /// Checksum of every base parameter.
    pub fn base_checksum(&self) -> String {
        self.params.checksum(|_, _| true)
    }

    pub fn group_checksum(&self, group: Group) -> String {
        self.params.checksum(|_, g| g == group)
    }

    /// Named tensors of one parameter selector.
    pub fn param_group(&self, selector: Selector) -> Result<Vec<(String, &Tensor<T>)>> {
        if selector == Selector::Adapter {
            let set = self
                .adapters
                .as_ref()
                .ok_or_else(|| Error::MissingAdapter("the adapter group is empty".into()))?;
            return Ok(set.named());
        }
        Ok(self
            .params
            .iter()
            .filter(|(_, g, _)| selector.includes(*g))
            .map(|(n, _, t)| (n.to_string(), t))
            .collect())
    }

    pub fn param_group_by_name(&self, selector: &str) -> Result<Vec<(String, &Tensor<T>)>> {
        self.param_group(selector.parse()?)
    }

    /// Starts a forward pass. Parameters are copied onto the tape on first
    /// use; those accepted by `trainable` are recorded with `requires_grad`.
    pub fn forward<'m>(&'m self, trainable: Selector) -> Forward<'m, T> {
        Forward {
            model: self,
            tape: Tape::new(),
            base: vec![None; self.params.len()],
            adapter: vec![None; self.config.n_dec_layers * ADAPTER_PARTS.len()],
            trainable,
            use_adapters: true,
            dropout: None,
        }
    }

    /// Encoder states for one source sequence.
    pub fn encode(&self, tokens: &[usize]) -> Result<Tensor<T>> {
        let mut f = self.forward(Selector::Base);
        let enc = f.encode(&[tokens])?;
        Ok(f.tape.value(enc.states).clone())
    }

    /// Next-token logits `[T × V]` for every position of `prefix`, given the
    /// source `tokens`.
    pub fn decode_step(&self, tokens: &[usize], prefix: &[usize]) -> Result<Tensor<T>> {
        let mut f = self.forward(Selector::Base);
        let enc = f.encode(&[tokens])?;
        let logits = f.decode(&enc, &[prefix])?;
        Ok(f.tape.value(logits).clone())
    }

    /// As [`Model::decode_step`] but with the adapter computation removed from
    /// the graph. Used as a reference for the identity-at-init property.
    pub fn decode_step_without_adapters(&self, tokens: &[usize], prefix: &[usize]) -> Result<Tensor<T>> {
        let mut f = self.forward(Selector::Base);
        f.use_adapters = false;
        let enc = f.encode(&[tokens])?;
        let logits = f.decode(&enc, &[prefix])?;
        Ok(f.tape.value(logits).clone())
    }
}

/// A forward pass in progress: the tape plus lazily bound parameters.
pub struct Forward<'m, T> {
    model: &'m Model<T>,
    pub tape: Tape<T>,
    base: Vec<Option<Var>>,
    adapter: Vec<Option<Var>>,
    trainable: Selector,
    use_adapters: bool,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'m, T: Scalar> Forward<'m, T> {
    pub fn model(&self) -> &'m Model<T> {
        self.model
    }

    /// Enables dropout with the model's configured rate.
    pub fn with_dropout(mut self, seed: u64) -> Self {
        if self.model.config.dropout > 0.0 {
            self.dropout = Some((self.model.config.dropout, ChaCha8Rng::seed_from_u64(seed)));
        }
        self
    }

    pub fn without_adapters(mut self) -> Self {
        self.use_adapters = false;
        self
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let i = self
            .model
            .params
            .position(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if let Some(v) = self.base[i] {
            return Ok(v);
        }
        let train = self.trainable.includes(self.model.params.group(i));
        let t = self.model.params.tensor(i).clone().with_requires_grad(train);
        let v = self.tape.leaf(t);
        self.base[i] = Some(v);
        Ok(v)
    }

    fn adapter_param(&mut self, layer: usize, part: usize) -> Result<Var> {
        let set = self
            .model
            .adapters
            .as_ref()
            .ok_or_else(|| Error::MissingAdapter("decoder requires an installed adapter set".into()))?;
        let a = set
            .layers
            .get(layer)
            .ok_or_else(|| Error::MissingAdapter(format!("no adapter for decoder layer {layer}")))?;
        let slot = layer * ADAPTER_PARTS.len() + part;
        if let Some(v) = self.adapter[slot] {
            return Ok(v);
        }
        let t = [&a.ln_gain, &a.ln_bias, &a.down, &a.up][part].clone();
        let v = self
            .tape
            .leaf(t.with_requires_grad(self.trainable == Selector::Adapter));
        self.adapter[slot] = Some(v);
        Ok(v)
    }

    /// Bound parameter vars, for collecting gradients after `backward`.
    pub fn bound_base(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.base.iter().enumerate().filter_map(|(i, v)| v.map(|v| (i, v)))
    }

    pub fn bound_adapter(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.adapter.iter().enumerate().filter_map(|(i, v)| v.map(|v| (i, v)))
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 - *rate;
        let shape = self.tape.value(x).shape().to_vec();
        let mask: Vec<T> = (0..self.tape.value(x).len())
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    T::of(1.0 / keep)
                } else {
                    T::zero()
                }
            })
            .collect();
        let m = self.tape.constant(Tensor::new(shape, mask)?);
        self.tape.mul(x, m)
    }

    fn linear(&mut self, x: Var, w: &str, b: &str) -> Result<Var> {
        let w = self.param(w)?;
        let b = self.param(b)?;
        let y = self.tape.matmul(x, w)?;
        self.tape.add_row(y, b)
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.param(&format!("{prefix}.g"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        self.tape.layer_norm(x, g, b, self.model.config.ln_eps)
    }

    fn embed(&mut self, table: &str, seqs: &[&[usize]]) -> Result<Var> {
        let h = self.model.config.d_model;
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        let mut pos = Vec::with_capacity(ids.len() * h);
        for s in seqs {
            pos.extend_from_slice(&self.model.positions[..s.len() * h]);
        }
        let table = self.param(table)?;
        let e = self.tape.embedding(table, &ids)?;
        let e = self.tape.scale(e, T::from_usize(h).expect("width").sqrt());
        let p = self.tape.constant(Tensor::new(vec![ids.len(), h], pos)?);
        self.tape.add(e, p)
    }

    /// `LN(x + attn(x, memory))` with projections under `prefix`.
    fn attention_block(
        &mut self,
        x: Var,
        memory: Var,
        prefix: &str,
        segments: &[Segment],
        causal: bool,
    ) -> Result<Var> {
        let q = self.linear(x, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
        let k = self.linear(memory, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
        let v = self.linear(memory, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
        let a = self
            .tape
            .attention(q, k, v, self.model.config.n_heads, segments, causal)?;
        let o = self.linear(a, &format!("{prefix}.wo"), &format!("{prefix}.bo"))?;
        let o = self.dropout(o)?;
        let r = self.tape.add(x, o)?;
        self.norm(r, &format!("{prefix}.ln"))
    }

    fn ffn_block(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let u = self.linear(x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        let u = self.tape.gelu(u);
        let o = self.linear(u, &format!("{prefix}.w2"), &format!("{prefix}.b2"))?;
        let o = self.dropout(o)?;
        let r = self.tape.add(x, o)?;
        self.norm(r, &format!("{prefix}.ln"))
    }

    /// `A(z) = relu(LN(z)·W_down)·W_up + z` for decoder layer `layer`.
    pub fn adapter(&mut self, z: Var, layer: usize) -> Result<Var> {
        if layer >= self.model.config.n_dec_layers {
            return Err(Error::MissingAdapter(format!(
                "layer {layer} out of range for {} decoder layers",
                self.model.config.n_dec_layers
            )));
        }
        let g = self.adapter_param(layer, 0)?;
        let b = self.adapter_param(layer, 1)?;
        let down = self.adapter_param(layer, 2)?;
        let up = self.adapter_param(layer, 3)?;
        let n = self.tape.layer_norm(z, g, b, self.model.config.ln_eps)?;
        let d = self.tape.matmul(n, down)?;
        let d = self.tape.relu(d);
        let u = self.tape.matmul(d, up)?;
        self.tape.add(u, z)
    }

    /// Packs and encodes a batch of sources.
    pub fn encode(&mut self, sources: &[&[usize]]) -> Result<Encoded> {
        let max = self.model.config.max_len;
        for s in sources {
            if s.is_empty() || s.len() > max {
                return Err(Error::Input(format!("source length {} outside 1..={max}", s.len())));
            }
        }
        let mut spans = Vec::with_capacity(sources.len());
        let mut start = 0;
        for s in sources {
            spans.push((start, s.len()));
            start += s.len();
        }
        let segments: Vec<Segment> = spans
            .iter()
            .map(|&(s, l)| Segment {
                q_start: s,
                q_len: l,
                k_start: s,
                k_len: l,
            })
            .collect();
        let x = self.embed("enc.embed", sources)?;
        let mut x = self.norm(x, "enc.ln_emb")?;
        for l in 0..self.model.config.n_enc_layers {
            x = self.attention_block(x, x, &format!("enc.{l}.attn"), &segments, false)?;
            x = self.ffn_block(x, &format!("enc.{l}.ffn"))?;
        }
        Ok(Encoded { states: x, spans })
    }

    /// Decoder logits for prefixes that each attend to one encoded source.
    /// `inputs[i]` uses `enc.spans[i]`.
    pub fn decode(&mut self, enc: &Encoded, prefixes: &[&[usize]]) -> Result<Var> {
        if prefixes.len() != enc.spans.len() {
            return Err(Error::Input(format!(
                "{} prefixes for {} encoded sources",
                prefixes.len(),
                enc.spans.len()
            )));
        }
        let inputs: Vec<DecoderInput> = prefixes
            .iter()
            .zip(&enc.spans)
            .map(|(p, &(s, l))| DecoderInput {
                prefix: p,
                memory_start: s,
                memory_len: l,
            })
            .collect();
        self.decode_inputs(enc.states, &inputs)
    }

    /// Decoder logits `[Σ prefix_len × V]` for arbitrary prefix-to-memory
    /// pairings (several beams may share one source).
    pub fn decode_inputs(&mut self, memory: Var, inputs: &[DecoderInput]) -> Result<Var> {
        let max = self.model.config.max_len;
        let mut self_segs = Vec::with_capacity(inputs.len());
        let mut cross_segs = Vec::with_capacity(inputs.len());
        let mut start = 0;
        for inp in inputs {
            let n = inp.prefix.len();
            if n == 0 || n > max {
                return Err(Error::Input(format!("prefix length {n} outside 1..={max}")));
            }
            self_segs.push(Segment {
                q_start: start,
                q_len: n,
                k_start: start,
                k_len: n,
            });
            cross_segs.push(Segment {
                q_start: start,
                q_len: n,
                k_start: inp.memory_start,
                k_len: inp.memory_len,
            });
            start += n;
        }
        if self.use_adapters && self.model.adapters.is_none() {
            return Err(Error::MissingAdapter(
                "decoder requires an installed adapter set".into(),
            ));
        }
        let seqs: Vec<&[usize]> = inputs.iter().map(|i| i.prefix).collect();
        let y = self.embed("dec.embed", &seqs)?;
        let mut y = self.norm(y, "dec.ln_emb")?;
        for l in 0..self.model.config.n_dec_layers {
            y = self.attention_block(y, y, &format!("dec.{l}.self"), &self_segs, true)?;
            y = self.attention_block(y, memory, &format!("dec.{l}.catt"), &cross_segs, false)?;
            y = self.ffn_block(y, &format!("dec.{l}.ffn"))?;
            if self.use_adapters {
                y = self.adapter(y, l)?;
            }
        }
        let e = self.param("dec.embed")?;
        self.tape.matmul_bt(y, e)
    }

    pub fn into_tape(self) -> Tape<T> {
        self.tape
    }
}
