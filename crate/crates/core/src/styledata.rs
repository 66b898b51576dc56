//! Synthetic vocabulary, task corpora, style corpora and the two input
//! perturbations used for adapter training.
//!
//! Content is made of keyword (`K`) and filler (`F`) tokens. Each style owns a
//! disjoint set of ten marker tokens and a deterministic decoration rule:
//!
//! * `s1` prepends one marker and appends two,
//! * `s2` inserts a marker after every second content token,
//! * `s3` wraps the sentence in markers and repeats its final keyword.
//!
//! [`noise_gn`] masks and deletes tokens without regard to their kind, so style
//! markers leak through it. [`strip_style_gp`] removes every marker and
//! rewrites fillers, leaving only the keyword skeleton.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const MASK: usize = 3;

pub const N_SPECIAL: usize = 4;
pub const N_KEYWORDS: usize = 50;
pub const N_FILLERS: usize = 50;
pub const N_MARKERS: usize = 10;

const KEYWORD_BASE: usize = N_SPECIAL;
const FILLER_BASE: usize = KEYWORD_BASE + N_KEYWORDS;
const MARKER_BASE: usize = FILLER_BASE + N_FILLERS;

/// A style label. `S0` is the style-less "style".
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Style {
    S0,
    S1,
    S2,
    S3,
}

impl Style {
    pub const ALL: [Style; 4] = [Style::S0, Style::S1, Style::S2, Style::S3];
    pub const STYLED: [Style; 3] = [Style::S1, Style::S2, Style::S3];

    pub fn as_str(self) -> &'static str {
        match self {
            Style::S0 => "s0",
            Style::S1 => "s1",
            Style::S2 => "s2",
            Style::S3 => "s3",
        }
    }

    /// Marker token ids, empty for `S0`.
    pub fn markers(self) -> std::ops::Range<usize> {
        match self {
            Style::S0 => 0..0,
            s => {
                let base = MARKER_BASE + (s as usize - 1) * N_MARKERS;
                base..base + N_MARKERS
            }
        }
    }
}

impl fmt::Display for Style {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Style {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Style::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Input(format!("unknown style `{s}` (expected s0, s1, s2 or s3)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Special,
    Keyword,
    Filler,
    Marker(Style),
}

pub fn kind(id: usize) -> TokenKind {
    match id {
        i if i < KEYWORD_BASE => TokenKind::Special,
        i if i < FILLER_BASE => TokenKind::Keyword,
        i if i < MARKER_BASE => TokenKind::Filler,
        i => TokenKind::Marker(Style::STYLED[((i - MARKER_BASE) / N_MARKERS).min(2)]),
    }
}

pub fn is_keyword(id: usize) -> bool {
    kind(id) == TokenKind::Keyword
}

pub fn is_filler(id: usize) -> bool {
    kind(id) == TokenKind::Filler
}

pub fn is_marker(id: usize) -> bool {
    matches!(kind(id), TokenKind::Marker(_))
}

pub fn is_content(id: usize) -> bool {
    is_keyword(id) || is_filler(id)
}

pub fn keyword_subsequence(t: &[usize]) -> Vec<usize> {
    t.iter().copied().filter(|&i| is_keyword(i)).collect()
}

pub fn strip_markers(t: &[usize]) -> Vec<usize> {
    t.iter().copied().filter(|&i| !is_marker(i)).collect()
}

/// Token names and ids. Ids are laid out as specials, keywords, fillers, then
/// ten markers for each of `s1`, `s2`, `s3`.
#[derive(Clone, Debug)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut names: Vec<String> = ["<pad>", "<s>", "</s>", "<mask>"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        names.extend((0..N_KEYWORDS).map(|i| format!("k{i}")));
        names.extend((0..N_FILLERS).map(|i| format!("f{i}")));
        for s in Style::STYLED {
            names.extend((0..N_MARKERS).map(|i| format!("{s}m{i}")));
        }
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self { names, index }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn keyword(i: usize) -> usize {
        KEYWORD_BASE + i
    }

    pub fn filler(i: usize) -> usize {
        FILLER_BASE + i
    }

    pub fn render(&self, t: &[usize]) -> String {
        t.iter().map(|&i| self.name(i)).collect::<Vec<_>>().join(" ")
    }

    pub fn parse(&self, line: &str) -> Result<Vec<usize>> {
        line.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::Tokens(format!("unknown token `{w}`"))))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskKind {
    Headline,
    Story,
}

impl TaskKind {
    pub const ALL: [TaskKind; 2] = [TaskKind::Headline, TaskKind::Story];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Headline => "headline",
            TaskKind::Story => "story",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "headline" => Ok(TaskKind::Headline),
            "story" => Ok(TaskKind::Story),
            other => Err(Error::Input(format!(
                "unknown task `{other}` (expected headline or story)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskPair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    pub kind: TaskKind,
}

/// Train/valid/test partition of a generated list, split 90/5/5 by index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub valid: Vec<T>,
    pub test: Vec<T>,
}

impl<T> Split<T> {
    pub fn boundaries(n: usize) -> (usize, usize) {
        let train = n * 90 / 100;
        let valid = n * 5 / 100;
        (train, train + valid)
    }

    pub fn from_vec(mut all: Vec<T>) -> Self {
        let (a, b) = Self::boundaries(all.len());
        let test = all.split_off(b);
        let valid = all.split_off(a);
        Self {
            train: all,
            valid,
            test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn distinct_keywords(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, N_KEYWORDS, n)
        .into_iter()
        .map(Vocab::keyword)
        .collect()
}

/// Headline pairs interleave 3–6 distinct keywords with 5–15 fillers; the
/// target is the keyword subsequence. Story pairs map `k1..kn` to
/// `k1 k1 k2 k2 .. kn kn`.
pub fn gen_task_pairs(seed: u64, n: usize, kind: TaskKind) -> Result<Split<TaskPair>> {
    if n == 0 {
        return Err(Error::Input("need at least one task pair".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = (0..n)
        .map(|_| match kind {
            TaskKind::Headline => {
                let nk = rng.gen_range(3..=6);
                let nf = rng.gen_range(5..=15);
                let keys = distinct_keywords(&mut rng, nk);
                let mut slots = vec![false; nk + nf];
                slots[..nk].iter_mut().for_each(|s| *s = true);
                slots.shuffle(&mut rng);
                let mut ks = keys.iter();
                let source = slots
                    .iter()
                    .map(|&is_k| {
                        if is_k {
                            *ks.next().expect("slot count")
                        } else {
                            Vocab::filler(rng.gen_range(0..N_FILLERS))
                        }
                    })
                    .collect();
                TaskPair {
                    source,
                    target: keys,
                    kind,
                }
            }
            TaskKind::Story => {
                let nk = rng.gen_range(3..=6);
                let keys = distinct_keywords(&mut rng, nk);
                let target = keys.iter().flat_map(|&k| [k, k]).collect();
                TaskPair {
                    source: keys,
                    target,
                    kind,
                }
            }
        })
        .collect();
    Ok(Split::from_vec(pairs))
}

/// A marker-free sentence of 4–9 content tokens with at least one keyword and
/// no two equal neighbours.
pub fn plain_sentence(rng: &mut impl Rng) -> Vec<usize> {
    loop {
        let len = rng.gen_range(4..=9);
        let mut out: Vec<usize> = Vec::with_capacity(len);
        while out.len() < len {
            let t = if rng.gen_bool(0.4) {
                Vocab::keyword(rng.gen_range(0..N_KEYWORDS))
            } else {
                Vocab::filler(rng.gen_range(0..N_FILLERS))
            };
            if out.last() != Some(&t) {
                out.push(t);
            }
        }
        if out.iter().any(|&t| is_keyword(t)) {
            return out;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecorationRule {
    /// One marker before, two after.
    Affix,
    /// A marker after every second content token.
    Interleave,
    /// Markers around the sentence plus a repeated final keyword.
    WrapRepeat,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StyleSpec {
    pub style: Style,
    pub markers: std::ops::Range<usize>,
    pub rule: Option<DecorationRule>,
}

impl StyleSpec {
    pub fn of(style: Style) -> Self {
        let rule = match style {
            Style::S0 => None,
            Style::S1 => Some(DecorationRule::Affix),
            Style::S2 => Some(DecorationRule::Interleave),
            Style::S3 => Some(DecorationRule::WrapRepeat),
        };
        Self {
            style,
            markers: style.markers(),
            rule,
        }
    }
}

/// Applies `style`'s decoration rule. Every input token survives, in order.
pub fn stylize(plain: &[usize], style: &StyleSpec, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if let Some(m) = plain.iter().find(|&&t| is_marker(t)) {
        return Err(Error::Tokens(format!("input already carries marker token {m}")));
    }
    let mut marker = || rng.gen_range(style.markers.clone());
    let Some(rule) = style.rule else {
        return Ok(plain.to_vec());
    };
    Ok(match rule {
        DecorationRule::Affix => {
            let mut out = Vec::with_capacity(plain.len() + 3);
            out.push(marker());
            out.extend_from_slice(plain);
            out.push(marker());
            out.push(marker());
            out
        }
        DecorationRule::Interleave => {
            let mut out = Vec::with_capacity(plain.len() * 3 / 2 + 1);
            let mut content = 0;
            for &t in plain {
                out.push(t);
                if is_content(t) {
                    content += 1;
                    if content % 2 == 0 {
                        out.push(marker());
                    }
                }
            }
            out
        }
        DecorationRule::WrapRepeat => {
            let mut out = Vec::with_capacity(plain.len() + 3);
            out.push(marker());
            out.extend_from_slice(plain);
            if let Some(last_k) = out.iter().rposition(|&t| is_keyword(t)) {
                out.insert(last_k + 1, out[last_k]);
            }
            out.push(marker());
            out
        }
    })
}

/// Independently replaces each token by `MASK` with probability `mask_rate`
/// or drops it with probability `delete_rate`. Markers are not exempt.
pub fn noise_gn(t: &[usize], mask_rate: f64, delete_rate: f64, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let ok = |r: f64| (0.0..1.0).contains(&r);
    if !ok(mask_rate) || !ok(delete_rate) || mask_rate + delete_rate >= 1.0 {
        return Err(Error::Config(format!(
            "noise rates mask={mask_rate} delete={delete_rate} must lie in [0,1) with sum < 1"
        )));
    }
    let mut out = Vec::with_capacity(t.len());
    for &tok in t {
        let u: f64 = rng.gen();
        if u < mask_rate {
            out.push(MASK);
        } else if u < mask_rate + delete_rate {
            continue;
        } else {
            out.push(tok);
        }
    }
    Ok(out)
}

/// Style-stripping paraphrase surrogate: drops all markers, undoes the
/// repeated final keyword, resamples every filler and swaps neighbouring
/// fillers at random. Keyword order is untouched.
pub fn strip_style_gp(t: &[usize], rng: &mut impl Rng) -> Vec<usize> {
    let mut out = strip_markers(t);
    if let Some(last) = out.iter().rposition(|&x| is_keyword(x)) {
        if last > 0 && out[last - 1] == out[last] {
            out.remove(last);
        }
    }
    for x in out.iter_mut() {
        if is_filler(*x) {
            *x = Vocab::filler(rng.gen_range(0..N_FILLERS));
        }
    }
    let mut i = 0;
    while i + 1 < out.len() {
        if is_filler(out[i]) && is_filler(out[i + 1]) && rng.gen_bool(0.5) {
            out.swap(i, i + 1);
            i += 2;
        } else {
            i += 1;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseRates {
    pub mask: f64,
    pub delete: f64,
}

impl Default for NoiseRates {
    fn default() -> Self {
        Self {
            mask: 0.15,
            delete: 0.10,
        }
    }
}

/// How adapter training inputs are derived from style sentences.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PretrainMode {
    /// Inputs are `strip_style_gp(t)`.
    InversePara,
    /// Inputs are `noise_gn(t)`.
    Denoise,
}

impl PretrainMode {
    pub const ALL: [PretrainMode; 2] = [PretrainMode::InversePara, PretrainMode::Denoise];

    pub fn as_str(self) -> &'static str {
        match self {
            PretrainMode::InversePara => "inverse-para",
            PretrainMode::Denoise => "denoise",
        }
    }
}

impl fmt::Display for PretrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PretrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inverse-para" | "para" => Ok(PretrainMode::InversePara),
            "denoise" => Ok(PretrainMode::Denoise),
            other => Err(Error::Input(format!(
                "unknown mode `{other}` (expected inverse-para or denoise)"
            ))),
        }
    }
}

/// An `(input, target)` training pair.
pub type SeqPair = (Vec<usize>, Vec<usize>);

/// One style's sentences together with both perturbed training views.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleCorpus {
    pub style: Style,
    pub sentences: Split<Vec<usize>>,
    pub para: Split<SeqPair>,
    pub noise: Split<SeqPair>,
}

impl StyleCorpus {
    pub fn pairs(&self, mode: PretrainMode) -> &Split<SeqPair> {
        match mode {
            PretrainMode::InversePara => &self.para,
            PretrainMode::Denoise => &self.noise,
        }
    }
}

fn non_empty(mut t: Vec<usize>) -> Vec<usize> {
    if t.is_empty() {
        t.push(MASK);
    }
    t
}

/// Builds `n` sentences of `style` (undecorated for `S0`) with their
/// `(g_p(t), t)` and `(g_n(t), t)` pairs.
pub fn build_style_corpus(style: Style, n: usize, seed: u64, rates: NoiseRates) -> Result<StyleCorpus> {
    if n == 0 {
        return Err(Error::Input("need at least one style sentence".into()));
    }
    let spec = StyleSpec::of(style);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sentences = Vec::with_capacity(n);
    let mut para = Vec::with_capacity(n);
    let mut noise = Vec::with_capacity(n);
    for _ in 0..n {
        let plain = plain_sentence(&mut rng);
        let t = stylize(&plain, &spec, &mut rng)?;
        para.push((non_empty(strip_style_gp(&t, &mut rng)), t.clone()));
        noise.push((non_empty(noise_gn(&t, rates.mask, rates.delete, &mut rng)?), t.clone()));
        sentences.push(t);
    }
    Ok(StyleCorpus {
        style,
        sentences: Split::from_vec(sentences),
        para: Split::from_vec(para),
        noise: Split::from_vec(noise),
    })
}

/// General-domain text for base-model pretraining: half plain sentences, the
/// rest decorated with a uniformly chosen style, each paired with a noised
/// copy of itself.
pub fn build_pretrain_corpus(n: usize, seed: u64, rates: NoiseRates) -> Result<Split<SeqPair>> {
    if n == 0 {
        return Err(Error::Input("need at least one pretraining sentence".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let plain = plain_sentence(&mut rng);
        let style = if rng.gen_bool(0.5) {
            Style::S0
        } else {
            Style::STYLED[rng.gen_range(0..3)]
        };
        let t = stylize(&plain, &StyleSpec::of(style), &mut rng)?;
        let x = non_empty(noise_gn(&t, rates.mask, rates.delete, &mut rng)?);
        out.push((x, t));
    }
    Ok(Split::from_vec(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn vocab_layout() {
        let v = Vocab::new();
        assert_eq!(v.len(), 134);
        let mut seen = std::collections::HashSet::new();
        for s in Style::STYLED {
            for m in s.markers() {
                assert_eq!(kind(m), TokenKind::Marker(s));
                assert!(seen.insert(m));
            }
        }
        assert_eq!(seen.len(), 30);
        assert_eq!(v.parse("k1 f3 s2m0").unwrap(), vec![5, 57, 114]);
        assert_eq!(v.render(&[5, 57, 114]), "k1 f3 s2m0");
        assert!(v.parse("nope").is_err());
    }

    #[test]
    fn affix_rule() {
        let (k1, f3) = (Vocab::keyword(1), Vocab::filler(3));
        let out = stylize(&[k1, f3], &StyleSpec::of(Style::S1), &mut rng()).unwrap();
        assert_eq!(out.len(), 5);
        assert_eq!(&out[1..3], &[k1, f3]);
        for i in [0, 3, 4] {
            assert_eq!(kind(out[i]), TokenKind::Marker(Style::S1));
        }
    }

    #[test]
    fn interleave_rule() {
        let p: Vec<usize> = (0..5).map(Vocab::filler).collect();
        let out = stylize(&p, &StyleSpec::of(Style::S2), &mut rng()).unwrap();
        let marks: Vec<bool> = out.iter().map(|&t| is_marker(t)).collect();
        assert_eq!(marks, [false, false, true, false, false, true, false]);
    }

    #[test]
    fn wrap_repeat_rule() {
        let (k1, k2) = (Vocab::keyword(1), Vocab::keyword(2));
        let out = stylize(&[k1, k2], &StyleSpec::of(Style::S3), &mut rng()).unwrap();
        assert_eq!(&out[1..4], &[k1, k2, k2]);
        assert!(is_marker(out[0]) && is_marker(out[4]));
    }

    #[test]
    fn stylize_rejects_marked_input() {
        let m = Style::S2.markers().start;
        assert!(stylize(&[Vocab::keyword(0), m], &StyleSpec::of(Style::S1), &mut rng()).is_err());
    }

    #[test]
    fn noise_edge_rates() {
        let t: Vec<usize> = (4..20).collect();
        assert_eq!(noise_gn(&t, 0.0, 0.0, &mut rng()).unwrap(), t);
        let all = noise_gn(&t, 0.999_999_999, 0.0, &mut rng()).unwrap();
        assert_eq!(all, vec![MASK; t.len()]);
        assert!(noise_gn(&t, 0.6, 0.5, &mut rng()).is_err());
    }

    #[test]
    fn task_pairs_deterministic_and_valid() {
        let a = gen_task_pairs(5, 200, TaskKind::Headline).unwrap();
        assert_eq!(a, gen_task_pairs(5, 200, TaskKind::Headline).unwrap());
        assert_eq!((a.train.len(), a.valid.len(), a.test.len()), (180, 10, 10));
        for p in a.train.iter().chain(&a.test) {
            assert_eq!(keyword_subsequence(&p.source), p.target);
            let nf = p.source.iter().filter(|&&t| is_filler(t)).count();
            assert!((3..=6).contains(&p.target.len()) && (5..=15).contains(&nf));
        }
        let s = gen_task_pairs(5, 50, TaskKind::Story).unwrap();
        for p in &s.train {
            let doubled: Vec<usize> = p.source.iter().flat_map(|&k| [k, k]).collect();
            assert_eq!(p.target, doubled);
        }
    }

    #[test]
    fn split_boundaries() {
        assert_eq!(Split::<u8>::boundaries(10_000), (9000, 9500));
        assert!(gen_task_pairs(1, 0, TaskKind::Story).is_err());
    }
}
