//! Automatic metrics: ROUGE F1, add-k n-gram perplexity, a marker-based style
//! detector, and the `key=value` report that collects them.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::config::parse_kv;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::styledata::{is_marker, Style, BOS, EOS};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RougeVariant {
    One,
    Two,
    L,
}

fn f1(overlap: f64, cand: usize, refr: usize) -> f64 {
    if overlap == 0.0 || cand == 0 || refr == 0 {
        return 0.0;
    }
    let p = overlap / cand as f64;
    let r = overlap / refr as f64;
    2.0 * p * r / (p + r)
}

fn ngram_counts(t: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    if t.len() >= n {
        for w in t.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn lcs(a: &[usize], b: &[usize]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for &x in a {
        let mut diag = 0;
        for (j, &y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// ROUGE F1 of one candidate against one reference.
pub fn rouge(candidate: &[usize], reference: &[usize], variant: RougeVariant) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Input("ROUGE needs a non-empty reference".into()));
    }
    Ok(match variant {
        RougeVariant::L => f1(lcs(candidate, reference) as f64, candidate.len(), reference.len()),
        v => {
            let n = if v == RougeVariant::One { 1 } else { 2 };
            let c = ngram_counts(candidate, n);
            let r = ngram_counts(reference, n);
            let overlap: usize = c.iter().map(|(g, k)| (*k).min(*r.get(g).unwrap_or(&0))).sum();
            let total = |m: &HashMap<&[usize], usize>| m.values().sum::<usize>();
            f1(overlap as f64, total(&c), total(&r))
        }
    })
}

/// Mean ROUGE over aligned pairs.
pub fn corpus_rouge(candidates: &[Vec<usize>], references: &[Vec<usize>], variant: RougeVariant) -> Result<f64> {
    check_aligned(candidates.len(), references.len())?;
    let mut sum = 0.0;
    for (c, r) in candidates.iter().zip(references) {
        sum += rouge(c, r, variant)?;
    }
    Ok(sum / candidates.len() as f64)
}

fn check_aligned(outputs: usize, references: usize) -> Result<()> {
    if outputs != references {
        return Err(Error::Input(format!("{outputs} outputs but {references} references")));
    }
    if outputs == 0 {
        return Err(Error::Input("nothing to evaluate".into()));
    }
    Ok(())
}

/// Add-k smoothed n-gram language model over token ids `0..V`. Sentences are
/// padded with `order - 1` BOS tokens in front and one EOS at the end.
#[derive(Clone, Debug, PartialEq)]
pub struct NgramLm {
    pub order: usize,
    pub vocab_size: usize,
    pub k: f64,
    /// `plain` or a style id.
    pub tag: String,
    counts: HashMap<Vec<usize>, (HashMap<usize, usize>, usize)>,
}

impl NgramLm {
    pub fn train(corpus: &[Vec<usize>], order: usize, k: f64, vocab_size: usize, tag: &str) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Input("cannot train a language model on an empty corpus".into()));
        }
        if order == 0 || k <= 0.0 || vocab_size == 0 {
            return Err(Error::Config(
                "n-gram order, k and vocabulary size must be positive".into(),
            ));
        }
        let mut counts: HashMap<Vec<usize>, (HashMap<usize, usize>, usize)> = HashMap::new();
        for s in corpus {
            for (ctx, next) in events(s, order) {
                if next >= vocab_size {
                    return Err(Error::Tokens(format!(
                        "token {next} outside a vocabulary of {vocab_size}"
                    )));
                }
                let e = counts.entry(ctx).or_default();
                *e.0.entry(next).or_insert(0) += 1;
                e.1 += 1;
            }
        }
        Ok(Self {
            order,
            vocab_size,
            k,
            tag: tag.to_string(),
            counts,
        })
    }

    /// `p(next | context)`, where `context` holds the previous `order - 1`
    /// tokens.
    pub fn prob(&self, context: &[usize], next: usize) -> f64 {
        let (c, total) = match self.counts.get(context) {
            Some((m, t)) => (*m.get(&next).unwrap_or(&0), *t),
            None => (0, 0),
        };
        (c as f64 + self.k) / (total as f64 + self.k * self.vocab_size as f64)
    }

    /// Total negative log-likelihood of one sentence and its event count
    /// (tokens plus EOS).
    pub fn nll(&self, sentence: &[usize]) -> (f64, usize) {
        let mut nll = 0.0;
        let mut n = 0;
        for (ctx, next) in events(sentence, self.order) {
            nll -= self.prob(&ctx, next).ln();
            n += 1;
        }
        (nll, n)
    }
}

/// `(context, next)` events of one padded sentence.
fn events(s: &[usize], order: usize) -> Vec<(Vec<usize>, usize)> {
    let mut padded = vec![BOS; order - 1];
    padded.extend_from_slice(s);
    padded.push(EOS);
    (order - 1..padded.len())
        .map(|i| (padded[i + 1 - order..i].to_vec(), padded[i]))
        .collect()
}

/// `exp` of the mean per-token negative log-likelihood over all sequences,
/// counting EOS and not BOS.
pub fn perplexity(lm: &NgramLm, sequences: &[Vec<usize>]) -> Result<f64> {
    if sequences.is_empty() {
        return Err(Error::Input("perplexity of an empty set of sequences".into()));
    }
    let (nll, n) = sequences.iter().fold((0.0, 0), |(a, b), s| {
        let (x, y) = lm.nll(s);
        (a + x, b + y)
    });
    Ok((nll / n as f64).exp())
}

/// Fraction of outputs with at least one marker of `style` and none of any
/// other style.
pub fn style_marker_rate(outputs: &[Vec<usize>], style: Style) -> f64 {
    if outputs.is_empty() {
        return 0.0;
    }
    let own = style.markers();
    let hits = outputs
        .iter()
        .filter(|o| o.iter().any(|t| own.contains(t)) && !o.iter().any(|&t| is_marker(t) && !own.contains(&t)))
        .count();
    hits as f64 / outputs.len() as f64
}

pub fn exact_match(outputs: &[Vec<usize>], references: &[Vec<usize>]) -> Result<f64> {
    check_aligned(outputs.len(), references.len())?;
    let hits = outputs.iter().zip(references).filter(|(o, r)| o == r).count();
    Ok(hits as f64 / outputs.len() as f64)
}

/// Mean cosine between the mean token embeddings of each output and its
/// reference. A crude stand-in for BERTScore; pairs with an empty side score 0.
pub fn bert_proxy<T: Scalar>(embedding: &Tensor<T>, outputs: &[Vec<usize>], references: &[Vec<usize>]) -> Result<f64> {
    check_aligned(outputs.len(), references.len())?;
    let h = embedding.last_dim();
    let mean = |t: &[usize]| -> Result<Option<Vec<f64>>> {
        if t.is_empty() {
            return Ok(None);
        }
        let mut acc = vec![0.0; h];
        for &id in t {
            if id >= embedding.rows() {
                return Err(Error::Tokens(format!("token {id} has no embedding row")));
            }
            for (a, v) in acc.iter_mut().zip(embedding.row(id)) {
                *a += v.to_f64_lossy();
            }
        }
        Ok(Some(acc))
    };
    let mut sum = 0.0;
    for (o, r) in outputs.iter().zip(references) {
        if let (Some(a), Some(b)) = (mean(o)?, mean(r)?) {
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na > 0.0 && nb > 0.0 {
                sum += dot / (na * nb);
            }
        }
    }
    Ok(sum / outputs.len() as f64)
}

/// The plain LM and one LM per styled style.
#[derive(Clone, Debug)]
pub struct MetricLms {
    pub plain: NgramLm,
    pub styles: BTreeMap<Style, NgramLm>,
}

/// One evaluated run. Serialized as `key=value` lines with fixed key names.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub n: usize,
    pub exact_match: f64,
    pub r1: f64,
    pub r2: f64,
    pub rl: f64,
    pub bert_proxy: Option<f64>,
    pub ppl: f64,
    pub ppl_s: BTreeMap<Style, f64>,
    pub marker: BTreeMap<Style, f64>,
}

impl MetricsReport {
    pub fn marker_rate(&self, s: Style) -> f64 {
        self.marker.get(&s).copied().unwrap_or(0.0)
    }

    /// Checks every field against its range.
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let ok = unit(self.exact_match)
            && unit(self.r1)
            && unit(self.r2)
            && unit(self.rl)
            && self.bert_proxy.is_none_or(|b| (-1.0 - 1e-9..=1.0 + 1e-9).contains(&b))
            && self.ppl > 0.0
            && self.ppl_s.values().all(|&p| p > 0.0)
            && self.marker.values().all(|&m| unit(m));
        if !ok {
            return Err(Error::Format("metrics outside their ranges".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        put("n", self.n.to_string());
        put("em", self.exact_match.to_string());
        put("r1", self.r1.to_string());
        put("r2", self.r2.to_string());
        put("rl", self.rl.to_string());
        if let Some(b) = self.bert_proxy {
            put("bert_proxy", b.to_string());
        }
        put("ppl", self.ppl.to_string());
        for (s, v) in &self.ppl_s {
            put(&format!("ppl_s.{s}"), v.to_string());
        }
        for (s, v) in &self.marker {
            put(&format!("marker.{s}"), v.to_string());
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut n = None;
        let mut em = None;
        let (mut r1, mut r2, mut rl, mut ppl) = (None, None, None, None);
        let mut bert_proxy = None;
        let mut ppl_s = BTreeMap::new();
        let mut marker = BTreeMap::new();
        for (k, v, line) in parse_kv(text)? {
            let bad = || Error::Format(format!("report line {line}: bad value `{v}` for `{k}`"));
            let num = || v.parse::<f64>().map_err(|_| bad());
            match k.as_str() {
                "n" => n = Some(v.parse::<usize>().map_err(|_| bad())?),
                "em" => em = Some(num()?),
                "r1" => r1 = Some(num()?),
                "r2" => r2 = Some(num()?),
                "rl" => rl = Some(num()?),
                "bert_proxy" => bert_proxy = Some(num()?),
                "ppl" => ppl = Some(num()?),
                other => {
                    let (map, style) = if let Some(s) = other.strip_prefix("ppl_s.") {
                        (&mut ppl_s, s)
                    } else if let Some(s) = other.strip_prefix("marker.") {
                        (&mut marker, s)
                    } else {
                        return Err(Error::Format(format!("report line {line}: unknown key `{other}`")));
                    };
                    map.insert(style.parse::<Style>()?, num()?);
                }
            }
        }
        let need = |x: Option<f64>, k: &str| x.ok_or_else(|| Error::Format(format!("report lacks `{k}`")));
        let report = Self {
            n: n.ok_or_else(|| Error::Format("report lacks `n`".into()))?,
            exact_match: need(em, "em")?,
            r1: need(r1, "r1")?,
            r2: need(r2, "r2")?,
            rl: need(rl, "rl")?,
            bert_proxy,
            ppl: need(ppl, "ppl")?,
            ppl_s,
            marker,
        };
        report.validate()?;
        Ok(report)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_kv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Scores aligned outputs against references: ROUGE, exact match, PPL under
/// the plain LM, PPL-S and marker rate for each of `styles`.
pub fn evaluate_run(
    outputs: &[Vec<usize>],
    references: &[Vec<usize>],
    lms: &MetricLms,
    styles: &[Style],
) -> Result<MetricsReport> {
    check_aligned(outputs.len(), references.len())?;
    let mut ppl_s = BTreeMap::new();
    let mut marker = BTreeMap::new();
    for &s in styles {
        if let Some(lm) = lms.styles.get(&s) {
            ppl_s.insert(s, perplexity(lm, outputs)?);
        }
        marker.insert(s, style_marker_rate(outputs, s));
    }
    let report = MetricsReport {
        n: outputs.len(),
        exact_match: exact_match(outputs, references)?,
        r1: corpus_rouge(outputs, references, RougeVariant::One)?,
        r2: corpus_rouge(outputs, references, RougeVariant::Two)?,
        rl: corpus_rouge(outputs, references, RougeVariant::L)?,
        bert_proxy: None,
        ppl: perplexity(&lms.plain, outputs)?,
        ppl_s,
        marker,
    };
    report.validate()?;
    Ok(report)
}
