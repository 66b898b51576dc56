//! Beam search against brute-force enumeration on tiny hand-made scorers.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use styleswap::decode::{beam_search, generate, greedy, log_softmax, DecodeConfig, StepScorer};
use styleswap::{AdapterSet, Model64, ModelConfig};

/// Random but fixed next-token distribution for every prefix.
struct RandomTable {
    vocab: usize,
    seed: u64,
    memo: HashMap<Vec<usize>, Vec<f64>>,
}

impl RandomTable {
    fn new(vocab: usize, seed: u64) -> Self {
        Self {
            vocab,
            seed,
            memo: HashMap::new(),
        }
    }

    fn row(&mut self, prefix: &[usize]) -> Vec<f64> {
        let (vocab, seed) = (self.vocab, self.seed);
        self.memo
            .entry(prefix.to_vec())
            .or_insert_with(|| {
                let mut h = seed;
                for &t in prefix {
                    h = h.wrapping_mul(0x100_0000_01b3).wrapping_add(t as u64 + 1);
                }
                let mut rng = ChaCha8Rng::seed_from_u64(h);
                let logits: Vec<f64> = (0..vocab).map(|_| rng.gen_range(-3.0..3.0)).collect();
                log_softmax(&logits)
            })
            .clone()
    }
}

impl StepScorer for RandomTable {
    fn log_probs(&mut self, prefixes: &[Vec<usize>]) -> styleswap::Result<Vec<Vec<f64>>> {
        Ok(prefixes.iter().map(|p| self.row(p)).collect())
    }
}

/// Every finished sequence (EOS-terminated or `max_len` long) with its
/// score, without any search.
fn enumerate(table: &mut RandomTable, cfg: &DecodeConfig) -> Vec<(Vec<usize>, f64)> {
    let mut out = Vec::new();
    let mut stack = vec![(vec![cfg.bos], 0.0)];
    while let Some((prefix, score)) = stack.pop() {
        let lp = table.row(&prefix);
        for (tok, &l) in lp.iter().enumerate() {
            if cfg.banned.contains(&tok) {
                continue;
            }
            let mut next = prefix.clone();
            next.push(tok);
            let s = score + l;
            if Some(tok) == cfg.eos || next.len() - 1 == cfg.max_len {
                out.push((next, s));
            } else {
                stack.push((next, s));
            }
        }
    }
    out
}

fn normalized(cfg: &DecodeConfig, score: f64, generated: usize) -> f64 {
    if cfg.length_penalty > 0.0 {
        score / (generated as f64).powf(cfg.length_penalty)
    } else {
        score
    }
}

fn exhaustive_best(table: &mut RandomTable, cfg: &DecodeConfig) -> (Vec<usize>, f64) {
    let mut all = enumerate(table, cfg);
    all.sort_by(|a, b| {
        let (na, nb) = (normalized(cfg, a.1, a.0.len() - 1), normalized(cfg, b.1, b.0.len() - 1));
        nb.partial_cmp(&na)
            .unwrap()
            .then(a.0.len().cmp(&b.0.len()))
            .then_with(|| a.0.cmp(&b.0))
    });
    let (prefix, score) = all.swap_remove(0);
    let tokens = prefix[1..].iter().copied().filter(|&t| Some(t) != cfg.eos).collect();
    (tokens, normalized(cfg, score, prefix.len() - 1))
}

fn tiny_cfg(rng: &mut ChaCha8Rng) -> (usize, DecodeConfig) {
    let vocab = rng.gen_range(3..=4);
    let max_len = rng.gen_range(1..=4);
    (
        vocab,
        DecodeConfig {
            // saturated: wider than the number of distinct prefixes
            beam_size: vocab.pow(max_len as u32),
            max_len,
            length_penalty: 0.0,
            bos: 0,
            eos: Some(1),
            banned: vec![0],
        },
    )
}

#[test]
fn saturated_beam_equals_exhaustive_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..50 {
        let (vocab, cfg) = tiny_cfg(&mut rng);
        let mut table = RandomTable::new(vocab, case);
        let got = beam_search(&mut table, &cfg, "t").unwrap();
        let (tokens, score) = exhaustive_best(&mut table, &cfg);
        assert_eq!(got.tokens, tokens, "case {case}");
        assert!((got.score - score).abs() < 1e-9, "case {case}");
    }
}

#[test]
fn saturated_beam_with_length_penalty_equals_exhaustive() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    for case in 0..50 {
        let (vocab, mut cfg) = tiny_cfg(&mut rng);
        cfg.length_penalty = 1.0;
        let mut table = RandomTable::new(vocab, 1000 + case);
        let got = beam_search(&mut table, &cfg, "t").unwrap();
        let (tokens, score) = exhaustive_best(&mut table, &cfg);
        assert_eq!(got.tokens, tokens, "case {case}");
        assert!((got.score - score).abs() < 1e-9, "case {case}");
    }
}

#[test]
fn beam_one_equals_greedy() {
    for seed in 0..50 {
        let cfg = DecodeConfig {
            beam_size: 1,
            max_len: 6,
            length_penalty: 0.0,
            bos: 0,
            eos: Some(1),
            banned: vec![0],
        };
        let mut a = RandomTable::new(5, seed);
        let mut b = RandomTable::new(5, seed);
        assert_eq!(
            beam_search(&mut a, &cfg, "t").unwrap(),
            greedy(&mut b, &cfg, "t").unwrap()
        );
    }
}

#[test]
fn score_is_sum_of_step_log_probs() {
    for seed in 0..20 {
        let cfg = DecodeConfig {
            beam_size: 3,
            max_len: 5,
            length_penalty: 0.0,
            bos: 0,
            eos: Some(1),
            banned: vec![0],
        };
        let mut table = RandomTable::new(6, seed);
        let r = beam_search(&mut table, &cfg, "t").unwrap();
        let mut prefix = vec![0];
        let mut total = 0.0;
        let mut steps = r.tokens.clone();
        if steps.len() < cfg.max_len {
            steps.push(1);
        }
        for t in steps {
            total += table.row(&prefix)[t];
            prefix.push(t);
        }
        assert!((total - r.score).abs() < 1e-9, "seed {seed}: {total} vs {}", r.score);
    }
}

/// Distribution that depends only on the prefix, given as probabilities.
type Probs = Box<dyn Fn(&[usize]) -> [f64; 3]>;

struct Fixed(Probs);

impl StepScorer for Fixed {
    fn log_probs(&mut self, prefixes: &[Vec<usize>]) -> styleswap::Result<Vec<Vec<f64>>> {
        Ok(prefixes
            .iter()
            .map(|p| (self.0)(p).iter().map(|v| v.ln()).collect())
            .collect())
    }
}

#[test]
fn three_step_table_finds_global_argmax_greedy_misses() {
    // after BOS: token 0 looks best, but token 1 leads to a confident path
    let table = |p: &[usize]| -> [f64; 3] {
        match p {
            [_] => [0.5, 0.3, 0.2],
            [_, 1] => [0.05, 0.9, 0.05],
            [_, 1, 1] => [0.1, 0.1, 0.8],
            _ => [1.0 / 3.0; 3],
        }
    };
    let cfg = DecodeConfig {
        beam_size: 3,
        max_len: 3,
        length_penalty: 0.0,
        bos: 0,
        eos: None,
        banned: vec![],
    };
    let mut best = (f64::NEG_INFINITY, vec![]);
    for a in 0..3 {
        for b in 0..3 {
            for c in 0..3 {
                let s = table(&[0])[a].ln() + table(&[0, a])[b].ln() + table(&[0, a, b])[c].ln();
                if s > best.0 {
                    best = (s, vec![a, b, c]);
                }
            }
        }
    }
    assert_eq!(best.1, vec![1, 1, 2]);
    let got = beam_search(&mut Fixed(Box::new(table)), &cfg, "t").unwrap();
    assert_eq!(got.tokens, best.1);
    assert!((got.score - best.0).abs() < 1e-12);
    let g = greedy(&mut Fixed(Box::new(table)), &cfg, "t").unwrap();
    assert_eq!(g.tokens[0], 0, "greedy takes the locally best first token");
}

#[test]
fn model_generation_is_deterministic_and_beam_one_is_greedy() {
    let cfg = ModelConfig {
        vocab_size: 12,
        d_model: 8,
        n_heads: 2,
        d_ffn: 16,
        n_enc_layers: 1,
        n_dec_layers: 1,
        adapter_bottleneck: 2,
        max_len: 10,
        seed: 4,
        ..ModelConfig::default()
    };
    let mut m = Model64::build(cfg.clone()).unwrap();
    m.swap_adapters(AdapterSet::fresh(&cfg, "s0", 1)).unwrap();
    let one = DecodeConfig {
        beam_size: 1,
        ..DecodeConfig::default()
    };
    for src in [vec![4, 5, 6], vec![7], vec![11, 10, 9, 8]] {
        let a = generate(&m, &src, &DecodeConfig::default()).unwrap();
        assert_eq!(a, generate(&m, &src, &DecodeConfig::default()).unwrap());
        let g = generate(&m, &src, &one).unwrap();
        let mut scorer = styleswap::decode::ModelScorer::new(&m, &src).unwrap();
        let capped = DecodeConfig {
            max_len: 9,
            ..one.clone()
        };
        assert_eq!(g, greedy(&mut scorer, &capped, "s0").unwrap());
        assert!(!g.tokens.iter().any(|t| [0, 1].contains(t)), "banned token emitted");
    }
}

#[test]
fn default_beam_is_four() {
    assert_eq!(DecodeConfig::default().beam_size, 4);
}
