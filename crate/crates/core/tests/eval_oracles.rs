use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use styleswap::eval::{
    corpus_rouge, evaluate_run, perplexity, rouge, style_marker_rate, MetricLms, MetricsReport, NgramLm, RougeVariant,
};
use styleswap::styledata::{build_style_corpus, plain_sentence, stylize, NoiseRates, Style, StyleSpec, EOS};

const ROUGE_TOL: f64 = 1e-9;

fn toks(s: &str) -> Vec<usize> {
    s.split_whitespace().map(|w| w.as_bytes()[0] as usize).collect()
}

#[test]
fn rouge_hand_cases() {
    let (c, r) = (toks("a b c"), toks("a c d"));
    assert!((rouge(&c, &r, RougeVariant::One).unwrap() - 2.0 / 3.0).abs() < ROUGE_TOL);
    assert!((rouge(&c, &r, RougeVariant::L).unwrap() - 2.0 / 3.0).abs() < ROUGE_TOL);
    // bigrams {ab, bc} vs {ac, cd}: no overlap
    assert!(rouge(&c, &r, RougeVariant::Two).unwrap().abs() < ROUGE_TOL);

    // clipped counts: cand "a a b", ref "a b b" -> overlap a:1 b:1
    let (c, r) = (toks("a a b"), toks("a b b"));
    assert!((rouge(&c, &r, RougeVariant::One).unwrap() - 2.0 / 3.0).abs() < ROUGE_TOL);
    // bigrams {aa, ab} vs {ab, bb}: 1 of 2 each way
    assert!((rouge(&c, &r, RougeVariant::Two).unwrap() - 0.5).abs() < ROUGE_TOL);

    // unequal lengths: cand "a b", ref "a x b y"; P=1, R=1/2, F=2/3
    let (c, r) = (toks("a b"), toks("a x b y"));
    assert!((rouge(&c, &r, RougeVariant::One).unwrap() - 2.0 / 3.0).abs() < ROUGE_TOL);
    assert!((rouge(&c, &r, RougeVariant::L).unwrap() - 2.0 / 3.0).abs() < ROUGE_TOL);

    for v in [RougeVariant::One, RougeVariant::Two, RougeVariant::L] {
        assert_eq!(rouge(&toks("a b c"), &toks("a b c"), v).unwrap(), 1.0);
        assert_eq!(rouge(&toks("a b c"), &toks("x y z"), v).unwrap(), 0.0);
    }
}

fn seqs() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0usize..6, 1..12)
}

proptest! {
    #[test]
    fn rouge_f1_is_symmetric(a in seqs(), b in seqs()) {
        for v in [RougeVariant::One, RougeVariant::Two, RougeVariant::L] {
            let x = rouge(&a, &b, v).unwrap();
            let y = rouge(&b, &a, v).unwrap();
            prop_assert!((x - y).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&x));
        }
    }

    #[test]
    fn lcs_never_exceeds_unigram_overlap(a in seqs(), b in seqs()) {
        let l = rouge(&a, &b, RougeVariant::L).unwrap();
        let one = rouge(&a, &b, RougeVariant::One).unwrap();
        prop_assert!(l <= one + 1e-12);
    }

    #[test]
    fn corpus_metrics_ignore_order(pairs in prop::collection::vec((seqs(), seqs()), 1..8), shift in 0usize..8) {
        let (outs, refs): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
        let k = shift % outs.len();
        let mut o2 = outs.clone();
        let mut r2 = refs.clone();
        o2.rotate_left(k);
        r2.rotate_left(k);
        for v in [RougeVariant::One, RougeVariant::Two, RougeVariant::L] {
            let x = corpus_rouge(&outs, &refs, v).unwrap();
            let y = corpus_rouge(&o2, &r2, v).unwrap();
            prop_assert!((x - y).abs() < 1e-12);
        }
        let lm = NgramLm::train(&refs, 2, 0.5, 6, "plain").unwrap();
        let a = perplexity(&lm, &outs).unwrap();
        let b = perplexity(&lm, &o2).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a);
    }
}

#[test]
fn uniform_lm_perplexity_is_vocab_size() {
    // every id of a 4-token vocabulary occurs once as a unigram event
    // (EOS comes from the padding), so p = (1+k)/(4+4k) = 1/4 everywhere
    let lm = NgramLm::train(&[vec![0, 1, 3]], 1, 1.0, 4, "u").unwrap();
    for t in 0..4 {
        assert_eq!(lm.prob(&[], t), 0.25);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sample: Vec<Vec<usize>> = (0..20)
        .map(|_| (0..rng.gen_range(1..9)).map(|_| rng.gen_range(0..4)).collect())
        .collect();
    let ppl = perplexity(&lm, &sample).unwrap();
    assert!((ppl - 4.0).abs() < 1e-12, "{ppl}");

    // and the k -> infinity limit of a trigram LM on real data
    let lm = NgramLm::train(&sample, 3, 1e12, 134, "big").unwrap();
    assert!((perplexity(&lm, &sample).unwrap() - 134.0).abs() < 1e-6);
}

#[test]
fn conditionals_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let corpus: Vec<Vec<usize>> = (0..200).map(|_| plain_sentence(&mut rng)).collect();
    let lm = NgramLm::train(&corpus, 3, 0.1, 134, "plain").unwrap();
    for (i, s) in corpus.iter().take(100).enumerate() {
        let ctx = if i % 2 == 0 {
            // seen contexts
            vec![s[0], s[1]]
        } else {
            vec![rng.gen_range(0..134), rng.gen_range(0..134)]
        };
        let total: f64 = (0..134).map(|t| lm.prob(&ctx, t)).sum();
        assert!((total - 1.0).abs() < 1e-9, "context {ctx:?}: {total}");
    }
}

#[test]
fn training_sentence_beats_random_sequence() {
    let sentence = vec![10, 60, 11, 61, 12];
    let lm = NgramLm::train(std::slice::from_ref(&sentence), 2, 0.1, 134, "one").unwrap();
    let other = vec![70, 20, 90, 5, 40];
    assert!(perplexity(&lm, &[sentence]).unwrap() < perplexity(&lm, &[other]).unwrap());
}

#[test]
fn own_style_lm_prefers_own_style() {
    let rates = NoiseRates::default();
    let lms: BTreeMap<Style, NgramLm> = Style::STYLED
        .iter()
        .map(|&s| {
            let c = build_style_corpus(s, 1200, 40 + s as u64, rates).unwrap();
            (s, NgramLm::train(&c.sentences.train, 3, 0.1, 134, s.as_str()).unwrap())
        })
        .collect();
    for &x in &Style::STYLED {
        let held = build_style_corpus(x, 1200, 90 + x as u64, rates)
            .unwrap()
            .sentences
            .train;
        for &y in &Style::STYLED {
            if x != y {
                let own = perplexity(&lms[&x], &held).unwrap();
                let cross = perplexity(&lms[&y], &held).unwrap();
                assert!(own < cross, "{x} text: own {own} vs {y} LM {cross}");
            }
        }
    }
}

#[test]
fn marker_rate_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let plain: Vec<Vec<usize>> = (0..400).map(|_| plain_sentence(&mut rng)).collect();
    let s1: Vec<Vec<usize>> = plain
        .iter()
        .map(|p| stylize(p, &StyleSpec::of(Style::S1), &mut rng).unwrap())
        .collect();
    assert_eq!(style_marker_rate(&s1, Style::S1), 1.0);
    assert_eq!(style_marker_rate(&s1, Style::S2), 0.0);
    assert_eq!(style_marker_rate(&s1, Style::S3), 0.0);
    for s in Style::STYLED {
        assert_eq!(style_marker_rate(&plain, s), 0.0);
    }
    // every other sentence stylized
    let mixed: Vec<Vec<usize>> = (0..400)
        .map(|i| if i % 2 == 0 { s1[i].clone() } else { plain[i].clone() })
        .collect();
    assert_eq!(style_marker_rate(&mixed, Style::S1), 0.5);
    // a random half: binomial sd is 0.025 at n = 400
    let coin: Vec<Vec<usize>> = (0..400)
        .map(|i| {
            if rng.gen_bool(0.5) {
                s1[i].clone()
            } else {
                plain[i].clone()
            }
        })
        .collect();
    assert!((style_marker_rate(&coin, Style::S1) - 0.5).abs() < 0.1);
}

fn toy_lms(seed: u64) -> MetricLms {
    let rates = NoiseRates::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plain: Vec<Vec<usize>> = (0..1000).map(|_| plain_sentence(&mut rng)).collect();
    MetricLms {
        plain: NgramLm::train(&plain, 3, 0.1, 134, "plain").unwrap(),
        styles: Style::STYLED
            .iter()
            .map(|&s| {
                let c = build_style_corpus(s, 1000, seed + s as u64, rates).unwrap();
                (s, NgramLm::train(&c.sentences.train, 3, 0.1, 134, s.as_str()).unwrap())
            })
            .collect(),
    }
}

#[test]
fn stylized_outputs_have_lower_ppl_s_than_plain_outputs() {
    let lms = toy_lms(5);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let plain: Vec<Vec<usize>> = (0..300).map(|_| plain_sentence(&mut rng)).collect();
    let base = evaluate_run(&plain, &plain, &lms, &Style::STYLED).unwrap();
    assert_eq!((base.r1, base.r2, base.rl, base.exact_match), (1.0, 1.0, 1.0, 1.0));
    for s in Style::STYLED {
        let styled: Vec<Vec<usize>> = plain
            .iter()
            .map(|p| stylize(p, &StyleSpec::of(s), &mut rng).unwrap())
            .collect();
        let r = evaluate_run(&styled, &styled, &lms, &Style::STYLED).unwrap();
        assert!(
            r.ppl_s[&s] < base.ppl_s[&s],
            "{s}: {} vs {}",
            r.ppl_s[&s],
            base.ppl_s[&s]
        );
    }
}

#[test]
fn report_round_trips_through_file() {
    let lms = toy_lms(6);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let outs: Vec<Vec<usize>> = (0..50).map(|_| plain_sentence(&mut rng)).collect();
    let refs: Vec<Vec<usize>> = (0..50).map(|_| plain_sentence(&mut rng)).collect();
    let mut r = evaluate_run(&outs, &refs, &lms, &Style::STYLED).unwrap();
    r.bert_proxy = Some(0.123456789012345);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.metrics");
    r.save(&path).unwrap();
    assert_eq!(MetricsReport::load(&path).unwrap(), r);
    let text = std::fs::read_to_string(&path).unwrap();
    for key in ["r1=", "r2=", "rl=", "ppl=", "ppl_s.s1=", "marker.s3="] {
        assert!(text.lines().any(|l| l.starts_with(key)), "missing {key}");
    }
    assert!(MetricsReport::parse("r1=0.5\n").is_err());
}

#[test]
fn eos_is_counted_in_perplexity() {
    let lm = NgramLm::train(&[vec![5]], 1, 1.0, 8, "t").unwrap();
    // events: 5, EOS -> p(5) = 2/10, p(EOS) = 2/10
    let ppl = perplexity(&lm, &[vec![5]]).unwrap();
    assert!((ppl - 5.0).abs() < 1e-12);
    assert!((lm.prob(&[], EOS) - 0.2).abs() < 1e-15);
}
