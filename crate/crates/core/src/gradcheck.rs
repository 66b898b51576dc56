//! Finite-difference checks of every differentiable op and of the full
//! teacher-forced model loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{grad_check, relative_error, Segment, Tape, Var};
use crate::error::Result;
use crate::model::{AdapterSet, Model, ModelConfig, Selector};
use crate::styledata::Style;
use crate::tensor::Tensor;
use crate::training::batch_loss;

/// Central-difference step used by every check.
pub const EPS: f64 = 1e-5;
/// Acceptance threshold on the worst relative error.
pub const TOLERANCE: f64 = 1e-4;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_f64(shape, &v).expect("positive shape")
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = randn(rng, shape);
    for v in t.data_mut() {
        *v += 0.2 * v.signum();
    }
    t
}

/// Reduces `y` to a scalar with fixed random weights so symmetric outputs
/// (e.g. softmax rows) still carry gradient.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = tape.constant(randn(&mut rng, &shape));
    let p = tape.mul(y, c)?;
    Ok(tape.sum(p))
}

/// Worst relative error of each op, keyed by a short description.
pub fn op_checks(seed: u64) -> Result<Vec<(String, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut run = |name: &str, w: Tensor<f64>, f: &dyn Fn(&mut Tape<f64>, Var) -> Result<Var>| -> Result<()> {
        let e = grad_check(|t, x| f(t, x).and_then(|y| project(t, y, 5)), &w, EPS)?;
        out.push((name.to_string(), e));
        Ok(())
    };

    let a = randn(&mut rng, &[3, 4]);
    let b = randn(&mut rng, &[4, 5]);
    let bt = randn(&mut rng, &[5, 4]);
    let same = randn(&mut rng, &[3, 4]);
    let row = randn(&mut rng, &[4]);
    let (b2, bt2, same2, row2, a2) = (b.clone(), bt.clone(), same.clone(), row.clone(), a.clone());
    run("matmul/left", a.clone(), &move |t, x| {
        let c = t.constant(b2.clone());
        t.matmul(x, c)
    })?;
    run("matmul/right", b.clone(), &move |t, x| {
        let c = t.constant(a2.clone());
        t.matmul(c, x)
    })?;
    run("matmul_bt/left", a.clone(), &move |t, x| {
        let c = t.constant(bt2.clone());
        t.matmul_bt(x, c)
    })?;
    let a3 = a.clone();
    run("matmul_bt/right", bt, &move |t, x| {
        let c = t.constant(a3.clone());
        t.matmul_bt(c, x)
    })?;
    let s3 = same.clone();
    run("add", a.clone(), &move |t, x| {
        let c = t.constant(s3.clone());
        t.add(x, c)
    })?;
    run("add_row/bias", row.clone(), &move |t, x| {
        let c = t.constant(same2.clone());
        t.add_row(c, x)
    })?;
    run("add_row/x", a.clone(), &move |t, x| {
        let c = t.constant(row2.clone());
        t.add_row(x, c)
    })?;
    let s4 = same.clone();
    run("mul", a.clone(), &move |t, x| {
        let c = t.constant(s4.clone());
        t.mul(x, c)
    })?;
    run("mul/square", a.clone(), &|t, x| t.mul(x, x))?;
    run("scale", a.clone(), &|t, x| Ok(t.scale(x, -1.7)))?;
    run("relu", away_from_zero(&mut rng, &[3, 4]), &|t, x| Ok(t.relu(x)))?;
    run("gelu", a.clone(), &|t, x| Ok(t.gelu(x)))?;
    run("sum", a.clone(), &|t, x| {
        let s = t.sum(x);
        t.mul(s, s)
    })?;

    let gain = randn(&mut rng, &[4]);
    let bias = randn(&mut rng, &[4]);
    let (g1, b1) = (gain.clone(), bias.clone());
    run("layer_norm/x", a.clone(), &move |t, x| {
        let g = t.constant(g1.clone());
        let b = t.constant(b1.clone());
        t.layer_norm(x, g, b, 1e-5)
    })?;
    let (x2, b2) = (a.clone(), bias.clone());
    run("layer_norm/gain", gain.clone(), &move |t, g| {
        let x = t.constant(x2.clone());
        let b = t.constant(b2.clone());
        t.layer_norm(x, g, b, 1e-5)
    })?;
    let (x3, g3) = (a.clone(), gain);
    run("layer_norm/bias", bias, &move |t, b| {
        let x = t.constant(x3.clone());
        let g = t.constant(g3.clone());
        t.layer_norm(x, g, b, 1e-5)
    })?;
    run("softmax/axis0", a.clone(), &|t, x| t.softmax(x, 0))?;
    run("softmax/axis1", a.clone(), &|t, x| t.softmax(x, 1))?;
    run("softmax/3d", randn(&mut rng, &[2, 3, 2]), &|t, x| t.softmax(x, 1))?;
    run("embedding", randn(&mut rng, &[6, 4]), &|t, x| {
        t.embedding(x, &[1, 4, 1, 0])
    })?;

    // two packed segments: 2 queries over 3 keys, 3 queries over 2 keys
    let segs = [
        Segment {
            q_start: 0,
            q_len: 2,
            k_start: 0,
            k_len: 3,
        },
        Segment {
            q_start: 2,
            q_len: 3,
            k_start: 3,
            k_len: 2,
        },
    ];
    let q = randn(&mut rng, &[5, 4]);
    let k = randn(&mut rng, &[5, 4]);
    let v = randn(&mut rng, &[5, 4]);
    for (which, w) in [("q", q.clone()), ("k", k.clone()), ("v", v.clone())] {
        let (q, k, v) = (q.clone(), k.clone(), v.clone());
        run(&format!("attention/{which}"), w, &move |t, x| {
            let mut side = |m: &Tensor<f64>, me: &str| if me == which { x } else { t.constant(m.clone()) };
            let (qv, kv, vv) = (side(&q, "q"), side(&k, "k"), side(&v, "v"));
            t.attention(qv, kv, vv, 2, &segs, false)
        })?;
    }
    let causal = [
        Segment {
            q_start: 0,
            q_len: 3,
            k_start: 0,
            k_len: 3,
        },
        Segment {
            q_start: 3,
            q_len: 2,
            k_start: 3,
            k_len: 2,
        },
    ];
    for (which, w) in [("q", q.clone()), ("k", k.clone()), ("v", v.clone())] {
        let (q, k, v) = (q.clone(), k.clone(), v.clone());
        run(&format!("attention/causal/{which}"), w, &move |t, x| {
            let mut side = |m: &Tensor<f64>, me: &str| if me == which { x } else { t.constant(m.clone()) };
            let (qv, kv, vv) = (side(&q, "q"), side(&k, "k"), side(&v, "v"));
            t.attention(qv, kv, vv, 2, &causal, true)
        })?;
    }
    run("cross_entropy", randn(&mut rng, &[4, 6]), &|t, x| {
        t.cross_entropy(x, &[2, 0, 5, 1], 0)
    })?;
    Ok(out)
}

/// Small double-precision model used by the full-loss check.
pub fn check_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        d_model: 8,
        n_heads: 2,
        d_ffn: 16,
        n_enc_layers: 1,
        n_dec_layers: 2,
        adapter_bottleneck: 4,
        max_len: 12,
        seed: 11,
        dropout: 0.0,
        ln_eps: 1e-5,
    }
}

/// Location of one checked scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamProbe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Teacher-forced loss of a small batch w.r.t. `n` randomly chosen scalar
/// parameters, a quarter of them from the adapters (which get random
/// up-projections so their gradients are not trivially zero).
pub fn model_check(config: ModelConfig, n: usize, seed: u64) -> Result<Vec<ParamProbe>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::<f64>::build(config.clone())?;
    let mut adapters = AdapterSet::<f64>::fresh(&config, Style::S1.as_str(), seed ^ 0x5eed);
    for layer in &mut adapters.layers {
        for v in layer.up.data_mut() {
            *v = 0.05 * Distribution::<f64>::sample(&StandardNormal, &mut rng);
        }
    }
    model.swap_adapters(adapters)?;

    let v = config.vocab_size;
    let len = |rng: &mut ChaCha8Rng| rng.gen_range(3..7);
    let pairs: Vec<(Vec<usize>, Vec<usize>)> = (0..2)
        .map(|_| {
            let (a, b) = (len(&mut rng), len(&mut rng));
            let src = (0..a).map(|_| rng.gen_range(4..v)).collect();
            let tgt = (0..b).map(|_| rng.gen_range(4..v)).collect();
            (src, tgt)
        })
        .collect();
    let batch: Vec<&(Vec<usize>, Vec<usize>)> = pairs.iter().collect();
    let loss = |m: &Model<f64>| batch_loss(m, &batch, Selector::Base, true, None).map(|r| r.0);
    let (_, base_grads) = batch_loss(&model, &batch, Selector::Base, true, None)?;
    let (_, adapter_grads) = batch_loss(&model, &batch, Selector::Adapter, true, None)?;

    let adapter_names = AdapterSet::<f64>::param_names(config.n_dec_layers);
    let n_adapter = (n / 4).max(1).min(n);
    let mut probes = Vec::with_capacity(n);
    for i in 0..n {
        let from_adapter = i < n_adapter;
        let (name, len) = if from_adapter {
            let slot = rng.gen_range(0..adapter_names.len());
            let t = model.adapters().expect("installed").named()[slot].1.len();
            (adapter_names[slot].clone(), t)
        } else {
            // Skip the embeddings (most rows never see a token in the batch)
            // and the key biases, whose gradient is exactly zero because
            // softmax ignores a shift shared by every key.
            let names: Vec<&str> = model
                .params()
                .iter()
                .filter(|(n, _, _)| !n.ends_with("embed") && !n.ends_with(".bk"))
                .map(|(n, _, _)| n)
                .collect();
            let name = names[rng.gen_range(0..names.len())].to_string();
            let len = model.params().get(&name).expect("listed").len();
            (name, len)
        };
        let index = rng.gen_range(0..len);
        let analytic = if from_adapter {
            adapter_grads.get(&name).map_or(0.0, |g| g[index])
        } else {
            base_grads.get(&name).map_or(0.0, |g| g[index])
        };
        let shifted = |delta: f64| -> Result<f64> {
            let mut m = model.clone();
            let slot = if from_adapter {
                let pos = adapter_names.iter().position(|n| *n == name).expect("known name");
                m.adapters_mut().expect("installed").tensors_mut().swap_remove(pos)
            } else {
                m.params_mut().get_mut(&name).expect("known name")
            };
            slot.data_mut()[index] += delta;
            loss(&m)
        };
        let numeric = (shifted(EPS)? - shifted(-EPS)?) / (2.0 * EPS);
        probes.push(ParamProbe {
            rel_error: relative_error(analytic, numeric),
            name,
            index,
            analytic,
            numeric,
        });
    }
    Ok(probes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        for (name, e) in op_checks(3).unwrap() {
            assert!(e < TOLERANCE, "{name}: {e}");
        }
    }
}
