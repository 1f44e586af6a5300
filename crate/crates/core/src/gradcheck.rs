//! Central finite-difference checks of every differentiable operation.
//!
//! Each case draws 64-bit inputs in `[-2, 2]` (domain-restricted ops draw
//! from a sub-range), reduces the op output to a scalar with a fixed random
//! projection and compares the tape gradient of every input element with
//! `(f(x+h) - f(x-h)) / 2h`.
//!
//! The error of one element is `|a - n| / max(|a|, |n|, REL_FLOOR)`.
//! When the central difference straddles a ReLU or max switch it is
//! meaningless; such elements are re-checked with second-order one-sided
//! differences and counted in [`OpReport::one_sided`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attention::{
    cnn_two_stage, compose, freq_attention_weights, gated_time_weights, time_attention_weights, AttentionConfig,
    GateVars, Scenario, ScorerVars, TimeStage,
};
use crate::backbones::{splice, stats_pool, BatchNorm, ForwardCtx, Mode, ModelConfig, ResNetConfig, SpeakerModel};
use crate::backbones::BackboneConfig;
use crate::error::{Error, Result};
use crate::objectives::{am_softmax, cross_entropy, AmSoftmaxConfig};
use crate::tensor::{Binder, ParamStore, Reduce, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Lower bound of the relative-error denominator, so that gradients that
/// are zero up to rounding do not divide by zero.
pub const REL_FLOOR: f64 = 1e-3;
pub const DEFAULT_SEEDS: usize = 100;

type OpFn = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + Send + Sync>;

/// One instance of an op at a random point.
pub struct Case {
    pub inputs: Vec<Tensor>,
    f: OpFn,
}

impl Case {
    fn new(inputs: Vec<Tensor>, f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + Send + Sync + 'static) -> Self {
        Case {
            inputs,
            f: Box::new(f),
        }
    }

    fn output(&self, values: &[Tensor]) -> Result<Tensor> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = values.iter().map(|v| tape.constant(v.clone())).collect();
        Ok((*(self.f)(&tape, &vars)?.value()).clone())
    }
}

/// Worst element over all seeds of one op.
#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub name: &'static str,
    pub seeds: usize,
    pub elements: usize,
    pub max_rel_err: f64,
    pub one_sided: usize,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < REL_TOL
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..=hi)).collect()).expect("positive shape")
}

fn sym(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    uniform(shape, -2.0, 2.0, rng)
}

/// Magnitudes in `[lo, hi]` with random signs.
fn away_from_zero(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = uniform(shape, lo, hi, rng);
    for v in t.data_mut() {
        if rng.gen::<bool>() {
            *v = -*v;
        }
    }
    t
}

fn labels(n: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..classes)).collect()
}

fn gate(width: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![sym(&[width, k], rng), sym(&[1, k], rng), sym(&[k, width], rng)]
}

fn gate_vars<'t>(v: &[Var<'t>]) -> GateVars<'t> {
    GateVars {
        w0: v[0],
        b0: v[1],
        w1: v[2],
    }
}

fn scorer_vars<'t>(v: &[Var<'t>]) -> ScorerVars<'t> {
    ScorerVars {
        w0: v[0],
        b0: v[1],
        w1: v[2],
    }
}

fn attention_case(cfg: AttentionConfig, rng: &mut ChaCha8Rng) -> Case {
    let (b, t, f, k) = (2, 5, 4, 3);
    let mut inputs = vec![sym(&[b, t, f], rng)];
    inputs.extend(gate(f, k, rng));
    inputs.extend([sym(&[f, f], rng), sym(&[1, f], rng), sym(&[f, 1], rng)]);
    Case::new(inputs, move |_, v| {
        let (g, s) = (gate_vars(&v[1..4]), scorer_vars(&v[4..7]));
        compose(&v[0], &cfg, Some(&g), Some(TimeStage::Softmax(&s)))
    })
}

/// Copies a model's trainable parameters to leaves in store order.
fn model_inputs(model: &SpeakerModel) -> Vec<Tensor> {
    let s = model.store();
    s.ids().filter(|&id| s.is_trainable(id)).map(|id| s.get(id).clone()).collect()
}

fn model_case(model: SpeakerModel, x: Tensor, y: Vec<usize>) -> Case {
    let mut inputs = vec![x];
    inputs.extend(model_inputs(&model));
    Case::new(inputs, move |tape, v| {
        let b = Binder::new(tape, model.store(), false);
        let trainable = model.store().ids().filter(|&id| model.store().is_trainable(id));
        for (id, var) in trainable.zip(&v[1..]) {
            b.preset(id, *var);
        }
        let out = model.forward(&b, &v[0], &ForwardCtx::new(Mode::Train))?;
        cross_entropy(&out.logits, &y)?.add(&out.embedding.mean_all()?)
    })
}

type Builder = fn(&mut ChaCha8Rng) -> Result<Case>;

/// Every checked op with its case generator.
pub fn ops() -> Vec<(&'static str, Builder)> {
    vec![
        ("matmul", |r| {
            Ok(Case::new(vec![sym(&[4, 3], r), sym(&[3, 2], r)], |_, v| v[0].matmul(&v[1])))
        }),
        ("transpose", |r| Ok(Case::new(vec![sym(&[3, 4], r)], |_, v| v[0].t()))),
        ("add", |r| {
            Ok(Case::new(vec![sym(&[2, 3, 4], r), sym(&[1, 3, 1], r)], |_, v| v[0].add(&v[1])))
        }),
        ("sub", |r| {
            Ok(Case::new(vec![sym(&[3, 4], r), sym(&[1, 4], r)], |_, v| v[0].sub(&v[1])))
        }),
        ("mul", |r| {
            Ok(Case::new(vec![sym(&[2, 3, 4], r), sym(&[2, 1, 4], r)], |_, v| v[0].mul(&v[1])))
        }),
        ("div", |r| {
            let d = away_from_zero(&[3, 1], 0.5, 2.0, r);
            Ok(Case::new(vec![sym(&[3, 4], r), d], |_, v| v[0].div(&v[1])))
        }),
        ("relu", |r| Ok(Case::new(vec![sym(&[4, 5], r)], |_, v| Ok(v[0].relu())))),
        ("sigmoid", |r| Ok(Case::new(vec![sym(&[4, 5], r)], |_, v| Ok(v[0].sigmoid())))),
        ("exp", |r| Ok(Case::new(vec![sym(&[4, 5], r)], |_, v| Ok(v[0].exp())))),
        ("ln", |r| Ok(Case::new(vec![uniform(&[4, 5], 0.2, 2.0, r)], |_, v| Ok(v[0].ln())))),
        ("powf", |r| {
            Ok(Case::new(vec![uniform(&[4, 5], 0.2, 2.0, r)], |_, v| Ok(v[0].powf(-0.5).add(&v[0].powf(1.7))?)))
        }),
        ("scale_shift", |r| {
            Ok(Case::new(vec![sym(&[4, 5], r)], |_, v| Ok(v[0].scale(-1.3).shift(0.7))))
        }),
        ("softmax", |r| Ok(Case::new(vec![sym(&[3, 5], r)], |_, v| v[0].softmax(1)))),
        ("log_softmax", |r| Ok(Case::new(vec![sym(&[2, 4, 3], r)], |_, v| v[0].log_softmax(1)))),
        ("reduce_sum", |r| Ok(Case::new(vec![sym(&[2, 3, 4], r)], |_, v| v[0].reduce(1, Reduce::Sum, false)))),
        ("reduce_mean", |r| Ok(Case::new(vec![sym(&[2, 3, 4], r)], |_, v| v[0].reduce(2, Reduce::Mean, true)))),
        ("reduce_std", |r| Ok(Case::new(vec![sym(&[2, 5, 3], r)], |_, v| v[0].reduce(1, Reduce::Std, false)))),
        ("reduce_max", |r| Ok(Case::new(vec![sym(&[2, 5, 3], r)], |_, v| v[0].reduce(1, Reduce::Max, false)))),
        ("reshape", |r| Ok(Case::new(vec![sym(&[2, 6], r)], |_, v| v[0].reshape(&[3, 4])?.sigmoid().reshape(&[12])))),
        ("slice", |r| Ok(Case::new(vec![sym(&[2, 6, 3], r)], |_, v| v[0].slice(1, 2, 3)))),
        ("concat", |r| {
            Ok(Case::new(vec![sym(&[2, 3], r), sym(&[2, 1], r)], |_, v| Var::concat(&[v[0], v[1]], 1)))
        }),
        ("conv2d", |r| {
            Ok(Case::new(vec![sym(&[2, 5, 4, 2], r), sym(&[3, 3, 2, 3], r)], |_, v| v[0].conv2d(&v[1], 1, 1)))
        }),
        ("conv2d_stride2", |r| {
            Ok(Case::new(vec![sym(&[1, 6, 5, 2], r), sym(&[3, 3, 2, 2], r)], |_, v| v[0].conv2d(&v[1], 2, 1)))
        }),
        ("freq_attention", |r| {
            let mut inputs = vec![sym(&[2, 5, 4], r)];
            inputs.extend(gate(4, 3, r));
            Ok(Case::new(inputs, |_, v| freq_attention_weights(&v[0], &gate_vars(&v[1..]))))
        }),
        ("time_attention", |r| {
            let inputs = vec![sym(&[2, 5, 4], r), sym(&[4, 4], r), sym(&[1, 4], r), sym(&[4, 1], r)];
            Ok(Case::new(inputs, |_, v| time_attention_weights(&v[0], &scorer_vars(&v[1..]))))
        }),
        ("time_gate", |r| {
            let mut inputs = vec![sym(&[2, 5, 4], r)];
            inputs.extend(gate(5, 3, r));
            Ok(Case::new(inputs, |_, v| gated_time_weights(&v[0], &gate_vars(&v[1..]))))
        }),
        ("compose_ft", |r| Ok(attention_case(AttentionConfig::scenario(Scenario::FreqTime)?.with_bottleneck(3)?, r))),
        ("compose_tf", |r| Ok(attention_case(AttentionConfig::scenario(Scenario::TimeFreq)?.with_bottleneck(3)?, r))),
        ("compose_parallel", |r| {
            let g = r.gen_range(0.0..=1.0);
            Ok(attention_case(AttentionConfig::parallel(g)?.with_bottleneck(3)?, r))
        }),
        ("cnn_two_stage", |r| {
            let (t, f, c) = (4, 3, 2);
            let mut inputs = vec![sym(&[2, t, f, c], r)];
            inputs.extend(gate(f * c, 3, r));
            inputs.extend(gate(t, 3, r));
            let cfg = AttentionConfig::scenario(Scenario::FreqTime)?.with_bottleneck(3)?;
            Ok(Case::new(inputs, move |_, v| {
                cnn_two_stage(&v[0], &cfg, Some(&gate_vars(&v[1..4])), Some(&gate_vars(&v[4..7])))
            }))
        }),
        ("stats_pool", |r| Ok(Case::new(vec![sym(&[2, 6, 3], r)], |_, v| stats_pool(&v[0])))),
        ("cross_entropy", |r| {
            let y = labels(4, 5, r);
            Ok(Case::new(vec![sym(&[4, 5], r)], move |_, v| cross_entropy(&v[0], &y)))
        }),
        ("am_softmax", |r| {
            let y = labels(4, 3, r);
            let inputs = vec![away_from_zero(&[4, 5], 0.3, 2.0, r), away_from_zero(&[3, 5], 0.3, 2.0, r)];
            Ok(Case::new(inputs, move |_, v| am_softmax(&v[0], &y, &v[1], &AmSoftmaxConfig::default())))
        }),
        ("batch_norm", |r| {
            let mut store = ParamStore::new();
            let bn = BatchNorm::new(&mut store, "bn", 3);
            Ok(Case::new(vec![sym(&[6, 3], r), sym(&[1, 3], r), sym(&[1, 3], r)], move |tape, v| {
                let b = Binder::new(tape, &store, false);
                b.preset(bn.gamma, v[1]);
                b.preset(bn.beta, v[2]);
                bn.forward(&b, &v[0], &ForwardCtx::new(Mode::Train))
            }))
        }),
        ("tdnn_splice", |r| Ok(Case::new(vec![sym(&[2, 7, 3], r)], |_, v| splice(&v[0], &[-3, 0, 3])))),
        ("tdnn_model", |r| {
            let mut cfg = ModelConfig::toy_tdnn(3)
                .with_attention(AttentionConfig::scenario(Scenario::FreqTime)?.with_bottleneck(3)?)
                .with_seed(r.gen());
            cfg.backbone = BackboneConfig::Tdnn { widths: vec![4, 4, 4, 4, 5] };
            cfg.feature_dim = 3;
            cfg.embed_dim = 4;
            let y = labels(2, 3, r);
            Ok(model_case(SpeakerModel::new(cfg)?, sym(&[2, 17, 3], r), y))
        }),
        ("resnet_model", |r| {
            let rc = ResNetConfig {
                stem_channels: 2,
                channels: vec![2, 3],
                blocks: vec![1, 1],
                input_frames: 16,
            };
            let mut cfg = ModelConfig::resnet_lite(3, 16)
                .with_attention(AttentionConfig::scenario(Scenario::FreqTime)?.with_bottleneck(3)?)
                .with_seed(r.gen());
            cfg.backbone = BackboneConfig::ResNetLite(rc);
            cfg.feature_dim = 4;
            cfg.embed_dim = 3;
            let y = labels(2, 3, r);
            Ok(model_case(SpeakerModel::new(cfg)?, sym(&[2, 16, 4], r), y))
        }),
    ]
}

fn projected(out: &Tensor, proj: &Tensor) -> f64 {
    out.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// `(max relative error, elements checked, one-sided fallbacks)` for one
/// case.
pub fn check_case(case: &Case, rng: &mut ChaCha8Rng) -> Result<(f64, usize, usize)> {
    let tape = Tape::new();
    let leaves: Vec<Var<'_>> = case.inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = (case.f)(&tape, &leaves)?;
    let proj = uniform(&out.shape(), -1.0, 1.0, rng);
    let loss = out.mul(&tape.constant(proj.clone()))?.sum_all()?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = leaves
        .iter()
        .zip(&case.inputs)
        .map(|(l, t)| l.grad().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut values = case.inputs.clone();
    let mut eval = |i: usize, k: usize, dx: f64| -> Result<f64> {
        let x0 = values[i].data()[k];
        values[i].data_mut()[k] = x0 + dx;
        let f = case.output(&values).map(|o| projected(&o, &proj));
        values[i].data_mut()[k] = x0;
        f
    };
    let (mut worst, mut count, mut one_sided) = (0.0f64, 0usize, 0usize);
    let h = FD_STEP;
    for (i, g) in analytic.iter().enumerate() {
        for (k, &a) in g.data().iter().enumerate() {
            let (fp, fm) = (eval(i, k, h)?, eval(i, k, -h)?);
            let mut err = rel_err(a, (fp - fm) / (2.0 * h));
            if err >= REL_TOL {
                let f0 = eval(i, k, 0.0)?;
                let fwd = (-3.0 * f0 + 4.0 * fp - eval(i, k, 2.0 * h)?) / (2.0 * h);
                let bwd = (3.0 * f0 - 4.0 * fm + eval(i, k, -2.0 * h)?) / (2.0 * h);
                let side = rel_err(a, fwd).min(rel_err(a, bwd));
                if side < REL_TOL {
                    one_sided += 1;
                }
                err = err.min(side);
            }
            if !err.is_finite() {
                return Err(Error::Contract(format!("non-finite gradient check at input {i}[{k}]")));
            }
            worst = worst.max(err);
            count += 1;
        }
    }
    Ok((worst, count, one_sided))
}

/// Runs `seeds` random cases of op `name`, drawing case seeds from `base`.
pub fn check_op(name: &'static str, build: Builder, base: u64, seeds: usize) -> Result<OpReport> {
    let mut report = OpReport {
        name,
        seeds,
        elements: 0,
        max_rel_err: 0.0,
        one_sided: 0,
    };
    for s in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(base);
        rng.set_stream(s as u64);
        let case = build(&mut rng)?;
        let (err, n, one) = check_case(&case, &mut rng)?;
        report.max_rel_err = report.max_rel_err.max(err);
        report.elements += n;
        report.one_sided += one;
    }
    Ok(report)
}

/// The whole suite, ops in parallel; reports follow [`ops`] order.
pub fn run_suite(base: u64, seeds: usize) -> Result<Vec<OpReport>> {
    ops()
        .into_par_iter()
        .map(|(name, build)| check_op(name, build, base, seeds))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_a_few_seeds() {
        for r in run_suite(1, 3).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // d/dx of x·x evaluated through mul with the same leaf twice is 2x;
        // checking it against a function that silently detaches one factor
        // must fail.
        let case = Case::new(vec![Tensor::new(&[3], vec![0.5, -1.2, 1.9]).unwrap()], |tape, v| {
            let detached = tape.constant((*v[0].value()).clone());
            v[0].mul(&detached)
        });
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (err, n, _) = check_case(&case, &mut rng).unwrap();
        assert_eq!(n, 3);
        assert!(err > 0.4, "{err}");
    }
}
