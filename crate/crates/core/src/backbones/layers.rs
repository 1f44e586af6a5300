use std::cell::RefCell;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{xavier_bound, Binder, ParamId, ParamStore, Reduce, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are collected for update.
    Train,
    /// Running statistics.
    Eval,
}

/// Per-forward state: the mode and any pending buffer updates.
#[derive(Debug)]
pub struct ForwardCtx {
    mode: Mode,
    updates: RefCell<Vec<(ParamId, Tensor)>>,
}

impl ForwardCtx {
    pub fn new(mode: Mode) -> Self {
        ForwardCtx {
            mode,
            updates: RefCell::new(Vec::new()),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn into_updates(self) -> Vec<(ParamId, Tensor)> {
        self.updates.into_inner()
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let bound = xavier_bound(fan_in, fan_out);
        Linear {
            w: store.add(format!("{prefix}.w"), Tensor::uniform(&[fan_in, fan_out], bound, rng)),
            b: store.add(format!("{prefix}.b"), Tensor::zeros(&[1, fan_out])),
        }
    }

    /// `[N, in] → [N, out]`.
    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        x.matmul(&b.get(self.w))?.add(&b.get(self.b))
    }
}

/// Batch normalisation over the rows of an `[N, F]` matrix.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, width: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::ones(&[1, width])),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[1, width])),
            running_mean: store.add_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[1, width])),
            running_var: store.add_buffer(format!("{prefix}.running_var"), Tensor::ones(&[1, width])),
        }
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: &Var<'t>, ctx: &ForwardCtx) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 2 || s[1] != b.store().get(self.gamma).shape()[1] {
            return Err(Error::shape("batch_norm", &s, b.store().get(self.gamma).shape()));
        }
        let normed = match ctx.mode {
            Mode::Train => {
                let mean = x.reduce(0, Reduce::Mean, true)?;
                let centred = x.sub(&mean)?;
                let var = centred.mul(&centred)?.reduce(0, Reduce::Mean, true)?;
                let out = centred.div(&var.shift(BN_EPS).powf(0.5))?;
                let store = b.store();
                let blend = |id: ParamId, batch: &Tensor| {
                    let old = store.get(id);
                    let data = old
                        .data()
                        .iter()
                        .zip(batch.data())
                        .map(|(o, n)| (1.0 - BN_MOMENTUM) * o + BN_MOMENTUM * n)
                        .collect();
                    Tensor::new(old.shape(), data).expect("same shape")
                };
                let mut up = ctx.updates.borrow_mut();
                up.push((self.running_mean, blend(self.running_mean, &mean.value())));
                up.push((self.running_var, blend(self.running_var, &var.value())));
                out
            }
            Mode::Eval => {
                let mean = b.get(self.running_mean);
                let std = b.get(self.running_var).shift(BN_EPS).powf(0.5);
                x.sub(&mean)?.div(&std)?
            }
        };
        normed.mul(&b.get(self.gamma))?.add(&b.get(self.beta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn train_mode_standardises_columns_and_collects_updates() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::new();
        let b = Binder::new(&tape, &store, false);
        let x = tape.constant(Tensor::uniform(&[50, 3], 4.0, &mut rng).map(|v| 2.0 * v + 1.0));
        let ctx = ForwardCtx::new(Mode::Train);
        let y = bn.forward(&b, &x, &ctx).unwrap().value();
        for c in 0..3 {
            let col: Vec<f64> = (0..50).map(|r| y.get(&[r, c])).collect();
            let m = col.iter().sum::<f64>() / 50.0;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 50.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-5);
        }
        assert_eq!(ctx.into_updates().len(), 2);
    }

    #[test]
    fn eval_mode_with_fresh_stats_is_near_identity() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2);
        let tape = Tape::new();
        let b = Binder::new(&tape, &store, false);
        let x = tape.constant(Tensor::new(&[1, 2], vec![0.5, -3.0]).unwrap());
        let y = bn.forward(&b, &x, &ForwardCtx::new(Mode::Eval)).unwrap().value();
        assert!((y.data()[0] - 0.5 / (1.0 + BN_EPS).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn linear_shape() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lin = Linear::new(&mut store, "fc", 4, 3, &mut rng);
        let tape = Tape::new();
        let b = Binder::new(&tape, &store, false);
        let y = lin.forward(&b, &tape.constant(Tensor::ones(&[5, 4]))).unwrap();
        assert_eq!(y.shape(), vec![5, 3]);
        assert!(lin.forward(&b, &tape.constant(Tensor::ones(&[5, 3]))).is_err());
    }
}
