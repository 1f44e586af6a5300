//! Training losses: softmax cross-entropy and additive-margin softmax.

use crate::error::{Error, Result};
use crate::tensor::{Reduce, Tensor, Var};

/// Guards every L2 normalisation.
pub const NORM_EPS: f64 = 1e-12;

fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len().max(1), classes]);
    for (row, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Label { label, classes });
        }
        t.data_mut()[row * classes + label] = 1.0;
    }
    Ok(t)
}

fn check_logits(logits: &Var<'_>, labels: &[usize]) -> Result<(usize, usize)> {
    match logits.shape().as_slice() {
        &[b, c] if b == labels.len() => Ok((b, c)),
        other => Err(Error::shape("cross_entropy", other, &[labels.len()])),
    }
}

/// Mean over the batch of `-log softmax(logits)[label]`, computed through a
/// max-shifted log-sum-exp.
pub fn cross_entropy<'t>(logits: &Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let (b, c) = check_logits(logits, labels)?;
    let mask = logits.tape().constant(one_hot(labels, c)?);
    logits
        .log_softmax(1)?
        .mul(&mask)?
        .sum_all()
        .map(|s| s.scale(-1.0 / b as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AmSoftmaxConfig {
    pub margin: f64,
    pub scale: f64,
}

impl Default for AmSoftmaxConfig {
    fn default() -> Self {
        AmSoftmaxConfig {
            margin: 0.3,
            scale: 35.0,
        }
    }
}

impl AmSoftmaxConfig {
    pub fn new(margin: f64, scale: f64) -> Result<Self> {
        let cfg = AmSoftmaxConfig { margin, scale };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !(0.0..1.0).contains(&self.margin) {
            return Err(Error::Config(format!(
                "AM-Softmax needs s > 0 and 0 <= m < 1, got s={} m={}",
                self.scale, self.margin
            )));
        }
        Ok(())
    }
}

/// Row-wise L2 normalisation of a `[N, D]` matrix.
pub fn l2_normalize<'t>(x: &Var<'t>) -> Result<Var<'t>> {
    let norm = x
        .mul(x)?
        .reduce(1, Reduce::Sum, true)?
        .shift(NORM_EPS)
        .powf(0.5);
    x.div(&norm)
}

/// Cosine similarity between every embedding and every class weight row:
/// `[B, D] × [C, D] → [B, C]`.
pub fn cosine_logits<'t>(embeddings: &Var<'t>, class_weights: &Var<'t>) -> Result<Var<'t>> {
    let (e, w) = (embeddings.shape(), class_weights.shape());
    if e.len() != 2 || w.len() != 2 || e[1] != w[1] {
        return Err(Error::shape("cosine_logits", &e, &w));
    }
    l2_normalize(embeddings)?.matmul(&l2_normalize(class_weights)?.t()?)
}

/// Additive-margin softmax loss: cross-entropy over `s·(cos θ_j − m·[j = y])`.
pub fn am_softmax<'t>(
    embeddings: &Var<'t>,
    labels: &[usize],
    class_weights: &Var<'t>,
    cfg: &AmSoftmaxConfig,
) -> Result<Var<'t>> {
    cfg.validate()?;
    let cos = cosine_logits(embeddings, class_weights)?;
    let (_, c) = check_logits(&cos, labels)?;
    let margin = cos.tape().constant(one_hot(labels, c)?.map(|v| v * cfg.margin));
    cross_entropy(&cos.sub(&margin)?.scale(cfg.scale), labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn uniform_logits_give_ln_c() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[3, 4]));
        let loss = cross_entropy(&logits, &[0, 1, 3]).unwrap();
        assert!((loss.value().item() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_logit_drives_loss_to_zero() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::new(&[1, 3], vec![0.0, 800.0, 0.0]).unwrap());
        let loss = cross_entropy(&logits, &[1]).unwrap().value().item();
        assert!(loss >= 0.0 && loss < 1e-300);
    }

    #[test]
    fn label_out_of_range() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            cross_entropy(&logits, &[3]),
            Err(Error::Label { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn am_softmax_hand_case() {
        // embedding aligned with class 0, orthogonal to class 1
        let tape = Tape::new();
        let e = tape.constant(Tensor::new(&[1, 2], vec![2.0, 0.0]).unwrap());
        let w = tape.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 3.0]).unwrap());
        let loss = am_softmax(&e, &[0], &w, &AmSoftmaxConfig::default())
            .unwrap()
            .value()
            .item();
        let expect = (-24.5f64).exp().ln_1p();
        // log-sum-exp around 24.5 resolves the 2.3e-11 tail to about 1e-4 relative
        assert!(((loss - expect) / expect).abs() < 1e-3, "{loss} vs {expect}");
    }

    #[test]
    fn zero_embedding_stays_finite() {
        let tape = Tape::new();
        let e = tape.param(Tensor::zeros(&[1, 3]));
        let w = tape.param(Tensor::ones(&[2, 3]));
        let loss = am_softmax(&e, &[1], &w, &AmSoftmaxConfig::default()).unwrap();
        assert!(loss.value().is_finite());
        tape.backward(loss).unwrap();
        assert!(e.grad().unwrap().is_finite());
    }

    #[test]
    fn config_bounds() {
        assert!(AmSoftmaxConfig::new(0.3, 35.0).is_ok());
        assert!(AmSoftmaxConfig::new(1.0, 35.0).is_err());
        assert!(AmSoftmaxConfig::new(0.3, 0.0).is_err());
    }
}
