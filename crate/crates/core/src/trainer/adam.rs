use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam. Moments are kept per store entry (trainable ones
/// only) and rounded to 32-bit like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

/// One element's update: returns `(m, v, delta)` where the parameter moves
/// by `-delta`.
pub fn adam_update(m: f64, v: f64, g: f64, step: u64, lr: f64, b1: f64, b2: f64, eps: f64) -> (f64, f64, f64) {
    let m = b1 * m + (1.0 - b1) * g;
    let v = b2 * v + (1.0 - b2) * g * g;
    let t = i32::try_from(step).unwrap_or(i32::MAX);
    let m_hat = m / (1.0 - b1.powi(t));
    let v_hat = v / (1.0 - b2.powi(t));
    (m, v, lr * m_hat / (v_hat.sqrt() + eps))
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = |trainable: bool, t: &Tensor| trainable.then(|| Tensor::zeros(t.shape()));
        let m: Vec<Option<Tensor>> = store
            .ids()
            .map(|id| zeros(store.is_trainable(id), store.get(id)))
            .collect();
        Adam {
            beta1: BETA1,
            beta2: BETA2,
            eps: ADAM_EPS,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. Entries whose gradient is `None` are left alone;
    /// at least one gradient must be present.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() || grads.iter().all(Option::is_none) {
            return Err(Error::Contract("adam step without gradients".into()));
        }
        self.step += 1;
        for (i, g) in grads.iter().enumerate() {
            let (Some(g), Some(m), Some(v)) = (g, self.m[i].as_mut(), self.v[i].as_mut()) else {
                continue;
            };
            let id = crate::tensor::ParamId(i);
            let mut p = store.get(id).clone();
            for (((pe, me), ve), &ge) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                let (mn, vn, delta) = adam_update(*me, *ve, ge, self.step, lr, self.beta1, self.beta2, self.eps);
                *me = f64::from(mn as f32);
                *ve = f64::from(vn as f32);
                *pe -= delta;
            }
            store.set(id, p);
        }
        Ok(())
    }

    /// Moments as named blobs `adam.m/<param>` and `adam.v/<param>`.
    pub fn to_blobs(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for id in store.ids() {
            if let (Some(m), Some(v)) = (&self.m[id.0], &self.v[id.0]) {
                out.push((format!("adam.m/{}", store.name(id)), m.clone()));
                out.push((format!("adam.v/{}", store.name(id)), v.clone()));
            }
        }
        out
    }

    pub fn from_blobs(store: &ParamStore, step: u64, blobs: &[(String, Tensor)]) -> Result<Self> {
        let mut adam = Adam::new(store);
        adam.step = step;
        for (name, t) in blobs {
            let (slot, pname) = if let Some(p) = name.strip_prefix("adam.m/") {
                (&mut adam.m, p)
            } else if let Some(p) = name.strip_prefix("adam.v/") {
                (&mut adam.v, p)
            } else {
                continue;
            };
            let id = store
                .find(pname)
                .ok_or_else(|| Error::Format(format!("optimizer state for unknown parameter {pname}")))?;
            match &mut slot[id.0] {
                Some(cur) if cur.shape() == t.shape() => *cur = t.clone(),
                _ => return Err(Error::Format(format!("bad optimizer state for {pname}"))),
            }
        }
        Ok(adam)
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before scaling.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_lr_times_sign() {
        for g in [0.3, -2.0, 1e-3] {
            let (_, _, d) = adam_update(0.0, 0.0, g, 1, 1e-4, BETA1, BETA2, ADAM_EPS);
            assert!((d - 1e-4 * g / (g.abs() + ADAM_EPS)).abs() < 1e-18);
        }
    }

    #[test]
    fn constant_gradient_update_tends_to_lr() {
        let (mut m, mut v) = (0.0, 0.0);
        let mut d = 0.0;
        for t in 1..=20_000 {
            (m, v, d) = adam_update(m, v, 0.7, t, 1e-3, BETA1, BETA2, ADAM_EPS);
        }
        assert!((d - 1e-3).abs() < 1e-3 * 1e-6);
    }

    #[test]
    fn zero_gradient_leaves_parameters_and_missing_grads_error() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(&[2], vec![0.5, -1.0]).unwrap());
        store.add_buffer("rm", Tensor::zeros(&[2]));
        let mut adam = Adam::new(&store);
        let before = store.get(id).clone();
        adam.step(&mut store, &[Some(Tensor::zeros(&[2])), None], 1e-3).unwrap();
        assert_eq!(store.get(id), &before);
        assert!(adam.step(&mut store, &[None, None], 1e-3).is_err());
        let blobs = adam.to_blobs(&store);
        assert_eq!(blobs.len(), 2);
        assert_eq!(Adam::from_blobs(&store, 1, &blobs).unwrap(), adam);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Some(Tensor::new(&[2], vec![3.0, 4.0]).unwrap()), None];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        let d = g[0].as_ref().unwrap().data();
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
    }
}
