use rand::Rng;

use super::layers::{BatchNorm, ForwardCtx, Linear};
use crate::error::{Error, Result};
use crate::tensor::{Binder, ParamStore, Var};

/// Frame contexts of the five frame-level layers.
pub const TDNN_CONTEXTS: [&[isize]; 5] = [&[-2, -1, 0, 1, 2], &[-2, 0, 2], &[-3, 0, 3], &[0], &[0]];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TdnnLayerSpec {
    pub context_offsets: Vec<isize>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl TdnnLayerSpec {
    pub fn new(context_offsets: Vec<isize>, in_dim: usize, out_dim: usize) -> Result<Self> {
        if context_offsets.is_empty() || context_offsets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "context offsets must be non-empty, sorted and unique: {context_offsets:?}"
            )));
        }
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Config("TDNN layer widths must be positive".into()));
        }
        Ok(TdnnLayerSpec {
            context_offsets,
            in_dim,
            out_dim,
        })
    }

    /// Frames lost to the valid-only context window.
    pub fn context(&self) -> usize {
        (self.context_offsets[self.context_offsets.len() - 1] - self.context_offsets[0]) as usize
    }
}

/// Stacks the frames at each offset along the feature axis:
/// `[B, T, F] → [B, T − context, F·k]`.
pub fn splice<'t>(x: &Var<'t>, offsets: &[isize]) -> Result<Var<'t>> {
    let s = x.shape();
    let lo = offsets[0];
    let span = (offsets[offsets.len() - 1] - lo) as usize;
    if s.len() != 3 || s[1] <= span {
        return Err(Error::ReceptiveField {
            frames: s.get(1).copied().unwrap_or(0),
            needed: span + 1,
        });
    }
    let out_len = s[1] - span;
    if offsets.len() == 1 {
        return Ok(*x);
    }
    let parts = offsets
        .iter()
        .map(|&o| x.slice(1, (o - lo) as usize, out_len))
        .collect::<Result<Vec<_>>>()?;
    Var::concat(&parts, 2)
}

#[derive(Clone, Debug)]
pub struct TdnnLayer {
    pub spec: TdnnLayerSpec,
    pub affine: Linear,
    pub bn: Option<BatchNorm>,
}

/// Frame-level x-vector extractor: each layer is affine, ReLU, then
/// optional batch norm, all without padding.
#[derive(Clone, Debug)]
pub struct Tdnn {
    pub layers: Vec<TdnnLayer>,
}

impl Tdnn {
    /// One layer per entry of `widths`, taking contexts from
    /// [`TDNN_CONTEXTS`] in order.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        feature_dim: usize,
        widths: &[usize],
        batch_norm: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.is_empty() || widths.len() > TDNN_CONTEXTS.len() {
            return Err(Error::Config(format!(
                "TDNN needs 1 to {} layers, got {}",
                TDNN_CONTEXTS.len(),
                widths.len()
            )));
        }
        let mut layers = Vec::with_capacity(widths.len());
        let mut in_dim = feature_dim;
        for (i, &out_dim) in widths.iter().enumerate() {
            let spec = TdnnLayerSpec::new(TDNN_CONTEXTS[i].to_vec(), in_dim, out_dim)?;
            let prefix = format!("tdnn.{i}");
            let affine = Linear::new(
                store,
                &format!("{prefix}.affine"),
                in_dim * spec.context_offsets.len(),
                out_dim,
                rng,
            );
            let bn = batch_norm.then(|| BatchNorm::new(store, &format!("{prefix}.bn"), out_dim));
            layers.push(TdnnLayer { spec, affine, bn });
            in_dim = out_dim;
        }
        Ok(Tdnn { layers })
    }

    /// Minimum input length in frames.
    pub fn receptive_field(&self) -> usize {
        1 + self.layers.iter().map(|l| l.spec.context()).sum::<usize>()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].spec.out_dim
    }

    /// `[B, T, L] → [B, T − receptive_field + 1, F]`.
    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: &Var<'t>, ctx: &ForwardCtx) -> Result<Var<'t>> {
        let s = x.shape();
        let needed = self.receptive_field();
        if s.len() != 3 || s[1] < needed {
            return Err(Error::ReceptiveField {
                frames: s.get(1).copied().unwrap_or(0),
                needed,
            });
        }
        if s[2] != self.layers[0].spec.in_dim {
            return Err(Error::shape("tdnn input", &s, &[self.layers[0].spec.in_dim]));
        }
        let mut h = *x;
        for layer in &self.layers {
            let spliced = splice(&h, &layer.spec.context_offsets)?;
            let sh = spliced.shape();
            let (bsz, t) = (sh[0], sh[1]);
            let mut y = layer
                .affine
                .forward(b, &spliced.reshape(&[bsz * t, sh[2]])?)?
                .relu();
            if let Some(bn) = &layer.bn {
                y = bn.forward(b, &y, ctx)?;
            }
            h = y.reshape(&[bsz, t, layer.spec.out_dim])?;
        }
        Ok(h)
    }
}
