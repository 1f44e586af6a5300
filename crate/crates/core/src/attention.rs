//! Two-stage frequency/time attention.
//!
//! Feature maps are `[T, F]` for a single utterance or `[B, T, F]` for a
//! batch; every function accepts both and returns the matching rank.
//!
//! * Frequency attention gates each feature dimension with
//!   `sigmoid(s_stat + s_max)`, where both scores come from the same
//!   `Relu(h W0 + b0) W1` bottleneck applied to the time-max descriptor and
//!   to the time mean-plus-std descriptor.
//! * Time attention (TDNN path) scores every frame with
//!   `Relu(h_t W0 + b0) W1` and normalises the scores with a softmax over
//!   frames.
//! * On CNN maps the time stage reuses the sigmoid gate, pooling across the
//!   combined frequency-channel axis instead of across time.
//!
//! [`compose`] chains the stages (frequency first, time first, single
//! stage) or mixes them in parallel with weight `gamma` on the frequency
//! branch.
//!
//! Choices made where the method leaves room:
//! * time-first cascades compute the frequency weights from the
//!   time-refined map, mirroring the frequency-first order;
//! * the softmax runs over frames `1..=T`;
//! * the bottleneck is clamped to the attended width;
//! * the CNN time gate uses its own bottleneck `min(K, T_k)`, so its
//!   parameters are tied to a fixed number of frames.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{xavier_bound, Binder, ParamId, ParamStore, Reduce, Tensor, Var};

/// Bottleneck width used when none is configured.
pub const DEFAULT_BOTTLENECK: usize = 100;
/// Frequency-branch weight of the parallel scenario.
pub const DEFAULT_GAMMA: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scenario {
    None,
    TimeOnly,
    FreqOnly,
    /// Frequency attention followed by time attention.
    FreqTime,
    /// Time attention followed by frequency attention.
    TimeFreq,
    Parallel,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::None,
        Scenario::TimeOnly,
        Scenario::FreqOnly,
        Scenario::FreqTime,
        Scenario::TimeFreq,
        Scenario::Parallel,
    ];

    pub fn uses_freq(self) -> bool {
        !matches!(self, Scenario::None | Scenario::TimeOnly)
    }

    pub fn uses_time(self) -> bool {
        !matches!(self, Scenario::None | Scenario::FreqOnly)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::None => "none",
            Scenario::TimeOnly => "time",
            Scenario::FreqOnly => "freq",
            Scenario::FreqTime => "ft",
            Scenario::TimeFreq => "tf",
            Scenario::Parallel => "parallel",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "none" => Scenario::None,
            "time" => Scenario::TimeOnly,
            "freq" => Scenario::FreqOnly,
            "ft" | "f-t" => Scenario::FreqTime,
            "tf" | "t-f" => Scenario::TimeFreq,
            "parallel" | "para" => Scenario::Parallel,
            other => return Err(Error::Config(format!("unknown attention scenario {other:?}"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub scenario: Scenario,
    /// Frequency-branch weight, present only for [`Scenario::Parallel`].
    pub gamma: Option<f64>,
    pub bottleneck: usize,
}

impl AttentionConfig {
    pub fn new(scenario: Scenario, gamma: Option<f64>, bottleneck: usize) -> Result<Self> {
        let cfg = AttentionConfig {
            scenario,
            gamma,
            bottleneck,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn none() -> Self {
        AttentionConfig {
            scenario: Scenario::None,
            gamma: None,
            bottleneck: DEFAULT_BOTTLENECK,
        }
    }

    /// Non-parallel scenario with the default bottleneck.
    pub fn scenario(scenario: Scenario) -> Result<Self> {
        let gamma = (scenario == Scenario::Parallel).then_some(DEFAULT_GAMMA);
        Self::new(scenario, gamma, DEFAULT_BOTTLENECK)
    }

    pub fn parallel(gamma: f64) -> Result<Self> {
        Self::new(Scenario::Parallel, Some(gamma), DEFAULT_BOTTLENECK)
    }

    pub fn with_bottleneck(mut self, k: usize) -> Result<Self> {
        self.bottleneck = k;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bottleneck == 0 {
            return Err(Error::Config("attention bottleneck must be at least 1".into()));
        }
        match (self.scenario, self.gamma) {
            (Scenario::Parallel, Some(g)) if (0.0..=1.0).contains(&g) => Ok(()),
            (Scenario::Parallel, Some(g)) => {
                Err(Error::Config(format!("gamma {g} outside [0, 1]")))
            }
            (Scenario::Parallel, None) => {
                Err(Error::Config("parallel attention needs gamma".into()))
            }
            (s, Some(_)) => Err(Error::Config(format!("gamma is only valid for parallel, not {s}"))),
            (_, None) => Ok(()),
        }
    }
}

/// Sigmoid-gate parameters: `W0: F×K`, `b0: 1×K`, `W1: K×F`.
#[derive(Clone, Debug, PartialEq)]
pub struct FreqAttentionParams {
    pub w0: Tensor,
    pub b0: Tensor,
    pub w1: Tensor,
}

impl FreqAttentionParams {
    /// Xavier-uniform weights, zero bias. `k` is clamped to `width`.
    pub fn init<R: Rng + ?Sized>(width: usize, k: usize, rng: &mut R) -> Self {
        let k = k.min(width);
        FreqAttentionParams {
            w0: Tensor::uniform(&[width, k], xavier_bound(width, k), rng),
            b0: Tensor::zeros(&[1, k]),
            w1: Tensor::uniform(&[k, width], xavier_bound(k, width), rng),
        }
    }

    pub fn zeros(width: usize, k: usize) -> Self {
        let k = k.min(width);
        FreqAttentionParams {
            w0: Tensor::zeros(&[width, k]),
            b0: Tensor::zeros(&[1, k]),
            w1: Tensor::zeros(&[k, width]),
        }
    }

    pub fn width(&self) -> usize {
        self.w0.shape()[0]
    }

    pub fn bottleneck(&self) -> usize {
        self.w0.shape()[1]
    }

    pub fn register(self, store: &mut ParamStore, prefix: &str) -> GateIds {
        GateIds {
            w0: store.add(format!("{prefix}.w0"), self.w0),
            b0: store.add(format!("{prefix}.b0"), self.b0),
            w1: store.add(format!("{prefix}.w1"), self.w1),
        }
    }

    pub fn bind<'t>(&self, tape: &'t crate::tensor::Tape, track: bool) -> GateVars<'t> {
        GateVars {
            w0: tape.leaf(self.w0.clone(), track),
            b0: tape.leaf(self.b0.clone(), track),
            w1: tape.leaf(self.w1.clone(), track),
        }
    }
}

/// Frame-scorer parameters: `W0: F×F`, `b0: 1×F`, `W1: F×1`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeAttentionParams {
    pub w0: Tensor,
    pub b0: Tensor,
    pub w1: Tensor,
}

impl TimeAttentionParams {
    pub fn init<R: Rng + ?Sized>(width: usize, rng: &mut R) -> Self {
        TimeAttentionParams {
            w0: Tensor::uniform(&[width, width], xavier_bound(width, width), rng),
            b0: Tensor::zeros(&[1, width]),
            w1: Tensor::uniform(&[width, 1], xavier_bound(width, 1), rng),
        }
    }

    pub fn zeros(width: usize) -> Self {
        TimeAttentionParams {
            w0: Tensor::zeros(&[width, width]),
            b0: Tensor::zeros(&[1, width]),
            w1: Tensor::zeros(&[width, 1]),
        }
    }

    pub fn width(&self) -> usize {
        self.w0.shape()[0]
    }

    pub fn register(self, store: &mut ParamStore, prefix: &str) -> ScorerIds {
        ScorerIds {
            w0: store.add(format!("{prefix}.w0"), self.w0),
            b0: store.add(format!("{prefix}.b0"), self.b0),
            w1: store.add(format!("{prefix}.w1"), self.w1),
        }
    }

    pub fn bind<'t>(&self, tape: &'t crate::tensor::Tape, track: bool) -> ScorerVars<'t> {
        ScorerVars {
            w0: tape.leaf(self.w0.clone(), track),
            b0: tape.leaf(self.b0.clone(), track),
            w1: tape.leaf(self.w1.clone(), track),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GateIds {
    pub w0: ParamId,
    pub b0: ParamId,
    pub w1: ParamId,
}

impl GateIds {
    pub fn bind<'t>(&self, b: &Binder<'t, '_>) -> GateVars<'t> {
        GateVars {
            w0: b.get(self.w0),
            b0: b.get(self.b0),
            w1: b.get(self.w1),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ScorerIds {
    pub w0: ParamId,
    pub b0: ParamId,
    pub w1: ParamId,
}

impl ScorerIds {
    pub fn bind<'t>(&self, b: &Binder<'t, '_>) -> ScorerVars<'t> {
        ScorerVars {
            w0: b.get(self.w0),
            b0: b.get(self.b0),
            w1: b.get(self.w1),
        }
    }
}

/// Sigmoid gate bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct GateVars<'t> {
    pub w0: Var<'t>,
    pub b0: Var<'t>,
    pub w1: Var<'t>,
}

/// Softmax frame scorer bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct ScorerVars<'t> {
    pub w0: Var<'t>,
    pub b0: Var<'t>,
    pub w1: Var<'t>,
}

/// How the time stage computes its weights.
#[derive(Clone, Copy, Debug)]
pub enum TimeStage<'a, 't> {
    /// Softmax over frames (TDNN maps).
    Softmax(&'a ScorerVars<'t>),
    /// Sigmoid gate over frames (CNN maps).
    Gate(&'a GateVars<'t>),
}

/// Lifts `[T, F]` to `[1, T, F]`; the flag records whether to drop it again.
fn batched<'t>(h: &Var<'t>) -> Result<(Var<'t>, bool)> {
    match h.shape().as_slice() {
        [t, f] => Ok((h.reshape(&[1, *t, *f])?, true)),
        [_, _, _] => Ok((*h, false)),
        other => Err(Error::shape("attention", other, &[])),
    }
}

fn unbatched<'t>(v: Var<'t>, squeeze: bool) -> Result<Var<'t>> {
    if squeeze {
        let s = v.shape();
        v.reshape(&s[1..])
    } else {
        Ok(v)
    }
}

/// `sigmoid(Relu(d_stat W0 + b0) W1 + Relu(d_max W0 + b0) W1)` for `[B, W]`
/// descriptors.
fn sigmoid_gate<'t>(d_max: &Var<'t>, d_stat: &Var<'t>, p: &GateVars<'t>) -> Result<Var<'t>> {
    let width = d_max.shape()[1];
    if p.w0.shape()[0] != width || p.w1.shape()[1] != width {
        return Err(Error::shape("attention gate", &[width], &p.w0.shape()));
    }
    let branch = |d: &Var<'t>| -> Result<Var<'t>> {
        d.matmul(&p.w0)?.add(&p.b0)?.relu().matmul(&p.w1)
    };
    Ok(branch(d_stat)?.add(&branch(d_max)?)?.sigmoid())
}

/// Frequency attention weights: `[T, F] → [1, F]`, `[B, T, F] → [B, 1, F]`.
pub fn freq_attention_weights<'t>(h: &Var<'t>, p: &GateVars<'t>) -> Result<Var<'t>> {
    let (h, squeeze) = batched(h)?;
    let (b, _, f) = dims3(&h);
    let h_max = h.reduce(1, Reduce::Max, false)?;
    let h_stat = h
        .reduce(1, Reduce::Mean, false)?
        .add(&h.reduce(1, Reduce::Std, false)?)?;
    let w = sigmoid_gate(&h_max, &h_stat, p)?.reshape(&[b, 1, f])?;
    unbatched(w, squeeze)
}

/// Broadcasts `[.., 1, F]` weights over time and multiplies them into `h`.
pub fn apply_freq_attention<'t>(h: &Var<'t>, w: &Var<'t>) -> Result<Var<'t>> {
    let (hs, ws) = (h.shape(), w.shape());
    if hs.len() != ws.len() || ws[ws.len() - 2] != 1 || hs.last() != ws.last() {
        return Err(Error::shape("apply_freq_attention", &hs, &ws));
    }
    h.mul(w)
}

/// Softmax time attention weights: `[T, F] → [T, 1]`, `[B, T, F] → [B, T, 1]`.
pub fn time_attention_weights<'t>(h: &Var<'t>, p: &ScorerVars<'t>) -> Result<Var<'t>> {
    let (h, squeeze) = batched(h)?;
    let (b, t, f) = dims3(&h);
    if p.w0.shape() != [f, f] || p.w1.shape() != [f, 1] {
        return Err(Error::shape("time_attention_weights", &[b, t, f], &p.w0.shape()));
    }
    let scores = h
        .reshape(&[b * t, f])?
        .matmul(&p.w0)?
        .add(&p.b0)?
        .relu()
        .matmul(&p.w1)?
        .reshape(&[b, t, 1])?;
    unbatched(scores.softmax(1)?, squeeze)
}

/// Sigmoid time gate for CNN maps: descriptors are pooled across the feature
/// axis, giving one value per frame.
pub fn gated_time_weights<'t>(h: &Var<'t>, p: &GateVars<'t>) -> Result<Var<'t>> {
    let (h, squeeze) = batched(h)?;
    let (b, t, _) = dims3(&h);
    let d_max = h.reduce(2, Reduce::Max, false)?;
    let d_stat = h
        .reduce(2, Reduce::Mean, false)?
        .add(&h.reduce(2, Reduce::Std, false)?)?;
    let w = sigmoid_gate(&d_max, &d_stat, p)?.reshape(&[b, t, 1])?;
    unbatched(w, squeeze)
}

fn time_weights<'t>(h: &Var<'t>, stage: TimeStage<'_, 't>) -> Result<Var<'t>> {
    match stage {
        TimeStage::Softmax(p) => time_attention_weights(h, p),
        TimeStage::Gate(p) => gated_time_weights(h, p),
    }
}

fn dims3(h: &Var<'_>) -> (usize, usize, usize) {
    let s = h.shape();
    (s[0], s[1], s[2])
}

/// Applies the configured attention scenario to `h`, preserving its shape.
pub fn compose<'t>(
    h: &Var<'t>,
    cfg: &AttentionConfig,
    freq: Option<&GateVars<'t>>,
    time: Option<TimeStage<'_, 't>>,
) -> Result<Var<'t>> {
    cfg.validate()?;
    let need_freq = || {
        freq.ok_or_else(|| Error::Config(format!("scenario {} needs frequency parameters", cfg.scenario)))
    };
    let need_time = || {
        time.ok_or_else(|| Error::Config(format!("scenario {} needs time parameters", cfg.scenario)))
    };
    let freq_stage = |x: &Var<'t>| -> Result<Var<'t>> {
        apply_freq_attention(x, &freq_attention_weights(x, need_freq()?)?)
    };
    let time_stage = |x: &Var<'t>| -> Result<Var<'t>> { x.mul(&time_weights(x, need_time()?)?) };
    match cfg.scenario {
        Scenario::None => Ok(*h),
        Scenario::FreqOnly => freq_stage(h),
        Scenario::TimeOnly => time_stage(h),
        Scenario::FreqTime => time_stage(&freq_stage(h)?),
        Scenario::TimeFreq => freq_stage(&time_stage(h)?),
        Scenario::Parallel => {
            let gamma = cfg.gamma.expect("validated");
            let wf = freq_attention_weights(h, need_freq()?)?.scale(gamma);
            let wt = time_weights(h, need_time()?)?.scale(1.0 - gamma);
            h.mul(&wf.add(&wt)?)
        }
    }
}

/// Two-stage attention on a CNN feature map `[T, F, C]` or `[B, T, F, C]`:
/// frequency and channel axes are merged (`index f·C + c`), both stages use
/// sigmoid gates, and the result is reshaped back.
pub fn cnn_two_stage<'t>(
    hk: &Var<'t>,
    cfg: &AttentionConfig,
    freq: Option<&GateVars<'t>>,
    time: Option<&GateVars<'t>>,
) -> Result<Var<'t>> {
    let shape = hk.shape();
    let merged = match shape.as_slice() {
        [t, f, c] => vec![*t, f * c],
        [b, t, f, c] => vec![*b, *t, f * c],
        other => return Err(Error::shape("cnn_two_stage", other, &[])),
    };
    if cfg.scenario == Scenario::None {
        return Ok(*hk);
    }
    let h = hk.reshape(&merged)?;
    compose(&h, cfg, freq, time.map(TimeStage::Gate))?.reshape(&shape)
}
