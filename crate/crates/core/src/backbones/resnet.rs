use rand::Rng;

use super::layers::{BatchNorm, ForwardCtx};
use crate::attention::{cnn_two_stage, AttentionConfig, FreqAttentionParams, GateIds};
use crate::error::{Error, Result};
use crate::tensor::{xavier_bound, Binder, ParamId, ParamStore, Tensor, Var};

/// Shortest input the stem and four stride-2 stages accept.
pub const MIN_FRAMES: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResNetConfig {
    pub stem_channels: usize,
    pub channels: Vec<usize>,
    pub blocks: Vec<usize>,
    /// Fixed crop length; the time gate in each block is sized from it.
    pub input_frames: usize,
}

impl ResNetConfig {
    pub fn lite(input_frames: usize) -> Self {
        ResNetConfig {
            stem_channels: 16,
            channels: vec![16, 32, 64, 128],
            blocks: vec![2, 2, 2, 2],
            input_frames,
        }
    }

    /// The 34-layer block plan.
    pub fn resnet34(input_frames: usize) -> Self {
        ResNetConfig {
            stem_channels: 32,
            channels: vec![32, 64, 128, 256],
            blocks: vec![3, 4, 6, 3],
            input_frames,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty()
            || self.channels.len() != self.blocks.len()
            || self.channels.contains(&0)
            || self.blocks.contains(&0)
            || self.stem_channels == 0
        {
            return Err(Error::Config(format!(
                "resnet needs matching non-empty channel and block lists, got {:?} and {:?}",
                self.channels, self.blocks
            )));
        }
        if self.input_frames < MIN_FRAMES {
            return Err(Error::Config(format!(
                "resnet input_frames must be at least {MIN_FRAMES}"
            )));
        }
        Ok(())
    }
}

fn halve(n: usize) -> usize {
    n.div_ceil(2)
}

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: String,
        k: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let bound = xavier_bound(k * k * cin, k * k * cout);
        Conv {
            w: store.add(name, Tensor::uniform(&[k, k, cin, cout], bound, rng)),
            stride,
            pad: k / 2,
        }
    }

    fn forward<'t>(&self, b: &Binder<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        x.conv2d(&b.get(self.w), self.stride, self.pad)
    }
}

/// Batch norm over the channel axis of a `[B, H, W, C]` map.
fn bn4<'t>(bn: &Option<BatchNorm>, b: &Binder<'t, '_>, x: Var<'t>, ctx: &ForwardCtx) -> Result<Var<'t>> {
    let Some(bn) = bn else { return Ok(x) };
    let s = x.shape();
    let flat = x.reshape(&[s[0] * s[1] * s[2], s[3]])?;
    bn.forward(b, &flat, ctx)?.reshape(&s)
}

#[derive(Clone, Debug)]
struct Block {
    conv1: Conv,
    bn1: Option<BatchNorm>,
    conv2: Conv,
    bn2: Option<BatchNorm>,
    proj: Option<(Conv, Option<BatchNorm>)>,
    freq: Option<GateIds>,
    time: Option<GateIds>,
}

impl Block {
    fn forward<'t>(
        &self,
        b: &Binder<'t, '_>,
        x: &Var<'t>,
        attention: &AttentionConfig,
        ctx: &ForwardCtx,
    ) -> Result<Var<'t>> {
        let h = bn4(&self.bn1, b, self.conv1.forward(b, x)?, ctx)?.relu();
        let h = bn4(&self.bn2, b, self.conv2.forward(b, &h)?, ctx)?;
        let freq = self.freq.map(|g| g.bind(b));
        let time = self.time.map(|g| g.bind(b));
        let h = cnn_two_stage(&h, attention, freq.as_ref(), time.as_ref())?;
        let skip = match &self.proj {
            Some((conv, bn)) => bn4(bn, b, conv.forward(b, x)?, ctx)?,
            None => *x,
        };
        Ok(h.add(&skip)?.relu())
    }
}

/// Residual network over `[B, T, F]` spectrograms (one input channel).
#[derive(Clone, Debug)]
pub struct ResNetLite {
    config: ResNetConfig,
    attention: AttentionConfig,
    stem: Conv,
    stem_bn: Option<BatchNorm>,
    blocks: Vec<Block>,
    out_shape: [usize; 3],
}

impl ResNetLite {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: &ResNetConfig,
        feature_dim: usize,
        batch_norm: bool,
        attention: &AttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        attention.validate()?;
        let bn = |store: &mut ParamStore, name: String, c: usize| {
            batch_norm.then(|| BatchNorm::new(store, &name, c))
        };
        let stem = Conv::new(store, "resnet.stem.w".into(), 3, 1, config.stem_channels, 1, rng);
        let stem_bn = bn(store, "resnet.stem.bn".into(), config.stem_channels);
        let (mut t, mut f, mut c) = (config.input_frames, feature_dim, config.stem_channels);
        let mut blocks = Vec::new();
        for (s, (&cout, &n)) in config.channels.iter().zip(&config.blocks).enumerate() {
            for j in 0..n {
                let p = format!("resnet.s{s}.b{j}");
                let stride = if j == 0 { 2 } else { 1 };
                let conv1 = Conv::new(store, format!("{p}.conv1"), 3, c, cout, stride, rng);
                let bn1 = bn(store, format!("{p}.bn1"), cout);
                let conv2 = Conv::new(store, format!("{p}.conv2"), 3, cout, cout, 1, rng);
                let bn2 = bn(store, format!("{p}.bn2"), cout);
                let proj = (stride != 1 || c != cout).then(|| {
                    let conv = Conv::new(store, format!("{p}.proj"), 1, c, cout, stride, rng);
                    (conv, bn(store, format!("{p}.proj_bn"), cout))
                });
                if stride == 2 {
                    t = halve(t);
                    f = halve(f);
                }
                c = cout;
                let k = attention.bottleneck;
                let freq = attention.scenario.uses_freq().then(|| {
                    FreqAttentionParams::init(f * c, k, rng).register(store, &format!("{p}.att_freq"))
                });
                let time = attention.scenario.uses_time().then(|| {
                    FreqAttentionParams::init(t, k, rng).register(store, &format!("{p}.att_time"))
                });
                blocks.push(Block {
                    conv1,
                    bn1,
                    conv2,
                    bn2,
                    proj,
                    freq,
                    time,
                });
            }
        }
        Ok(ResNetLite {
            config: config.clone(),
            attention: attention.clone(),
            stem,
            stem_bn,
            blocks,
            out_shape: [t, f, c],
        })
    }

    /// `[T_k, F_k, C_k]` for an input of `input_frames` frames.
    pub fn out_shape(&self) -> [usize; 3] {
        self.out_shape
    }

    /// Width after merging the frequency and channel axes.
    pub fn out_dim(&self) -> usize {
        self.out_shape[1] * self.out_shape[2]
    }

    /// `[B, T, F] → [B, T_k, F_k, C_k]`.
    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: &Var<'t>, ctx: &ForwardCtx) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 3 || s[1] < MIN_FRAMES {
            return Err(Error::ReceptiveField {
                frames: s.get(1).copied().unwrap_or(0),
                needed: MIN_FRAMES,
            });
        }
        if self.attention.scenario.uses_time() && s[1] != self.config.input_frames {
            return Err(Error::Config(format!(
                "this network's time attention expects {} frames, got {}",
                self.config.input_frames, s[1]
            )));
        }
        let x = x.reshape(&[s[0], s[1], s[2], 1])?;
        let mut h = bn4(&self.stem_bn, b, self.stem.forward(b, &x)?, ctx)?.relu();
        for block in &self.blocks {
            h = block.forward(b, &h, &self.attention, ctx)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::Scenario;
    use crate::backbones::layers::Mode;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(att: AttentionConfig) -> (ParamStore, ResNetLite) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = ResNetConfig {
            stem_channels: 2,
            channels: vec![2, 3, 3, 4],
            blocks: vec![1, 2, 1, 1],
            input_frames: 64,
        };
        let net = ResNetLite::new(&mut store, &cfg, 257, true, &att, &mut rng).unwrap();
        (store, net)
    }

    #[test]
    fn stride_arithmetic() {
        let (store, net) = small(AttentionConfig::scenario(Scenario::FreqTime).unwrap());
        assert_eq!(net.out_shape(), [4, 17, 4]);
        let tape = Tape::new();
        let b = Binder::new(&tape, &store, false);
        let x = tape.constant(Tensor::ones(&[1, 64, 257]));
        let y = net.forward(&b, &x, &ForwardCtx::new(Mode::Eval)).unwrap();
        assert_eq!(y.shape(), vec![1, 4, 17, 4]);
        let short = tape.constant(Tensor::ones(&[1, 32, 257]));
        assert!(net.forward(&b, &short, &ForwardCtx::new(Mode::Eval)).is_err());
    }

    #[test]
    fn no_attention_has_no_attention_parameters() {
        let (store, net) = small(AttentionConfig::none());
        assert!(store.ids().all(|id| !store.name(id).contains("att_")));
        let tape = Tape::new();
        let b = Binder::new(&tape, &store, false);
        let x = tape.constant(Tensor::ones(&[1, 20, 257]));
        assert_eq!(net.forward(&b, &x, &ForwardCtx::new(Mode::Eval)).unwrap().shape()[1], 2);
    }
}
