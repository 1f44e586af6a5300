//! Frame-level extractors, statistics pooling and the segment-level head.
//!
//! TDNN path: features → TDNN → attention → pooling → FC1 → ReLU → FC2.
//! CNN path: spectrogram → ResNetLite (attention inside each block) →
//! merge frequency and channel axes → pooling → FC1 → ReLU → FC2.
//! The embedding is the FC1 output before its activation.

mod checkpoint;
pub mod layers;
pub mod resnet;
pub mod tdnn;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Checkpoint, MODEL_MAGIC};
pub use layers::{BatchNorm, ForwardCtx, Linear, Mode, BN_EPS, BN_MOMENTUM};
pub use resnet::{ResNetConfig, ResNetLite};
pub use tdnn::{splice, Tdnn, TdnnLayerSpec, TDNN_CONTEXTS};

use crate::attention::{
    compose, AttentionConfig, FreqAttentionParams, GateIds, Scenario, ScorerIds, TimeAttentionParams,
    TimeStage, DEFAULT_BOTTLENECK,
};
use crate::config::{join_list, KeyValues};
use crate::error::{Error, Result};
use crate::features::{FeatureKind, FeatureMatrix, N_BINS, N_MELS};
use crate::tensor::{xavier_bound, Binder, ParamId, ParamStore, Reduce, Tape, Tensor, Var};

/// Per-dimension mean and standard deviation over time, concatenated:
/// `[T, F] → [1, 2F]`, `[B, T, F] → [B, 2F]`.
pub fn stats_pool<'t>(h: &Var<'t>) -> Result<Var<'t>> {
    let h = match h.shape().as_slice() {
        [t, f] => h.reshape(&[1, *t, *f])?,
        [_, _, _] => *h,
        other => return Err(Error::shape("stats_pool", other, &[])),
    };
    let mean = h.reduce(1, Reduce::Mean, false)?;
    let std = h.reduce(1, Reduce::Std, false)?;
    Var::concat(&[mean, std], 1)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BackboneConfig {
    /// Widths of the frame-level layers; at most five.
    Tdnn { widths: Vec<usize> },
    ResNetLite(ResNetConfig),
}

impl BackboneConfig {
    pub fn feature_kind(&self) -> FeatureKind {
        match self {
            BackboneConfig::Tdnn { .. } => FeatureKind::LogMel40,
            BackboneConfig::ResNetLite(_) => FeatureKind::Spec257,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub feature_dim: usize,
    pub batch_norm: bool,
    pub attention: AttentionConfig,
    pub embed_dim: usize,
    pub n_speakers: usize,
    pub init_seed: u64,
}

impl ModelConfig {
    /// Full-width x-vector TDNN.
    pub fn tdnn(n_speakers: usize) -> Self {
        ModelConfig {
            backbone: BackboneConfig::Tdnn {
                widths: vec![512, 512, 512, 512, 1500],
            },
            feature_dim: N_MELS,
            batch_norm: true,
            attention: AttentionConfig::none(),
            embed_dim: 512,
            n_speakers,
            init_seed: 0,
        }
    }

    /// Desk-scale TDNN with 64-wide layers and embeddings.
    pub fn toy_tdnn(n_speakers: usize) -> Self {
        ModelConfig {
            backbone: BackboneConfig::Tdnn { widths: vec![64; 5] },
            embed_dim: 64,
            ..Self::tdnn(n_speakers)
        }
    }

    pub fn resnet_lite(n_speakers: usize, input_frames: usize) -> Self {
        ModelConfig {
            backbone: BackboneConfig::ResNetLite(ResNetConfig::lite(input_frames)),
            feature_dim: N_BINS,
            batch_norm: true,
            attention: AttentionConfig::none(),
            embed_dim: 128,
            n_speakers,
            init_seed: 0,
        }
    }

    pub fn with_attention(mut self, attention: AttentionConfig) -> Self {
        self.attention = attention;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.init_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        if self.feature_dim == 0 || self.embed_dim == 0 || self.n_speakers < 2 {
            return Err(Error::Config(
                "feature_dim and embed_dim must be positive and n_speakers at least 2".into(),
            ));
        }
        match &self.backbone {
            BackboneConfig::Tdnn { widths } => {
                if widths.is_empty() || widths.len() > TDNN_CONTEXTS.len() || widths.contains(&0) {
                    return Err(Error::Config(format!("bad TDNN widths {widths:?}")));
                }
            }
            BackboneConfig::ResNetLite(r) => r.validate()?,
        }
        Ok(())
    }

    /// Writes every field under `model.`.
    pub fn write_kv(&self, kv: &mut KeyValues) {
        match &self.backbone {
            BackboneConfig::Tdnn { widths } => {
                kv.set("model.backbone", "tdnn");
                kv.set("model.tdnn.widths", join_list(widths));
            }
            BackboneConfig::ResNetLite(r) => {
                kv.set("model.backbone", "resnet");
                kv.set("model.resnet.stem_channels", r.stem_channels);
                kv.set("model.resnet.channels", join_list(&r.channels));
                kv.set("model.resnet.blocks", join_list(&r.blocks));
                kv.set("model.resnet.input_frames", r.input_frames);
            }
        }
        kv.set("model.feature_dim", self.feature_dim);
        kv.set("model.batch_norm", self.batch_norm);
        kv.set("model.attention.scenario", self.attention.scenario);
        if let Some(g) = self.attention.gamma {
            kv.set("model.attention.gamma", g);
        }
        kv.set("model.attention.bottleneck", self.attention.bottleneck);
        kv.set("model.embed_dim", self.embed_dim);
        kv.set("model.n_speakers", self.n_speakers);
        kv.set("model.init_seed", self.init_seed);
    }

    /// Reads `model.*` keys. Only `model.n_speakers` is required; the rest
    /// default to the toy TDNN, or to ResNetLite when `model.backbone = resnet`.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let n_speakers = kv.require("model.n_speakers")?;
        let backbone: String = kv.get_or("model.backbone", "tdnn".to_string())?;
        let mut cfg = match backbone.as_str() {
            "tdnn" => {
                let mut c = ModelConfig::toy_tdnn(n_speakers);
                if let Some(w) = kv.get_list("model.tdnn.widths")? {
                    c.backbone = BackboneConfig::Tdnn { widths: w };
                }
                c
            }
            "resnet" => {
                let frames = kv.get_or("model.resnet.input_frames", 64)?;
                let mut r = ResNetConfig::lite(frames);
                r.stem_channels = kv.get_or("model.resnet.stem_channels", r.stem_channels)?;
                if let Some(c) = kv.get_list("model.resnet.channels")? {
                    r.channels = c;
                }
                if let Some(b) = kv.get_list("model.resnet.blocks")? {
                    r.blocks = b;
                }
                let mut c = ModelConfig::resnet_lite(n_speakers, frames);
                c.backbone = BackboneConfig::ResNetLite(r);
                c
            }
            other => return Err(Error::Config(format!("unknown backbone {other:?}"))),
        };
        cfg.feature_dim = kv.get_or("model.feature_dim", cfg.feature_dim)?;
        cfg.batch_norm = kv.get_or("model.batch_norm", cfg.batch_norm)?;
        cfg.embed_dim = kv.get_or("model.embed_dim", cfg.embed_dim)?;
        cfg.init_seed = kv.get_or("model.init_seed", cfg.init_seed)?;
        let scenario: Scenario = kv.get_or("model.attention.scenario", Scenario::None)?;
        let gamma = kv.get("model.attention.gamma")?;
        let gamma = match (scenario, gamma) {
            (Scenario::Parallel, None) => Some(crate::attention::DEFAULT_GAMMA),
            (_, g) => g,
        };
        let k = kv.get_or("model.attention.bottleneck", DEFAULT_BOTTLENECK)?;
        cfg.attention = AttentionConfig::new(scenario, gamma, k)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
enum Backbone {
    Tdnn(Tdnn),
    ResNet(ResNetLite),
}

/// Outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward<'t> {
    /// Frame-level map after attention, `[B, T', F]`.
    pub frames: Var<'t>,
    /// `[B, 2F]`.
    pub pooled: Var<'t>,
    /// FC1 output, `[B, embed_dim]`.
    pub embedding: Var<'t>,
    /// FC2 output, `[B, n_speakers]`.
    pub logits: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct SpeakerModel {
    config: ModelConfig,
    store: ParamStore,
    backbone: Backbone,
    freq: Option<GateIds>,
    time: Option<ScorerIds>,
    fc1: Linear,
    fc2: Linear,
    ams: ParamId,
}

pub const AMS_HEAD: &str = "head.ams.w";

impl SpeakerModel {
    /// Builds the network with parameters drawn from `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let att = &config.attention;
        let (backbone, width, freq, time) = match &config.backbone {
            BackboneConfig::Tdnn { widths } => {
                let t = Tdnn::new(&mut store, config.feature_dim, widths, config.batch_norm, &mut rng)?;
                let w = t.out_dim();
                let freq = att.scenario.uses_freq().then(|| {
                    FreqAttentionParams::init(w, att.bottleneck, &mut rng).register(&mut store, "att.freq")
                });
                let time = att
                    .scenario
                    .uses_time()
                    .then(|| TimeAttentionParams::init(w, &mut rng).register(&mut store, "att.time"));
                (Backbone::Tdnn(t), w, freq, time)
            }
            BackboneConfig::ResNetLite(r) => {
                let net = ResNetLite::new(&mut store, r, config.feature_dim, config.batch_norm, att, &mut rng)?;
                let w = net.out_dim();
                (Backbone::ResNet(net), w, None, None)
            }
        };
        let fc1 = Linear::new(&mut store, "head.fc1", 2 * width, config.embed_dim, &mut rng);
        let fc2 = Linear::new(&mut store, "head.fc2", config.embed_dim, config.n_speakers, &mut rng);
        let bound = xavier_bound(config.embed_dim, config.n_speakers);
        let ams = store.add(
            AMS_HEAD,
            Tensor::uniform(&[config.n_speakers, config.embed_dim], bound, &mut rng),
        );
        Ok(SpeakerModel {
            config,
            store,
            backbone,
            freq,
            time,
            fc1,
            fc2,
            ams,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// AM-Softmax class weights, `[n_speakers, embed_dim]`.
    pub fn ams_weights(&self) -> ParamId {
        self.ams
    }

    /// Fresh AM-Softmax class weights; everything else is kept.
    pub fn reset_ams_head(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, e) = (self.config.n_speakers, self.config.embed_dim);
        self.store
            .set(self.ams, Tensor::uniform(&[c, e], xavier_bound(e, c), &mut rng));
    }

    /// Frame-level width entering the pooling layer.
    pub fn frame_width(&self) -> usize {
        match &self.backbone {
            Backbone::Tdnn(t) => t.out_dim(),
            Backbone::ResNet(r) => r.out_dim(),
        }
    }

    /// Shortest accepted input in frames.
    pub fn min_frames(&self) -> usize {
        match &self.backbone {
            Backbone::Tdnn(t) => t.receptive_field(),
            Backbone::ResNet(_) => resnet::MIN_FRAMES,
        }
    }

    /// Input length the model insists on, if any.
    pub fn fixed_frames(&self) -> Option<usize> {
        match (&self.config.backbone, self.config.attention.scenario.uses_time()) {
            (BackboneConfig::ResNetLite(r), true) => Some(r.input_frames),
            _ => None,
        }
    }

    /// Forward pass on `[B, T, L]` features.
    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: &Var<'t>, ctx: &ForwardCtx) -> Result<Forward<'t>> {
        let frames = match &self.backbone {
            Backbone::Tdnn(t) => {
                let h = t.forward(b, x, ctx)?;
                let freq = self.freq.map(|g| g.bind(b));
                let time = self.time.map(|s| s.bind(b));
                compose(&h, &self.config.attention, freq.as_ref(), time.as_ref().map(TimeStage::Softmax))?
            }
            Backbone::ResNet(r) => {
                let h = r.forward(b, x, ctx)?;
                let s = h.shape();
                h.reshape(&[s[0], s[1], s[2] * s[3]])?
            }
        };
        let pooled = stats_pool(&frames)?;
        let embedding = self.fc1.forward(b, &pooled)?;
        let logits = self.fc2.forward(b, &embedding.relu())?;
        Ok(Forward {
            frames,
            pooled,
            embedding,
            logits,
        })
    }

    fn infer(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let b = Binder::new(&tape, &self.store, false);
        let out = self.forward(&b, &tape.constant(x.clone()), &ForwardCtx::new(Mode::Eval))?;
        let (e, l) = (out.embedding.value(), out.logits.value());
        Ok(((*e).clone(), (*l).clone()))
    }

    fn check_features(&self, f: &FeatureMatrix) -> Result<Tensor> {
        let want = self.config.backbone.feature_kind();
        if f.kind() != want || f.dim() != self.config.feature_dim {
            return Err(Error::Config(format!(
                "model expects {want} features of width {}, got {} of width {}",
                self.config.feature_dim,
                f.kind(),
                f.dim()
            )));
        }
        f.frames().reshape(&[1, f.num_frames(), f.dim()])
    }

    /// Inference-mode embedding, `[1, embed_dim]`.
    pub fn embed(&self, f: &FeatureMatrix) -> Result<Tensor> {
        Ok(self.infer(&self.check_features(f)?)?.0)
    }

    /// Inference-mode class scores, `[1, n_speakers]`.
    pub fn logits(&self, f: &FeatureMatrix) -> Result<Tensor> {
        Ok(self.infer(&self.check_features(f)?)?.1)
    }

    /// Inference-mode `(embeddings, logits)` for a `[B, T, L]` batch.
    pub fn infer_batch(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.infer(x)
    }

    pub fn apply_updates(&mut self, updates: Vec<(ParamId, Tensor)>) {
        for (id, t) in updates {
            self.store.set(id, t);
        }
    }

    /// Snapshot with the model config plus `meta` and `extra` blobs.
    pub fn to_checkpoint(&self, meta: &KeyValues, extra: Vec<(String, Tensor)>) -> Checkpoint {
        let mut kv = meta.clone();
        self.config.write_kv(&mut kv);
        kv.set("model.param_count", self.store.len());
        let mut tensors: Vec<(String, Tensor)> = self
            .store
            .ids()
            .map(|id| (self.store.name(id).to_string(), self.store.get(id).clone()))
            .collect();
        tensors.extend(extra);
        Checkpoint { meta: kv, tensors }
    }

    /// Rebuilds the model; blobs that are not model parameters are returned.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, Vec<(String, Tensor)>)> {
        let mut model = SpeakerModel::new(ModelConfig::from_kv(&ck.meta)?)?;
        let mut seen = vec![false; model.store.len()];
        let mut extra = Vec::new();
        for (name, t) in &ck.tensors {
            match model.store.find(name) {
                Some(id) => {
                    if model.store.get(id).shape() != t.shape() {
                        return Err(Error::Format(format!(
                            "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                            t.shape(),
                            model.store.get(id).shape()
                        )));
                    }
                    model.store.set(id, t.clone());
                    seen[id.0] = true;
                }
                None => extra.push((name.clone(), t.clone())),
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Format(format!(
                "checkpoint lacks parameter {}",
                model.store.name(ParamId(i))
            )));
        }
        Ok((model, extra))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint(&KeyValues::new(), Vec::new()).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_checkpoint(&Checkpoint::load(path)?)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn stats_pool_matches_loops() {
        let h = rand_t(&[4, 3], 1);
        let tape = Tape::new();
        let p = stats_pool(&tape.constant(h.clone())).unwrap().value();
        assert_eq!(p.shape(), &[1, 6]);
        for f in 0..3 {
            let col: Vec<f64> = (0..4).map(|t| h.get(&[t, f])).collect();
            let m = col.iter().sum::<f64>() / 4.0;
            let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 4.0;
            assert!((p.data()[f] - m).abs() < 1e-12);
            assert!((p.data()[3 + f] - (v + crate::tensor::STD_EPS).sqrt()).abs() < 1e-12);
        }
        let one = stats_pool(&tape.constant(Tensor::new(&[1, 2], vec![3.0, -1.0]).unwrap()))
            .unwrap()
            .value();
        assert_eq!(&one.data()[..2], &[3.0, -1.0]);
        assert!(one.data()[2..].iter().all(|v| v.abs() < 1e-4));
    }

    fn logmel(t: usize, seed: u64) -> FeatureMatrix {
        FeatureMatrix::new(rand_t(&[t, 40], seed), FeatureKind::LogMel40).unwrap()
    }

    #[test]
    fn embedding_shape_and_determinism() {
        let cfg = ModelConfig::toy_tdnn(4).with_attention(AttentionConfig::scenario(Scenario::FreqTime).unwrap());
        let m = SpeakerModel::new(cfg.clone()).unwrap();
        let f = logmel(40, 2);
        let e = m.embed(&f).unwrap();
        assert_eq!(e.shape(), &[1, 64]);
        assert_eq!(e, SpeakerModel::new(cfg).unwrap().embed(&f).unwrap());
        let spec = FeatureMatrix::new(rand_t(&[40, 257], 3), FeatureKind::Spec257).unwrap();
        assert!(m.embed(&spec).is_err());
        assert!(m.embed(&logmel(10, 2)).is_err());
    }

    #[test]
    fn none_scenario_has_no_attention_parameters() {
        let m = SpeakerModel::new(ModelConfig::toy_tdnn(3)).unwrap();
        let s = m.store();
        assert!(s.ids().all(|id| !s.name(id).starts_with("att.")));
    }

    #[test]
    fn config_kv_round_trip() {
        for cfg in [
            ModelConfig::toy_tdnn(5).with_attention(AttentionConfig::parallel(0.2).unwrap()),
            ModelConfig::resnet_lite(3, 64).with_seed(9),
        ] {
            let mut kv = KeyValues::new();
            cfg.write_kv(&mut kv);
            assert_eq!(ModelConfig::from_kv(&kv).unwrap(), cfg);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsam");
        let cfg = ModelConfig::toy_tdnn(4).with_attention(AttentionConfig::scenario(Scenario::TimeFreq).unwrap());
        let m = SpeakerModel::new(cfg.with_seed(3)).unwrap();
        m.save(&p).unwrap();
        let back = SpeakerModel::load(&p).unwrap();
        assert_eq!(back.store(), m.store());
        let f = logmel(30, 4);
        assert_eq!(back.embed(&f).unwrap(), m.embed(&f).unwrap());
    }
}
