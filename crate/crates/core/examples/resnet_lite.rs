//! The reduced ResNet on fixed-length spectrogram crops, with and without
//! two-stage attention in its residual blocks.
//!
//! cargo run --example resnet_lite

use tsa_core::attention::{AttentionConfig, Scenario};
use tsa_core::backbones::{ModelConfig, SpeakerModel};
use tsa_core::dataset::{synthetic_utterances, SyntheticSpeakerSpec};

fn main() -> anyhow::Result<()> {
    let frames = 64;
    let utts = synthetic_utterances(&SyntheticSpeakerSpec::new(4, 2, 1.0, 9)?)?;
    for scenario in [Scenario::None, Scenario::FreqTime, Scenario::Parallel] {
        let cfg = ModelConfig::resnet_lite(4, frames).with_attention(AttentionConfig::scenario(scenario)?);
        let kind = cfg.backbone.feature_kind();
        let model = SpeakerModel::new(cfg)?;
        let feats = kind.extract(&utts[0].wave)?.crop(0, frames)?;
        let emb = model.embed(&feats)?;
        let logits = model.logits(&feats)?;
        println!(
            "{scenario}: {} weights, input {}x{} {kind}, embedding {:?}, logits {:?}",
            model.store().num_trainable(),
            feats.num_frames(),
            feats.dim(),
            emb.shape(),
            logits.shape()
        );
    }
    Ok(())
}
