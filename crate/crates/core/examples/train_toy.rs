//! Trains the toy TDNN with frequency-then-time attention on the synthetic
//! corpus and reports identification accuracy.
//!
//! cargo run --example train_toy -- --epochs 30

use std::sync::Arc;
use std::time::Instant;

use clap::Parser;
use tsa_core::attention::{AttentionConfig, Scenario};
use tsa_core::backbones::{ModelConfig, SpeakerModel};
use tsa_core::dataset::{extract_all, split_waves, synthetic_utterances, NoisePolicy, Split, SyntheticSpeakerSpec};
use tsa_core::features::FeatureKind;
use tsa_core::trainer::{identification_top1, Head, TrainConfig, Trainer};

#[derive(Parser)]
struct Args {
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value = "ft")]
    scenario: Scenario,
}

fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    let start = Instant::now();
    let spec = SyntheticSpeakerSpec::new(8, 50, 2.0, args.seed)?;
    let utts = synthetic_utterances(&spec)?;
    let kind = FeatureKind::LogMel40;
    let train = Arc::new(extract_all(&split_waves(&utts, Split::Train), kind, &NoisePolicy::Clean, args.seed)?);
    let test = extract_all(&split_waves(&utts, Split::Test), kind, &NoisePolicy::Clean, args.seed)?;

    let model = SpeakerModel::new(
        ModelConfig::toy_tdnn(8)
            .with_attention(AttentionConfig::scenario(args.scenario)?)
            .with_seed(args.seed),
    )?;
    let cfg = TrainConfig {
        lr0: args.lr,
        seed: args.seed,
        ..TrainConfig::new(args.epochs, args.batch_size)
    };
    let mut trainer = Trainer::new(model, cfg)?;
    trainer.fit(&train, |_, log| {
        println!("{log}");
        Ok(())
    })?;
    let model = trainer.model();
    println!(
        "train top1 {:.3}  held-out top1 {:.3}  ({:.1} s)",
        identification_top1(model, &train, Head::Softmax)?,
        identification_top1(model, &test, Head::Softmax)?,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
