//! Sweeps the frequency weight γ of the parallel scenario and prints the
//! resulting table.
//!
//! cargo run --example gamma_sweep -- --epochs 5

use clap::Parser;
use tsa_core::attention::AttentionConfig;
use tsa_core::backbones::ModelConfig;
use tsa_core::cli::{gamma_to_tsv, sweep_gamma, Corpus, ExperimentSpec, NoiseBank, Task};
use tsa_core::dataset::SyntheticSpeakerSpec;
use tsa_core::noise::NoiseKind;
use tsa_core::trainer::TrainConfig;

#[derive(Parser)]
struct Args {
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    let corpus = Corpus::synthetic(&SyntheticSpeakerSpec::new(6, 16, 1.5, args.seed)?)?;
    let spec = ExperimentSpec {
        model: ModelConfig::toy_tdnn(6).with_attention(AttentionConfig::parallel(0.5)?),
        train: TrainConfig {
            lr0: 1e-3,
            ..TrainConfig::new(args.epochs, 32)
        },
        augment: None,
        noise: Some(NoiseKind::Babble),
        snrs: vec![0.0],
        seeds: vec![args.seed],
        task: Task::Verify,
    };
    print!("{}", gamma_to_tsv(&sweep_gamma(&spec, &corpus, &NoiseBank::Synthetic(args.seed))?));
    Ok(())
}
