//! Speaker verification: trains the toy TDNN briefly, scores the trial list
//! by cosine similarity of embeddings and reports the equal error rate on
//! clean and noisy audio.
//!
//! cargo run --example verify_eer -- --epochs 10

use clap::Parser;
use tsa_core::attention::{AttentionConfig, Scenario};
use tsa_core::backbones::ModelConfig;
use tsa_core::cli::{run_seed, Corpus, ExperimentSpec, NoiseBank, Task};
use tsa_core::dataset::SyntheticSpeakerSpec;
use tsa_core::metrics::eer;
use tsa_core::noise::NoiseKind;
use tsa_core::trainer::TrainConfig;

#[derive(Parser)]
struct Args {
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    let toy = [(0.9, true), (0.4, true), (0.7, false), (0.1, false)];
    println!("EER of four hand-made scores: {}", eer(&toy)?);

    let corpus = Corpus::synthetic(&SyntheticSpeakerSpec::new(8, 20, 1.5, 4)?)?;
    println!("{} trials", corpus.trials.as_ref().map_or(0, |t| t.trials.len()));
    for noise in [None, Some(NoiseKind::Babble)] {
        let spec = ExperimentSpec {
            model: ModelConfig::toy_tdnn(8).with_attention(AttentionConfig::scenario(Scenario::FreqTime)?),
            train: TrainConfig {
                lr0: 1e-3,
                ..TrainConfig::new(args.epochs, 32)
            },
            augment: None,
            noise,
            snrs: vec![5.0],
            seeds: vec![args.seed],
            task: Task::Verify,
        };
        for row in run_seed(&spec, &corpus, &NoiseBank::Synthetic(4), args.seed)? {
            println!("{}", row.to_tsv());
        }
    }
    Ok(())
}
