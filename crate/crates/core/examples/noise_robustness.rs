//! Held-out accuracy under noise for several attention scenarios, trained
//! and scored over a few seeds.
//!
//! cargo run --example noise_robustness -- --scenarios none,ft --noise babble --snr 0

use std::time::Instant;

use clap::Parser;
use tsa_core::attention::{AttentionConfig, Scenario};
use tsa_core::backbones::ModelConfig;
use tsa_core::cli::{run_seed, Corpus, ExperimentSpec, NoiseBank, Task};
use tsa_core::dataset::SyntheticSpeakerSpec;
use tsa_core::noise::NoiseKind;
use tsa_core::trainer::TrainConfig;

#[derive(Parser)]
struct Args {
    #[arg(long, value_delimiter = ',', default_value = "none,ft")]
    scenarios: Vec<Scenario>,
    #[arg(long, default_value = "babble")]
    noise: NoiseKind,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    snr: Vec<f64>,
    /// Noise kind mixed into a copy of the training set, or `none`.
    #[arg(long, default_value = "babble")]
    augment: String,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 7)]
    corpus_seed: u64,
}

fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    let corpus = Corpus::synthetic(&SyntheticSpeakerSpec::new(8, 50, 2.0, args.corpus_seed)?)?;
    let bank = NoiseBank::Synthetic(args.corpus_seed);
    let augment = match args.augment.as_str() {
        "none" => None,
        k => Some(k.parse()?),
    };
    println!("scenario\tseed\tsnr\ttop1");
    for scenario in &args.scenarios {
        let start = Instant::now();
        let spec = ExperimentSpec {
            model: ModelConfig::toy_tdnn(8).with_attention(AttentionConfig::scenario(*scenario)?),
            train: TrainConfig {
                lr0: args.lr,
                ..TrainConfig::new(args.epochs, 32)
            },
            augment,
            noise: Some(args.noise),
            snrs: args.snr.clone(),
            seeds: args.seeds.clone(),
            task: Task::Identify,
        };
        let mut sums = vec![0.0; args.snr.len()];
        for &seed in &args.seeds {
            for (i, row) in run_seed(&spec, &corpus, &bank, seed)?.iter().enumerate() {
                let top1 = row.top1.unwrap_or(f64::NAN);
                sums[i] += top1;
                println!("{scenario}\t{seed}\t{}\t{top1:.4}", args.snr[i]);
            }
        }
        for (snr, s) in args.snr.iter().zip(&sums) {
            println!("{scenario}\tmean\t{snr}\t{:.4}", s / args.seeds.len() as f64);
        }
        eprintln!("{scenario}: {:.0} s", start.elapsed().as_secs_f64());
    }
    Ok(())
}
