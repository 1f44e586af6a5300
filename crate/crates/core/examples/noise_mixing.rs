//! Mixes one utterance with every noise kind across the SNR grid and
//! reports the SNR actually achieved.
//!
//! cargo run --example noise_mixing

use tsa_core::dataset::{synthetic_noise_source, synthetic_utterances, SyntheticSpeakerSpec};
use tsa_core::noise::{mix_components, MixSpec, NoiseKind, SNR_GRID};

fn main() -> anyhow::Result<()> {
    let utts = synthetic_utterances(&SyntheticSpeakerSpec::new(2, 1, 3.0, 5)?)?;
    let speech = &utts[0].wave;
    println!("kind\ttarget\tachieved\terror");
    for kind in NoiseKind::ALL {
        let source = synthetic_noise_source(kind, 5)?;
        for (i, &target) in SNR_GRID.iter().enumerate() {
            let parts = mix_components(speech, &source, &MixSpec::new(target, kind, i as u64)?)?;
            let got = parts.snr_db();
            println!("{kind}\t{target}\t{got:.4}\t{:+.1e}", got - target);
        }
    }
    Ok(())
}
