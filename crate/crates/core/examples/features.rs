//! Log-Mel and spectrogram features of one synthetic utterance, with a
//! round trip through the feature cache.
//!
//! cargo run --example features

use tsa_core::dataset::{synthetic_utterances, SyntheticSpeakerSpec};
use tsa_core::features::{read_cache, write_cache, FeatureKind};

fn main() -> anyhow::Result<()> {
    let utts = synthetic_utterances(&SyntheticSpeakerSpec::new(2, 2, 2.0, 11)?)?;
    let wave = &utts[0].wave;
    println!(
        "{}: {} samples at {} Hz ({:.2} s, power {:.4})",
        utts[0].rel_path().display(),
        wave.len(),
        wave.sample_rate(),
        wave.duration_s(),
        wave.power()
    );
    let dir = std::env::temp_dir().join("tsa-features-example");
    std::fs::create_dir_all(&dir)?;
    for kind in [FeatureKind::LogMel40, FeatureKind::Spec257] {
        let f = kind.extract(wave)?;
        let means = f.column_means();
        let peak = means.iter().map(|m| m.abs()).fold(0.0, f64::max);
        println!("{kind}: {} frames x {} bins, largest |column mean| {peak:.2e}", f.num_frames(), f.dim());
        let path = dir.join(format!("{kind}.feat"));
        write_cache(&path, &f)?;
        let back = read_cache(&path)?;
        let err = back.frames().max_abs_diff(f.frames()).unwrap_or(f64::NAN);
        println!("  cache {} stores f32; max round-trip error {err:.1e}", path.display());
    }
    Ok(())
}
