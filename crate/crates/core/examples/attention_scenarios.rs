//! Frequency and time attention on a random frame-level map under every
//! composition, plus the CNN variant on a `[T, F, C]` map.
//!
//! cargo run --example attention_scenarios

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tsa_core::attention::{
    cnn_two_stage, compose, freq_attention_weights, time_attention_weights, AttentionConfig, FreqAttentionParams,
    Scenario, TimeAttentionParams, TimeStage,
};
use tsa_core::tensor::{Tape, Tensor};

fn main() -> anyhow::Result<()> {
    let (frames, width, k) = (20, 16, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tape = Tape::new();
    let h = tape.constant(Tensor::uniform(&[frames, width], 1.0, &mut rng));
    let freq = FreqAttentionParams::init(width, k, &mut rng).bind(&tape, false);
    let time = TimeAttentionParams::init(width, &mut rng).bind(&tape, false);

    let wf = freq_attention_weights(&h, &freq)?.value();
    let wt = time_attention_weights(&h, &time)?.value();
    let (lo, hi) = wf.data().iter().fold((1.0f64, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)));
    println!("frequency weights {:?} in [{lo:.4}, {hi:.4}]", wf.shape());
    println!("time weights {:?} sum to {:.12}", wt.shape(), wt.data().iter().sum::<f64>());

    let norm = |t: &Tensor| t.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let base = norm(&h.value());
    println!("scenario\tshape\t|out|/|in|");
    let mut outs = Vec::new();
    for s in [Scenario::None, Scenario::TimeOnly, Scenario::FreqOnly, Scenario::FreqTime, Scenario::TimeFreq] {
        let out = compose(&h, &AttentionConfig::scenario(s)?, Some(&freq), Some(TimeStage::Softmax(&time)))?.value();
        println!("{s}\t{:?}\t{:.4}", out.shape(), norm(&out) / base);
        outs.push((s, out));
    }
    for gamma in [0.0, 0.5, 1.0] {
        let out = compose(&h, &AttentionConfig::parallel(gamma)?, Some(&freq), Some(TimeStage::Softmax(&time)))?.value();
        println!("parallel γ={gamma}\t{:?}\t{:.4}", out.shape(), norm(&out) / base);
        let twin = match gamma {
            g if g == 1.0 => Some(Scenario::FreqOnly),
            g if g == 0.0 => Some(Scenario::TimeOnly),
            _ => None,
        };
        if let Some((s, o)) = twin.and_then(|t| outs.iter().find(|(s, _)| *s == t)) {
            println!("  max |difference| from {s}: {:.1e}", out.max_abs_diff(o).unwrap_or(f64::NAN));
        }
    }

    let (f, c) = (4, 3);
    let map = tape.constant(Tensor::uniform(&[frames, f, c], 1.0, &mut rng));
    let gate_f = FreqAttentionParams::init(f * c, k, &mut rng).bind(&tape, false);
    let gate_t = FreqAttentionParams::init(frames, k, &mut rng).bind(&tape, false);
    let out = cnn_two_stage(&map, &AttentionConfig::scenario(Scenario::FreqTime)?, Some(&gate_f), Some(&gate_t))?;
    println!("cnn ft {:?} -> {:?}", map.shape(), out.shape());
    Ok(())
}
