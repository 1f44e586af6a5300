use std::collections::HashMap;
use std::path::PathBuf;

use rayon::prelude::*;

use crate::backbones::SpeakerModel;
use crate::dataset::Utterance;
use crate::error::{Error, Result};
use crate::metrics::{argmax, cosine_score, eer, TrialList};
use crate::tensor::Tensor;

const EVAL_BATCH: usize = 32;

/// Which scores decide identification.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// The FC2 classifier.
    Softmax,
    /// Cosine similarity to the AM-Softmax class weights.
    Cosine,
}

/// Inference-mode embeddings and class scores for every utterance, in
/// input order. Utterances are batched by length; models with a fixed input
/// length see a centred crop.
pub fn infer_all(model: &SpeakerModel, data: &[Utterance], head: Head) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let fixed = model.fixed_frames();
    let len_of = |u: &Utterance| fixed.unwrap_or(u.features.num_frames());
    let mut by_len: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, u) in data.iter().enumerate() {
        by_len.entry(len_of(u)).or_default().push(i);
    }
    let mut chunks: Vec<Vec<usize>> = Vec::new();
    let mut lens: Vec<usize> = by_len.keys().copied().collect();
    lens.sort_unstable();
    for l in lens {
        chunks.extend(by_len[&l].chunks(EVAL_BATCH).map(<[usize]>::to_vec));
    }
    let ams = model.store().get(model.ams_weights());
    let results = chunks
        .par_iter()
        .map(|idx| -> Result<Vec<(usize, Vec<f64>, Vec<f64>)>> {
            let t = len_of(&data[idx[0]]);
            let dim = data[idx[0]].features.dim();
            let mut x = Vec::with_capacity(idx.len() * t * dim);
            for &i in idx {
                let f = &data[i].features;
                if f.num_frames() < t {
                    return Err(Error::ReceptiveField {
                        frames: f.num_frames(),
                        needed: t,
                    });
                }
                let start = (f.num_frames() - t) / 2;
                x.extend_from_slice(&f.frames().data()[start * dim..(start + t) * dim]);
            }
            let (emb, logits) = model.infer_batch(&Tensor::new(&[idx.len(), t, dim], x)?)?;
            Ok(idx
                .iter()
                .enumerate()
                .map(|(r, &i)| {
                    let e = emb.row(r).to_vec();
                    let s = match head {
                        Head::Softmax => logits.row(r).to_vec(),
                        Head::Cosine => (0..ams.shape()[0]).map(|c| cosine_score(&e, ams.row(c))).collect(),
                    };
                    (i, e, s)
                })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = vec![(Vec::new(), Vec::new()); data.len()];
    for (i, e, s) in results.into_iter().flatten() {
        out[i] = (e, s);
    }
    Ok(out)
}

/// Fraction of utterances whose best-scoring speaker is the true one.
pub fn identification_top1(model: &SpeakerModel, data: &[Utterance], head: Head) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("no utterances to evaluate".into()));
    }
    let out = infer_all(model, data, head)?;
    let hits = out
        .iter()
        .zip(data)
        .filter(|((_, s), u)| argmax(s) == u.label)
        .count();
    Ok(hits as f64 / data.len() as f64)
}

/// EER of cosine scores between embeddings of the trial pairs. Trial paths
/// are looked up among `data`.
pub fn verification_eer(model: &SpeakerModel, data: &[Utterance], trials: &TrialList) -> Result<f64> {
    let out = infer_all(model, data, Head::Softmax)?;
    let index: HashMap<&PathBuf, usize> = data.iter().enumerate().map(|(i, u)| (&u.path, i)).collect();
    let find = |p: &PathBuf| {
        index
            .get(p)
            .copied()
            .ok_or_else(|| Error::Config(format!("trial utterance {} is not in the evaluation set", p.display())))
    };
    let scored = trials
        .trials
        .iter()
        .map(|t| Ok((cosine_score(&out[find(&t.a)?].0, &out[find(&t.b)?].0), t.same)))
        .collect::<Result<Vec<_>>>()?;
    eer(&scored)
}
