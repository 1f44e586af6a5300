//! Identification and verification metrics, plus the trial-list format.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fraction of rows of a `[B, C]` score matrix whose argmax equals the label.
/// Ties go to the lowest index.
pub fn top1(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (b, c) = match logits.shape() {
        &[b, c] if b == labels.len() && b > 0 => (b, c),
        other => return Err(Error::shape("top1", other, &[labels.len()])),
    };
    let hits = (0..b)
        .filter(|&r| argmax(&logits.data()[r * c..(r + 1) * c]) == labels[r])
        .count();
    Ok(hits as f64 / b as f64)
}

/// Index of the first maximal element.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn cosine_score(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine_score: length mismatch");
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// Equal error rate of `(score, same_speaker)` trials.
///
/// Thresholds are every distinct score plus `+∞`. At threshold `t`,
/// `FAR = #{different, score ≥ t} / #different` and
/// `FRR = #{same, score < t} / #same`. The result is the common value where
/// the two curves cross; when no threshold makes them equal, the crossing is
/// linearly interpolated between the last threshold with `FAR > FRR` and the
/// first with `FAR < FRR`.
pub fn eer(trials: &[(f64, bool)]) -> Result<f64> {
    let n_same = trials.iter().filter(|t| t.1).count();
    let n_diff = trials.len() - n_same;
    if n_same == 0 || n_diff == 0 {
        return Err(Error::EerUndefined);
    }
    if trials.iter().any(|t| !t.0.is_finite()) {
        return Err(Error::Contract("EER scores must be finite".into()));
    }
    let mut sorted = trials.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Sweep upwards: before threshold sorted[i].0, every lower score counts
    // as rejected.
    let (mut same_below, mut diff_below) = (0usize, 0usize);
    let rates = |same_below: usize, diff_below: usize| {
        let far = (n_diff - diff_below) as f64 / n_diff as f64;
        let frr = same_below as f64 / n_same as f64;
        (far, frr)
    };
    let mut prev = rates(0, 0);
    let mut i = 0;
    loop {
        let (far, frr) = if i < sorted.len() {
            rates(same_below, diff_below)
        } else {
            (0.0, 1.0)
        };
        if far <= frr {
            if far == frr {
                return Ok(far);
            }
            let (pfar, pfrr) = prev;
            let d_prev = pfar - pfrr;
            let d_cur = far - frr;
            let lambda = d_prev / (d_prev - d_cur);
            return Ok(pfar + lambda * (far - pfar));
        }
        prev = (far, frr);
        if i >= sorted.len() {
            unreachable!("the +inf threshold always has FAR < FRR");
        }
        let score = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == score {
            if sorted[i].1 {
                same_below += 1;
            } else {
                diff_below += 1;
            }
            i += 1;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub same: bool,
    pub a: PathBuf,
    pub b: PathBuf,
}

/// Verification pairs, one `<label 0|1> <path_a> <path_b>` per line;
/// relative paths resolve against the list's directory.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let base = origin.parent().unwrap_or(Path::new(""));
        let mut trials = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: &str| Error::Parse {
                path: origin.to_path_buf(),
                line: n + 1,
                msg: msg.to_string(),
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [label, a, b] = fields.as_slice() else {
                return Err(err("expected `<label> <path_a> <path_b>`"));
            };
            let same = match *label {
                "1" => true,
                "0" => false,
                _ => return Err(err("label must be 0 or 1")),
            };
            trials.push(Trial {
                same,
                a: base.join(a),
                b: base.join(b),
            });
        }
        Ok(TrialList { trials })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, path)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.trials {
            let _ = writeln!(s, "{} {} {}", u8::from(t.same), t.a.display(), t.b.display());
        }
        s
    }

    pub fn has_both_labels(&self) -> bool {
        self.trials.iter().any(|t| t.same) && self.trials.iter().any(|t| !t.same)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top1_counts_and_ties() {
        let logits = Tensor::new(
            &[4, 3],
            vec![
                1.0, 0.0, 0.0, //
                0.0, 2.0, 0.0, //
                0.0, 0.0, 3.0, //
                5.0, 5.0, 0.0, // tie → index 0
            ],
        )
        .unwrap();
        assert_eq!(top1(&logits, &[0, 1, 2, 0]).unwrap(), 1.0);
        assert_eq!(top1(&logits, &[0, 1, 2, 1]).unwrap(), 0.75);
    }

    #[test]
    fn cosine_basics() {
        let a = [1.0, 2.0, -0.5];
        assert!((cosine_score(&a, &a) - 1.0).abs() < 1e-15);
        assert_eq!(cosine_score(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        let a2: Vec<f64> = a.iter().map(|x| 2.0 * x).collect();
        let b = [0.3, -0.1, 0.9];
        assert!((cosine_score(&a2, &b) - cosine_score(&a, &b)).abs() < 1e-12);
        assert_eq!(cosine_score(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
    }

    #[test]
    fn eer_separated_and_chance() {
        let sep = [(0.9, true), (0.8, true), (0.1, false), (0.2, false)];
        assert_eq!(eer(&sep).unwrap(), 0.0);
        let tied = [(0.5, true), (0.5, false), (0.5, true), (0.5, false)];
        assert_eq!(eer(&tied).unwrap(), 0.5);
        assert!(matches!(eer(&[(0.1, true)]), Err(Error::EerUndefined)));
    }

    #[test]
    fn eer_exact_crossing() {
        // one inversion out of two per class: FAR = FRR = 0.5 at t = 0.4
        let t = [(0.3, true), (0.6, true), (0.4, false), (0.1, false)];
        assert_eq!(eer(&t).unwrap(), 0.5);
    }

    #[test]
    fn trial_list_round_trip() {
        let text = "1 a.wav b.wav\n# comment\n0 a.wav c.wav\n";
        let list = TrialList::parse(text, Path::new("t.txt")).unwrap();
        assert_eq!(list.trials.len(), 2);
        assert!(list.has_both_labels());
        assert_eq!(TrialList::parse(&list.to_text(), Path::new("t")).unwrap(), list);
        assert!(TrialList::parse("2 a b\n", Path::new("t")).is_err());
        assert!(TrialList::parse("1 a\n", Path::new("t")).is_err());
    }
}
