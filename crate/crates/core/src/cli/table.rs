//! Tab-separated result tables. Missing values are written as `-`; numbers
//! use the shortest text that parses back to the same `f64`.

use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const RESULT_HEADER: &str = "noise\tsnr\ttop1\teer";
pub const GAMMA_HEADER: &str = "gamma\tnoise\tsnr\ttop1\teer";
pub const CLEAN: &str = "clean";

/// One `(noise, snr)` cell of a results table.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    /// Noise kind, or `clean`.
    pub noise: String,
    pub snr: Option<f64>,
    pub top1: Option<f64>,
    pub eer: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}

fn parse_opt(field: &str, line: &str) -> Result<Option<f64>> {
    if field == "-" {
        return Ok(None);
    }
    field
        .parse()
        .map(Some)
        .map_err(|_| Error::Format(format!("bad number {field:?} in row {line:?}")))
}

fn fields<const N: usize>(line: &str) -> Result<[&str; N]> {
    let v: Vec<&str> = line.split('\t').collect();
    v.try_into()
        .map_err(|_| Error::Format(format!("expected {N} tab-separated fields in {line:?}")))
}

impl ResultRow {
    pub fn to_tsv(&self) -> String {
        format!("{}\t{}\t{}\t{}", self.noise, opt(self.snr), opt(self.top1), opt(self.eer))
    }

    pub fn parse_tsv(line: &str) -> Result<Self> {
        let [noise, snr, top1, eer] = fields::<4>(line)?;
        if noise.is_empty() {
            return Err(Error::Format(format!("empty noise field in {line:?}")));
        }
        Ok(ResultRow {
            noise: noise.to_string(),
            snr: parse_opt(snr, line)?,
            top1: parse_opt(top1, line)?,
            eer: parse_opt(eer, line)?,
        })
    }
}

/// A row of the γ sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct GammaRow {
    pub gamma: f64,
    pub result: ResultRow,
}

impl GammaRow {
    pub fn to_tsv(&self) -> String {
        format!("{}\t{}", self.gamma, self.result.to_tsv())
    }

    pub fn parse_tsv(line: &str) -> Result<Self> {
        let (g, rest) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("missing gamma in {line:?}")))?;
        Ok(GammaRow {
            gamma: parse_opt(g, line)?.ok_or_else(|| Error::Format(format!("missing gamma in {line:?}")))?,
            result: ResultRow::parse_tsv(rest)?,
        })
    }
}

fn write_table<T>(header: &str, rows: &[T], fmt: impl Fn(&T) -> String) -> String {
    let mut s = format!("{header}\n");
    for r in rows {
        let _ = writeln!(s, "{}", fmt(r));
    }
    s
}

fn parse_table<T>(text: &str, header: &str, parse: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(Error::Format(format!("table must start with {header:?}")));
    }
    lines.filter(|l| !l.is_empty()).map(parse).collect()
}

pub fn results_to_tsv(rows: &[ResultRow]) -> String {
    write_table(RESULT_HEADER, rows, ResultRow::to_tsv)
}

pub fn parse_results(text: &str) -> Result<Vec<ResultRow>> {
    parse_table(text, RESULT_HEADER, ResultRow::parse_tsv)
}

pub fn gamma_to_tsv(rows: &[GammaRow]) -> String {
    write_table(GAMMA_HEADER, rows, GammaRow::to_tsv)
}

pub fn parse_gamma(text: &str) -> Result<Vec<GammaRow>> {
    parse_table(text, GAMMA_HEADER, GammaRow::parse_tsv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn format_contract() {
        let r = ResultRow {
            noise: "babble".into(),
            snr: Some(0.0),
            top1: Some(0.8125),
            eer: Some(0.1),
        };
        assert_eq!(r.to_tsv(), "babble\t0\t0.8125\t0.1");
        let clean = ResultRow {
            noise: CLEAN.into(),
            snr: None,
            top1: Some(1.0),
            eer: None,
        };
        assert_eq!(clean.to_tsv(), "clean\t-\t1\t-");
        let text = results_to_tsv(&[r.clone(), clean.clone()]);
        assert_eq!(parse_results(&text).unwrap(), vec![r, clean]);
        assert!(parse_results("noise\tsnr\n").is_err());
        assert!(ResultRow::parse_tsv("babble\t0\tx\t-").is_err());
        assert!(ResultRow::parse_tsv("babble\t0\t1").is_err());
    }
}
