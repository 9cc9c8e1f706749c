use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{check_len, GavgError, Result};
use crate::numerics::ProbVector;

/// Probabilities are clamped to at least this before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Symmetrised KL divergence `(KL(p||q) + KL(q||p)) / 2`.
pub fn sym_kl(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    check_len(p.len(), q.len())?;
    let mut s = 0.0;
    for (&a, &b) in p.as_slice().iter().zip(q.as_slice()) {
        let (a, b) = (a.max(PROB_FLOOR), b.max(PROB_FLOOR));
        s += (a - b) * (a.ln() - b.ln());
    }
    Ok(0.5 * s)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TvDistance {
    /// `||p - q||^2`.
    pub sq_l2: f64,
    /// `||p - q||_1 / 2`.
    pub tv: f64,
}

pub fn tv_sq(p: &ProbVector, q: &ProbVector) -> Result<TvDistance> {
    check_len(p.len(), q.len())?;
    let (mut sq, mut l1) = (0.0, 0.0);
    for (&a, &b) in p.as_slice().iter().zip(q.as_slice()) {
        sq += (a - b) * (a - b);
        l1 += (a - b).abs();
    }
    Ok(TvDistance {
        sq_l2: sq,
        tv: 0.5 * l1,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DiversityMetric {
    SymKl,
    TvSq,
}

impl FromStr for DiversityMetric {
    type Err = GavgError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sym_kl" => Ok(DiversityMetric::SymKl),
            "tv_sq" => Ok(DiversityMetric::TvSq),
            _ => Err(GavgError::config(format!(
                "unknown diversity metric {s:?}; expected sym_kl or tv_sq"
            ))),
        }
    }
}

impl fmt::Display for DiversityMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DiversityMetric::SymKl => "sym_kl",
            DiversityMetric::TvSq => "tv_sq",
        })
    }
}

/// Eval-mode softmax outputs of one model on a fixed evaluation set.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxSnapshot {
    pub epoch: u64,
    pub probs: Vec<ProbVector>,
}

impl SoftmaxSnapshot {
    pub fn new(epoch: u64, probs: Vec<ProbVector>) -> Result<Self> {
        if let Some(first) = probs.first() {
            let c = first.len();
            if let Some(bad) = probs.iter().find(|p| p.len() != c) {
                return Err(GavgError::Dimension {
                    expected: c,
                    got: bad.len(),
                });
            }
        }
        Ok(SoftmaxSnapshot { epoch, probs })
    }

    pub fn file_name(epoch: u64) -> String {
        format!("softmax_epoch{epoch:04}.csv")
    }

    /// Header `p0,...,p{C-1}` then one row per example.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let c = self.probs.first().map_or(0, ProbVector::len);
        let header: Vec<String> = (0..c).map(|k| format!("p{k}")).collect();
        writeln!(out, "{}", header.join(","))?;
        for p in &self.probs {
            let row: Vec<String> = p.as_slice().iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn parse_csv(epoch: u64, text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| GavgError::config("empty snapshot file"))?;
        let c = header.split(',').count();
        let mut probs = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let row: std::result::Result<Vec<f64>, _> =
                line.split(',').map(|f| f.trim().parse::<f64>()).collect();
            let row =
                row.map_err(|e| GavgError::config(format!("bad snapshot row {line:?}: {e}")))?;
            if row.len() != c {
                return Err(GavgError::Dimension {
                    expected: c,
                    got: row.len(),
                });
            }
            probs.push(ProbVector::new(row)?);
        }
        SoftmaxSnapshot::new(epoch, probs)
    }
}

/// Loads every `softmax_epoch*.csv` in `dir`, sorted by epoch.
pub fn read_snapshot_dir(dir: &Path) -> Result<Vec<SoftmaxSnapshot>> {
    let mut found = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default();
        if let Some(num) = name
            .strip_prefix("softmax_epoch")
            .and_then(|r| r.strip_suffix(".csv"))
        {
            if let Ok(epoch) = num.parse::<u64>() {
                found.push((epoch, path));
            }
        }
    }
    found.sort();
    found
        .into_iter()
        .map(|(epoch, path)| SoftmaxSnapshot::parse_csv(epoch, &fs::read_to_string(path)?))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiversityReport {
    pub metric: DiversityMetric,
    pub snapshots: usize,
    pub pairs: usize,
    pub examples: usize,
    /// Mean over unordered pairs of the per-example mean.
    pub mean_per_example: f64,
    /// Mean over unordered pairs of the sum over examples.
    pub mean_dataset_sum: f64,
    /// For `tv_sq`, the same two numbers for `||p - q||_1 / 2`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tv_per_example: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tv_dataset_sum: Option<f64>,
}

fn mean_over_pairs(n: usize, mut f: impl FnMut(usize, usize) -> Result<f64>) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            total += f(i, j)?;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

pub fn pairwise_diversity(
    snapshots: &[SoftmaxSnapshot],
    metric: DiversityMetric,
) -> Result<DiversityReport> {
    let n = snapshots.len();
    if n < 2 {
        return Err(GavgError::domain(format!(
            "diversity needs at least 2 snapshots, got {n}"
        )));
    }
    let examples = snapshots[0].probs.len();
    if examples == 0 {
        return Err(GavgError::domain("snapshots have no examples"));
    }
    for s in snapshots {
        check_len(examples, s.probs.len())?;
    }
    let pair_sum = |i: usize, j: usize, tv: bool| -> Result<f64> {
        let mut s = 0.0;
        for (p, q) in snapshots[i].probs.iter().zip(&snapshots[j].probs) {
            s += match (metric, tv) {
                (DiversityMetric::SymKl, _) => sym_kl(p, q)?,
                (DiversityMetric::TvSq, false) => tv_sq(p, q)?.sq_l2,
                (DiversityMetric::TvSq, true) => tv_sq(p, q)?.tv,
            };
        }
        Ok(s)
    };
    let sum = mean_over_pairs(n, |i, j| pair_sum(i, j, false))?;
    let tv_sum = match metric {
        DiversityMetric::TvSq => Some(mean_over_pairs(n, |i, j| pair_sum(i, j, true))?),
        DiversityMetric::SymKl => None,
    };
    let e = examples as f64;
    Ok(DiversityReport {
        metric,
        snapshots: n,
        pairs: n * (n - 1) / 2,
        examples,
        mean_per_example: sum / e,
        mean_dataset_sum: sum,
        tv_per_example: tv_sum.map(|s| s / e),
        tv_dataset_sum: tv_sum,
    })
}
