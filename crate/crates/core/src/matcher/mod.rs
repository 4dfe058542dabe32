//! Optimal matching head: scaled similarity scores, dustbin-augmented
//! Sinkhorn, mutual-max match extraction and the negative log-likelihood loss.

pub mod sinkhorn;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default Sinkhorn iteration count.
pub const DEFAULT_ITERATIONS: usize = 100;
/// Default minimum assignment probability of an extracted match.
pub const DEFAULT_THRESHOLD: f64 = 0.2;
/// Initial dustbin score.
pub const DEFAULT_DUSTBIN: f32 = 1.0;

/// `S = X Yᵀ / √C`.
pub fn score_matrix(tape: &mut Tape, x: Var, y: Var) -> Result<Var> {
    let (cx, cy) = (tape.shape(x).1, tape.shape(y).1);
    if cx != cy {
        return Err(Error::dim("score_matrix", format!("descriptor widths {cx} and {cy}")));
    }
    let s = tape.matmul_nt(x, y)?;
    tape.scale(s, 1.0 / (cx as f64).sqrt())
}

/// Soft assignment over `(m+1)×(n+1)` entries; the last row and column are
/// the dustbins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub log_p: Vec<f64>,
    pub m: usize,
    pub n: usize,
    pub iterations_run: usize,
    pub alpha: f64,
}

impl Assignment {
    pub fn from_tape(tape: &Tape, log_p: Var, alpha: f64, iterations: usize) -> Self {
        let (r, c) = tape.shape(log_p);
        Self {
            log_p: tape.value(log_p).to_vec(),
            m: r - 1,
            n: c - 1,
            iterations_run: iterations,
            alpha,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.m + 1, self.n + 1)
    }

    pub fn log_prob(&self, i: usize, j: usize) -> f64 {
        self.log_p[i * (self.n + 1) + j]
    }

    pub fn prob(&self, i: usize, j: usize) -> f64 {
        self.log_prob(i, j).exp()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..=self.m).map(|i| (0..=self.n).map(|j| self.prob(i, j)).sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        (0..=self.n).map(|j| (0..=self.m).map(|i| self.prob(i, j)).sum()).collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.row_sums().iter().sum()
    }
}

/// Runs the log-domain Sinkhorn on a plain `m×n` score tensor.
pub fn sinkhorn(scores: &Tensor, alpha: f64, iterations: usize) -> Result<Assignment> {
    let (m, n) = (scores.rows(), scores.cols());
    let s: Vec<f64> = scores.data().iter().map(|&v| v as f64).collect();
    let z = sinkhorn::augment(&s, m, n, alpha);
    let trace = sinkhorn::log_sinkhorn(&z, m, n, iterations)?;
    Ok(Assignment {
        log_p: trace.log_assignment(&z, m, n),
        m,
        n,
        iterations_run: trace.iterations(),
        alpha,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub i: usize,
    pub j: usize,
    pub confidence: f64,
}

/// Correspondences between two keypoint sets, each index used at most once.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchSet {
    pub matches: Vec<Match>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.matches.iter().map(|m| (m.i, m.j)).collect()
    }

    /// True when no `i` and no `j` repeats.
    pub fn is_injective(&self) -> bool {
        let mut is: Vec<usize> = self.matches.iter().map(|m| m.i).collect();
        let mut js: Vec<usize> = self.matches.iter().map(|m| m.j).collect();
        is.sort_unstable();
        js.sort_unstable();
        is.windows(2).all(|w| w[0] != w[1]) && js.windows(2).all(|w| w[0] != w[1])
    }
}

/// First index of the maximum, or `None` for an empty range.
fn argmax(values: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, v) in values.enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((k, v));
        }
    }
    best.map(|(k, _)| k)
}

/// Keeps `(i, j)` when `P_ij` is the maximum of row `i` and of column `j`
/// (dustbins excluded) and `P_ij ≥ threshold`.
pub fn extract_matches(a: &Assignment, threshold: f64) -> MatchSet {
    let col_best: Vec<Option<usize>> = (0..a.n).map(|j| argmax((0..a.m).map(|i| a.log_prob(i, j)))).collect();
    let mut matches = Vec::new();
    for i in 0..a.m {
        let Some(j) = argmax((0..a.n).map(|j| a.log_prob(i, j))) else {
            continue;
        };
        if col_best[j] != Some(i) {
            continue;
        }
        let p = a.prob(i, j).min(1.0);
        if p >= threshold {
            matches.push(Match { i, j, confidence: p });
        }
    }
    MatchSet { matches }
}

/// Ground-truth labels of a pair: every keypoint of X lies in exactly one of
/// `matches` / `unmatched_x`, every keypoint of Y in `matches` / `unmatched_y`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Correspondences {
    pub matches: Vec<(usize, usize)>,
    pub unmatched_x: Vec<usize>,
    pub unmatched_y: Vec<usize>,
}

impl Correspondences {
    pub fn is_empty(&self) -> bool {
        self.matches.is_empty() && self.unmatched_x.is_empty() && self.unmatched_y.is_empty()
    }

    pub fn len(&self) -> usize {
        self.matches.len() + self.unmatched_x.len() + self.unmatched_y.len()
    }

    /// Checks that the labels partition `0..m` and `0..n`.
    pub fn validate(&self, m: usize, n: usize) -> Result<()> {
        let mut seen_x = vec![false; m];
        let mut seen_y = vec![false; n];
        let mark = |seen: &mut [bool], k: usize, side: &str| -> Result<()> {
            match seen.get_mut(k) {
                None => Err(Error::contract(format!("label {side}{k} outside 0..{}", seen.len()))),
                Some(true) => Err(Error::contract(format!("label {side}{k} appears twice"))),
                Some(s) => {
                    *s = true;
                    Ok(())
                }
            }
        };
        for &(i, j) in &self.matches {
            mark(&mut seen_x, i, "x")?;
            mark(&mut seen_y, j, "y")?;
        }
        for &i in &self.unmatched_x {
            mark(&mut seen_x, i, "x")?;
        }
        for &j in &self.unmatched_y {
            mark(&mut seen_y, j, "y")?;
        }
        if let Some(i) = seen_x.iter().position(|s| !s) {
            return Err(Error::contract(format!("keypoint x{i} has no label")));
        }
        if let Some(j) = seen_y.iter().position(|s| !s) {
            return Err(Error::contract(format!("keypoint y{j} has no label")));
        }
        Ok(())
    }

    /// Entries of the augmented assignment that the labels select.
    pub fn coords(&self, m: usize, n: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.len());
        out.extend(self.matches.iter().copied());
        out.extend(self.unmatched_x.iter().map(|&i| (i, n)));
        out.extend(self.unmatched_y.iter().map(|&j| (m, j)));
        out
    }
}

/// Negative mean log-likelihood of the labelled entries of `log_p`.
pub fn matching_loss(tape: &mut Tape, log_p: Var, gt: &Correspondences) -> Result<Var> {
    if gt.is_empty() {
        return Err(Error::contract("matching loss needs at least one ground-truth label"));
    }
    let (r, c) = tape.shape(log_p);
    let picked = tape.select_entries(log_p, &gt.coords(r - 1, c - 1))?;
    let mean = tape.mean_all(picked)?;
    tape.scale(mean, -1.0)
}

/// Same loss evaluated directly on an [`Assignment`].
pub fn assignment_loss(a: &Assignment, gt: &Correspondences) -> Result<f64> {
    if gt.is_empty() {
        return Err(Error::contract("matching loss needs at least one ground-truth label"));
    }
    let coords = gt.coords(a.m, a.n);
    let mut total = 0.0;
    for &(i, j) in &coords {
        if i > a.m || j > a.n {
            return Err(Error::Index {
                op: "assignment_loss",
                index: i.max(j),
                len: a.m.max(a.n) + 1,
            });
        }
        total += a.log_prob(i, j);
    }
    Ok(-total / coords.len() as f64)
}
