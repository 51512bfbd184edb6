//! Harrell's concordance index and the IPCW integrated Brier score.
//!
//! Scores are oriented like survival times: a higher score predicts a
//! longer survival.

use serde::{Deserialize, Serialize};

use crate::error::{GraftError, Result};
use crate::km::{fit_km, KmCurve};

/// Counts behind a C-index value. `ties` are comparable pairs with equal
/// scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConcordanceCounts {
    pub concordant: u64,
    pub ties: u64,
    pub comparable: u64,
}

impl ConcordanceCounts {
    pub fn value(&self) -> f64 {
        (2 * self.concordant + self.ties) as f64 / (2 * self.comparable) as f64
    }
}

/// Fenwick tree over score ranks.
struct Fenwick(Vec<u64>);

impl Fenwick {
    fn new(n: usize) -> Self {
        Fenwick(vec![0; n + 1])
    }

    fn add(&mut self, i: usize) {
        let mut i = i + 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted ranks `< i`.
    fn prefix(&self, i: usize) -> u64 {
        let mut i = i;
        let mut s = 0;
        while i > 0 {
            s += self.0[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Pair `(i, j)` is comparable when `t_i < t_j` and subject `i` had the
/// event; it is concordant when `s_i < s_j`. O(n log n).
pub fn concordance_counts(scores: &[f64], times: &[f64], events: &[bool]) -> Result<ConcordanceCounts> {
    let n = scores.len();
    if times.len() != n || events.len() != n {
        return Err(GraftError::Shape(format!(
            "{n} scores, {} times, {} events",
            times.len(),
            events.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(GraftError::Numeric("NaN score".into()));
    }
    // dense ranks of scores
    let mut by_score: Vec<usize> = (0..n).collect();
    by_score.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut score_rank = vec![0usize; n];
    let mut distinct = 0;
    for k in 0..n {
        if k > 0 && scores[by_score[k]] != scores[by_score[k - 1]] {
            distinct += 1;
        }
        score_rank[by_score[k]] = distinct;
    }
    let n_ranks = distinct + 1;

    let mut by_time: Vec<usize> = (0..n).collect();
    by_time.sort_by(|&a, &b| times[b].total_cmp(&times[a]));

    let mut tree = Fenwick::new(n_ranks);
    let mut inserted = 0u64;
    let mut counts = ConcordanceCounts {
        concordant: 0,
        ties: 0,
        comparable: 0,
    };
    let mut k = 0;
    while k < n {
        let t = times[by_time[k]];
        let mut end = k;
        while end < n && times[by_time[end]] == t {
            end += 1;
        }
        // everyone already inserted has a strictly later time
        for &i in &by_time[k..end] {
            if !events[i] {
                continue;
            }
            let r = score_rank[i];
            let below = tree.prefix(r);
            let at_or_below = tree.prefix(r + 1);
            counts.comparable += inserted;
            counts.ties += at_or_below - below;
            counts.concordant += inserted - at_or_below;
        }
        for &i in &by_time[k..end] {
            tree.add(score_rank[i]);
            inserted += 1;
        }
        k = end;
    }
    Ok(counts)
}

pub fn c_index(scores: &[f64], times: &[f64], events: &[bool]) -> Result<f64> {
    let counts = concordance_counts(scores, times, events)?;
    if counts.comparable == 0 {
        return Err(GraftError::Numeric("no comparable pairs".into()));
    }
    Ok(counts.value())
}

/// Time points for Brier-score integration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalGrid {
    pub times: Vec<f64>,
    pub rule: String,
}

impl EvalGrid {
    /// `n_points` equally spaced times from the smallest to the largest
    /// test time, keeping only those where the censoring survival is > 0.
    pub fn standard(test_times: &[f64], censoring: &CensoringKm, n_points: usize) -> Result<Self> {
        if test_times.is_empty() || n_points == 0 {
            return Err(GraftError::Config("empty evaluation grid".into()));
        }
        let lo = test_times.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = test_times.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let raw: Vec<f64> = if n_points == 1 || hi == lo {
            vec![lo]
        } else {
            (0..n_points)
                .map(|k| lo + (hi - lo) * k as f64 / (n_points - 1) as f64)
                .collect()
        };
        let times: Vec<f64> = raw.into_iter().filter(|&t| censoring.at(t) > 0.0).collect();
        if times.is_empty() {
            return Err(GraftError::Numeric(
                "censoring survival is 0 over the whole evaluation grid".into(),
            ));
        }
        Ok(Self {
            times,
            rule: format!("uniform-{n_points}-truncated-at-G>0"),
        })
    }
}

/// Kaplan-Meier estimate of the censoring distribution (event flags
/// flipped), fitted on training data.
#[derive(Debug, Clone, PartialEq)]
pub struct CensoringKm(pub KmCurve);

impl CensoringKm {
    pub fn fit(train_times: &[f64], train_events: &[bool]) -> Result<Self> {
        let flipped: Vec<bool> = train_events.iter().map(|e| !e).collect();
        Ok(CensoringKm(fit_km(train_times, &flipped)?))
    }

    pub fn at(&self, t: f64) -> f64 {
        self.0.survival_at(t)
    }

    pub fn before(&self, t: f64) -> f64 {
        self.0.survival_before(t)
    }
}

/// Brier score at time `t` with inverse-probability-of-censoring weights.
/// `survival(i, t)` is the predicted survival of test subject `i`.
pub fn brier_at<F>(survival: &F, times: &[f64], events: &[bool], censoring: &CensoringKm, t: f64) -> f64
where
    F: Fn(usize, f64) -> f64,
{
    let g_t = censoring.at(t);
    let n = times.len() as f64;
    let mut total = 0.0;
    for (i, (&ti, &ei)) in times.iter().zip(events).enumerate() {
        let s = survival(i, t);
        if ti <= t && ei {
            total += s * s / censoring.before(ti);
        } else if ti > t {
            total += (1.0 - s) * (1.0 - s) / g_t;
        }
    }
    total / n
}

/// Integrated Brier score: trapezoidal integral of the Brier score over the
/// grid divided by the grid span.
pub fn ibs<F>(survival: F, times: &[f64], events: &[bool], grid: &EvalGrid, censoring: &CensoringKm) -> Result<f64>
where
    F: Fn(usize, f64) -> f64,
{
    if times.len() != events.len() || times.is_empty() {
        return Err(GraftError::Shape("times and events must be nonempty and aligned".into()));
    }
    let pts: Vec<f64> = grid.times.iter().copied().filter(|&t| censoring.at(t) > 0.0).collect();
    if pts.is_empty() {
        return Err(GraftError::Numeric(
            "censoring survival is 0 over the whole evaluation grid".into(),
        ));
    }
    let bs: Vec<f64> = pts
        .iter()
        .map(|&t| brier_at(&survival, times, events, censoring, t))
        .collect();
    if pts.len() == 1 {
        return Ok(bs[0]);
    }
    let span = pts[pts.len() - 1] - pts[0];
    let area: f64 = pts
        .windows(2)
        .zip(bs.windows(2))
        .map(|(t, b)| 0.5 * (b[0] + b[1]) * (t[1] - t[0]))
        .sum();
    Ok(area / span)
}
