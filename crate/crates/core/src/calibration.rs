//! Turning scores into survival curves.
//!
//! [`CoxCalibrator`] fits a one-covariate proportional-hazards model on the
//! score with a Breslow baseline; [`IsotonicCalibrator`] fits an
//! independent monotone score-to-survival map at each point of a time grid.
//! Neither touches the scores themselves.

use serde::{Deserialize, Serialize};

use crate::error::{GraftError, Result};
use crate::softrank::pav_blocks;

pub const COX_BETA_BOUND: f64 = 50.0;
const COX_TOL: f64 = 1e-8;
const COX_MAX_ITER: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoxFit {
    pub beta: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Set when the estimate hit the clamp (no finite maximiser).
    pub diverged: bool,
}

struct EventGroup {
    /// index into the time-sorted order where this time starts
    start: usize,
    deaths: usize,
    death_score_sum: f64,
    death_min: f64,
    death_max: f64,
}

/// Subjects sorted by time and grouped by distinct event time.
struct RiskSets {
    order: Vec<usize>,
    groups: Vec<EventGroup>,
}

impl RiskSets {
    fn new(times: &[f64], events: &[bool], scores: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..times.len()).collect();
        order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
        let mut groups = Vec::new();
        let mut k = 0;
        while k < order.len() {
            let t = times[order[k]];
            let start = k;
            let mut deaths = 0;
            let mut death_score_sum = 0.0;
            let mut death_min = f64::INFINITY;
            let mut death_max = f64::NEG_INFINITY;
            while k < order.len() && times[order[k]] == t {
                if events[order[k]] {
                    let s = scores[order[k]];
                    deaths += 1;
                    death_score_sum += s;
                    death_min = death_min.min(s);
                    death_max = death_max.max(s);
                }
                k += 1;
            }
            if deaths > 0 {
                groups.push(EventGroup {
                    start,
                    deaths,
                    death_score_sum,
                    death_min,
                    death_max,
                });
            }
        }
        Self { order, groups }
    }

    /// Direction (+1 or -1) in which the partial likelihood increases
    /// without bound, if any: every death has the largest (or smallest)
    /// score of its risk set and at least one risk set is not flat.
    fn separation(&self, scores: &[f64]) -> Option<f64> {
        let n = self.order.len();
        let mut hi = vec![f64::NEG_INFINITY; n + 1];
        let mut lo = vec![f64::INFINITY; n + 1];
        for k in (0..n).rev() {
            let x = scores[self.order[k]];
            hi[k] = hi[k + 1].max(x);
            lo[k] = lo[k + 1].min(x);
        }
        let informative = self.groups.iter().any(|g| lo[g.start] < hi[g.start]);
        if !informative {
            return None;
        }
        if self.groups.iter().all(|g| g.death_min >= hi[g.start]) {
            Some(1.0)
        } else if self.groups.iter().all(|g| g.death_max <= lo[g.start]) {
            Some(-1.0)
        } else {
            None
        }
    }

    /// Breslow partial log-likelihood with its first two derivatives.
    fn loglik(&self, scores: &[f64], beta: f64) -> (f64, f64, f64) {
        let n = self.order.len();
        // suffix sums over the time-sorted order, each scaled by
        // exp(-shift[k]) with shift[k] the largest exponent in the suffix
        let mut s0 = vec![0.0; n + 1];
        let mut s1 = vec![0.0; n + 1];
        let mut s2 = vec![0.0; n + 1];
        let mut shift = vec![f64::NEG_INFINITY; n + 1];
        for k in (0..n).rev() {
            let x = scores[self.order[k]];
            let e = beta * x;
            let m = shift[k + 1].max(e);
            let carry = if shift[k + 1] == f64::NEG_INFINITY { 0.0 } else { (shift[k + 1] - m).exp() };
            let w = (e - m).exp();
            shift[k] = m;
            s0[k] = s0[k + 1] * carry + w;
            s1[k] = s1[k + 1] * carry + w * x;
            s2[k] = s2[k + 1] * carry + w * x * x;
        }
        let mut ll = 0.0;
        let mut grad = 0.0;
        let mut hess = 0.0;
        for g in &self.groups {
            let d = g.deaths as f64;
            let (a0, a1, a2) = (s0[g.start], s1[g.start], s2[g.start]);
            let mean = a1 / a0;
            ll += beta * g.death_score_sum - d * (a0.ln() + shift[g.start]);
            grad += g.death_score_sum - d * mean;
            hess -= d * (a2 / a0 - mean * mean);
        }
        (ll, grad, hess)
    }
}

/// Newton-Raphson on the one-covariate partial likelihood (Breslow ties),
/// with step halving. Stops when the score equation is below 1e-8 or after
/// 100 iterations; estimates are clamped to [-50, 50].
pub fn fit_cox_1d(scores: &[f64], times: &[f64], events: &[bool]) -> Result<CoxFit> {
    let n = scores.len();
    if times.len() != n || events.len() != n {
        return Err(GraftError::Shape("scores, times and events must align".into()));
    }
    if !events.iter().any(|&e| e) {
        return Err(GraftError::Numeric("Cox fit needs at least one event".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(GraftError::Numeric("non-finite score".into()));
    }
    // centring leaves the partial likelihood unchanged
    let mean = scores.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = scores.iter().map(|s| s - mean).collect();
    let risk = RiskSets::new(times, events, &centered);
    if let Some(dir) = risk.separation(&centered) {
        return Ok(CoxFit {
            beta: dir * COX_BETA_BOUND,
            iterations: 0,
            converged: false,
            diverged: true,
        });
    }

    let mut beta = 0.0;
    let (mut ll, mut grad, mut hess) = risk.loglik(&centered, beta);
    for it in 0..COX_MAX_ITER {
        if grad.abs() < COX_TOL {
            return Ok(CoxFit {
                beta,
                iterations: it,
                converged: true,
                diverged: false,
            });
        }
        let step = if hess < -1e-300 { -grad / hess } else { grad.signum() * 1.0 };
        let mut next = (beta + step).clamp(-COX_BETA_BOUND, COX_BETA_BOUND);
        let mut eval = risk.loglik(&centered, next);
        let mut halvings = 0;
        let floor = ll - 1e-12 * ll.abs().max(1.0);
        while !(eval.0 >= floor && eval.1.is_finite()) && halvings < 60 {
            next = 0.5 * (beta + next);
            eval = risk.loglik(&centered, next);
            halvings += 1;
        }
        if next.abs() >= COX_BETA_BOUND && eval.1.signum() == next.signum() {
            return Ok(CoxFit {
                beta: next,
                iterations: it + 1,
                converged: false,
                diverged: true,
            });
        }
        if next == beta {
            break;
        }
        beta = next;
        (ll, grad, hess) = eval;
    }
    Ok(CoxFit {
        beta,
        iterations: COX_MAX_ITER,
        converged: grad.abs() < COX_TOL,
        diverged: false,
    })
}

/// Breslow cumulative baseline hazard at each distinct event time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreslowCurve {
    pub times: Vec<f64>,
    pub cumhaz: Vec<f64>,
}

pub fn breslow_baseline(scores: &[f64], times: &[f64], events: &[bool], beta: f64) -> BreslowCurve {
    let risk = RiskSets::new(times, events, scores);
    let n = risk.order.len();
    let mut s0 = vec![0.0; n + 1];
    for k in (0..n).rev() {
        s0[k] = s0[k + 1] + (beta * scores[risk.order[k]]).exp();
    }
    let mut acc = 0.0;
    let mut out_t = Vec::with_capacity(risk.groups.len());
    let mut out_h = Vec::with_capacity(risk.groups.len());
    for g in &risk.groups {
        acc += g.deaths as f64 / s0[g.start];
        out_t.push(times[risk.order[g.start]]);
        out_h.push(acc);
    }
    BreslowCurve {
        times: out_t,
        cumhaz: out_h,
    }
}

impl BreslowCurve {
    /// 0 before the first event time, linear between event times, flat
    /// after the last one.
    pub fn at(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&x| x <= t);
        if k == 0 {
            return 0.0;
        }
        if k == self.times.len() {
            return self.cumhaz[k - 1];
        }
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        let (h0, h1) = (self.cumhaz[k - 1], self.cumhaz[k]);
        h0 + (h1 - h0) * (t - t0) / (t1 - t0)
    }

    /// Right-continuous step value, without interpolation.
    pub fn step_at(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&x| x <= t);
        if k == 0 { 0.0 } else { self.cumhaz[k - 1] }
    }
}

/// `S(t | s) = exp(-Lambda0(t) * exp(beta * z))` with
/// `z = (s - center) / scale` the training-standardized score.
///
/// The standardization is an affine reparameterization of the same model.
/// It keeps the coefficient clamp meaningful when scores live on a narrow
/// range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxCalibrator {
    /// Fit on the standardized scores.
    pub fit: CoxFit,
    pub center: f64,
    pub scale: f64,
    pub breslow: BreslowCurve,
}

impl CoxCalibrator {
    pub fn fit(scores: &[f64], times: &[f64], events: &[bool]) -> Result<Self> {
        if scores.is_empty() {
            return Err(GraftError::Config("Cox calibration on empty data".into()));
        }
        let n = scores.len() as f64;
        let center = scores.iter().sum::<f64>() / n;
        let sd = (scores.iter().map(|s| (s - center) * (s - center)).sum::<f64>() / n).sqrt();
        let scale = if sd > 0.0 && sd.is_finite() { sd } else { 1.0 };
        let z: Vec<f64> = scores.iter().map(|s| (s - center) / scale).collect();
        let fit = fit_cox_1d(&z, times, events)?;
        let breslow = breslow_baseline(&z, times, events, fit.beta);
        Ok(Self {
            fit,
            center,
            scale,
            breslow,
        })
    }

    /// Coefficient on the raw score scale.
    pub fn beta(&self) -> f64 {
        self.fit.beta / self.scale
    }

    pub fn survival(&self, score: f64, t: f64) -> f64 {
        let risk = (self.fit.beta * (score - self.center) / self.scale).exp();
        (-self.breslow.at(t.max(0.0)) * risk).exp().clamp(0.0, 1.0)
    }
}

/// Monotone non-decreasing map from score to probability, linear between
/// knots and flat outside them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotoneMap {
    pub knots: Vec<f64>,
    pub values: Vec<f64>,
}

impl MonotoneMap {
    pub fn constant(v: f64) -> Self {
        Self {
            knots: vec![0.0],
            values: vec![v],
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let k = self.knots.partition_point(|&q| q <= x);
        if k == 0 {
            return self.values[0];
        }
        if k == self.knots.len() {
            return self.values[k - 1];
        }
        let (x0, x1) = (self.knots[k - 1], self.knots[k]);
        let (y0, y1) = (self.values[k - 1], self.values[k]);
        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    }

    pub fn is_monotone(&self) -> bool {
        self.values.windows(2).all(|w| w[0] <= w[1])
    }
}

/// Non-decreasing least-squares fit of `ys` on `xs` (ties in `xs` pooled
/// first), returned as a [`MonotoneMap`].
pub fn fit_monotone_map(xs: &[f64], ys: &[f64]) -> MonotoneMap {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    // pool equal x values: (x, sum y, count)
    let mut groups: Vec<(f64, f64, usize)> = Vec::new();
    for &i in &order {
        match groups.last_mut() {
            Some(g) if g.0 == xs[i] => {
                g.1 += ys[i];
                g.2 += 1;
            }
            _ => groups.push((xs[i], ys[i], 1)),
        }
    }
    // weighted PAV, non-decreasing: run the non-increasing solver on the
    // reversed sequence after expanding weights
    let expanded: Vec<f64> = groups
        .iter()
        .rev()
        .flat_map(|&(_, s, c)| std::iter::repeat_n(s / c as f64, c))
        .collect();
    let fit = pav_blocks(&expanded).fitted;
    let mut values = Vec::with_capacity(groups.len());
    let mut pos = expanded.len();
    for &(_, _, c) in &groups {
        pos -= c;
        values.push(fit[pos]);
    }
    MonotoneMap {
        knots: groups.iter().map(|g| g.0).collect(),
        values,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsotonicCalibrator {
    pub grid: Vec<f64>,
    pub maps: Vec<MonotoneMap>,
    /// Grid points that had fewer than two usable subjects and reuse the
    /// previous point's map.
    pub degenerate: Vec<bool>,
}

/// `K` equally spaced points spanning `[lo, hi]`.
pub fn uniform_grid(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    if k <= 1 || hi <= lo {
        return vec![lo];
    }
    (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect()
}

impl IsotonicCalibrator {
    /// Grid of `k` points spanning the range of `times`.
    pub fn fit(scores: &[f64], times: &[f64], events: &[bool], k: usize) -> Result<Self> {
        if times.is_empty() {
            return Err(GraftError::Config("isotonic calibration on empty data".into()));
        }
        let lo = times.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = times.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Self::fit_on_grid(scores, times, events, uniform_grid(lo, hi, k))
    }

    /// At each grid time `t_k`, subjects with `t_i > t_k` are labelled 1,
    /// subjects with an event at or before `t_k` are labelled 0, and
    /// subjects censored at or before `t_k` are left out.
    pub fn fit_on_grid(scores: &[f64], times: &[f64], events: &[bool], grid: Vec<f64>) -> Result<Self> {
        if scores.len() != times.len() || times.len() != events.len() {
            return Err(GraftError::Shape("scores, times and events must align".into()));
        }
        if grid.is_empty() {
            return Err(GraftError::Config("empty calibration grid".into()));
        }
        let mut maps: Vec<MonotoneMap> = Vec::with_capacity(grid.len());
        let mut degenerate = Vec::with_capacity(grid.len());
        for &tk in &grid {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for i in 0..times.len() {
                if times[i] > tk {
                    xs.push(scores[i]);
                    ys.push(1.0);
                } else if events[i] {
                    xs.push(scores[i]);
                    ys.push(0.0);
                }
            }
            if xs.len() < 2 {
                let prev = maps.last().cloned().unwrap_or_else(|| MonotoneMap::constant(1.0));
                maps.push(prev);
                degenerate.push(true);
            } else {
                maps.push(fit_monotone_map(&xs, &ys));
                degenerate.push(false);
            }
        }
        Ok(Self {
            grid,
            maps,
            degenerate,
        })
    }

    pub fn survival(&self, score: f64, t: f64) -> f64 {
        let k = self.grid.len();
        if k == 1 {
            return self.maps[0].eval(score).clamp(0.0, 1.0);
        }
        let t = t.clamp(self.grid[0], self.grid[k - 1]);
        let j = self.grid.partition_point(|&g| g <= t).clamp(1, k - 1);
        let (t0, t1) = (self.grid[j - 1], self.grid[j]);
        let (v0, v1) = (self.maps[j - 1].eval(score), self.maps[j].eval(score));
        let w = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
        (v0 + (v1 - v0) * w).clamp(0.0, 1.0)
    }

    /// Number of adjacent grid pairs where some training score's survival
    /// goes up over time. Reported, not repaired.
    pub fn time_crossings(&self, scores: &[f64]) -> usize {
        (1..self.grid.len())
            .filter(|&k| {
                scores
                    .iter()
                    .any(|&s| self.maps[k].eval(s) > self.maps[k - 1].eval(s) + 1e-12)
            })
            .count()
    }
}

/// Either calibration route, as stored in a model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Calibration {
    Cox(CoxCalibrator),
    Isotonic(IsotonicCalibrator),
}

impl Calibration {
    pub fn survival(&self, score: f64, t: f64) -> f64 {
        match self {
            Calibration::Cox(c) => c.survival(score, t),
            Calibration::Isotonic(c) => c.survival(score, t),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationKind {
    Cox,
    Isotonic,
}

impl std::str::FromStr for CalibrationKind {
    type Err = GraftError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cox" => Ok(CalibrationKind::Cox),
            "isotonic" => Ok(CalibrationKind::Isotonic),
            other => Err(GraftError::Config(format!("unknown calibration `{other}`"))),
        }
    }
}
