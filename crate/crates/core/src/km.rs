//! Product-limit survival curves, conditioning on survival past a time, and
//! inverse-transform sampling from the conditional event-time law.

use serde::{Deserialize, Serialize};

use crate::error::{GraftError, Result};

/// Right-continuous step function: `surv_probs[k]` holds on
/// `[event_times[k], event_times[k + 1])`, and `S(t) = 1` before the first
/// event time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    pub event_times: Vec<f64>,
    pub surv_probs: Vec<f64>,
    pub n_at_start: usize,
}

/// Fits the Kaplan-Meier estimator. At tied times, events are removed from
/// the risk set before censorings.
pub fn fit_km(times: &[f64], events: &[bool]) -> Result<KmCurve> {
    if times.is_empty() {
        return Err(GraftError::Config("Kaplan-Meier fit on empty input".into()));
    }
    if times.len() != events.len() {
        return Err(GraftError::Shape(format!(
            "{} times but {} event flags",
            times.len(),
            events.len()
        )));
    }
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));

    let mut at_risk = times.len();
    let mut surv = 1.0;
    let mut event_times = Vec::new();
    let mut surv_probs = Vec::new();
    let mut k = 0;
    while k < order.len() {
        let t = times[order[k]];
        let mut deaths = 0usize;
        let mut leaving = 0usize;
        while k < order.len() && times[order[k]] == t {
            if events[order[k]] {
                deaths += 1;
            }
            leaving += 1;
            k += 1;
        }
        if deaths > 0 {
            surv *= 1.0 - deaths as f64 / at_risk as f64;
            event_times.push(t);
            surv_probs.push(surv);
        }
        at_risk -= leaving;
    }
    Ok(KmCurve {
        event_times,
        surv_probs,
        n_at_start: times.len(),
    })
}

impl KmCurve {
    /// `S(t)`, right-continuous.
    pub fn survival_at(&self, t: f64) -> f64 {
        let k = self.event_times.partition_point(|&e| e <= t);
        if k == 0 { 1.0 } else { self.surv_probs[k - 1] }
    }

    /// Left limit `S(t⁻)`.
    pub fn survival_before(&self, t: f64) -> f64 {
        let k = self.event_times.partition_point(|&e| e < t);
        if k == 0 { 1.0 } else { self.surv_probs[k - 1] }
    }

    pub fn last_event_time(&self) -> Option<f64> {
        self.event_times.last().copied()
    }

    /// Conditional CDF of the event time given survival past `t_c`:
    /// `F(t) = 1 - S(t) / S(t_c)` for event times `t > t_c`.
    pub fn condition_beyond(&self, t_c: f64) -> ConditionalCdf {
        let s_c = self.survival_at(t_c);
        let start = self.event_times.partition_point(|&e| e <= t_c);
        if s_c <= 0.0 || start == self.event_times.len() {
            return ConditionalCdf {
                truncation_time: t_c,
                support: Vec::new(),
                cdf_vals: Vec::new(),
                total_mass: 0.0,
                degenerate: true,
            };
        }
        let support = self.event_times[start..].to_vec();
        let cdf_vals: Vec<f64> = self.surv_probs[start..]
            .iter()
            .map(|s| (1.0 - s / s_c).clamp(0.0, 1.0))
            .collect();
        let total_mass = *cdf_vals.last().expect("nonempty support");
        ConditionalCdf {
            truncation_time: t_c,
            support,
            cdf_vals,
            total_mass,
            degenerate: total_mass <= 0.0,
        }
    }
}

/// Discrete law of the event time beyond a truncation time. When the curve
/// does not reach zero, `total_mass < 1` and the remainder sits past the
/// last observed event time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalCdf {
    pub truncation_time: f64,
    pub support: Vec<f64>,
    pub cdf_vals: Vec<f64>,
    pub total_mass: f64,
    pub degenerate: bool,
}

impl ConditionalCdf {
    /// Inverse transform: the smallest support time whose CDF reaches
    /// `u * total_mass`. The uniform is rescaled onto the observed mass, so
    /// draws never go past the last support time.
    pub fn sample_time(&self, u: f64) -> Result<f64> {
        if self.degenerate {
            return Err(GraftError::Numeric(format!(
                "no event mass beyond t = {}",
                self.truncation_time
            )));
        }
        let target = u.clamp(0.0, 1.0) * self.total_mass;
        let k = self.cdf_vals.partition_point(|&c| c < target);
        Ok(self.support[k.min(self.support.len() - 1)])
    }

    /// Probability of each support atom.
    pub fn atom_masses(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.cdf_vals
            .iter()
            .map(|&c| {
                let m = c - prev;
                prev = c;
                m
            })
            .collect()
    }

    /// Mean of the sampled time under the rescaled law.
    pub fn mean_time(&self) -> Option<f64> {
        if self.degenerate {
            return None;
        }
        let m: f64 = self
            .atom_masses()
            .iter()
            .zip(&self.support)
            .map(|(p, t)| p * t)
            .sum();
        Some(m / self.total_mass)
    }
}
