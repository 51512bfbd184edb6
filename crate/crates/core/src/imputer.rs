//! Fixed per-subject imputation laws built from local Kaplan-Meier fits.
//!
//! Each censored subject gets a neighbourhood in standardized feature space
//! (the smallest Euclidean ball around it holding at least `k_events`
//! observed events), a KM curve fitted on everyone inside the ball, and
//! that curve conditioned on survival past the subject's own censoring
//! time. The table is built once and never changes during training.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SurvivalDataset;
use crate::error::{GraftError, Result};
use crate::km::{fit_km, ConditionalCdf};
use crate::rng::Rng;

pub const DEFAULT_K_EVENTS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighborhood {
    /// Neighbour indices, nearest first (the subject itself excluded).
    pub indices: Vec<usize>,
    pub radius: f64,
    pub n_events: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ImputationEntry {
    /// Event observed: the target is always `log t`.
    Observed { log_time: f64 },
    /// Censored with event mass beyond the censoring time.
    Sampled {
        neighborhood: Neighborhood,
        cdf: ConditionalCdf,
    },
    /// Censored after the neighbourhood's last event: the censoring time is
    /// used as the event time.
    Fallback {
        neighborhood: Neighborhood,
        log_time: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationTable {
    pub entries: Vec<ImputationEntry>,
    pub k_events: usize,
    pub metric: String,
}

impl ImputationTable {
    /// Builds the table over every subject of `train`, whose features must
    /// already be standardized.
    pub fn build(train: &SurvivalDataset, k_events: usize) -> Result<Self> {
        let n_events = train.n_events();
        if k_events == 0 {
            return Err(GraftError::Config("k_events must be >= 1".into()));
        }
        if n_events < k_events {
            return Err(GraftError::Config(format!(
                "training data has {n_events} events, neighbourhoods need {k_events}"
            )));
        }
        let entries = (0..train.len())
            .into_par_iter()
            .map(|i| {
                if train.events[i] {
                    return ImputationEntry::Observed {
                        log_time: train.times[i].ln(),
                    };
                }
                let neighborhood = neighborhood_of(train, i, k_events);
                let times: Vec<f64> = neighborhood.indices.iter().map(|&j| train.times[j]).collect();
                let events: Vec<bool> = neighborhood.indices.iter().map(|&j| train.events[j]).collect();
                let km = fit_km(&times, &events).expect("neighbourhood is nonempty");
                let cdf = km.condition_beyond(train.times[i]);
                if cdf.degenerate {
                    ImputationEntry::Fallback {
                        neighborhood,
                        log_time: train.times[i].ln(),
                    }
                } else {
                    ImputationEntry::Sampled { neighborhood, cdf }
                }
            })
            .collect();
        Ok(Self {
            entries,
            k_events,
            metric: "euclidean".into(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Log-time targets for `batch`. Censored subjects with a usable law get
    /// a fresh inverse-transform draw; one uniform is consumed per such
    /// subject, in batch order.
    pub fn draw_targets(&self, batch: &[usize], rng: &mut Rng) -> Vec<f64> {
        batch
            .iter()
            .map(|&i| match &self.entries[i] {
                ImputationEntry::Observed { log_time } | ImputationEntry::Fallback { log_time, .. } => {
                    *log_time
                }
                ImputationEntry::Sampled { cdf, .. } => {
                    let u: f64 = rng.random();
                    cdf.sample_time(u).expect("non-degenerate law").ln()
                }
            })
            .collect()
    }

    pub fn n_fallback(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| matches!(e, ImputationEntry::Fallback { .. }))
            .count()
    }
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Smallest ball around subject `i` containing `k_events` observed events.
/// Everyone at distance <= radius is included, censored subjects too.
pub fn neighborhood_of(ds: &SurvivalDataset, i: usize, k_events: usize) -> Neighborhood {
    let xi = ds.features.row(i);
    let mut cand: Vec<(f64, usize)> = (0..ds.len())
        .filter(|&j| j != i)
        .map(|j| (sq_dist(xi, ds.features.row(j)), j))
        .collect();
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut seen_events = 0;
    let mut cut = cand.len();
    for (pos, &(_, j)) in cand.iter().enumerate() {
        if ds.events[j] {
            seen_events += 1;
            if seen_events == k_events {
                cut = pos + 1;
                break;
            }
        }
    }
    // ties at the boundary distance are inside the ball
    let radius_sq = cand.get(cut.saturating_sub(1)).map_or(0.0, |c| c.0);
    while cut < cand.len() && cand[cut].0 == radius_sq {
        cut += 1;
    }
    let indices: Vec<usize> = cand[..cut].iter().map(|c| c.1).collect();
    let n_events = indices.iter().filter(|&&j| ds.events[j]).count();
    Neighborhood {
        indices,
        radius: radius_sq.sqrt(),
        n_events,
    }
}
