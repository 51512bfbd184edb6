//! Population-level feature gates.
//!
//! The primary mechanism is the Gaussian-relaxed stochastic gate
//! `g = clamp(eta + eps, 0, 1)`, `eps ~ N(0, sigma^2)`, whose expected
//! number of open gates has the closed form `sum Phi(eta / sigma)`.
//! Sigmoid and REINFORCE gates exist for comparison.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateVariant {
    Stg,
    Sigmoid,
    Reinforce,
    /// Gates fixed at 1.
    None,
}

impl std::str::FromStr for GateVariant {
    type Err = crate::GraftError;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "stg" => Ok(GateVariant::Stg),
            "sigmoid" => Ok(GateVariant::Sigmoid),
            "reinforce" => Ok(GateVariant::Reinforce),
            "none" => Ok(GateVariant::None),
            other => Err(crate::GraftError::Config(format!("unknown gate variant `{other}`"))),
        }
    }
}

impl GateVariant {
    pub fn name(self) -> &'static str {
        match self {
            GateVariant::Stg => "stg",
            GateVariant::Sigmoid => "sigmoid",
            GateVariant::Reinforce => "reinforce",
            GateVariant::None => "none",
        }
    }
}

/// Gate parameters. The meaning of `eta` depends on the variant: the STG
/// mean, the sigmoid logit, or the Bernoulli keep-probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub eta: Vec<f64>,
    pub sigma: f64,
    pub variant: GateVariant,
    pub lambda_l0: f64,
}

/// Keep-probabilities are held inside this band so the score function
/// stays finite.
pub const PROB_FLOOR: f64 = 1e-3;

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let z = x.exp();
        z / (1.0 + z)
    }
}

impl GateParams {
    /// Half-open starting point: STG mean 0.5, sigmoid logit 0,
    /// keep-probability 0.5.
    pub fn init(p: usize, variant: GateVariant, sigma: f64, lambda_l0: f64) -> Self {
        let start = match variant {
            GateVariant::Stg | GateVariant::Reinforce => 0.5,
            GateVariant::Sigmoid => 0.0,
            GateVariant::None => 1.0,
        };
        Self {
            eta: vec![start; p],
            sigma,
            variant,
            lambda_l0,
        }
    }

    pub fn len(&self) -> usize {
        self.eta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eta.is_empty()
    }

    /// One STG draw shared by a whole minibatch. Returns the gates and the
    /// noise needed by [`GateParams::backward`].
    pub fn sample_gates(&self, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
        let noise = Normal::new(0.0, self.sigma).expect("sigma > 0");
        let eps: Vec<f64> = self.eta.iter().map(|_| noise.sample(rng)).collect();
        (self.gates_with_noise(&eps), eps)
    }

    pub fn gates_with_noise(&self, eps: &[f64]) -> Vec<f64> {
        self.eta
            .iter()
            .zip(eps)
            .map(|(e, n)| (e + n).clamp(0.0, 1.0))
            .collect()
    }

    /// Binary REINFORCE mask, one Bernoulli per feature.
    pub fn sample_mask(&self, rng: &mut Rng) -> Vec<f64> {
        self.eta
            .iter()
            .map(|&p| if rng.random::<f64>() < p { 1.0 } else { 0.0 })
            .collect()
    }

    /// Inference-time gates.
    pub fn deterministic_gates(&self) -> Vec<f64> {
        self.eta
            .iter()
            .map(|&e| match self.variant {
                GateVariant::Stg => e.clamp(0.0, 1.0),
                GateVariant::Sigmoid => sigmoid(e),
                GateVariant::Reinforce => {
                    if e >= 0.5 { 1.0 } else { 0.0 }
                }
                GateVariant::None => 1.0,
            })
            .collect()
    }

    /// Expected-open-gate penalty and its gradient in `eta`.
    ///
    /// STG uses `lambda * sum Phi(eta / sigma)`. The other variants use the
    /// analogous expected activity: `sum sigmoid(alpha)` for sigmoid gates
    /// and `sum p` for Bernoulli gates.
    pub fn l0_penalty(&self) -> (f64, Vec<f64>) {
        let lam = self.lambda_l0;
        match self.variant {
            GateVariant::Stg => {
                let value = lam * self.eta.iter().map(|e| std_normal_cdf(e / self.sigma)).sum::<f64>();
                let grad = self
                    .eta
                    .iter()
                    .map(|e| lam * std_normal_pdf(e / self.sigma) / self.sigma)
                    .collect();
                (value, grad)
            }
            GateVariant::Sigmoid => {
                let g: Vec<f64> = self.eta.iter().map(|&a| sigmoid(a)).collect();
                let value = lam * g.iter().sum::<f64>();
                (value, g.iter().map(|s| lam * s * (1.0 - s)).collect())
            }
            GateVariant::Reinforce => (lam * self.eta.iter().sum::<f64>(), vec![lam; self.eta.len()]),
            GateVariant::None => (0.0, vec![0.0; self.eta.len()]),
        }
    }

    /// Chains `dL/dg` back to `eta` through the clamp (STG) or the
    /// logistic (sigmoid). The clamp subgradient is 0 at the boundaries.
    /// REINFORCE and fixed gates pass no pathwise gradient.
    pub fn backward(&self, eps: &[f64], dl_dg: &[f64]) -> Vec<f64> {
        match self.variant {
            GateVariant::Stg => self
                .eta
                .iter()
                .zip(eps)
                .zip(dl_dg)
                .map(|((e, n), d)| {
                    let z = e + n;
                    if z > 0.0 && z < 1.0 { *d } else { 0.0 }
                })
                .collect(),
            GateVariant::Sigmoid => self
                .eta
                .iter()
                .zip(dl_dg)
                .map(|(&a, d)| {
                    let s = sigmoid(a);
                    d * s * (1.0 - s)
                })
                .collect(),
            GateVariant::Reinforce | GateVariant::None => vec![0.0; self.eta.len()],
        }
    }

    /// Keeps Bernoulli probabilities inside `[PROB_FLOOR, 1 - PROB_FLOOR]`.
    pub fn project(&mut self) {
        if self.variant == GateVariant::Reinforce {
            for p in &mut self.eta {
                *p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            }
        }
    }
}

/// Exponential moving average of past rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBaseline {
    pub value: f64,
    pub decay: f64,
    pub initialized: bool,
}

impl RewardBaseline {
    pub fn new(decay: f64) -> Self {
        Self {
            value: 0.0,
            decay,
            initialized: false,
        }
    }

    /// The baseline starts at the first reward it sees.
    pub fn current(&self, reward: f64) -> f64 {
        if self.initialized { self.value } else { reward }
    }

    pub fn update(&mut self, reward: f64) {
        if self.initialized {
            self.value = self.decay * self.value + (1.0 - self.decay) * reward;
        } else {
            self.value = reward;
            self.initialized = true;
        }
    }
}

pub const REINFORCE_BASELINE_DECAY: f64 = 0.9;
pub const REINFORCE_ENTROPY_COEF: f64 = 0.01;

/// Ascent direction for the keep-probabilities:
/// `(reward - b) * d log Bern(mask; p) / dp + c * dH(p) / dp`.
/// The baseline is read before being updated with `reward`.
pub fn reinforce_step(
    probs: &[f64],
    sampled_mask: &[f64],
    reward: f64,
    baseline: &mut RewardBaseline,
    entropy_coef: f64,
) -> Vec<f64> {
    let advantage = reward - baseline.current(reward);
    baseline.update(reward);
    probs
        .iter()
        .zip(sampled_mask)
        .map(|(&p, &m)| {
            let score = if m > 0.5 { 1.0 / p } else { -1.0 / (1.0 - p) };
            let entropy = ((1.0 - p) / p).ln();
            advantage * score + entropy_coef * entropy
        })
        .collect()
}
