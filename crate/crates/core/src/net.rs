//! Gated residual scorer.
//!
//! ```text
//! x~  = g ⊙ x
//! h   = tanh(W1 x~ + b1)           (inverted dropout on h when training)
//! phi = x~ + W2 h + b2
//! s   = beta·phi + mu
//! ```
//!
//! The `NoMlp` architecture drops the residual branch so `phi = x~`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{GraftError, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchVariant {
    Full,
    NoMlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraftParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub beta: Array1<f64>,
    pub mu: f64,
    pub dropout_rate: f64,
    pub arch: ArchVariant,
}

/// Intermediates kept by [`GraftParams::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    x: Array2<f64>,
    gated: Array2<f64>,
    /// tanh pre-dropout
    act: Array2<f64>,
    /// per-unit multiplier applied to `act` (0 or 1/(1-rate)); None = no dropout
    drop_scale: Option<Array2<f64>>,
    phi: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraftGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub beta: Array1<f64>,
    pub mu: f64,
    pub gates: Array1<f64>,
}

impl GraftParams {
    /// W1 and W2 ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases and beta 0;
    /// mu set to `mu_init`.
    pub fn init(p: usize, hidden: usize, dropout_rate: f64, arch: ArchVariant, mu_init: f64, rng: &mut Rng) -> Self {
        let mut uniform = |rows: usize, cols: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
        };
        let (w1, w2) = match arch {
            ArchVariant::Full => (uniform(hidden, p, p), uniform(p, hidden, hidden)),
            ArchVariant::NoMlp => (Array2::zeros((0, p)), Array2::zeros((p, 0))),
        };
        let hidden = w1.nrows();
        Self {
            w1,
            b1: Array1::zeros(hidden),
            w2,
            b2: Array1::zeros(p),
            beta: Array1::zeros(p),
            mu: mu_init,
            dropout_rate,
            arch,
        }
    }

    pub fn n_features(&self) -> usize {
        self.beta.len()
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    /// Inverted-dropout multipliers for an `m`-row batch. Empty for the
    /// linear architecture or when the rate is 0.
    pub fn sample_dropout(&self, m: usize, rng: &mut Rng) -> Option<Array2<f64>> {
        if self.arch == ArchVariant::NoMlp || self.dropout_rate <= 0.0 {
            return None;
        }
        let keep = 1.0 - self.dropout_rate;
        let scale = 1.0 / keep;
        Some(Array2::from_shape_simple_fn((m, self.hidden()), || {
            if rng.random::<f64>() < keep { scale } else { 0.0 }
        }))
    }

    fn check(&self, x: ArrayView2<f64>, gates: &[f64]) -> Result<()> {
        let p = self.n_features();
        if x.ncols() != p || gates.len() != p {
            return Err(GraftError::Shape(format!(
                "model has {p} features, got {} columns and {} gates",
                x.ncols(),
                gates.len()
            )));
        }
        self.check_shapes()
    }

    /// Checks that the MLP parameters agree with `beta` and each other.
    pub fn check_shapes(&self) -> Result<()> {
        let p = self.n_features();
        let ok = match self.arch {
            ArchVariant::Full => {
                self.w1.dim() == (self.hidden(), p)
                    && self.w2.dim() == (p, self.hidden())
                    && self.b1.len() == self.hidden()
                    && self.b2.len() == p
            }
            ArchVariant::NoMlp => self.w1.nrows() == 0 && self.w2.ncols() == 0 && self.b1.is_empty(),
        };
        if !ok {
            return Err(GraftError::Shape("inconsistent MLP parameter shapes".into()));
        }
        Ok(())
    }

    /// Scores for each row of `x` under the gate vector `gates` (shared by
    /// all rows). `drop_scale`, when given, multiplies the hidden
    /// activations elementwise.
    pub fn forward(
        &self,
        x: ArrayView2<f64>,
        gates: &[f64],
        drop_scale: Option<&Array2<f64>>,
    ) -> Result<(Array1<f64>, ForwardCache)> {
        self.check(x, gates)?;
        let g = Array1::from(gates.to_vec());
        let gated = &x * &g;
        let (act, phi) = match self.arch {
            ArchVariant::Full => {
                let act = (gated.dot(&self.w1.t()) + &self.b1).mapv(f64::tanh);
                let hidden = match drop_scale {
                    Some(d) => {
                        if d.dim() != act.dim() {
                            return Err(GraftError::Shape("dropout mask shape".into()));
                        }
                        &act * d
                    }
                    None => act.clone(),
                };
                let phi = &gated + &hidden.dot(&self.w2.t()) + &self.b2;
                (act, phi)
            }
            ArchVariant::NoMlp => (Array2::zeros((x.nrows(), 0)), gated.clone()),
        };
        let scores = phi.dot(&self.beta) + self.mu;
        Ok((
            scores,
            ForwardCache {
                x: x.to_owned(),
                gated,
                act,
                drop_scale: drop_scale.cloned(),
                phi,
            },
        ))
    }

    /// Reverse pass: gradients of `sum_i dl_ds[i] * s_i` with respect to
    /// every parameter and to the shared gate vector.
    pub fn backward(&self, cache: &ForwardCache, dl_ds: &Array1<f64>) -> GraftGrads {
        let p = self.n_features();
        let grad_beta = cache.phi.t().dot(dl_ds);
        let grad_mu = dl_ds.sum();
        // dphi[i, :] = dl_ds[i] * beta
        let dphi = dl_ds
            .view()
            .insert_axis(Axis(1))
            .dot(&self.beta.view().insert_axis(Axis(0)));

        let (w1, b1, w2, b2, dgated) = match self.arch {
            ArchVariant::Full => {
                let hidden = match &cache.drop_scale {
                    Some(d) => &cache.act * d,
                    None => cache.act.clone(),
                };
                let grad_w2 = dphi.t().dot(&hidden);
                let grad_b2 = dphi.sum_axis(Axis(0));
                let mut da = dphi.dot(&self.w2);
                if let Some(d) = &cache.drop_scale {
                    da *= d;
                }
                da.zip_mut_with(&cache.act, |v, a| *v *= 1.0 - a * a);
                let grad_w1 = da.t().dot(&cache.gated);
                let grad_b1 = da.sum_axis(Axis(0));
                let dgated = &dphi + &da.dot(&self.w1);
                (grad_w1, grad_b1, grad_w2, grad_b2, dgated)
            }
            ArchVariant::NoMlp => (
                Array2::zeros(self.w1.dim()),
                Array1::zeros(self.b1.len()),
                Array2::zeros(self.w2.dim()),
                Array1::zeros(p),
                dphi,
            ),
        };
        let gates = (&dgated * &cache.x).sum_axis(Axis(0));
        GraftGrads {
            w1,
            b1,
            w2,
            b2,
            beta: grad_beta,
            mu: grad_mu,
            gates,
        }
    }

    /// Number of trainable scalars (the MLP block is absent for `NoMlp`).
    pub fn n_trainable(&self) -> usize {
        let lin = self.beta.len() + 1;
        match self.arch {
            ArchVariant::Full => lin + self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len(),
            ArchVariant::NoMlp => lin,
        }
    }

    /// Trainable scalars in a fixed order: beta, mu, then W1, b1, W2, b2.
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend(self.beta.iter());
        out.push(self.mu);
        if self.arch == ArchVariant::Full {
            out.extend(self.w1.iter());
            out.extend(self.b1.iter());
            out.extend(self.w2.iter());
            out.extend(self.b2.iter());
        }
    }

    /// Inverse of [`GraftParams::flatten_into`]; returns the number of
    /// values consumed.
    pub fn unflatten_from(&mut self, src: &[f64]) -> usize {
        let mut k = 0;
        let mut take = |dst: &mut dyn Iterator<Item = &mut f64>| {
            for v in dst {
                *v = src[k];
                k += 1;
            }
        };
        take(&mut self.beta.iter_mut());
        take(&mut std::iter::once(&mut self.mu));
        if self.arch == ArchVariant::Full {
            take(&mut self.w1.iter_mut());
            take(&mut self.b1.iter_mut());
            take(&mut self.w2.iter_mut());
            take(&mut self.b2.iter_mut());
        }
        k
    }
}

impl GraftGrads {
    /// Same layout as [`GraftParams::flatten_into`].
    pub fn flatten_into(&self, arch: ArchVariant, out: &mut Vec<f64>) {
        out.extend(self.beta.iter());
        out.push(self.mu);
        if arch == ArchVariant::Full {
            out.extend(self.w1.iter());
            out.extend(self.b1.iter());
            out.extend(self.w2.iter());
            out.extend(self.b2.iter());
        }
    }
}
