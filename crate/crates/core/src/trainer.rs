//! End-to-end optimisation of the gates, the residual MLP and the linear
//! head against the Monte-Carlo averaged soft-Spearman loss.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{stratified_assignment, ScalerParams, SurvivalDataset};
use crate::error::{GraftError, Result};
use crate::gates::{
    reinforce_step, GateParams, GateVariant, RewardBaseline, REINFORCE_BASELINE_DECAY, REINFORCE_ENTROPY_COEF,
};
use crate::imputer::{ImputationTable, DEFAULT_K_EVENTS};
use crate::net::{ArchVariant, GraftParams};
use crate::rng::{self, Rng};
use crate::softrank::{spearman_loss, SoftRankConfig};

/// Which parts of the model are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    /// Gates, residual MLP and linear head.
    Full,
    /// Residual MLP and linear head; all features pass with gate 1.
    NoStg,
    /// Linear head on the raw features only.
    LinearOnly,
}

impl ModelVariant {
    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Full => "full",
            ModelVariant::NoStg => "no_stg",
            ModelVariant::LinearOnly => "linear_only",
        }
    }
}

impl std::str::FromStr for ModelVariant {
    type Err = GraftError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(ModelVariant::Full),
            "no_stg" | "no-stg" => Ok(ModelVariant::NoStg),
            "linear_only" | "linear-only" => Ok(ModelVariant::LinearOnly),
            other => Err(GraftError::Config(format!("unknown model variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub alpha_l2: f64,
    pub lambda_l0: f64,
    pub batch_size: usize,
    pub mc_samples: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub tau: f64,
    pub sigma: f64,
    pub hidden: usize,
    pub dropout: f64,
    pub k_events: usize,
    pub seed: u64,
    pub variant: ModelVariant,
    pub gate_variant: GateVariant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            alpha_l2: 1e-4,
            lambda_l0: 0.01,
            batch_size: 64,
            mc_samples: 5,
            max_epochs: 1000,
            patience: 10,
            tau: 0.1,
            sigma: 0.5,
            hidden: 32,
            dropout: 0.2,
            k_events: DEFAULT_K_EVENTS,
            seed: 0,
            variant: ModelVariant::Full,
            gate_variant: GateVariant::Stg,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GraftError::Config(m.to_string()));
        if !(self.lr > 0.0) {
            return bad("lr must be > 0");
        }
        if !(self.alpha_l2 >= 0.0) || !(self.lambda_l0 >= 0.0) {
            return bad("regularisation weights must be >= 0");
        }
        if self.batch_size < 3 {
            return bad("batch_size must be >= 3");
        }
        if self.mc_samples == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("mc_samples, max_epochs and patience must be >= 1");
        }
        if self.patience > self.max_epochs {
            return bad("patience must not exceed max_epochs");
        }
        if !(self.tau > 0.0) || !(self.sigma > 0.0) {
            return bad("tau and sigma must be > 0");
        }
        if self.hidden == 0 {
            return bad("hidden must be >= 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.k_events == 0 {
            return bad("k_events must be >= 1");
        }
        if self.gate_variant == GateVariant::None && self.variant == ModelVariant::Full {
            return bad("full variant needs a gate mechanism; use variant no_stg for ungated training");
        }
        Ok(())
    }

    /// Gate mechanism actually used by this variant.
    pub fn effective_gates(&self) -> GateVariant {
        match self.variant {
            ModelVariant::Full => self.gate_variant,
            ModelVariant::NoStg | ModelVariant::LinearOnly => GateVariant::None,
        }
    }

    pub fn arch(&self) -> ArchVariant {
        match self.variant {
            ModelVariant::LinearOnly => ArchVariant::NoMlp,
            ModelVariant::Full | ModelVariant::NoStg => ArchVariant::Full,
        }
    }

    pub fn soft_rank(&self) -> SoftRankConfig {
        SoftRankConfig {
            tau: self.tau,
            ..SoftRankConfig::default()
        }
    }
}

/// Bias-corrected Adam over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(GraftError::Shape(format!(
                "Adam state for {} parameters, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Gate values used for one forward pass, with the STG noise that produced
/// them (zeros for deterministic gates).
#[derive(Debug, Clone, PartialEq)]
pub struct GateDraw {
    pub gates: Vec<f64>,
    pub eps: Vec<f64>,
}

impl GateDraw {
    pub fn deterministic(gp: &GateParams) -> Self {
        Self {
            gates: gp.deterministic_gates(),
            eps: vec![0.0; gp.len()],
        }
    }

    /// Training-time draw: STG noise, a Bernoulli mask for REINFORCE, and
    /// the deterministic value otherwise.
    pub fn sample(gp: &GateParams, rng: &mut Rng) -> Self {
        match gp.variant {
            GateVariant::Stg => {
                let (gates, eps) = gp.sample_gates(rng);
                Self { gates, eps }
            }
            GateVariant::Reinforce => Self {
                gates: gp.sample_mask(rng),
                eps: vec![0.0; gp.len()],
            },
            GateVariant::Sigmoid | GateVariant::None => Self::deterministic(gp),
        }
    }
}

/// The trainable state: network plus gate parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub params: GraftParams,
    pub gates: GateParams,
}

impl ModelState {
    fn gates_trainable(&self) -> bool {
        self.gates.variant != GateVariant::None
    }

    /// Network scalars followed by the gate parameters (if trainable).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_trainable());
        self.params.flatten_into(&mut out);
        if self.gates_trainable() {
            out.extend(&self.gates.eta);
        }
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) {
        let k = self.params.unflatten_from(flat);
        if self.gates_trainable() {
            let p = self.gates.len();
            self.gates.eta.copy_from_slice(&flat[k..k + p]);
        }
    }

    pub fn n_trainable(&self) -> usize {
        self.params.n_trainable() + if self.gates_trainable() { self.gates.len() } else { 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub loss: f64,
    pub rank_loss: f64,
    pub gate_penalty: f64,
    pub l2_penalty: f64,
    /// Gradient in the layout of [`ModelState::flatten`].
    pub grads: Vec<f64>,
}

/// Total objective for one minibatch:
/// `mean_k spearman(s, y_k) + gate penalty + alpha * |Psi|^2`, where the
/// scores come from one forward pass with the given gates and dropout.
pub fn total_loss(
    state: &ModelState,
    x: ArrayView2<f64>,
    draw: &GateDraw,
    dropout: Option<&Array2<f64>>,
    targets: &[Vec<f64>],
    cfg: &TrainConfig,
) -> Result<LossEval> {
    if targets.is_empty() {
        return Err(GraftError::Config("total_loss needs at least one target draw".into()));
    }
    let (scores, cache) = state.params.forward(x, &draw.gates, dropout)?;
    let s = scores.to_vec();
    let sr = cfg.soft_rank();
    let mut rank_loss = 0.0;
    let mut dl_ds = vec![0.0; s.len()];
    let mf = targets.len() as f64;
    for y in targets {
        let (l, g) = spearman_loss(&s, y, &sr)?;
        rank_loss += l / mf;
        for (d, gi) in dl_ds.iter_mut().zip(g) {
            *d += gi / mf;
        }
    }
    let net_grads = state.params.backward(&cache, &Array1::from(dl_ds));

    let mut grads = Vec::with_capacity(state.n_trainable());
    net_grads.flatten_into(state.params.arch, &mut grads);
    let mut gate_penalty = 0.0;
    if state.gates_trainable() {
        let pathwise = state.gates.backward(&draw.eps, net_grads.gates.as_slice().expect("contiguous"));
        let (pen, pen_grad) = state.gates.l0_penalty();
        gate_penalty = pen;
        grads.extend(pathwise.iter().zip(&pen_grad).map(|(a, b)| a + b));
    }
    let flat = state.flatten();
    let l2_penalty = cfg.alpha_l2 * flat.iter().map(|v| v * v).sum::<f64>();
    for (g, v) in grads.iter_mut().zip(&flat) {
        *g += 2.0 * cfg.alpha_l2 * v;
    }
    Ok(LossEval {
        loss: rank_loss + gate_penalty + l2_penalty,
        rank_loss,
        gate_penalty,
        l2_penalty,
        grads,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Validation loss of the initial parameters.
    pub initial_val_loss: f64,
    pub val_history: Vec<f64>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_fallback_imputations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub state: ModelState,
    pub scaler: ScalerParams,
    pub feature_names: Vec<String>,
    pub config: TrainConfig,
    pub meta: TrainingMeta,
}

// RNG stream ids
const STREAM_INIT: u64 = 1;
const STREAM_SPLIT: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_GATES: u64 = 4;
const STREAM_DROPOUT: u64 = 5;
const STREAM_IMPUTE: u64 = 6;
const STREAM_VAL: u64 = 7;

fn validation_loss(
    state: &ModelState,
    x: ArrayView2<f64>,
    targets: &[f64],
    cfg: &SoftRankConfig,
) -> Result<f64> {
    let draw = GateDraw::deterministic(&state.gates);
    let (scores, _) = state.params.forward(x, &draw.gates, None)?;
    Ok(spearman_loss(scores.as_slice().expect("contiguous"), targets, cfg)?.0)
}

fn has_spread(y: &[f64]) -> bool {
    y.iter().any(|v| *v != y[0])
}

/// Trains on `ds` (raw features; the scaler is fitted here).
///
/// One fifth of the subjects, stratified on the event flag, is held out to
/// monitor the ranking loss with deterministic gates, no dropout and one
/// fixed imputation draw. Training stops after `patience` epochs without
/// improvement and the best-epoch parameters are returned.
pub fn train(ds: &SurvivalDataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    if ds.len() < 10 {
        return Err(GraftError::Config(format!("need at least 10 subjects to train, got {}", ds.len())));
    }
    let scaler = ScalerParams::fit(&ds.features)?;
    let x_all = scaler.transform(&ds.features)?;
    let std_ds = SurvivalDataset {
        features: x_all.clone(),
        ..ds.clone()
    };
    let table = ImputationTable::build(&std_ds, cfg.k_events)?;

    let split = stratified_assignment(&ds.events, 5, rng::mix_seed(cfg.seed, &[STREAM_SPLIT]))?;
    let val_idx: Vec<usize> = (0..ds.len()).filter(|&i| split[i] == 0).collect();
    let mut train_idx: Vec<usize> = (0..ds.len()).filter(|&i| split[i] != 0).collect();
    let x_val = x_all.select(Axis(0), &val_idx);
    let mut val_rng = rng::stream(cfg.seed, STREAM_VAL);
    let val_targets = table.draw_targets(&val_idx, &mut val_rng);
    if !has_spread(&val_targets) {
        return Err(GraftError::Numeric("validation targets have no spread".into()));
    }

    let p = ds.n_features();
    let mu_init = train_idx.iter().map(|&i| ds.times[i].ln()).sum::<f64>() / train_idx.len() as f64;
    let mut init_rng = rng::stream(cfg.seed, STREAM_INIT);
    let mut state = ModelState {
        params: GraftParams::init(p, cfg.hidden, cfg.dropout, cfg.arch(), mu_init, &mut init_rng),
        gates: GateParams::init(p, cfg.effective_gates(), cfg.sigma, cfg.lambda_l0),
    };
    let sr = cfg.soft_rank();
    let initial_val_loss = validation_loss(&state, x_val.view(), &val_targets, &sr)?;

    let mut shuffle_rng = rng::stream(cfg.seed, STREAM_SHUFFLE);
    let mut gate_rng = rng::stream(cfg.seed, STREAM_GATES);
    let mut drop_rng = rng::stream(cfg.seed, STREAM_DROPOUT);
    let mut impute_rng = rng::stream(cfg.seed, STREAM_IMPUTE);
    let mut adam = AdamState::new(state.n_trainable());
    let mut baseline = RewardBaseline::new(REINFORCE_BASELINE_DECAY);
    let mut flat = state.flatten();
    let n_net = state.params.n_trainable();

    let mut best_state = state.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut since_best = 0;

    for epoch in 1..=cfg.max_epochs {
        train_idx.shuffle(&mut shuffle_rng);
        for batch in train_idx.chunks(cfg.batch_size) {
            if batch.len() < 3 {
                continue;
            }
            let xb = x_all.select(Axis(0), batch);
            let draw = GateDraw::sample(&state.gates, &mut gate_rng);
            let dropout = state.params.sample_dropout(batch.len(), &mut drop_rng);
            let targets: Vec<Vec<f64>> = (0..cfg.mc_samples)
                .map(|_| table.draw_targets(batch, &mut impute_rng))
                .filter(|y| has_spread(y))
                .collect();
            if targets.is_empty() {
                continue;
            }
            let eval = total_loss(&state, xb.view(), &draw, dropout.as_ref(), &targets, cfg)?;
            let mut grads = eval.grads;
            if state.gates.variant == GateVariant::Reinforce {
                let ascent = reinforce_step(
                    &state.gates.eta,
                    &draw.gates,
                    -eval.rank_loss,
                    &mut baseline,
                    REINFORCE_ENTROPY_COEF,
                );
                for (g, a) in grads[n_net..].iter_mut().zip(ascent) {
                    *g -= a;
                }
            }
            adam.step(&mut flat, &grads, cfg.lr)?;
            state.unflatten(&flat);
            state.gates.project();
            flat = state.flatten();
        }
        let val = validation_loss(&state, x_val.view(), &val_targets, &sr)?;
        if !val.is_finite() {
            return Err(GraftError::Numeric(format!("validation loss became {val} at epoch {epoch}")));
        }
        history.push(val);
        if val < best_val {
            best_val = val;
            best_epoch = epoch;
            best_state = state.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    Ok(TrainedModel {
        state: best_state,
        scaler,
        feature_names: ds.feature_names.clone(),
        config: cfg.clone(),
        meta: TrainingMeta {
            epochs_run: history.len(),
            best_epoch,
            best_val_loss: best_val,
            initial_val_loss,
            val_history: history,
            n_train: train_idx.len(),
            n_val: val_idx.len(),
            n_fallback_imputations: table.n_fallback(),
        },
    })
}

impl TrainedModel {
    /// Inference scores: stored scaler, deterministic gates, no dropout.
    pub fn predict_scores(&self, x_raw: &Array2<f64>) -> Result<Vec<f64>> {
        let x = self.scaler.transform(x_raw)?;
        self.scores_standardized(x.view())
    }

    pub fn scores_standardized(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        let gates = self.state.gates.deterministic_gates();
        Ok(self.state.params.forward(x, &gates, None)?.0.to_vec())
    }

    pub fn deterministic_gates(&self) -> Vec<f64> {
        self.state.gates.deterministic_gates()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_gradient_only_counts() {
        let mut st = AdamState::new(2);
        let mut p = vec![1.0, -2.0];
        st.step(&mut p, &[0.0, 0.0], 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        for g in [3.5, -0.5, 1e3] {
            let mut st = AdamState::new(1);
            let mut p = vec![0.0];
            st.step(&mut p, &[g], 1e-3).unwrap();
            assert!((p[0] + 1e-3 * g.signum()).abs() < 1e-3 * 1e-6, "g = {g}: {}", p[0]);
        }
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut st = AdamState::new(2);
        assert!(st.step(&mut [0.0], &[0.0], 0.1).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            patience: 2000,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 2,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_json_is_partial_and_strict() {
        let cfg: TrainConfig = serde_json::from_str(r#"{"lr": 0.01, "variant": "no_stg"}"#).unwrap();
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.variant, ModelVariant::NoStg);
        assert_eq!(cfg.batch_size, 64);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"learning_rate": 0.01}"#).is_err());
    }

    #[test]
    fn variant_contracts() {
        let cfg = TrainConfig {
            variant: ModelVariant::LinearOnly,
            ..Default::default()
        };
        assert_eq!(cfg.effective_gates(), GateVariant::None);
        assert_eq!(cfg.arch(), ArchVariant::NoMlp);
        let cfg = TrainConfig {
            variant: ModelVariant::NoStg,
            ..Default::default()
        };
        assert_eq!(cfg.effective_gates(), GateVariant::None);
        assert_eq!(cfg.arch(), ArchVariant::Full);
    }
}
