//! Three-stage training: loss, hand-derived reverse-mode gradients, the Adam
//! optimizer, the learning-rate schedule, and the pipeline with early
//! stopping and ablation toggles.

pub mod batch;
pub mod grad;
pub mod gradcheck;
pub mod pipeline;

pub use batch::{IntersectionSample, PositiveSample, PretrainSample, RecommendGroup, StageBatch};
pub use grad::grad_step;
pub use pipeline::{run_pipeline, PipelineResult, StageLogRecord};

use crate::error::{Error, Result};
use crate::model::nets::{log_sigmoid, sigmoid};
use crate::model::{InterestConfig, IntersectKind, OptimizerState, ParamStore, UserBiasMode};

/// All training hyperparameters and ablation toggles.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub dim: usize,
    /// Margin gamma used by the loss and the score.
    pub margin: f64,
    pub batch_size: usize,
    pub n_negatives: usize,
    pub base_lr: f64,
    /// Fractions of a stage's total steps at which the rate decays.
    pub lr_milestones: Vec<f64>,
    /// Multiplier applied to the base rate from each milestone on.
    pub lr_decay_factors: Vec<f64>,
    pub epochs_pretrain: usize,
    pub epochs_intersection: usize,
    pub epochs_recommend: usize,
    /// Stage-3 weight scale: w = 1 / (m + alpha).
    pub alpha: f64,
    pub seed: u64,
    /// Interest boxes use at most this many most-recent history items.
    pub history_limit: usize,
    /// Fraction of each user's training items held out for early stopping.
    pub val_fraction: f64,
    /// Scale s in the init range ±gamma*s/(2d); None picks d/8.
    pub init_scale: Option<f64>,
    pub hidden_width: Option<usize>,
    pub hidden_layers: usize,
    pub grad_clip: f64,
    pub early_stop_patience: usize,
    pub eval_k: usize,
    // ablation toggles
    pub skip_pretrain: bool,
    pub only_irt: bool,
    pub skip_intersection: bool,
    pub maxmin: bool,
    pub no_user_bias: bool,
    pub only_user_bias: bool,
    pub literal_loss: bool,
    /// Keep the stage-2 attention networks fixed during stage 3.
    pub freeze_attn_in_stage3: bool,
    /// Force single-worker execution everywhere.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 512,
            margin: 12.0,
            batch_size: 256,
            n_negatives: 256,
            base_lr: 1e-4,
            lr_milestones: vec![0.5, 0.75],
            lr_decay_factors: vec![0.2, 0.04],
            epochs_pretrain: 100,
            epochs_intersection: 100,
            epochs_recommend: 30,
            alpha: 4.0,
            seed: 0,
            history_limit: 64,
            val_fraction: 0.05,
            init_scale: None,
            hidden_width: None,
            hidden_layers: 1,
            grad_clip: 100.0,
            early_stop_patience: 2,
            eval_k: 20,
            skip_pretrain: false,
            only_irt: false,
            skip_intersection: false,
            maxmin: false,
            no_user_bias: false,
            only_user_bias: false,
            literal_loss: false,
            freeze_attn_in_stage3: false,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("dim must be >= 1".into()));
        }
        if self.batch_size == 0 || self.n_negatives == 0 {
            return Err(Error::Config("batch_size and n_negatives must be >= 1".into()));
        }
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(Error::Config("margin must be positive".into()));
        }
        if self.lr_milestones.len() != self.lr_decay_factors.len() {
            return Err(Error::Config(
                "lr_milestones and lr_decay_factors must have equal length".into(),
            ));
        }
        for w in self.lr_milestones.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Config("lr_milestones must be strictly increasing".into()));
            }
        }
        if self.lr_milestones.iter().any(|&m| !(0.0 < m && m < 1.0)) {
            return Err(Error::Config("lr_milestones must lie in (0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        if self.no_user_bias && self.only_user_bias {
            return Err(Error::Config(
                "no_user_bias and only_user_bias are mutually exclusive".into(),
            ));
        }
        if self.history_limit == 0 {
            return Err(Error::Config("history_limit must be >= 1".into()));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::Config("early_stop_patience must be >= 1".into()));
        }
        Ok(())
    }

    pub fn interest_config(&self) -> InterestConfig {
        InterestConfig {
            intersect: if self.maxmin {
                IntersectKind::MaxMin
            } else {
                IntersectKind::Attention
            },
            user_mode: if self.no_user_bias {
                UserBiasMode::ItemOnly
            } else if self.only_user_bias {
                UserBiasMode::UserOnly
            } else {
                UserBiasMode::Both
            },
            history_limit: self.history_limit,
        }
    }
}

/// Negative-sampling margin loss for one positive with `n` negatives.
///
/// The default bounded form scores negatives as `log sig(d_neg - gamma)`,
/// which is bounded below. `literal_form` replays the alternative sign
/// convention `-(1/n) sum log sig(gamma - d_neg)`, which is unbounded below
/// in the negative distances; it is kept behind the flag for comparison runs.
pub fn margin_loss(
    d_pos: f64,
    d_negs: &[f64],
    w: f64,
    gamma: f64,
    literal_form: bool,
) -> Result<f64> {
    if d_negs.is_empty() {
        return Err(Error::Contract("margin_loss: no negative distances".into()));
    }
    if !(w > 0.0) {
        return Err(Error::Contract("margin_loss: weight must be positive".into()));
    }
    let n = d_negs.len() as f64;
    let neg_term: f64 = if literal_form {
        -d_negs.iter().map(|&dn| log_sigmoid(gamma - dn)).sum::<f64>() / n
    } else {
        d_negs.iter().map(|&dn| log_sigmoid(dn - gamma)).sum::<f64>() / n
    };
    Ok(-w * (log_sigmoid(gamma - d_pos) + neg_term))
}

/// Loss value together with its derivatives in the distances.
pub(crate) fn margin_loss_backward(
    d_pos: f64,
    d_negs: &[f64],
    w: f64,
    gamma: f64,
    literal_form: bool,
) -> (f64, f64, Vec<f64>) {
    let n = d_negs.len() as f64;
    let d_dpos = w * sigmoid(d_pos - gamma);
    let d_dnegs: Vec<f64> = if literal_form {
        d_negs.iter().map(|&dn| -(w / n) * sigmoid(dn - gamma)).collect()
    } else {
        d_negs.iter().map(|&dn| -(w / n) * sigmoid(gamma - dn)).collect()
    };
    let loss = margin_loss(d_pos, d_negs, w, gamma, literal_form).expect("checked by caller");
    (loss, d_dpos, d_dnegs)
}

/// Step-indexed learning rate: the base rate, decayed at the configured
/// fractions of the stage's total steps.
pub fn lr_schedule(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    if total_steps == 0 {
        return cfg.base_lr;
    }
    let frac = step as f64 / total_steps as f64;
    let mut factor = 1.0;
    for (&ms, &f) in cfg.lr_milestones.iter().zip(&cfg.lr_decay_factors) {
        if frac >= ms {
            factor = f;
        }
    }
    cfg.base_lr * factor
}

/// Per-parameter gradient buffer matching the store layout.
#[derive(Debug, Clone)]
pub struct GradTape {
    pub data: Vec<f64>,
}

impl GradTape {
    pub fn zeros(n: usize) -> Self {
        Self { data: vec![0.0; n] }
    }

    pub fn zero(&mut self) {
        self.data.fill(0.0);
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    /// Scales the tape down to the given global L2 norm if it exceeds it.
    pub fn clip_to(&mut self, max_norm: f64) {
        let norm = self.l2_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for g in &mut self.data {
                *g *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|g| g.is_finite())
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// One Adam step over every parameter with bias-corrected moments. Moments
/// are stored in `f32` alongside the parameters and persist across steps.
pub fn optimizer_update(
    store: &mut ParamStore,
    tape: &GradTape,
    state: &mut OptimizerState,
    lr: f64,
) {
    debug_assert_eq!(tape.data.len(), store.data.len());
    state.step += 1;
    let bc1 = 1.0 - BETA1.powi(state.step as i32);
    let bc2 = 1.0 - BETA2.powi(state.step as i32);
    for i in 0..store.data.len() {
        let g = tape.data[i];
        let m = BETA1 * state.m[i] as f64 + (1.0 - BETA1) * g;
        let v = BETA2 * state.v[i] as f64 + (1.0 - BETA2) * g * g;
        state.m[i] = m as f32;
        state.v[i] = v as f32;
        let update = lr * (m / bc1) / ((v / bc2).sqrt() + EPS);
        store.data[i] = (store.data[i] as f64 - update) as f32;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, Shapes};

    #[test]
    fn margin_loss_hand_value() {
        // d_pos = d_neg = gamma, w = 1 -> -(log .5 + log .5) = 2 ln 2
        let l = margin_loss(12.0, &[12.0], 1.0, 12.0, false).unwrap();
        assert!((l - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn margin_loss_linear_in_weight() {
        let l1 = margin_loss(3.0, &[1.0, 5.0], 0.5, 12.0, false).unwrap();
        let l2 = margin_loss(3.0, &[1.0, 5.0], 1.0, 12.0, false).unwrap();
        assert!((l2 - 2.0 * l1).abs() < 1e-12);
    }

    #[test]
    fn bounded_form_vanishes_in_the_limit() {
        let l = margin_loss(0.0, &[1e6], 1.0, 12.0, false).unwrap();
        assert!(l.abs() < 1e-4);
        // the literal form diverges to -inf in the same limit
        let lit = margin_loss(0.0, &[1e6], 1.0, 12.0, true).unwrap();
        assert!(lit < -1e5);
    }

    #[test]
    fn margin_loss_monotonicity() {
        let base = margin_loss(3.0, &[4.0], 1.0, 12.0, false).unwrap();
        assert!(margin_loss(3.5, &[4.0], 1.0, 12.0, false).unwrap() > base);
        assert!(margin_loss(3.0, &[4.5], 1.0, 12.0, false).unwrap() < base);
    }

    #[test]
    fn margin_loss_invariant_under_negative_permutation() {
        let a = margin_loss(2.0, &[1.0, 7.0, 3.0], 0.3, 12.0, false).unwrap();
        let b = margin_loss(2.0, &[3.0, 1.0, 7.0], 0.3, 12.0, false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn margin_loss_contract_errors() {
        assert!(margin_loss(1.0, &[], 1.0, 12.0, false).is_err());
        assert!(margin_loss(1.0, &[1.0], 0.0, 12.0, false).is_err());
    }

    #[test]
    fn margin_loss_gradient_signs() {
        let (_, dpos, dnegs) = margin_loss_backward(3.0, &[4.0, 2.0], 1.0, 12.0, false);
        assert!(dpos > 0.0);
        assert!(dnegs.iter().all(|&g| g < 0.0));
        // the literal form also pushes negatives up, but with the other gate
        let (_, _, lit) = margin_loss_backward(3.0, &[4.0], 1.0, 12.0, true);
        assert!(lit[0] < 0.0);
    }

    #[test]
    fn lr_schedule_milestones() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, 1000, &cfg), 1e-4);
        assert!((lr_schedule(600, 1000, &cfg) - 2e-5).abs() < 1e-18);
        assert!((lr_schedule(900, 1000, &cfg) - 4e-6).abs() < 1e-18);
        assert!((lr_schedule(500, 1000, &cfg) - 2e-5).abs() < 1e-18);
        assert_eq!(lr_schedule(499, 1000, &cfg), 1e-4);
    }

    fn tiny_store() -> ParamStore {
        init_params(
            Shapes {
                d: 3,
                hidden_width: 3,
                hidden_layers: 1,
                n_items: 2,
                n_tags: 1,
                n_relations_aug: 2,
                n_users: 1,
            },
            12.0,
            None,
            5,
        )
        .unwrap()
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_unchanged() {
        let mut store = tiny_store();
        let before = store.data.clone();
        let tape = GradTape::zeros(store.data.len());
        let mut state = OptimizerState::zeros(store.data.len());
        optimizer_update(&mut store, &tape, &mut state, 1e-2);
        assert_eq!(store.data, before);
    }

    #[test]
    fn adam_matches_scalar_reference() {
        // one parameter, constant gradient; reference computed independently
        let mut store = tiny_store();
        let n = store.data.len();
        let mut state = OptimizerState::zeros(n);
        let mut tape = GradTape::zeros(n);
        let g = 0.37;
        tape.data[0] = g;
        let x0 = store.data[0] as f64;
        let lr = 1e-3;
        for _ in 0..50 {
            optimizer_update(&mut store, &tape, &mut state, lr);
        }
        // reference scalar Adam in f32-storage arithmetic
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, x0);
        for t in 1..=50 {
            m = BETA1 * (m as f32) as f64 + (1.0 - BETA1) * g;
            v = BETA2 * (v as f32) as f64 + (1.0 - BETA2) * g * g;
            let bc1 = 1.0 - BETA1.powi(t);
            let bc2 = 1.0 - BETA2.powi(t);
            x = ((x as f32) as f64 - lr * (m / bc1) / ((v / bc2).sqrt() + EPS)) as f32 as f64;
            m = (m as f32) as f64;
            v = (v as f32) as f64;
        }
        assert!((store.data[0] as f64 - x).abs() < 1e-7);
        // with constant gradient the step magnitude approaches lr
        let step_size = lr * (1.0 + 1e-6);
        assert!((x0 - store.data[0] as f64) <= 50.0 * step_size);
        assert!((x0 - store.data[0] as f64) >= 49.0 * lr * 0.95);
    }

    #[test]
    fn grad_clip() {
        let mut tape = GradTape::zeros(4);
        tape.data = vec![3.0, 4.0, 0.0, 0.0];
        tape.clip_to(100.0);
        assert_eq!(tape.data, vec![3.0, 4.0, 0.0, 0.0]);
        tape.clip_to(1.0);
        assert!((tape.l2_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.no_user_bias = true;
        cfg.only_user_bias = true;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.lr_milestones = vec![0.75, 0.5];
        assert!(cfg.validate().is_err());
    }
}
