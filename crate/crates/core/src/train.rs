//! Optimizer, learning-rate schedule and the single training step.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{DataError, Sequence, Triplet};
use crate::encoding::TargetStateMaps;
use crate::loss::{total_loss, LossConfig, LossReport};
use crate::network::{StepModel, TrainFrame};
use crate::param::ParamStore;
use crate::tensor::{Graph, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite loss: {0:?}")]
    NonFinite(LossReport),
    #[error("non-finite gradient (norm {0})")]
    NonFiniteGradient(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid training config: {0}")]
    Config(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub decay_factor: f64,
    /// Last epoch (1-based) trained at the initial rate.
    pub decay_epoch: usize,
    pub epochs: usize,
    /// Triplets drawn from each sequence per epoch.
    pub samples_per_sequence: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Maximum global gradient norm; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            decay_factor: 0.1,
            decay_epoch: 50,
            epochs: 60,
            samples_per_sequence: 1,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config("lr must be positive"));
        }
        if !(0.0..=1.0).contains(&self.decay_factor) {
            return Err(TrainError::Config("decay_factor must lie in [0, 1]"));
        }
        if self.decay_epoch > self.epochs {
            return Err(TrainError::Config("decay_epoch must not exceed epochs"));
        }
        if self.samples_per_sequence == 0 {
            return Err(TrainError::Config("samples_per_sequence must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(TrainError::Config("Adam needs β1, β2 in [0, 1) and ε > 0"));
        }
        if self.grad_clip < 0.0 {
            return Err(TrainError::Config("grad_clip must be non-negative"));
        }
        Ok(())
    }

    /// Learning rate for a 1-based epoch.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if epoch > self.decay_epoch {
            self.lr * self.decay_factor
        } else {
            self.lr
        }
    }
}

/// Adam moment buffers, one pair per parameter in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamState { m: zeros(), v: zeros(), step: 0 }
    }

    pub fn matches(&self, store: &ParamStore) -> bool {
        self.m.len() == store.len()
            && self.v.len() == store.len()
            && store
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(p, (m, v))| m.shape() == p.value.shape() && v.shape() == p.value.shape())
    }
}

/// One bias-corrected Adam step over every parameter using its accumulated gradient.
pub fn adam_update(store: &mut ParamStore, state: &mut AdamState, lr: f64, cfg: &TrainConfig) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - crate::math::powi(cfg.beta1, t);
    let c2 = 1.0 - crate::math::powi(cfg.beta2, t);
    for (p, (m, v)) in store.iter_mut().zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let grad = p.grad.data();
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, w) in p.value.data_mut().iter_mut().enumerate() {
            let gi = grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            *w -= lr * mh / (crate::math::sqrt(vh) + cfg.eps);
        }
    }
}

/// Rescales all gradients so their joint norm is at most `max_norm`; returns the norm before.
pub fn clip_gradients(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for p in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Target-state maps of `target_id` in frame `idx` of `seq`.
pub fn frame_maps(model: &StepModel, seq: &Sequence, idx: usize, target_id: u64) -> Result<TargetStateMaps, DataError> {
    let frame = &seq.frames[idx];
    let ann = frame.annotation(target_id).ok_or(DataError::TargetAbsent(target_id))?;
    let cfg = &model.cfg.encoding;
    ann.validate(cfg.num_keypoints)?;
    Ok(TargetStateMaps::new(ann, &frame.annotations, cfg))
}

/// Loss report and pre-clip gradient norm of a completed step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub loss: LossReport,
    pub grad_norm: f64,
}

/// Forward, loss, backward and one Adam update on a triplet. On a non-finite loss or
/// gradient the parameters and optimizer state are left untouched.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &StepModel,
    store: &mut ParamStore,
    opt: &mut AdamState,
    seq: &Sequence,
    triplet: &Triplet,
    lc: &LossConfig,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<StepReport, TrainError> {
    let maps_a = frame_maps(model, seq, triplet.train[0], triplet.target_id)?;
    let maps_b = frame_maps(model, seq, triplet.train[1], triplet.target_id)?;
    let maps_t = frame_maps(model, seq, triplet.test, triplet.target_id)?;
    let train = [
        TrainFrame { image: &seq.frames[triplet.train[0]].image, maps: &maps_a },
        TrainFrame { image: &seq.frames[triplet.train[1]].image, maps: &maps_b },
    ];
    let mut g = Graph::new();
    let out = model.full_forward(&mut g, store, &train, &seq.frames[triplet.test].image)?;
    let terms = total_loss(&mut g, &out, &maps_t, &[&maps_a, &maps_b], lc, &model.cfg.encoding)?;
    let loss = terms.report(&g);
    if !loss.is_finite() {
        return Err(TrainError::NonFinite(loss));
    }
    store.zero_grads();
    g.backward(terms.total, store)?;
    let grad_norm = clip_gradients(store, cfg.grad_clip);
    if !grad_norm.is_finite() {
        store.zero_grads();
        return Err(TrainError::NonFiniteGradient(grad_norm));
    }
    adam_update(store, opt, lr, cfg);
    Ok(StepReport { loss, grad_norm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Frame, SequenceSource};
    use crate::network::tests::{annotation, random_image, tiny_config};
    use crate::param::Init;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_param(value: f64, grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::full(&[3], value));
        *s.grad_mut(id) = Tensor::full(&[3], grad);
        s
    }

    #[test]
    fn schedule_decays_once_after_decay_epoch() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at_epoch(1), 1e-4);
        assert_eq!(c.lr_at_epoch(50), 1e-4);
        assert!((c.lr_at_epoch(51) - 1e-5).abs() < 1e-20);
        assert!((c.lr_at_epoch(60) - 1e-5).abs() < 1e-20);
        c.validate().unwrap();
        assert!(TrainConfig { decay_epoch: 61, ..c }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..c }.validate().is_err());
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters() {
        let mut s = one_param(0.5, 0.0);
        let mut st = AdamState::new(&s);
        adam_update(&mut s, &mut st, 1e-3, &TrainConfig::default());
        assert_eq!(s.iter().next().unwrap().value.data(), &[0.5; 3]);
        assert_eq!(st.step, 1);
        adam_update(&mut s, &mut st, 1e-3, &TrainConfig::default());
        assert_eq!(st.step, 2);
    }

    proptest! {
        #[test]
        fn adam_first_step_is_signed_lr(g in prop_oneof![-100.0f64..-1e-3, 1e-3f64..100.0], lr in 1e-5f64..1e-1) {
            let c = TrainConfig::default();
            let mut s = one_param(1.0, g);
            let mut st = AdamState::new(&s);
            adam_update(&mut s, &mut st, lr, &c);
            // m̂ = g and v̂ = g², so the step is lr·g/(|g| + ε)
            let expected = 1.0 - lr * g / (g.abs() + c.eps);
            let got = s.iter().next().unwrap().value.data()[0];
            prop_assert!((got - expected).abs() < 1e-14);
            prop_assert!((got - (1.0 - lr * g.signum())).abs() < lr * 1e-4);
        }
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let mut s = ParamStore::new();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let a = s.init("a", &[4], Init::Zeros, &mut r);
        let b = s.init("b", &[2], Init::Zeros, &mut r);
        *s.grad_mut(a) = Tensor::full(&[4], 30.0);
        *s.grad_mut(b) = Tensor::full(&[2], -40.0);
        let before = clip_gradients(&mut s, 10.0);
        assert!((before - (4.0 * 900.0 + 2.0 * 1600.0f64).sqrt()).abs() < 1e-9);
        assert!((s.grad_norm() - 10.0).abs() < 1e-12);
        // direction is preserved
        assert!((s.grad(a).data()[0] / s.grad(b).data()[0] + 0.75).abs() < 1e-12);
        let n = clip_gradients(&mut s, 100.0);
        assert!((n - 10.0).abs() < 1e-12 && (s.grad_norm() - 10.0).abs() < 1e-12);
    }

    pub(crate) fn toy_sequence(use_gmsp: bool) -> (StepModel, ParamStore, Sequence) {
        let cfg = tiny_config(use_gmsp);
        let (model, store) = StepModel::new(&cfg, 11).unwrap();
        let frames =
            (0..4).map(|i| Frame::new(random_image(&cfg, 20 + i), vec![annotation(2.0 * i as f64)]).unwrap()).collect();
        (model, store, Sequence { frames, source: SequenceSource::Synthetic })
    }

    #[test]
    fn train_step_is_deterministic() {
        let run = || {
            let (model, mut store, seq) = toy_sequence(true);
            let mut opt = AdamState::new(&store);
            let t = Triplet { target_id: 1, train: [0, 1], test: 2 };
            let c = TrainConfig::default();
            let r1 = train_step(&model, &mut store, &mut opt, &seq, &t, &LossConfig::default(), &c, 1e-3).unwrap();
            let r2 = train_step(&model, &mut store, &mut opt, &seq, &t, &LossConfig::default(), &c, 1e-3).unwrap();
            (r1, r2, store)
        };
        let (a1, a2, sa) = run();
        let (b1, b2, sb) = run();
        assert_eq!((a1, a2), (b1, b2));
        assert_eq!(sa, sb);
        assert_ne!(a1.loss, a2.loss);
    }

    #[test]
    fn overfitting_a_fixed_triplet_reduces_loss() {
        for use_gmsp in [true, false] {
            let (model, mut store, seq) = toy_sequence(use_gmsp);
            let mut opt = AdamState::new(&store);
            let t = Triplet { target_id: 1, train: [0, 1], test: 2 };
            let c = TrainConfig::default();
            let lc = LossConfig::default();
            let mut losses = Vec::new();
            for _ in 0..51 {
                let r = train_step(&model, &mut store, &mut opt, &seq, &t, &lc, &c, 1e-3).unwrap();
                losses.push(r.loss.total);
            }
            let drops = losses.windows(2).filter(|w| w[1] < w[0]).count();
            assert!(drops >= 45, "use_gmsp={use_gmsp}: {drops} of 50 steps decreased: {losses:?}");
        }
    }

    #[test]
    fn missing_target_is_reported() {
        let (model, mut store, seq) = toy_sequence(true);
        let mut opt = AdamState::new(&store);
        let t = Triplet { target_id: 9, train: [0, 1], test: 2 };
        let before = store.clone();
        let e =
            train_step(&model, &mut store, &mut opt, &seq, &t, &LossConfig::default(), &TrainConfig::default(), 1e-3);
        assert!(matches!(e, Err(TrainError::Data(DataError::TargetAbsent(9)))));
        assert_eq!(store, before);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn optimizer_state_matches_store() {
        let (_, store, _) = toy_sequence(false);
        let st = AdamState::new(&store);
        assert!(st.matches(&store));
        assert!(!st.matches(&one_param(0.0, 0.0)));
    }
}
