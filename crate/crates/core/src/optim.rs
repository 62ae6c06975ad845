//! AdamW with decoupled weight decay, and learning-rate schedules.
//!
//! ```text
//! θ ← θ − lr·λ·θ
//! m ← β1·m + (1 − β1)·g
//! v ← β2·v + (1 − β2)·g²
//! θ ← θ − lr · (m / (1 − β1ᵗ)) / (√(v / (1 − β2ᵗ)) + ε)
//! ```

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Anything whose trainable state is a fixed, ordered list of flat tensors.
///
/// Gradients use the same type as the parameters they belong to, so the two
/// lists line up tensor by tensor.
pub trait Parameters {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

impl Parameters for Vec<Vec<f64>> {
    fn tensors(&self) -> Vec<&[f64]> {
        self.iter().map(Vec::as_slice).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.iter_mut().map(Vec::as_mut_slice).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        AdamWHyper {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid AdamW hyperparameters {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamWState {
    pub fn new<P: Parameters + ?Sized>(params: &P) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        AdamWState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One AdamW update in place. Nothing is modified when an error is returned.
pub fn adamw_step<P: Parameters + ?Sized>(
    params: &mut P,
    grads: &P,
    state: &mut AdamWState,
    hyper: &AdamWHyper,
    lr: f64,
) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::InvalidConfig(format!("learning rate {lr}")));
    }
    let grads = grads.tensors();
    let mut params = params.tensors_mut();
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} parameter tensors, {} gradient tensors, {} moment tensors",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, ((p, g), m)) in params.iter().zip(&grads).zip(&state.m).enumerate() {
        if p.len() != g.len() || p.len() != m.len() || p.len() != state.v[i].len() {
            return Err(Error::ShapeMismatch(format!("tensor {i}: {} params, {} grads", p.len(), g.len())));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient { tensor: i });
        }
    }

    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let decay = 1.0 - lr * hyper.weight_decay;
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i];
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for j in 0..p.len() {
            m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * g[j];
            v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] = p[j] * decay - lr * m_hat / (v_hat.sqrt() + hyper.epsilon);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    WarmupLinear,
    WarmupCosine,
    Cyclic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub total_steps: usize,
    pub cycles: usize,
}

impl ScheduleConfig {
    /// Pretraining default: warm up over 500 steps to 1e-4, then linear decay
    /// to zero at step 3000.
    pub fn pretrain_default() -> Self {
        ScheduleConfig {
            kind: ScheduleKind::WarmupLinear,
            warmup_steps: 500,
            peak_lr: 1e-4,
            total_steps: 3000,
            cycles: 1,
        }
    }

    /// Finetuning default: warm up over 100 steps to 5e-6, cosine annealing to
    /// zero at step 2000.
    pub fn finetune_default() -> Self {
        ScheduleConfig {
            kind: ScheduleKind::WarmupCosine,
            warmup_steps: 100,
            peak_lr: 5e-6,
            total_steps: 2000,
            cycles: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::InvalidConfig(m));
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return err(format!("peak_lr {} must be positive", self.peak_lr));
        }
        if self.total_steps == 0 {
            return err("total_steps must be positive".into());
        }
        if self.cycles == 0 {
            return err("cycles must be at least 1".into());
        }
        match self.kind {
            ScheduleKind::WarmupLinear | ScheduleKind::WarmupCosine if self.warmup_steps >= self.total_steps => {
                err(format!("warmup_steps {} >= total_steps {}", self.warmup_steps, self.total_steps))
            }
            ScheduleKind::Cyclic if self.total_steps % self.cycles != 0 => err(format!(
                "total_steps {} not divisible into {} cycles",
                self.total_steps, self.cycles
            )),
            ScheduleKind::Cyclic if self.total_steps / self.cycles < 2 => err("cycle length must be at least 2".into()),
            _ => Ok(()),
        }
    }

    pub fn lr(&self, step: usize) -> Result<f64> {
        match self.kind {
            ScheduleKind::WarmupLinear => lr_warmup_linear(step, self),
            ScheduleKind::WarmupCosine => lr_warmup_cosine(step, self),
            ScheduleKind::Cyclic => lr_cyclic(step, self),
        }
    }

    pub fn cycle_len(&self) -> usize {
        self.total_steps / self.cycles.max(1)
    }
}

fn check_step(step: usize, cfg: &ScheduleConfig) -> Result<()> {
    cfg.validate()?;
    if step > cfg.total_steps {
        return Err(Error::StepOutOfRange {
            step,
            total: cfg.total_steps,
        });
    }
    Ok(())
}

fn warmup(step: usize, warmup_steps: usize, peak: f64) -> f64 {
    peak * (step as f64 / warmup_steps as f64)
}

/// Linear ramp 0 → peak over the warmup, then linear decay to 0 at
/// `total_steps`.
pub fn lr_warmup_linear(step: usize, cfg: &ScheduleConfig) -> Result<f64> {
    check_step(step, cfg)?;
    if step < cfg.warmup_steps {
        return Ok(warmup(step, cfg.warmup_steps, cfg.peak_lr));
    }
    let remaining = (cfg.total_steps - step) as f64;
    let span = (cfg.total_steps - cfg.warmup_steps) as f64;
    Ok(cfg.peak_lr * remaining / span)
}

/// Linear ramp 0 → peak, then `peak · ½(1 + cos(π·progress))`.
pub fn lr_warmup_cosine(step: usize, cfg: &ScheduleConfig) -> Result<f64> {
    check_step(step, cfg)?;
    if step < cfg.warmup_steps {
        return Ok(warmup(step, cfg.warmup_steps, cfg.peak_lr));
    }
    Ok(cosine_tail(step - cfg.warmup_steps, cfg.total_steps - cfg.warmup_steps, cfg.peak_lr))
}

fn cosine_tail(offset: usize, span: usize, peak: f64) -> f64 {
    if offset == span {
        // cos(π) is not exactly -1 in floating point
        return 0.0;
    }
    peak * 0.5 * (1.0 + (PI * offset as f64 / span as f64).cos())
}

/// Ramp steps within one cycle: 10% of the cycle, at least one step.
pub fn cycle_ramp(cycle_len: usize) -> usize {
    ((cycle_len as f64 * 0.1).round() as usize).max(1)
}

/// `cycles` equal segments, each a warmup-cosine shape: ramp to peak over the
/// first 10% of the segment, cosine down to 0 at the segment end.
pub fn lr_cyclic(step: usize, cfg: &ScheduleConfig) -> Result<f64> {
    check_step(step, cfg)?;
    if step == 0 {
        return Ok(0.0);
    }
    let len = cfg.cycle_len();
    // positions run 1..=len, so a boundary step ends its cycle at lr 0
    let pos = step - ((step - 1) / len) * len;
    let ramp = cycle_ramp(len);
    if pos < ramp {
        Ok(warmup(pos, ramp, cfg.peak_lr))
    } else {
        Ok(cosine_tail(pos - ramp, len - ramp, cfg.peak_lr))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn linear() -> ScheduleConfig {
        ScheduleConfig::pretrain_default()
    }

    fn cosine() -> ScheduleConfig {
        ScheduleConfig::finetune_default()
    }

    fn cyclic(total: usize, cycles: usize) -> ScheduleConfig {
        ScheduleConfig {
            kind: ScheduleKind::Cyclic,
            warmup_steps: 0,
            peak_lr: 0.3,
            total_steps: total,
            cycles,
        }
    }

    fn rel(a: f64, b: f64) -> f64 {
        if b == 0.0 {
            a.abs()
        } else {
            ((a - b) / b).abs()
        }
    }

    #[test]
    fn decay_only_step() {
        let mut p = vec![vec![1.0]];
        let g = vec![vec![0.0]];
        let mut st = AdamWState::new(&p);
        let h = AdamWHyper {
            weight_decay: 0.01,
            ..Default::default()
        };
        adamw_step(&mut p, &g, &mut st, &h, 0.01).unwrap();
        assert!((p[0][0] - 0.9999).abs() < 1e-15);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε).
        let mut p = vec![vec![0.0]];
        let g = vec![vec![0.5]];
        let mut st = AdamWState::new(&p);
        let h = AdamWHyper {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut p, &g, &mut st, &h, 1e-3).unwrap();
        let expected = -1e-3 * 0.5 / (0.5 + 1e-8);
        assert!((p[0][0] - expected).abs() < 1e-18);
        assert!((p[0][0] + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn identical_inputs_identical_updates() {
        let mut p = vec![vec![0.3, 0.3], vec![0.3]];
        let g = vec![vec![0.2, 0.2], vec![0.2]];
        let mut st = AdamWState::new(&p);
        for _ in 0..5 {
            adamw_step(&mut p, &g, &mut st, &AdamWHyper::default(), 0.01).unwrap();
        }
        assert_eq!(p[0][0], p[0][1]);
        assert_eq!(p[0][0], p[1][0]);
    }

    #[test]
    fn zero_decay_zero_grad_is_noop() {
        let mut p = vec![vec![1.5, -2.0]];
        let g = vec![vec![0.0, 0.0]];
        let mut st = AdamWState::new(&p);
        let h = AdamWHyper {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut p, &g, &mut st, &h, 0.1).unwrap();
        assert_eq!(p, vec![vec![1.5, -2.0]]);
    }

    #[test]
    fn step_errors_leave_state_untouched() {
        let mut p = vec![vec![1.0]];
        let mut st = AdamWState::new(&p);
        let bad = vec![vec![f64::NAN]];
        assert!(matches!(
            adamw_step(&mut p, &bad, &mut st, &AdamWHyper::default(), 0.1),
            Err(Error::NonFiniteGradient { tensor: 0 })
        ));
        let wrong = vec![vec![1.0, 2.0]];
        assert!(matches!(
            adamw_step(&mut p, &wrong, &mut st, &AdamWHyper::default(), 0.1),
            Err(Error::ShapeMismatch(_))
        ));
        assert_eq!(st.t, 0);
        assert_eq!(p[0][0], 1.0);
    }

    proptest! {
        #[test]
        fn update_magnitude_scale_invariant(g in 1e-2f64..10.0, scale in 1.0f64..100.0) {
            let h = AdamWHyper { weight_decay: 0.0, ..Default::default() };
            let run = |grad: f64| {
                let mut p = vec![vec![0.0]];
                let mut st = AdamWState::new(&p);
                adamw_step(&mut p, &vec![vec![grad]], &mut st, &h, 1e-3).unwrap();
                p[0][0].abs()
            };
            let a = run(g);
            let b = run(g * scale);
            prop_assert!(rel(a, b) < 1e-6);
        }

        #[test]
        fn schedules_bounded(step in 0usize..=3000) {
            for cfg in [linear(), cyclic(3000, 3)] {
                let lr = cfg.lr(step).unwrap();
                prop_assert!((0.0..=cfg.peak_lr).contains(&lr));
            }
            if step <= 2000 {
                let lr = cosine().lr(step).unwrap();
                prop_assert!((0.0..=cosine().peak_lr).contains(&lr));
            }
        }
    }

    #[test]
    fn linear_golden_values() {
        let c = linear();
        assert_eq!(lr_warmup_linear(0, &c).unwrap(), 0.0);
        assert_eq!(lr_warmup_linear(500, &c).unwrap(), 1e-4);
        assert!(rel(lr_warmup_linear(1750, &c).unwrap(), 5e-5) < 1e-12);
        assert_eq!(lr_warmup_linear(3000, &c).unwrap(), 0.0);
        assert!(matches!(lr_warmup_linear(3001, &c), Err(Error::StepOutOfRange { .. })));
    }

    #[test]
    fn cosine_golden_values() {
        let c = cosine();
        assert_eq!(lr_warmup_cosine(100, &c).unwrap(), 5e-6);
        assert!(rel(lr_warmup_cosine(1050, &c).unwrap(), 2.5e-6) < 1e-12);
        assert_eq!(lr_warmup_cosine(2000, &c).unwrap(), 0.0);
    }

    #[test]
    fn cyclic_boundaries_ramp_and_period() {
        let c = cyclic(300, 3);
        for s in [100, 200, 300] {
            assert_eq!(lr_cyclic(s, &c).unwrap(), 0.0);
        }
        assert_eq!(lr_cyclic(10, &c).unwrap(), 0.3);
        for s in 0..=200 {
            assert_eq!(lr_cyclic(s, &c).unwrap(), lr_cyclic(s + 100, &c).unwrap());
        }
        let bad = cyclic(100, 3);
        assert!(matches!(lr_cyclic(1, &bad), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn invalid_schedule() {
        let mut c = linear();
        c.warmup_steps = 3000;
        assert!(c.validate().is_err());
        c = linear();
        c.peak_lr = 0.0;
        assert!(c.validate().is_err());
    }
}
