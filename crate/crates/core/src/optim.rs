//! Decoupled-weight-decay adaptive-moment optimizer with a one-cycle
//! learning-rate schedule and global-norm gradient clipping.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::autograd::{Data, Gradients};
use crate::error::{CoreError, Result};
use crate::nn::{ParamGroup, ParamStore};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimConfig {
    /// Peak learning rate of the schedule for groups with scale 1.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm clip threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Per-group multipliers on the scheduled rate; groups absent here use
    /// 1.0. Stage B sets backbone-decoder to 1/50.
    pub group_scale: Vec<(ParamGroup, f64)>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
            clip_norm: Some(1.0),
            group_scale: Vec::new(),
        }
    }
}

impl OptimConfig {
    pub fn scale_for(&self, group: ParamGroup) -> f64 {
        self.group_scale
            .iter()
            .find(|(g, _)| *g == group)
            .map_or(1.0, |(_, s)| *s)
    }
}

/// One-cycle schedule: cosine warmup from lr/div_factor to lr over
/// pct_start of the run, then cosine annealing down to
/// lr/(div_factor * final_div_factor).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OneCycle {
    pub total_steps: usize,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl OneCycle {
    pub fn new(total_steps: usize) -> Self {
        OneCycle {
            total_steps: total_steps.max(1),
            pct_start: 0.01,
            div_factor: 25.0,
            final_div_factor: 1e4,
        }
    }

    /// Scheduled rate before group scaling, for the given 0-based step.
    pub fn rate(&self, peak: f64, step: usize) -> f64 {
        let t = step.min(self.total_steps) as f64;
        let warm = (self.pct_start * self.total_steps as f64).ceil().max(1.0);
        let initial = peak / self.div_factor;
        let floor = initial / self.final_div_factor;
        if t < warm {
            let p = t / warm;
            initial + (peak - initial) * 0.5 * (1.0 - (std::f64::consts::PI * p).cos())
        } else {
            let span = (self.total_steps as f64 - warm).max(1.0);
            let p = ((t - warm) / span).min(1.0);
            floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
        }
    }
}

/// Per-step report, recorded into run manifests.
#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    pub lr: f64,
    pub grad_norm: f64,
    pub clipped: bool,
}

pub struct AdamW {
    pub cfg: OptimConfig,
    pub schedule: OneCycle,
    step: usize,
    moments: Vec<Option<(Data, Data)>>,
}

impl AdamW {
    pub fn new(cfg: OptimConfig, schedule: OneCycle, n_params: usize) -> Self {
        AdamW {
            cfg,
            schedule,
            step: 0,
            moments: (0..n_params).map(|_| None).collect(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Rate a parameter of the given group would receive at the next step.
    pub fn effective_lr(&self, group: ParamGroup) -> f64 {
        self.schedule.rate(self.cfg.lr, self.step) * self.cfg.scale_for(group)
    }

    /// Applies one update from the pass's gradients. Parameters that were
    /// bound as constants have no gradients and stay untouched.
    pub fn step(&mut self, store: &ParamStore, grads: &mut Gradients) -> StepStats {
        assert_eq!(self.moments.len(), store.len(), "optimizer/store size mismatch");
        let mut pairs = store.take_grads(grads);

        let mut sq = 0.0;
        for (_, g) in &pairs {
            sq += g.iter().map(|v| v * v).sum::<f64>();
        }
        let grad_norm = sq.sqrt();
        let mut clipped = false;
        if let Some(limit) = self.cfg.clip_norm {
            if grad_norm > limit {
                let s = limit / grad_norm;
                for (_, g) in &mut pairs {
                    g.mapv_inplace(|v| v * s);
                }
                clipped = true;
            }
        }

        let lr_base = self.schedule.rate(self.cfg.lr, self.step);
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (idx, g) in &pairs {
            let lr = lr_base * self.cfg.scale_for(store.group_of(*idx));
            let (b1, b2, eps, wd) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps, self.cfg.weight_decay);
            let m_entry = &mut self.moments[*idx];
            if m_entry.is_none() {
                *m_entry = Some((ArrayD::zeros(g.raw_dim()), ArrayD::zeros(g.raw_dim())));
            }
            let (m, v) = m_entry.as_mut().unwrap();
            m.zip_mut_with(g, |mv, &gv| *mv = b1 * *mv + (1.0 - b1) * gv);
            v.zip_mut_with(g, |vv, &gv| *vv = b2 * *vv + (1.0 - b2) * gv * gv);
            store.update(*idx, |p| {
                ndarray::Zip::from(&mut *p).and(&*m).and(&*v).for_each(|pv, &mv, &vv| {
                    let mh = mv / bc1;
                    let vh = vv / bc2;
                    // Decoupled decay: applied to the parameter directly,
                    // not folded into the gradient.
                    *pv -= lr * (mh / (vh.sqrt() + eps) + wd * *pv);
                });
            });
        }
        self.step += 1;
        StepStats {
            lr: lr_base,
            grad_norm,
            clipped,
        }
    }

    /// Moment state in parameter order, for checkpointing. Entries for
    /// never-updated parameters are empty arrays.
    pub fn snapshot(&self) -> (usize, Vec<Option<(Data, Data)>>) {
        (self.step, self.moments.clone())
    }

    pub fn restore(&mut self, step: usize, moments: Vec<Option<(Data, Data)>>) -> Result<()> {
        if moments.len() != self.moments.len() {
            return Err(CoreError::config(format!(
                "optimizer state has {} entries, expected {}",
                moments.len(),
                self.moments.len()
            )));
        }
        self.step = step;
        self.moments = moments;
        Ok(())
    }
}
