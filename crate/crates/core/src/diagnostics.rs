//! FLOP accounting, convergence-rate checks, and per-run metric records.
//!
//! Cost model per training step: a sparse-only step costs `3 f_S`
//! (forward plus a backward counted as twice the forward); a step that
//! computes the full gradient costs `2 f_S + f_D`.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DiagError {
    #[error("trace has no steps")]
    IncompleteTrace,
    #[error("step indices must be strictly increasing")]
    NonMonotoneSteps,
    #[error("cumulative FLOPs must be non-decreasing")]
    DecreasingFlops,
}

/// Which level a training step ran on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Fine,
    Coarse,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Fine => "fine",
            Phase::Coarse => "coarse",
        }
    }
}

/// One training step of a run.
#[derive(Debug, Clone, Serialize)]
pub struct StepEntry {
    pub step: usize,
    pub phase: Phase,
    pub loss: f64,
    pub tau: f64,
    pub support_groups: usize,
    pub total_sparsity: f64,
    pub s_conv: Option<f64>,
    pub f_s: u64,
    pub cumulative_flops: f64,
}

/// Per-epoch aggregate.
#[derive(Debug, Clone, Serialize)]
pub struct EpochEntry {
    pub epoch: usize,
    pub end_step: usize,
    pub mean_loss: f64,
    pub eval_accuracy: Option<f64>,
    pub total_sparsity: f64,
    pub s_conv: Option<f64>,
    pub cumulative_flops: f64,
}

/// The full metric trace of one run.
#[derive(Debug, Clone, Default)]
pub struct RunRecord {
    steps: Vec<StepEntry>,
    epochs: Vec<EpochEntry>,
}

impl RunRecord {
    pub fn new() -> Self {
        RunRecord::default()
    }

    pub fn push_step(&mut self, entry: StepEntry) -> Result<(), DiagError> {
        if let Some(last) = self.steps.last() {
            if entry.step <= last.step {
                return Err(DiagError::NonMonotoneSteps);
            }
            if entry.cumulative_flops < last.cumulative_flops {
                return Err(DiagError::DecreasingFlops);
            }
        }
        self.steps.push(entry);
        Ok(())
    }

    pub fn push_epoch(&mut self, entry: EpochEntry) {
        self.epochs.push(entry);
    }

    pub fn steps(&self) -> &[StepEntry] {
        &self.steps
    }

    pub fn epochs(&self) -> &[EpochEntry] {
        &self.epochs
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    /// Step rows as CSV with the stable schema
    /// `step,phase,loss,tau,support_groups,total_sparsity,s_conv,f_s,cumulative_flops`.
    pub fn write_steps_csv(&self, w: &mut impl std::io::Write) -> std::io::Result<()> {
        writeln!(
            w,
            "step,phase,loss,tau,support_groups,total_sparsity,s_conv,f_s,cumulative_flops"
        )?;
        for s in &self.steps {
            let s_conv = s.s_conv.map_or(String::new(), |v| v.to_string());
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                s.step,
                s.phase.as_str(),
                s.loss,
                s.tau,
                s.support_groups,
                s.total_sparsity,
                s_conv,
                s.f_s,
                s.cumulative_flops
            )?;
        }
        Ok(())
    }

    /// Epoch rows as CSV with the stable schema
    /// `epoch,end_step,mean_loss,eval_accuracy,total_sparsity,s_conv,cumulative_flops`.
    pub fn write_epochs_csv(&self, w: &mut impl std::io::Write) -> std::io::Result<()> {
        writeln!(w, "epoch,end_step,mean_loss,eval_accuracy,total_sparsity,s_conv,cumulative_flops")?;
        for e in &self.epochs {
            let acc = e.eval_accuracy.map_or(String::new(), |v| v.to_string());
            let s_conv = e.s_conv.map_or(String::new(), |v| v.to_string());
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                e.epoch, e.end_step, e.mean_loss, acc, e.total_sparsity, s_conv, e.cumulative_flops
            )?;
        }
        Ok(())
    }
}

/// Cost of one step in FLOPs under the step cost model.
pub fn step_cost(phase: Phase, f_s: u64, f_d: u64) -> f64 {
    match phase {
        Phase::Coarse => 3.0 * f_s as f64,
        Phase::Fine => 2.0 * f_s as f64 + f_d as f64,
    }
}

/// Expected FLOPs per training step when every `(m+1)`-th step computes the
/// full gradient: `(m * 3 f_S + (2 f_S + f_D)) / (m + 1)`.
pub fn expected_step_flops(f_s: f64, f_d: f64, m: usize) -> f64 {
    (m as f64 * 3.0 * f_s + (2.0 * f_s + f_d)) / (m as f64 + 1.0)
}

/// Total trace cost divided by the dense-SGD baseline `steps * 3 f_D`,
/// using each step's recorded support.
pub fn training_flop_ratio(record: &RunRecord, f_d: u64) -> Result<f64, DiagError> {
    if record.steps.is_empty() {
        return Err(DiagError::IncompleteTrace);
    }
    let total: f64 = record.steps.iter().map(|s| step_cost(s.phase, s.f_s, f_d)).sum();
    Ok(total / (record.steps.len() as f64 * 3.0 * f_d as f64))
}

/// Outcome of verifying a linear rate against a loss trace.
#[derive(Debug, Clone, Copy)]
pub struct RateCheck {
    pub passes: bool,
    /// Largest observed `(L_k - L*) / ((1-r)^k (L_0 - L*))`; infinite when
    /// the bound is zero but the gap is not.
    pub max_ratio: f64,
}

/// Verifies `L_k - L* <= (1 - r)^k (L_0 - L*)` for every `k`, with a
/// `1 + 1e-9` multiplicative slack for accumulated rounding.
pub fn rate_check(losses: &[f64], l_star: f64, r: f64) -> RateCheck {
    assert!((0.0..1.0).contains(&r) && r > 0.0, "rate must be in (0, 1)");
    let Some(&l0) = losses.first() else {
        return RateCheck { passes: true, max_ratio: 0.0 };
    };
    let gap0 = (l0 - l_star).max(0.0);
    let mut max_ratio: f64 = 0.0;
    let mut passes = true;
    let mut bound = gap0;
    for (k, &l) in losses.iter().enumerate() {
        if k > 0 {
            bound *= 1.0 - r;
        }
        let gap = l - l_star;
        if gap <= 0.0 {
            continue;
        }
        if bound <= 0.0 {
            max_ratio = f64::INFINITY;
            passes = false;
            continue;
        }
        let ratio = gap / bound;
        max_ratio = max_ratio.max(ratio);
        if ratio > 1.0 + 1e-9 {
            passes = false;
        }
    }
    RateCheck { passes, max_ratio }
}
