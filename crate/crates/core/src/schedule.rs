//! Self-paced masking budget scheduling.
//!
//! Token-wise reverse KL between the causal student and teacher measures how
//! hard each response token is to distill; the budget maps easy tokens
//! (small divergence) to masking ratios near ρ_max and hard tokens toward
//! ρ_min:
//!
//!   ρ_n = ρ_min + (ρ_max − ρ_min) · σ(r̃_n − μ_r̃),   r̃_n = −log(r_n + ε)

use crate::error::{CoreError, Result};
use crate::num::Scalar;
use crate::tensor::{reverse_kl_row, softmax_rows, Tensor};

/// Per-response-position reverse KL values from the auxiliary forward.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceTrace<T> {
    pub r: Vec<T>,
}

impl<T: Scalar> DivergenceTrace<T> {
    pub fn new(r: Vec<T>) -> Result<Self> {
        if let Some(bad) = r.iter().find(|v| !v.is_finite() || **v < T::zero()) {
            return Err(CoreError::NonFinite(format!(
                "divergence trace entry {bad}"
            )));
        }
        Ok(DivergenceTrace { r })
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }
}

/// Per-token cumulative-ratio thresholds, bounded to [ρ_min, ρ_max].
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetSchedule<T> {
    pub rho: Vec<T>,
    pub rho_min: T,
    pub rho_max: T,
    pub epsilon: T,
}

/// Token-wise reverse KL between τ-scaled student and teacher distributions
/// over identical response positions under the causal mask. No gradients.
pub fn tokenwise_reverse_kl<T: Scalar>(
    student_logits: &Tensor<T>,
    teacher_logits: &Tensor<T>,
    tau: T,
) -> Result<DivergenceTrace<T>> {
    if student_logits.shape() != teacher_logits.shape() {
        return Err(CoreError::Dimension {
            context: "tokenwise_reverse_kl".into(),
            left: student_logits.shape().to_vec(),
            right: teacher_logits.shape().to_vec(),
        });
    }
    let inv_tau = T::one() / tau;
    let scale = |t: &Tensor<T>| {
        let data = t.data().iter().map(|&v| v * inv_tau).collect();
        Tensor::new(t.shape().to_vec(), data).expect("same shape")
    };
    let p = softmax_rows(&scale(student_logits));
    let q = softmax_rows(&scale(teacher_logits));
    let r = (0..p.rows())
        .map(|i| reverse_kl_row(p.row(i), q.row(i)))
        .collect();
    DivergenceTrace::new(r)
}

/// Exact evaluation of the self-paced threshold formula. A length-1 trace
/// centers on itself, so σ(0) puts it at the midpoint of the bounds.
pub fn self_paced_thresholds<T: Scalar>(
    trace: &DivergenceTrace<T>,
    rho_min: T,
    rho_max: T,
    epsilon: T,
) -> Result<BudgetSchedule<T>> {
    if rho_min > rho_max {
        return Err(CoreError::Range(format!(
            "rho_min {rho_min} > rho_max {rho_max}"
        )));
    }
    if !(epsilon > T::zero()) {
        return Err(CoreError::Range(format!("epsilon {epsilon} must be > 0")));
    }
    if trace.is_empty() {
        return Err(CoreError::Precondition("empty divergence trace".into()));
    }
    if let Some(bad) = trace.r.iter().find(|v| !v.is_finite()) {
        return Err(CoreError::NonFinite(format!("trace entry {bad}")));
    }
    let scores: Vec<T> = trace.r.iter().map(|&r| -((r + epsilon).ln())).collect();
    let mean = scores.iter().copied().sum::<T>() / T::of(scores.len() as f64);
    let span = rho_max - rho_min;
    let rho = scores
        .iter()
        .map(|&s| rho_min + span * (s - mean).sigmoid())
        .collect();
    Ok(BudgetSchedule {
        rho,
        rho_min,
        rho_max,
        epsilon,
    })
}

/// Constant schedule (static cumulative-ratio baseline).
pub fn static_threshold<T: Scalar>(n: usize, rho: T) -> Result<BudgetSchedule<T>> {
    if rho < T::zero() || rho > T::one() {
        return Err(CoreError::Range(format!("rho {rho} outside [0, 1]")));
    }
    Ok(BudgetSchedule {
        rho: vec![rho; n],
        rho_min: rho,
        rho_max: rho,
        epsilon: T::zero(),
    })
}

/// Selection rule consumed by the masking module. `CumulativeRatio` is the
/// top-ρ rule driven by a [`BudgetSchedule`]; the other two are the
/// threshold-type ablations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdRule<T> {
    CumulativeRatio,
    /// Mask eligible prefixes whose normalized attention exceeds the value.
    AttentionThreshold(T),
    /// Mask the top fraction of eligible prefixes by count.
    MaskingRatio(T),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdMode {
    CumulativeRatio,
    AttentionThreshold,
    MaskingRatio,
}

impl std::str::FromStr for ThresholdMode {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cumulative_ratio" | "cumulative" => Ok(ThresholdMode::CumulativeRatio),
            "attention_threshold" => Ok(ThresholdMode::AttentionThreshold),
            "masking_ratio" => Ok(ThresholdMode::MaskingRatio),
            other => Err(CoreError::Enumeration(format!(
                "unknown threshold mode '{other}'"
            ))),
        }
    }
}

/// Validate and build the per-token selection rule descriptor.
pub fn alt_threshold_modes<T: Scalar>(mode: ThresholdMode, param: T) -> Result<ThresholdRule<T>> {
    match mode {
        ThresholdMode::CumulativeRatio => Ok(ThresholdRule::CumulativeRatio),
        ThresholdMode::AttentionThreshold => {
            if param < T::zero() || param > T::one() {
                return Err(CoreError::Range(format!(
                    "attention threshold {param} outside [0, 1]"
                )));
            }
            Ok(ThresholdRule::AttentionThreshold(param))
        }
        ThresholdMode::MaskingRatio => {
            if param < T::zero() || param > T::one() {
                return Err(CoreError::Range(format!(
                    "masking ratio {param} outside [0, 1]"
                )));
            }
            Ok(ThresholdRule::MaskingRatio(param))
        }
    }
}
