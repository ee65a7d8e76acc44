//! Distillation engine: teacher supervised training, knowledge distillation
//! under the salient reasoning-prefix mask, and self-distillation.
//!
//! One distillation step runs three forwards:
//!   1. teacher under the causal mask (no grad) — target distributions
//!   2. auxiliary student under the causal mask (no grad, attention captured)
//!      — response-to-response attention and token-wise reverse KL
//!   3. student under the salient mask (with grad) — the optimized branch
//! The budget scheduler maps the divergence trace to per-token ρ, the
//! masking module picks the salient prefixes, and the KD loss is a mean over
//! response positions of the chosen KL at temperature τ. Gradients flow only
//! through the masked forward.

use crate::autodiff::Var;
use crate::corpus::{self, specials, TaskSample};
use crate::error::{CoreError, Result};
use crate::masking::{
    build_region_mask, build_salient_mask, select_for_rows, MaskMatrix, Region,
    SalientSelection, SelectionStrategy,
};
use crate::model::{extract_response_attention, forward, forward_pass, Model, ModelConfig};
use crate::optim::Adam;
use crate::rng::CounterRng;
use crate::schedule::{
    alt_threshold_modes, self_paced_thresholds, tokenwise_reverse_kl, BudgetSchedule,
    DivergenceTrace, ThresholdMode,
};
use crate::seq::Sequence;
use crate::tensor::{softmax_rows, Tensor};

pub type Model64 = Model<f64>;
pub type Tensor64 = Tensor<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Reverse,
    Forward,
    Mixed,
}

impl std::str::FromStr for LossKind {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reverse" => Ok(LossKind::Reverse),
            "forward" => Ok(LossKind::Forward),
            "mixed" => Ok(LossKind::Mixed),
            other => Err(CoreError::Enumeration(format!("unknown loss kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSetting {
    Salient,
    CausalOnly,
    RegionVisual,
    RegionQuestion,
}

impl std::str::FromStr for MaskSetting {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "salient" => Ok(MaskSetting::Salient),
            "causal_only" | "causal" => Ok(MaskSetting::CausalOnly),
            "region_visual" | "visual" => Ok(MaskSetting::RegionVisual),
            "region_question" | "question" => Ok(MaskSetting::RegionQuestion),
            other => Err(CoreError::Enumeration(format!("unknown mask kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub tau: f64,
    pub rho_min: f64,
    pub rho_max: f64,
    pub epsilon: f64,
    pub loss_kind: LossKind,
    pub mask_kind: MaskSetting,
    pub selection_strategy: SelectionStrategy,
    pub threshold_mode: ThresholdMode,
    pub threshold_param: f64,
    /// Auxiliary forward reuses the live student weights; the ablation uses a
    /// frozen copy taken at run start.
    pub aux_weight_shared: bool,
    pub exclude_immediate_prev: bool,
    /// Whether the token-wise reverse KL of the scheduler is computed on
    /// τ-scaled distributions (the teacher distribution is reused from the
    /// loss, which is τ-scaled) or on raw softmax.
    pub aux_kl_tau_scaled: bool,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            tau: 2.0,
            rho_min: 0.3,
            rho_max: 0.5,
            epsilon: 1e-8,
            loss_kind: LossKind::Reverse,
            mask_kind: MaskSetting::Salient,
            selection_strategy: SelectionStrategy::HighAttention,
            threshold_mode: ThresholdMode::CumulativeRatio,
            threshold_param: 0.0,
            aux_weight_shared: true,
            exclude_immediate_prev: true,
            aux_kl_tau_scaled: true,
            lr: 1e-3,
            epochs: 2,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(CoreError::Config(format!("tau {} must be > 0", self.tau)));
        }
        if !(0.0 <= self.rho_min && self.rho_min <= self.rho_max && self.rho_max <= 1.0) {
            return Err(CoreError::Config(format!(
                "rho bounds [{}, {}] outside 0 <= min <= max <= 1",
                self.rho_min, self.rho_max
            )));
        }
        if self.epochs < 1 {
            return Err(CoreError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(CoreError::Config("batch_size must be >= 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(CoreError::Config("epsilon must be > 0".into()));
        }
        Ok(())
    }
}

/// Diagnostics from one distillation step.
#[derive(Debug, Clone)]
pub struct StepDiagnostics {
    pub loss: f64,
    pub r: Vec<f64>,
    pub rho: Vec<f64>,
    pub mask_sizes: Vec<usize>,
    /// Current position minus masked position, pooled over the sequence.
    pub masked_distances: Vec<usize>,
    /// Mean over response rows of attention mass on visual columns in the
    /// masked (gradient) forward.
    pub visual_attention_mass: f64,
}

impl StepDiagnostics {
    pub fn check(&self, exclude_immediate_prev: bool) -> Result<()> {
        if exclude_immediate_prev && self.masked_distances.iter().any(|&d| d < 2) {
            return Err(CoreError::Invariant(
                "masked distance < 2 with immediate-previous exclusion on".into(),
            ));
        }
        Ok(())
    }
}

/// Sequence rows whose logits predict the response tokens: for response
/// positions 1..=N (absolute a_n) these are rows a_n − 1.
pub fn prediction_rows(seq: &Sequence) -> Result<Vec<usize>> {
    let rs = seq.layout.response_start();
    let n = seq.layout.response_len();
    if n == 0 {
        return Err(CoreError::Precondition("empty response span".into()));
    }
    if rs == 0 {
        return Err(CoreError::Precondition(
            "response span starts at position 0; nothing precedes it".into(),
        ));
    }
    Ok((rs - 1..rs + n - 1).collect())
}

fn rows_subset(t: &Tensor64, rows: &[usize]) -> Tensor64 {
    let cols = t.cols();
    let mut data = Vec::with_capacity(rows.len() * cols);
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Tensor::new(vec![rows.len(), cols], data).expect("subset")
}

fn scale_tensor(t: &Tensor64, c: f64) -> Tensor64 {
    let data = t.data().iter().map(|&v| v * c).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

/// KD loss on plain logit blocks: mean over rows of the chosen KL between
/// τ-scaled softmax distributions. No τ² rescaling.
pub fn kd_loss(
    student_logits: &Tensor64,
    teacher_logits: &Tensor64,
    tau: f64,
    kind: LossKind,
) -> Result<f64> {
    if student_logits.shape() != teacher_logits.shape() {
        return Err(CoreError::Dimension {
            context: "kd_loss".into(),
            left: student_logits.shape().to_vec(),
            right: teacher_logits.shape().to_vec(),
        });
    }
    let p_s = softmax_rows(&scale_tensor(student_logits, 1.0 / tau));
    let p_t = softmax_rows(&scale_tensor(teacher_logits, 1.0 / tau));
    let mean_kl = |p: &Tensor64, q: &Tensor64| -> f64 {
        let rows = p.rows();
        (0..rows)
            .map(|i| crate::tensor::reverse_kl_row(p.row(i), q.row(i)))
            .sum::<f64>()
            / rows as f64
    };
    Ok(match kind {
        LossKind::Reverse => mean_kl(&p_s, &p_t),
        LossKind::Forward => mean_kl(&p_t, &p_s),
        LossKind::Mixed => 0.5 * mean_kl(&p_s, &p_t) + 0.5 * mean_kl(&p_t, &p_s),
    })
}

/// Gradients and diagnostics of one distillation step, without applying the
/// optimizer. Pure in all model arguments.
pub struct StepOutcome {
    pub diagnostics: StepDiagnostics,
    /// Aligned with the student's `named_params` order.
    pub grads: Vec<Vec<f64>>,
    pub selections: Option<SalientSelection<f64>>,
    pub schedule: Option<BudgetSchedule<f64>>,
}

/// Step choreography with an explicit auxiliary model (the weight-shared
/// default passes the student itself) and optionally precomputed teacher
/// prediction-row logits.
pub fn distill_grads(
    teacher: &Model64,
    student: &Model64,
    aux: &Model64,
    seq: &Sequence,
    cfg: &DistillConfig,
    rng: &mut CounterRng,
    teacher_rows_cache: Option<&Tensor64>,
) -> Result<StepOutcome> {
    cfg.validate()?;
    seq.layout.validate(seq.len(), true)?;
    let rows = prediction_rows(seq)?;
    let n_total = seq.len();
    let causal = MaskMatrix::causal(n_total);

    // (1) teacher forward, causal, no grad
    let teacher_rows = match teacher_rows_cache {
        Some(t) => t.clone(),
        None => {
            let t_out = forward(teacher, seq, &causal, false)?;
            rows_subset(&t_out.logits, &rows)
        }
    };

    // (2)+(3) auxiliary forward and mask construction, only when the mask
    // depends on it; r is otherwise measured on the gradient forward's own
    // causal logits for diagnostics.
    let mut trace: Option<DivergenceTrace<f64>> = None;
    let mut schedule: Option<BudgetSchedule<f64>> = None;
    let mut selections: Option<SalientSelection<f64>> = None;
    let tau_eff = if cfg.aux_kl_tau_scaled { cfg.tau } else { 1.0 };

    let mask = match cfg.mask_kind {
        MaskSetting::CausalOnly => causal.clone(),
        MaskSetting::RegionVisual => build_region_mask(Region::Visual, &seq.layout),
        MaskSetting::RegionQuestion => build_region_mask(Region::Question, &seq.layout),
        MaskSetting::Salient => {
            let aux_out = forward(aux, seq, &causal, true)?;
            let aux_rows = rows_subset(&aux_out.logits, &rows);
            let t = tokenwise_reverse_kl(&aux_rows, &teacher_rows, tau_eff)?;
            let s = self_paced_thresholds(&t, cfg.rho_min, cfg.rho_max, cfg.epsilon)?;
            let a_resp = extract_response_attention(&aux_out, &seq.layout)?;
            let rule = alt_threshold_modes(cfg.threshold_mode, cfg.threshold_param)?;
            let sel = select_for_rows(
                &a_resp,
                &s,
                &rule,
                cfg.selection_strategy,
                cfg.exclude_immediate_prev,
                rng,
            )?;
            let m = build_salient_mask(&sel, &seq.layout)?;
            trace = Some(t);
            schedule = Some(s);
            selections = Some(sel);
            m
        }
    };

    // (4) student forward under the mask, with grad and attention capture
    let pass = forward_pass(student, seq, &mask, true, true)?;
    let mut tape = pass.tape;
    let pred = tape.select_rows(pass.logits, &rows)?;
    let scaled = tape.scale(pred, 1.0 / cfg.tau);
    let p_s = tape.softmax_rows(scaled, None)?;
    let p_t_values = softmax_rows(&scale_tensor(&teacher_rows, 1.0 / cfg.tau));
    let p_t = tape.leaf(p_t_values, false);

    // (5) loss
    let loss_var = kd_loss_on_tape(&mut tape, p_s, p_t, cfg.loss_kind)?;
    let loss = tape.value(loss_var).data()[0];

    // diagnostics
    let r = match &trace {
        Some(t) => t.r.clone(),
        None => {
            // causal-only gradient forward doubles as the auxiliary pass;
            // region masks yield a masked-context analogue
            tokenwise_reverse_kl(tape.value(pred), &teacher_rows, tau_eff)?.r
        }
    };
    let rho = schedule.as_ref().map(|s| s.rho.clone()).unwrap_or_default();
    let (mask_sizes, masked_distances) = match &selections {
        Some(sel) => (
            sel.entries.iter().map(|e| e.masked.len()).collect(),
            sel.masked_distances(),
        ),
        None => (vec![0; rows.len()], Vec::new()),
    };
    let visual_attention_mass = {
        let avg = pass
            .attention_avg
            .as_ref()
            .expect("capture was requested");
        let (rs, re) = seq.layout.response;
        let (vs, ve) = seq.layout.visual;
        let mut total = 0.0;
        for row in rs..re {
            let mut mass = 0.0;
            for col in vs..ve {
                mass += avg.at(row, col);
            }
            total += mass;
        }
        total / (re - rs) as f64
    };

    if !loss.is_finite() {
        let diag = StepDiagnostics {
            loss,
            r,
            rho,
            mask_sizes,
            masked_distances,
            visual_attention_mass,
        };
        return Err(CoreError::TrainingAbort(format!(
            "non-finite loss {loss}; diagnostics: {diag:?}"
        )));
    }

    // (6) backward
    let grads = tape.backward(loss_var)?;
    let named = student.named_params();
    let grad_vecs: Vec<Vec<f64>> = pass
        .param_vars
        .iter()
        .zip(named.iter())
        .map(|(&var, (_, t))| {
            grads
                .get(var)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();
    let diagnostics = StepDiagnostics {
        loss,
        r,
        rho,
        mask_sizes,
        masked_distances,
        visual_attention_mass,
    };
    if grad_vecs
        .iter()
        .any(|g| g.iter().any(|v| !v.is_finite()))
    {
        return Err(CoreError::TrainingAbort(format!(
            "non-finite gradient; diagnostics: {diagnostics:?}"
        )));
    }

    Ok(StepOutcome {
        diagnostics,
        grads: grad_vecs,
        selections,
        schedule,
    })
}

fn kd_loss_on_tape(
    tape: &mut crate::autodiff::Tape<f64>,
    p_s: Var,
    p_t: Var,
    kind: LossKind,
) -> Result<Var> {
    Ok(match kind {
        LossKind::Reverse => {
            let kl = tape.reverse_kl_rows(p_s, p_t)?;
            tape.mean(kl)
        }
        LossKind::Forward => {
            let kl = tape.reverse_kl_rows(p_t, p_s)?;
            tape.mean(kl)
        }
        LossKind::Mixed => {
            let rev = tape.reverse_kl_rows(p_s, p_t)?;
            let rev = tape.mean(rev);
            let fwd = tape.reverse_kl_rows(p_t, p_s)?;
            let fwd = tape.mean(fwd);
            let rev = tape.scale(rev, 0.5);
            let fwd = tape.scale(fwd, 0.5);
            tape.add(rev, fwd)?
        }
    })
}

fn apply_grads(student: &mut Model64, grads: Vec<Vec<f64>>, opt: &mut Adam<f64>) -> Result<()> {
    let mut params = student.named_params_mut();
    if params.len() != grads.len() {
        return Err(CoreError::Precondition(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for ((_, tensor), grad) in params.iter_mut().zip(grads) {
        tensor.grad = Some(grad);
    }
    let mut refs: Vec<(&str, &mut Tensor64)> = params
        .iter_mut()
        .map(|(name, tensor)| (name.as_str(), &mut **tensor))
        .collect();
    opt.step(&mut refs)
}

/// One teacher→student distillation step with an optimizer update. The
/// auxiliary forward shares the live student weights.
pub fn distill_step(
    teacher: &Model64,
    student: &mut Model64,
    seq: &Sequence,
    cfg: &DistillConfig,
    opt: &mut Adam<f64>,
    rng: &mut CounterRng,
) -> Result<StepDiagnostics> {
    let out = distill_grads(teacher, student, student, seq, cfg, rng, None)?;
    apply_grads(student, out.grads, opt)?;
    Ok(out.diagnostics)
}

/// Self-distillation step: the full-context causal pass of the same model is
/// the detached self-teacher; gradients flow only through the masked branch.
/// Identical choreography to `distill_step` with the model as its own
/// (frozen-for-this-step) teacher.
pub fn self_distill_step(
    model: &mut Model64,
    seq: &Sequence,
    cfg: &DistillConfig,
    opt: &mut Adam<f64>,
    rng: &mut CounterRng,
) -> Result<StepDiagnostics> {
    let out = distill_grads(model, model, model, seq, cfg, rng, None)?;
    apply_grads(model, out.grads, opt)?;
    Ok(out.diagnostics)
}

// ── Teacher supervised training ─────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TeacherTrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Record mean training loss every this many optimizer steps.
    pub log_every: usize,
}

impl TeacherTrainConfig {
    pub fn desk(model: ModelConfig, seed: u64) -> Self {
        TeacherTrainConfig {
            model,
            lr: 1e-3,
            epochs: 2,
            batch_size: 8,
            seed,
            log_every: 50,
        }
    }
}

/// Next-token cross-entropy over response positions only. Epoch order is a
/// seeded shuffle; zero epochs returns the freshly initialized model.
pub fn train_teacher(
    cfg: &TeacherTrainConfig,
    corpus: &[Sequence],
) -> Result<(Model64, Vec<f64>)> {
    if corpus.is_empty() {
        return Err(CoreError::Data("empty training corpus".into()));
    }
    let mut model = Model::<f64>::build(cfg.model.clone())?;
    let mut opt = Adam::with_lr(cfg.lr);
    let mut interval_losses = Vec::new();
    let mut window = Vec::new();
    let shuffle_root = CounterRng::new(cfg.seed, 0x73687566); // "shuf"
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        shuffle_root.derive(epoch as u64).shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<Vec<Vec<f64>>> = None;
            let mut batch_loss = 0.0;
            for &idx in batch {
                let seq = &corpus[idx];
                let (loss, grads) = teacher_ce_grads(&model, seq)?;
                batch_loss += loss;
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (dst, src) in a.iter_mut().zip(grads) {
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let mut grads = acc.expect("nonempty batch");
            for g in grads.iter_mut() {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(CoreError::TrainingAbort(format!(
                    "non-finite teacher loss at step {step}"
                )));
            }
            apply_grads(&mut model, grads, &mut opt)?;
            window.push(batch_loss);
            step += 1;
            if step % cfg.log_every == 0 {
                interval_losses.push(window.iter().sum::<f64>() / window.len() as f64);
                window.clear();
            }
        }
    }
    if !window.is_empty() {
        interval_losses.push(window.iter().sum::<f64>() / window.len() as f64);
    }
    Ok((model, interval_losses))
}

fn teacher_ce_grads(model: &Model64, seq: &Sequence) -> Result<(f64, Vec<Vec<f64>>)> {
    let rows = prediction_rows(seq)?;
    let (rs, re) = seq.layout.response;
    let targets: Vec<usize> = (rs..re).map(|i| seq.token_ids[i] as usize).collect();
    let mask = MaskMatrix::causal(seq.len());
    let pass = forward_pass(model, seq, &mask, false, true)?;
    let mut tape = pass.tape;
    let pred = tape.select_rows(pass.logits, &rows)?;
    let ce = tape.cross_entropy_rows(pred, &targets)?;
    let loss_var = tape.mean(ce);
    let loss = tape.value(loss_var).data()[0];
    let grads = tape.backward(loss_var)?;
    let named = model.named_params();
    let grad_vecs = pass
        .param_vars
        .iter()
        .zip(named.iter())
        .map(|(&var, (_, t))| {
            grads
                .get(var)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();
    Ok((loss, grad_vecs))
}

// ── Distillation data pipeline ──────────────────────────────────────

#[derive(Debug, Clone)]
pub struct DistillSet {
    pub sequences: Vec<Sequence>,
    pub kept: usize,
    pub total: usize,
}

impl DistillSet {
    pub fn kept_ratio(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.kept as f64 / self.total as f64
        }
    }
}

/// Greedy-decode the teacher on each prompt and keep only traces whose final
/// answer matches gold and that terminate properly. The kept traces become
/// the distillation sequences (teacher-generated responses, not gold ones).
pub fn build_distill_set(
    teacher: &Model64,
    samples: &[TaskSample],
    max_new: usize,
) -> Result<DistillSet> {
    let total = samples.len();
    let mut sequences = Vec::new();
    for sample in samples {
        let prompt = corpus::prompt_of(sample);
        if prompt.len() + max_new > teacher.config.max_seq_len {
            return Err(CoreError::Capacity(format!(
                "prompt {} + max_new {max_new} exceeds max_seq_len {}",
                prompt.len(),
                teacher.config.max_seq_len
            )));
        }
        let decoded = crate::model::generate(teacher, &prompt, max_new, Some(specials::END))?;
        if decoded.last() != Some(&specials::END) {
            continue;
        }
        if corpus::answer_from_response(&decoded) != Some(sample.answer) {
            continue;
        }
        let mut ids = prompt.token_ids.clone();
        ids.extend_from_slice(&decoded);
        let layout = crate::seq::SegmentLayout::new(
            sample.visual.len(),
            sample.question.len(),
            decoded.len(),
        );
        sequences.push(Sequence {
            token_ids: ids,
            layout,
        });
    }
    let kept = sequences.len();
    if kept == 0 {
        return Err(CoreError::Data(format!(
            "no correct teacher traces out of {total} prompts (accuracy 0.000)"
        )));
    }
    Ok(DistillSet {
        sequences,
        kept,
        total,
    })
}

// ── Full training run ───────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Distill,
    SelfDistill,
}

#[derive(Debug, Clone, Copy)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: f64,
    pub mean_r: f64,
    pub mean_rho: f64,
    pub mean_mask_count: f64,
    pub mean_masked_distance: f64,
    pub visual_attention_mass: f64,
}

pub const METRICS_HEADER: &str =
    "step,loss,mean_r,mean_rho,mean_mask_count,mean_masked_distance,visual_attention_mass";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.loss,
            self.mean_r,
            self.mean_rho,
            self.mean_mask_count,
            self.mean_masked_distance,
            self.visual_attention_mass
        )
    }
}

#[derive(Debug)]
pub struct RunOutput {
    pub student: Model64,
    pub metrics: Vec<MetricsRow>,
    pub completed: bool,
    /// Abort description when training stopped on a non-finite loss; the
    /// student field then holds the last-good snapshot.
    pub abort: Option<String>,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Deterministic full run over the distillation set. Teacher prediction-row
/// logits are cached per sequence (the teacher is frozen); diagnostics are
/// aggregated every `diag_interval` optimizer steps.
pub fn run_training(
    cfg: &DistillConfig,
    mode: RunMode,
    teacher: Option<&Model64>,
    student: Model64,
    set: &DistillSet,
    diag_interval: usize,
) -> Result<RunOutput> {
    cfg.validate()?;
    if set.sequences.is_empty() {
        return Err(CoreError::Data("empty distillation set".into()));
    }
    if mode == RunMode::Distill && teacher.is_none() {
        return Err(CoreError::Precondition("distillation needs a teacher".into()));
    }
    let diag_interval = diag_interval.max(1);
    let mut student = student;
    let frozen_aux: Option<Model64> = if cfg.aux_weight_shared {
        None
    } else {
        Some(student.clone())
    };
    let mut opt = Adam::with_lr(cfg.lr);
    let shuffle_root = CounterRng::new(cfg.seed, 0x73687566);
    let mut sel_rng = CounterRng::new(cfg.seed, 0x73656c65); // "sele"
    let mut teacher_cache: Vec<Option<Tensor64>> = vec![None; set.sequences.len()];
    let mut metrics = Vec::new();
    let mut last_good = student.clone();
    let mut step = 0u64;

    let mut window: Vec<StepDiagnostics> = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..set.sequences.len()).collect();
        shuffle_root.derive(epoch as u64).shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<Vec<Vec<f64>>> = None;
            let mut batch_diags: Vec<StepDiagnostics> = Vec::new();
            for &idx in batch {
                let seq = &set.sequences[idx];
                if mode == RunMode::Distill && teacher_cache[idx].is_none() {
                    let rows = prediction_rows(seq)?;
                    let causal = MaskMatrix::causal(seq.len());
                    let t_out = forward(teacher.unwrap(), seq, &causal, false)?;
                    teacher_cache[idx] = Some(rows_subset(&t_out.logits, &rows));
                }
                let outcome = match mode {
                    RunMode::Distill => distill_grads(
                        teacher.unwrap(),
                        &student,
                        frozen_aux.as_ref().unwrap_or(&student),
                        seq,
                        cfg,
                        &mut sel_rng,
                        teacher_cache[idx].as_ref(),
                    ),
                    RunMode::SelfDistill => distill_grads(
                        &student,
                        &student,
                        frozen_aux.as_ref().unwrap_or(&student),
                        seq,
                        cfg,
                        &mut sel_rng,
                        None,
                    ),
                };
                let outcome = match outcome {
                    Ok(o) => o,
                    Err(CoreError::TrainingAbort(msg)) => {
                        return Ok(RunOutput {
                            student: last_good,
                            metrics,
                            completed: false,
                            abort: Some(msg),
                        });
                    }
                    Err(e) => return Err(e),
                };
                batch_diags.push(outcome.diagnostics);
                match acc.as_mut() {
                    None => acc = Some(outcome.grads),
                    Some(a) => {
                        for (dst, src) in a.iter_mut().zip(outcome.grads) {
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let mut grads = acc.expect("nonempty batch");
            for g in grads.iter_mut() {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
            apply_grads(&mut student, grads, &mut opt)?;
            step += 1;
            window.extend(batch_diags);
            if step % diag_interval as u64 == 0 {
                metrics.push(aggregate(step, &window));
                window.clear();
                last_good = student.clone();
            }
        }
    }
    if !window.is_empty() {
        metrics.push(aggregate(step, &window));
    }
    Ok(RunOutput {
        student,
        metrics,
        completed: true,
        abort: None,
    })
}

fn aggregate(step: u64, diags: &[StepDiagnostics]) -> MetricsRow {
    let losses: Vec<f64> = diags.iter().map(|d| d.loss).collect();
    let rs: Vec<f64> = diags.iter().flat_map(|d| d.r.iter().copied()).collect();
    let rhos: Vec<f64> = diags.iter().flat_map(|d| d.rho.iter().copied()).collect();
    let counts: Vec<f64> = diags
        .iter()
        .flat_map(|d| d.mask_sizes.iter().map(|&c| c as f64))
        .collect();
    let dists: Vec<f64> = diags
        .iter()
        .flat_map(|d| d.masked_distances.iter().map(|&c| c as f64))
        .collect();
    let vam: Vec<f64> = diags.iter().map(|d| d.visual_attention_mass).collect();
    MetricsRow {
        step,
        loss: mean(&losses),
        mean_r: mean(&rs),
        mean_rho: mean(&rhos),
        mean_mask_count: mean(&counts),
        mean_masked_distance: mean(&dists),
        visual_attention_mass: mean(&vam),
    }
}

/// Steps (1)–(3) only: run the mask-construction choreography without
/// touching the student. Used for mask dumps and masked-distance analysis of
/// trained checkpoints.
pub fn inspect_step(
    teacher: &Model64,
    student: &Model64,
    seq: &Sequence,
    cfg: &DistillConfig,
    rng: &mut CounterRng,
) -> Result<StepOutcome> {
    distill_grads(teacher, student, student, seq, cfg, rng, None)
}
