//! Salient reasoning-prefix mask construction.
//!
//! The student's attention mask extends the causal mask by additionally
//! blocking, for each response row, the prefix positions that received the
//! highest attention in the auxiliary forward — greedily collected until
//! their cumulative normalized attention reaches that row's budget ρ_n.
//! Region masks (visual / question) and alternative selection strategies
//! cover the ablation axes.

use std::collections::BTreeSet;
use std::io::Write;
use std::rc::Rc;

use crate::error::{CoreError, Result};
use crate::num::Scalar;
use crate::rng::CounterRng;
use crate::schedule::{BudgetSchedule, ThresholdRule};
use crate::seq::SegmentLayout;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Causal,
    Salient,
    RegionVisual,
    RegionQuestion,
}

/// N×N additive attention mask over {0, -inf}, stored as blocked flags.
/// Entries strictly above the diagonal are blocked for every kind.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskMatrix {
    n: usize,
    blocked: Vec<bool>,
    pub kind: MaskKind,
}

impl MaskMatrix {
    pub fn causal(n: usize) -> Self {
        let mut blocked = vec![false; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                blocked[i * n + j] = true;
            }
        }
        MaskMatrix {
            n,
            blocked,
            kind: MaskKind::Causal,
        }
    }

    /// Build from raw blocked flags (row-major n×n). No structural checks;
    /// use `validate_structure` where they matter.
    pub fn from_blocked(n: usize, blocked: Vec<bool>, kind: MaskKind) -> Result<Self> {
        if blocked.len() != n * n {
            return Err(CoreError::Dimension {
                context: "mask flags".into(),
                left: vec![n, n],
                right: vec![blocked.len()],
            });
        }
        Ok(MaskMatrix { n, blocked, kind })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn is_blocked(&self, row: usize, col: usize) -> bool {
        self.blocked[row * self.n + col]
    }

    pub fn blocked_flags(&self) -> Rc<Vec<bool>> {
        Rc::new(self.blocked.clone())
    }

    /// Materialize as an additive tensor with 0 / -inf entries.
    pub fn to_additive<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .blocked
            .iter()
            .map(|&b| if b { T::neg_infinity() } else { T::zero() })
            .collect();
        Tensor::new(vec![self.n, self.n], data).expect("square")
    }

    /// Number of blocked entries in excess of the causal pattern.
    pub fn extra_blocked(&self) -> usize {
        let mut count = 0;
        for i in 0..self.n {
            for j in 0..=i {
                if self.blocked[i * self.n + j] {
                    count += 1;
                }
            }
        }
        count
    }

    /// Structural invariants: causal superset, open diagonal, and for salient
    /// masks the immediate-previous column (when excluded from masking) and
    /// the visual/question columns of response rows stay open.
    pub fn validate_structure(
        &self,
        layout: Option<&SegmentLayout>,
        exclude_immediate_prev: bool,
    ) -> Result<()> {
        let n = self.n;
        for i in 0..n {
            if self.blocked[i * n + i] {
                return Err(CoreError::Invariant(format!("diagonal blocked at {i}")));
            }
            for j in (i + 1)..n {
                if !self.blocked[i * n + j] {
                    return Err(CoreError::Invariant(format!(
                        "future position ({i},{j}) not blocked"
                    )));
                }
            }
        }
        if let Some(layout) = layout {
            if self.kind == MaskKind::Salient {
                let (rs, re) = layout.response;
                for row in rs..re {
                    if exclude_immediate_prev && row > 0 && self.blocked[row * n + row - 1] {
                        return Err(CoreError::Invariant(format!(
                            "immediate-previous column blocked at response row {row}"
                        )));
                    }
                    for col in 0..rs.min(row + 1) {
                        if self.blocked[row * n + col] {
                            return Err(CoreError::Invariant(format!(
                                "visual/question column {col} blocked at response row {row}"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Selection for one response position: which prefix positions are masked,
/// under which budget, and how much normalized attention that covered.
/// Prefix indices are response-relative: index i refers to response position
/// i + 1 (absolute position `response_start + i`).
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionEntry<T> {
    pub masked: Vec<usize>,
    pub rho: T,
    pub achieved_mass: T,
}

impl<T: Scalar> SelectionEntry<T> {
    pub fn empty(rho: T) -> Self {
        SelectionEntry {
            masked: Vec::new(),
            rho,
            achieved_mass: T::zero(),
        }
    }
}

/// Per-response-position selections, entry k belongs to response position
/// k + 1 (1-indexed n).
#[derive(Debug, Clone, PartialEq)]
pub struct SalientSelection<T> {
    pub entries: Vec<SelectionEntry<T>>,
}

impl<T: Scalar> SalientSelection<T> {
    pub fn response_len(&self) -> usize {
        self.entries.len()
    }

    /// Masked-prefix distances (current position − masked position) pooled
    /// over all response positions. With immediate-previous exclusion these
    /// are all ≥ 2.
    pub fn masked_distances(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for (k, entry) in self.entries.iter().enumerate() {
            let n = k + 1;
            for &i in &entry.masked {
                out.push(n - (i + 1));
            }
        }
        out
    }

    /// Debug/analysis dump: one CSV line per response position with its
    /// budget, achieved mass and the absolute masked positions.
    pub fn write_csv<W: Write>(&self, layout: &SegmentLayout, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "position,rho,achieved_mass,masked_positions")?;
        let rs = layout.response_start();
        for (k, entry) in self.entries.iter().enumerate() {
            let positions: Vec<String> = entry
                .masked
                .iter()
                .map(|&i| (rs + i).to_string())
                .collect();
            writeln!(
                w,
                "{},{},{},{}",
                k + 1,
                entry.rho.as_f64(),
                entry.achieved_mass.as_f64(),
                positions.join(";")
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionStrategy {
    HighAttention,
    LowAttention,
    MiddleAttention,
    Random,
    NonAdaptive,
}

impl std::str::FromStr for SelectionStrategy {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "high" | "high_attention" => Ok(SelectionStrategy::HighAttention),
            "low" | "low_attention" => Ok(SelectionStrategy::LowAttention),
            "middle" | "middle_attention" => Ok(SelectionStrategy::MiddleAttention),
            "random" => Ok(SelectionStrategy::Random),
            "non_adaptive" => Ok(SelectionStrategy::NonAdaptive),
            other => Err(CoreError::Enumeration(format!(
                "unknown selection strategy '{other}'"
            ))),
        }
    }
}

// ── Row normalization and greedy selection ──────────────────────────

/// Normalized prefix attention for response position `n` (1-indexed): row
/// n of the response-to-response map divided by its prefix sum over the
/// n−1 strictly earlier positions. `None` signals an all-zero prefix row;
/// the caller selects nothing.
pub fn normalize_prefix_row<T: Scalar>(a_resp: &Tensor<T>, n: usize) -> Result<Option<Vec<T>>> {
    if n < 2 || n > a_resp.rows() {
        return Err(CoreError::Precondition(format!(
            "normalize_prefix_row needs 2 <= n <= {}, got {n}",
            a_resp.rows()
        )));
    }
    let row = a_resp.row(n - 1);
    let prefix = &row[..n - 1];
    let total: T = prefix.iter().copied().sum();
    if total <= T::zero() {
        return Ok(None);
    }
    Ok(Some(prefix.iter().map(|&v| v / total).collect()))
}

/// Indices 0..len sorted by (weight descending, index ascending).
fn rank_descending<T: Scalar>(weights: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        weights[b]
            .partial_cmp(&weights[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

fn collect_until<T: Scalar>(
    order: impl IntoIterator<Item = usize>,
    weights: &[T],
    rho: T,
) -> SelectionEntry<T> {
    let mut cum = T::zero();
    let mut masked = Vec::new();
    for idx in order {
        if cum >= rho {
            break;
        }
        masked.push(idx);
        cum += weights[idx];
    }
    masked.sort_unstable();
    SelectionEntry {
        masked,
        rho,
        achieved_mass: cum,
    }
}

/// Greedy top-ρ selection: walk the descending-attention ordering (ties
/// broken by lower position), skipping excluded positions, until the
/// cumulative normalized weight first reaches ρ. If the eligible mass cannot
/// reach ρ the selection saturates to the full eligible set.
pub fn select_salient_prefixes<T: Scalar>(
    weights: &[T],
    rho: T,
    exclude: &BTreeSet<usize>,
) -> SelectionEntry<T> {
    let order = rank_descending(weights)
        .into_iter()
        .filter(|i| !exclude.contains(i));
    collect_until(order, weights, rho)
}

/// Ablation variants of the prefix picker. `HighAttention` is the real rule;
/// the others reorder the collection sequence. `NonAdaptive` is handled at
/// the sequence level (`select_for_rows`) because it needs the whole map.
pub fn select_variant_prefixes<T: Scalar>(
    weights: &[T],
    rho: T,
    strategy: SelectionStrategy,
    exclude: &BTreeSet<usize>,
    rng: &mut CounterRng,
) -> Result<SelectionEntry<T>> {
    let eligible: Vec<usize> = rank_descending(weights)
        .into_iter()
        .filter(|i| !exclude.contains(i))
        .collect();
    let entry = match strategy {
        SelectionStrategy::HighAttention => select_salient_prefixes(weights, rho, exclude),
        SelectionStrategy::LowAttention => {
            let order = eligible.into_iter().rev();
            collect_until(order, weights, rho)
        }
        SelectionStrategy::MiddleAttention => {
            // outward from the median rank of the eligible descending order
            if eligible.is_empty() {
                SelectionEntry::empty(rho)
            } else {
                let med = (eligible.len() - 1) / 2;
                let mut by_distance: Vec<usize> = (0..eligible.len()).collect();
                by_distance.sort_by_key(|&i| (i.abs_diff(med), i));
                let order = by_distance.into_iter().map(|i| eligible[i]);
                collect_until(order, weights, rho)
            }
        }
        SelectionStrategy::Random => {
            let mut shuffled = eligible;
            rng.shuffle(&mut shuffled);
            collect_until(shuffled, weights, rho)
        }
        SelectionStrategy::NonAdaptive => {
            return Err(CoreError::Enumeration(
                "non_adaptive is sequence-level; use select_for_rows".into(),
            ))
        }
    };
    Ok(entry)
}

/// Selection under an alternative threshold rule (Table-style ablations):
/// mask every eligible prefix whose normalized attention exceeds a fixed
/// threshold, or the top fraction of eligible prefixes by count.
fn select_with_rule<T: Scalar>(
    weights: &[T],
    rule: &ThresholdRule<T>,
    rho_for_row: T,
    strategy: SelectionStrategy,
    exclude: &BTreeSet<usize>,
    rng: &mut CounterRng,
) -> Result<SelectionEntry<T>> {
    match rule {
        ThresholdRule::CumulativeRatio => {
            select_variant_prefixes(weights, rho_for_row, strategy, exclude, rng)
        }
        ThresholdRule::AttentionThreshold(t) => {
            let masked: Vec<usize> = (0..weights.len())
                .filter(|i| !exclude.contains(i) && weights[*i] > *t)
                .collect();
            let achieved = masked.iter().map(|&i| weights[i]).sum();
            Ok(SelectionEntry {
                masked,
                rho: *t,
                achieved_mass: achieved,
            })
        }
        ThresholdRule::MaskingRatio(f) => {
            let eligible: Vec<usize> = rank_descending(weights)
                .into_iter()
                .filter(|i| !exclude.contains(i))
                .collect();
            let count = (f.as_f64() * eligible.len() as f64).floor() as usize;
            let mut masked: Vec<usize> = eligible.into_iter().take(count).collect();
            masked.sort_unstable();
            let achieved = masked.iter().map(|&i| weights[i]).sum();
            Ok(SelectionEntry {
                masked,
                rho: *f,
                achieved_mass: achieved,
            })
        }
    }
}

/// Per-sequence selection driver: normalizes each response row of the
/// response-to-response attention map and picks that row's masked prefixes.
///
/// Response position 1 has no prefixes and position 2 only the excluded
/// immediate-previous token, so both come out empty. The non-adaptive
/// strategy derives one global selection from the column-mean of the
/// normalized rows and intersects it with each row's eligible set.
pub fn select_for_rows<T: Scalar>(
    a_resp: &Tensor<T>,
    schedule: &BudgetSchedule<T>,
    rule: &ThresholdRule<T>,
    strategy: SelectionStrategy,
    exclude_immediate_prev: bool,
    rng: &mut CounterRng,
) -> Result<SalientSelection<T>> {
    let n_resp = a_resp.rows();
    if schedule.rho.len() != n_resp {
        return Err(CoreError::Dimension {
            context: "budget schedule vs response rows".into(),
            left: vec![schedule.rho.len()],
            right: vec![n_resp],
        });
    }

    let normalized: Vec<Option<Vec<T>>> = (1..=n_resp)
        .map(|n| {
            if n < 2 {
                Ok(None)
            } else {
                normalize_prefix_row(a_resp, n)
            }
        })
        .collect::<Result<_>>()?;

    let exclude_for = |n: usize| -> BTreeSet<usize> {
        let mut ex = BTreeSet::new();
        if exclude_immediate_prev && n >= 2 {
            ex.insert(n - 2); // prefix index of response position n−1
        }
        ex
    };

    if strategy == SelectionStrategy::NonAdaptive {
        // global weights: column mean of normalized prefix attention over the
        // rows where each column is a valid prefix
        let mut sums = vec![T::zero(); n_resp.saturating_sub(1)];
        let mut counts = vec![0usize; n_resp.saturating_sub(1)];
        for w in normalized.iter().flatten() {
            for (j, &v) in w.iter().enumerate() {
                sums[j] += v;
                counts[j] += 1;
            }
        }
        let mut global: Vec<T> = sums
            .iter()
            .zip(&counts)
            .map(|(&s, &c)| if c > 0 { s / T::of(c as f64) } else { T::zero() })
            .collect();
        let total: T = global.iter().copied().sum();
        if total > T::zero() {
            for v in global.iter_mut() {
                *v = *v / total;
            }
        }
        let mean_rho = if n_resp > 0 {
            schedule.rho.iter().copied().sum::<T>() / T::of(n_resp as f64)
        } else {
            T::zero()
        };
        let global_set = select_salient_prefixes(&global, mean_rho, &BTreeSet::new());

        let entries = (1..=n_resp)
            .map(|n| {
                let ex = exclude_for(n);
                let masked: Vec<usize> = global_set
                    .masked
                    .iter()
                    .copied()
                    .filter(|&i| i + 1 < n && !ex.contains(&i))
                    .collect();
                let achieved = match &normalized[n - 1] {
                    Some(w) => masked.iter().map(|&i| w[i]).sum(),
                    None => T::zero(),
                };
                SelectionEntry {
                    masked,
                    rho: mean_rho,
                    achieved_mass: achieved,
                }
            })
            .collect();
        return Ok(SalientSelection { entries });
    }

    let mut entries = Vec::with_capacity(n_resp);
    for n in 1..=n_resp {
        let rho = schedule.rho[n - 1];
        let entry = match &normalized[n - 1] {
            None => SelectionEntry::empty(rho),
            Some(weights) => {
                let ex = exclude_for(n);
                select_with_rule(weights, rule, rho, strategy, &ex, rng)?
            }
        };
        entries.push(entry);
    }
    Ok(SalientSelection { entries })
}

// ── Mask assembly ───────────────────────────────────────────────────

/// Extend the causal mask with the per-row salient selections. Visual and
/// question columns are never touched; non-response rows keep the plain
/// causal pattern.
pub fn build_salient_mask<T: Scalar>(
    selections: &SalientSelection<T>,
    layout: &SegmentLayout,
) -> Result<MaskMatrix> {
    layout.validate(layout.total(), true)?;
    if selections.response_len() != layout.response_len() {
        return Err(CoreError::Dimension {
            context: "selections vs response span".into(),
            left: vec![selections.response_len()],
            right: vec![layout.response_len()],
        });
    }
    let n = layout.total();
    let rs = layout.response_start();
    let mut mask = MaskMatrix::causal(n);
    mask.kind = MaskKind::Salient;
    for (k, entry) in selections.entries.iter().enumerate() {
        let row = rs + k;
        for &i in &entry.masked {
            if i >= k {
                return Err(CoreError::Invariant(format!(
                    "selection for response position {} references non-prefix position {}",
                    k + 1,
                    i + 1
                )));
            }
            mask.blocked[row * n + rs + i] = true;
        }
    }
    Ok(mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Visual,
    Question,
}

/// Causal mask plus blocking of an entire input region for all response
/// rows (masked-region ablation).
pub fn build_region_mask(region: Region, layout: &SegmentLayout) -> MaskMatrix {
    let n = layout.total();
    let mut mask = MaskMatrix::causal(n);
    let (span, kind) = match region {
        Region::Visual => (layout.visual, MaskKind::RegionVisual),
        Region::Question => (layout.question, MaskKind::RegionQuestion),
    };
    mask.kind = kind;
    let (rs, re) = layout.response;
    for row in rs..re {
        for col in span.0..span.1 {
            mask.blocked[row * n + col] = true;
        }
    }
    mask
}
