//! Diagnostic quantities over trained checkpoints: visual-attention curves,
//! interval KL decay, masked-distance histograms, mean visual-attention maps
//! and answer accuracy. All emitted as CSV with header rows.

use std::collections::BTreeMap;
use std::io::Write;

use crate::corpus::{self, specials, TaskSample};
use crate::distill::{prediction_rows, Model64, StepDiagnostics};
use crate::error::{CoreError, Result};
use crate::masking::MaskMatrix;
use crate::model::{forward, generate};
use crate::schedule::tokenwise_reverse_kl;
use crate::seq::Sequence;
use crate::tensor::Tensor;

/// Per-response-position mean fraction of attention mass on visual columns,
/// with the number of contributing samples per position.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCurve {
    pub fraction: Vec<f64>,
    pub count: Vec<usize>,
}

impl AttentionCurve {
    pub fn mean(&self) -> f64 {
        let total: f64 = self
            .fraction
            .iter()
            .zip(&self.count)
            .map(|(&f, &c)| f * c as f64)
            .sum();
        let n: usize = self.count.iter().sum();
        if n == 0 {
            0.0
        } else {
            total / n as f64
        }
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "position,fraction,n")?;
        for (i, (&f, &c)) in self.fraction.iter().zip(&self.count).enumerate() {
            writeln!(w, "{},{},{}", i + 1, f, c)?;
        }
        Ok(())
    }
}

/// Forward each sample under the causal mask with attention capture; the
/// visual fraction at a response position is the visual-column mass of that
/// row in the layer/head-averaged map (rows are unit mass, so this is a
/// fraction in [0, 1]).
pub fn visual_attention_curve(model: &Model64, samples: &[Sequence]) -> Result<AttentionCurve> {
    if samples.is_empty() {
        return Err(CoreError::Data("no samples for attention curve".into()));
    }
    let mut fraction: Vec<f64> = Vec::new();
    let mut count: Vec<usize> = Vec::new();
    for seq in samples {
        seq.layout.validate(seq.len(), true)?;
        let mask = MaskMatrix::causal(seq.len());
        let out = forward(model, seq, &mask, true)?;
        let avg = out.attention_avg.expect("capture requested");
        let (rs, re) = seq.layout.response;
        let (vs, ve) = seq.layout.visual;
        for (pos, row) in (rs..re).enumerate() {
            let mut mass = 0.0;
            for col in vs..ve {
                mass += avg.at(row, col);
            }
            if pos >= fraction.len() {
                fraction.resize(pos + 1, 0.0);
                count.resize(pos + 1, 0);
            }
            fraction[pos] += mass;
            count[pos] += 1;
        }
    }
    for (f, &c) in fraction.iter_mut().zip(&count) {
        if c > 0 {
            *f /= c as f64;
        }
    }
    Ok(AttentionCurve { fraction, count })
}

/// Interval means of reverse KL over percentage-normalized response
/// positions; interval boundaries partition [0, 100%] evenly.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalKLProfile {
    pub mean_kl: Vec<f64>,
}

impl IntervalKLProfile {
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "interval,mean_kl")?;
        for (i, &v) in self.mean_kl.iter().enumerate() {
            writeln!(w, "{},{}", i + 1, v)?;
        }
        Ok(())
    }
}

/// Token-wise reverse KL (student ‖ teacher, τ-scaled) under causal masks,
/// bucketed by fractional response position and averaged per bucket across
/// traces. Traces shorter than the bucket count are assigned by fractional
/// position.
pub fn interval_kl_decay(
    teacher: &Model64,
    student: &Model64,
    traces: &[Sequence],
    k_intervals: usize,
    tau: f64,
) -> Result<IntervalKLProfile> {
    if traces.is_empty() {
        return Err(CoreError::Data("no traces for KL profile".into()));
    }
    if k_intervals == 0 {
        return Err(CoreError::Range("k_intervals must be >= 1".into()));
    }
    let mut sums = vec![0.0; k_intervals];
    let mut counts = vec![0usize; k_intervals];
    for seq in traces {
        let rows = prediction_rows(seq)?;
        let causal = MaskMatrix::causal(seq.len());
        let t_logits = forward(teacher, seq, &causal, false)?.logits;
        let s_logits = forward(student, seq, &causal, false)?.logits;
        let subset = |t: &Tensor<f64>| {
            let cols = t.cols();
            let mut data = Vec::with_capacity(rows.len() * cols);
            for &r in &rows {
                data.extend_from_slice(t.row(r));
            }
            Tensor::new(vec![rows.len(), cols], data).expect("subset")
        };
        let trace = tokenwise_reverse_kl(&subset(&s_logits), &subset(&t_logits), tau)?;
        let n = trace.r.len();
        for (i, &r) in trace.r.iter().enumerate() {
            let bucket = ((i as f64 / n as f64) * k_intervals as f64).floor() as usize;
            let bucket = bucket.min(k_intervals - 1);
            sums[bucket] += r;
            counts[bucket] += 1;
        }
    }
    let mean_kl = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    Ok(IntervalKLProfile { mean_kl })
}

/// Histogram of (current position − masked position) over a diagnostics
/// stream.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DistanceHistogram {
    pub counts: BTreeMap<usize, u64>,
}

impl DistanceHistogram {
    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "distance,count")?;
        for (d, c) in &self.counts {
            writeln!(w, "{d},{c}")?;
        }
        Ok(())
    }
}

pub fn masked_distance_histogram<'a>(
    diagnostics: impl IntoIterator<Item = &'a StepDiagnostics>,
) -> DistanceHistogram {
    let mut counts = BTreeMap::new();
    for diag in diagnostics {
        for &d in &diag.masked_distances {
            *counts.entry(d).or_insert(0) += 1;
        }
    }
    DistanceHistogram { counts }
}

/// Per-visual-position mean attention over all response rows of the
/// layer/head-averaged map.
pub fn mean_visual_attention_map(model: &Model64, seq: &Sequence) -> Result<Vec<f64>> {
    seq.layout.validate(seq.len(), true)?;
    let mask = MaskMatrix::causal(seq.len());
    let out = forward(model, seq, &mask, true)?;
    let avg = out.attention_avg.expect("capture requested");
    let (rs, re) = seq.layout.response;
    let (vs, ve) = seq.layout.visual;
    let mut map = vec![0.0; ve - vs];
    for row in rs..re {
        for (i, col) in (vs..ve).enumerate() {
            map[i] += avg.at(row, col);
        }
    }
    let n = (re - rs) as f64;
    for v in map.iter_mut() {
        *v /= n;
    }
    Ok(map)
}

pub fn write_visual_map_csv<W: Write>(map: &[f64], w: &mut W) -> std::io::Result<()> {
    writeln!(w, "visual_position,mean_attention")?;
    for (i, &v) in map.iter().enumerate() {
        writeln!(w, "{i},{v}")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accuracy {
    pub n: usize,
    pub correct: usize,
}

impl Accuracy {
    pub fn fraction(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.correct as f64 / self.n as f64
        }
    }

    pub fn write_csv<W: Write>(&self, split: &str, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "split,n,correct,fraction")?;
        writeln!(w, "{},{},{},{}", split, self.n, self.correct, self.fraction())
    }
}

/// Greedy-decode each prompt; a sample is correct iff the token in the
/// answer slot of the decoded trace equals gold.
pub fn answer_accuracy(model: &Model64, samples: &[TaskSample], max_new: usize) -> Result<Accuracy> {
    if samples.is_empty() {
        return Err(CoreError::Data("empty evaluation split".into()));
    }
    let mut correct = 0;
    for sample in samples {
        let prompt = corpus::prompt_of(sample);
        let budget = max_new.min(model.config.max_seq_len.saturating_sub(prompt.len()));
        if budget == 0 {
            continue;
        }
        let decoded = generate(model, &prompt, budget, Some(specials::END))?;
        if corpus::answer_from_response(&decoded) == Some(sample.answer) {
            correct += 1;
        }
    }
    Ok(Accuracy {
        n: samples.len(),
        correct,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_sample, layout_of, CorpusParams, VocabSpec};
    use crate::model::{Model, ModelConfig};
    use crate::rng::CounterRng;
    use crate::seq::SegmentLayout;

    fn tiny_model(seed: u64) -> Model64 {
        Model::<f64>::build(ModelConfig {
            vocab_size: 64,
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            max_seq_len: 64,
            seed,
        })
        .unwrap()
    }

    /// Zero all parameters: attention becomes exactly uniform over the
    /// unmasked prefix at every head and layer.
    fn uniform_attention_model() -> Model64 {
        let mut m = tiny_model(0);
        for (_, p) in m.named_params_mut() {
            for v in p.data_mut().iter_mut() {
                *v = 0.0;
            }
        }
        m
    }

    fn demo_sequences(n: usize) -> Vec<Sequence> {
        let params = CorpusParams {
            n_facts: 3,
            hops: 2,
            vocab: VocabSpec::default(),
        };
        (0..n)
            .map(|i| {
                let mut rng = CounterRng::new(900 + i as u64, 0);
                layout_of(&gen_sample(&mut rng, &params).unwrap(), 64).unwrap()
            })
            .collect()
    }

    #[test]
    fn uniform_attention_gives_counting_fractions() {
        let model = uniform_attention_model();
        let seqs = demo_sequences(1);
        let curve = visual_attention_curve(&model, &seqs).unwrap();
        let layout = seqs[0].layout;
        let v = layout.visual_len() as f64;
        for (pos, &f) in curve.fraction.iter().enumerate() {
            // row rs+pos attends uniformly over rs+pos+1 visible positions
            let visible = (layout.response_start() + pos + 1) as f64;
            let expect = v / visible;
            assert!(
                (f - expect).abs() < 1e-9,
                "pos {pos}: {f} vs counting oracle {expect}"
            );
        }
    }

    #[test]
    fn empty_visual_span_gives_zero_curve() {
        let model = tiny_model(3);
        let seq = Sequence {
            token_ids: vec![6, 8, 1, 2, 3, 4],
            layout: SegmentLayout::new(0, 2, 4),
        };
        let curve = visual_attention_curve(&model, &[seq]).unwrap();
        assert!(curve.fraction.iter().all(|&f| f == 0.0));
    }

    #[test]
    fn curve_fractions_in_unit_interval_and_permutation_invariant() {
        let model = tiny_model(5);
        let mut seqs = demo_sequences(4);
        let a = visual_attention_curve(&model, &seqs).unwrap();
        seqs.reverse();
        let b = visual_attention_curve(&model, &seqs).unwrap();
        for (&x, &y) in a.fraction.iter().zip(&b.fraction) {
            assert!((0.0..=1.0).contains(&x));
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_profile_zero_for_identical_models_and_single_bucket_matches_mean() {
        let model = tiny_model(8);
        let seqs = demo_sequences(3);
        let profile = interval_kl_decay(&model, &model, &seqs, 8, 2.0).unwrap();
        assert!(profile.mean_kl.iter().all(|&v| v == 0.0));

        let other = tiny_model(9);
        let one = interval_kl_decay(&model, &other, &seqs, 1, 2.0).unwrap();
        let eight = interval_kl_decay(&model, &other, &seqs, 8, 2.0).unwrap();
        assert_eq!(one.mean_kl.len(), 1);
        assert!(one.mean_kl[0] > 0.0);
        assert_eq!(eight.mean_kl.len(), 8);
    }

    #[test]
    fn kl_profile_buckets_match_hand_computation() {
        // synthetic: bucket assignment for a 6-token trace into 3 buckets is
        // positions {0,1},{2,3},{4,5}
        let r = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let k = 3;
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (i, &v) in r.iter().enumerate() {
            let b = ((i as f64 / r.len() as f64) * k as f64).floor() as usize;
            sums[b.min(k - 1)] += v;
            counts[b.min(k - 1)] += 1;
        }
        assert_eq!(counts, vec![2, 2, 2]);
        assert_eq!(sums, vec![3.0, 7.0, 11.0]);
    }

    #[test]
    fn histogram_counts_and_exclusion() {
        let empty = StepDiagnostics {
            loss: 0.0,
            r: vec![],
            rho: vec![],
            mask_sizes: vec![],
            masked_distances: vec![],
            visual_attention_mass: 0.0,
        };
        let h = masked_distance_histogram([&empty]);
        assert!(h.counts.is_empty());

        let one = StepDiagnostics {
            masked_distances: vec![3],
            ..empty.clone()
        };
        let h = masked_distance_histogram([&one]);
        assert_eq!(h.counts.get(&3), Some(&1));
        assert_eq!(h.total(), 1);

        let many = StepDiagnostics {
            masked_distances: vec![2, 2, 5, 7, 2],
            ..empty
        };
        let h = masked_distance_histogram([&many]);
        assert_eq!(h.counts.get(&2), Some(&3));
        assert_eq!(h.counts.get(&1), None);
        assert_eq!(h.total(), 5);
    }

    #[test]
    fn uniform_attention_visual_map_is_row_consistent() {
        let model = uniform_attention_model();
        let seqs = demo_sequences(1);
        let map = mean_visual_attention_map(&model, &seqs[0]).unwrap();
        let layout = seqs[0].layout;
        // every visual column gets mean over rows of 1/(row context size)
        let rs = layout.response_start();
        let n_resp = layout.response_len();
        let expect: f64 = (0..n_resp)
            .map(|p| 1.0 / (rs + p + 1) as f64)
            .sum::<f64>()
            / n_resp as f64;
        for &v in &map {
            assert!((v - expect).abs() < 1e-9);
            assert!(v >= 0.0);
        }
        assert_eq!(map.len(), layout.visual_len());
    }

    #[test]
    fn rigged_accuracy_endpoints() {
        let params = CorpusParams {
            n_facts: 3,
            hops: 2,
            vocab: VocabSpec::default(),
        };
        let samples: Vec<_> = (0..10)
            .map(|i| {
                let mut rng = CounterRng::new(70 + i, 0);
                gen_sample(&mut rng, &params).unwrap()
            })
            .collect();

        // rig: constant argmax at a fixed wrong token -> malformed trace -> 0.0
        let mut wrong = tiny_model(1);
        for (_, p) in wrong.named_params_mut() {
            for v in p.data_mut().iter_mut() {
                *v = 0.0;
            }
        }
        wrong.final_bias.data_mut()[0] = 1.0;
        let d = wrong.config.d_model;
        wrong.tok_embed.data_mut()[10 * d] = 1.0;
        let acc = answer_accuracy(&wrong, &samples, 30).unwrap();
        assert_eq!(acc.correct, 0);

        // the gold-emitting case is covered at pipeline level where a trained
        // teacher reproduces its own traces; here check the CSV shape
        let mut buf = Vec::new();
        acc.write_csv("eval", &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("split,n,correct,fraction\n"));
        assert!(text.contains("eval,10,0,0"));
    }
}
