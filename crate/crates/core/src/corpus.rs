//! Synthetic symbolic vision-language task with a planted textual shortcut.
//!
//! An "image" is a table of key→value facts; the question names a key. With
//! two-hop lookups the queried key chains through a second key before
//! reaching a value. The gold think trace restates every fact except the
//! second hop (and concludes with the first hop), so the first hop becomes
//! copyable from the response text while the final answer always requires a
//! lookup in the visual span. Facts are shuffled within the visual span per
//! sample so positional shortcuts cannot substitute for content attention.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::CounterRng;
use crate::seq::{SegmentLayout, Sequence};

pub mod specials {
    pub const PAD: u32 = 0;
    pub const BEGIN_THINK: u32 = 1;
    pub const END_THINK: u32 = 2;
    pub const BEGIN_ANSWER: u32 = 3;
    pub const END: u32 = 4;
    pub const ARROW: u32 = 5;
    pub const QUERY: u32 = 6;
    pub const COUNT: u32 = 7;
}

/// Symbol pools carved out of a flat id space: specials, then keys, then
/// values. Keys and values are disjoint, so a value token can never be
/// mistaken for a restated key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub n_keys: usize,
    pub n_values: usize,
}

impl Default for VocabSpec {
    fn default() -> Self {
        VocabSpec {
            n_keys: 24,
            n_values: 24,
        }
    }
}

impl VocabSpec {
    pub fn key_id(&self, i: usize) -> u32 {
        specials::COUNT + i as u32
    }

    pub fn value_id(&self, i: usize) -> u32 {
        specials::COUNT + (self.n_keys + i) as u32
    }

    pub fn is_key(&self, id: u32) -> bool {
        let base = specials::COUNT;
        id >= base && id < base + self.n_keys as u32
    }

    pub fn is_value(&self, id: u32) -> bool {
        let base = specials::COUNT + self.n_keys as u32;
        id >= base && id < base + self.n_values as u32
    }

    pub fn used_ids(&self) -> usize {
        specials::COUNT as usize + self.n_keys + self.n_values
    }

    /// Symbol names by id, padded to `vocab_size` with unused slots.
    pub fn names(&self, vocab_size: usize) -> Vec<String> {
        let mut out = vec![
            "<pad>".to_string(),
            "<think>".to_string(),
            "</think>".to_string(),
            "<answer>".to_string(),
            "<end>".to_string(),
            "->".to_string(),
            "?".to_string(),
        ];
        for i in 0..self.n_keys {
            out.push(format!("k{i}"));
        }
        for i in 0..self.n_values {
            out.push(format!("v{i}"));
        }
        while out.len() < vocab_size {
            out.push(format!("unused{}", out.len()));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSample {
    pub visual: Vec<u32>,
    pub question: Vec<u32>,
    pub response: Vec<u32>,
    pub answer: u32,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorpusParams {
    pub n_facts: usize,
    pub hops: u8,
    pub vocab: VocabSpec,
}

impl Default for CorpusParams {
    fn default() -> Self {
        CorpusParams {
            n_facts: 6,
            hops: 2,
            vocab: VocabSpec::default(),
        }
    }
}

impl CorpusParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.hops == 1 || self.hops == 2) {
            return Err(CoreError::Config(format!("hops must be 1 or 2, got {}", self.hops)));
        }
        if self.n_facts < self.hops as usize {
            return Err(CoreError::Config(format!(
                "n_facts {} < hops {}",
                self.n_facts, self.hops
            )));
        }
        if self.vocab.n_values < 2 {
            return Err(CoreError::Config(
                "value pool must hold at least 2 symbols".into(),
            ));
        }
        if self.n_facts > self.vocab.n_keys {
            return Err(CoreError::Config(format!(
                "n_facts {} exceeds key pool {}",
                self.n_facts, self.vocab.n_keys
            )));
        }
        Ok(())
    }

    pub fn visual_len(&self) -> usize {
        3 * self.n_facts
    }

    pub fn question_len(&self) -> usize {
        2
    }

    pub fn response_len(&self) -> usize {
        match self.hops {
            2 => 3 * self.n_facts + 5,
            _ => 3 * self.n_facts + 2,
        }
    }

    pub fn total_len(&self) -> usize {
        self.visual_len() + self.question_len() + self.response_len()
    }
}

/// One fact table lookup task. Deterministic given the rng state.
pub fn gen_sample(rng: &mut CounterRng, params: &CorpusParams) -> Result<TaskSample> {
    params.validate()?;
    let v = &params.vocab;
    let n = params.n_facts;
    let key_idx = rng.distinct(v.n_keys, n);
    let keys: Vec<u32> = key_idx.iter().map(|&i| v.key_id(i)).collect();

    // facts[i] = (lhs key, rhs symbol); lhs keys are all distinct. Decoy
    // values avoid the gold value so the restated facts never leak the
    // answer token into the think text.
    let gold_idx = rng.below(v.n_values);
    let decoy_value = |rng: &mut CounterRng| {
        let j = rng.below(v.n_values - 1);
        v.value_id(if j >= gold_idx { j + 1 } else { j })
    };
    let mut facts: Vec<(u32, u32)> = Vec::with_capacity(n);
    let (query_key, answer);
    if params.hops == 2 {
        let k_a = keys[0];
        let k_b = keys[1];
        let v_gold = v.value_id(gold_idx);
        facts.push((k_a, k_b));
        facts.push((k_b, v_gold));
        for &k in &keys[2..] {
            let dv = decoy_value(rng);
            facts.push((k, dv));
        }
        query_key = k_a;
        answer = v_gold;
    } else {
        let k_a = keys[0];
        let v_gold = v.value_id(gold_idx);
        facts.push((k_a, v_gold));
        for &k in &keys[1..] {
            let dv = decoy_value(rng);
            facts.push((k, dv));
        }
        query_key = k_a;
        answer = v_gold;
    }

    // visual span: facts in shuffled order
    let mut visual_order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut visual_order);
    let mut visual = Vec::with_capacity(3 * n);
    for &i in &visual_order {
        visual.extend_from_slice(&[facts[i].0, specials::ARROW, facts[i].1]);
    }

    let question = vec![specials::QUERY, query_key];

    // think restates every fact except the one that resolves the answer
    // (index 1 for two hops, index 0 for one hop), in shuffled order; for two
    // hops it then concludes with the first hop before answering.
    let hidden = if params.hops == 2 { 1 } else { 0 };
    let mut restate: Vec<usize> = (0..n).filter(|&i| i != hidden).collect();
    rng.shuffle(&mut restate);
    let mut response = Vec::with_capacity(params.response_len());
    response.push(specials::BEGIN_THINK);
    for &i in &restate {
        response.extend_from_slice(&[facts[i].0, specials::ARROW, facts[i].1]);
    }
    if params.hops == 2 {
        response.extend_from_slice(&[facts[0].0, specials::ARROW, facts[0].1]);
    }
    response.extend_from_slice(&[
        specials::END_THINK,
        specials::BEGIN_ANSWER,
        answer,
        specials::END,
    ]);
    debug_assert_eq!(response.len(), params.response_len());

    Ok(TaskSample {
        visual,
        question,
        response,
        answer,
        split: Split::Train,
    })
}

/// The answer a fact table implies for a question, resolving through chained
/// keys. `None` when the chain dangles.
pub fn resolve_answer(visual: &[u32], question: &[u32], vocab: &VocabSpec) -> Option<u32> {
    let lookup = |key: u32| -> Option<u32> {
        visual
            .chunks(3)
            .find(|c| c.len() == 3 && c[0] == key && c[1] == specials::ARROW)
            .map(|c| c[2])
    };
    let mut cur = *question.get(1)?;
    for _ in 0..2 {
        let next = lookup(cur)?;
        if vocab.is_value(next) {
            return Some(next);
        }
        cur = next;
    }
    None
}

/// Answer slot of a (decoded or gold) response: the token right after
/// `<answer>`, provided the trace is well-formed through `<end>`.
pub fn answer_from_response(tokens: &[u32]) -> Option<u32> {
    let ba = tokens.iter().position(|&t| t == specials::BEGIN_ANSWER)?;
    let answer = *tokens.get(ba + 1)?;
    if *tokens.get(ba + 2)? != specials::END {
        return None;
    }
    if answer < specials::COUNT {
        return None;
    }
    Some(answer)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorpusStats {
    pub total: usize,
    pub train: usize,
    pub eval: usize,
}

/// Write a JSONL corpus with a deterministic 90/10 train/eval split marker;
/// every tenth sample goes to eval. A sidecar `<path>.vocab.json` lists
/// symbol names by id.
pub fn gen_corpus(
    n: usize,
    seed: u64,
    params: &CorpusParams,
    vocab_size: usize,
    path: &Path,
) -> Result<CorpusStats> {
    params.validate()?;
    if params.vocab.used_ids() > vocab_size {
        return Err(CoreError::Config(format!(
            "vocab spec needs {} ids but vocab_size is {vocab_size}",
            params.vocab.used_ids()
        )));
    }
    let file = File::create(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let mut stats = CorpusStats {
        total: n,
        train: 0,
        eval: 0,
    };
    writeln!(
        w,
        "# corpus v1 seed={seed} n={n} n_facts={} hops={}",
        params.n_facts, params.hops
    )
    .map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let root = CounterRng::new(seed, 0x636f7270); // "corp"
    for i in 0..n {
        let mut rng = root.derive(i as u64);
        let mut sample = gen_sample(&mut rng, params)?;
        sample.split = if (i + 1) % 10 == 0 {
            stats.eval += 1;
            Split::Eval
        } else {
            stats.train += 1;
            Split::Train
        };
        let line = serde_json::to_string(&sample).expect("sample serializes");
        writeln!(w, "{line}").map_err(|e| CoreError::io(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| CoreError::io(path.display().to_string(), e))?;

    let vocab_path = sidecar_vocab_path(path);
    let names = params.vocab.names(vocab_size);
    let json = serde_json::to_string_pretty(&names).expect("names serialize");
    std::fs::write(&vocab_path, json)
        .map_err(|e| CoreError::io(vocab_path.display().to_string(), e))?;
    Ok(stats)
}

pub fn sidecar_vocab_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".vocab.json");
    std::path::PathBuf::from(os)
}

pub fn load_corpus(path: &Path) -> Result<Vec<TaskSample>> {
    let file = File::open(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CoreError::io(path.display().to_string(), e))?;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let sample: TaskSample = serde_json::from_str(&line).map_err(|e| {
            CoreError::Data(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        out.push(sample);
    }
    Ok(out)
}

/// Full training sequence (visual + question + gold response) with layout.
pub fn layout_of(sample: &TaskSample, max_seq_len: usize) -> Result<Sequence> {
    if sample.question.is_empty() {
        return Err(CoreError::Precondition("empty question".into()));
    }
    let total = sample.visual.len() + sample.question.len() + sample.response.len();
    if total > max_seq_len {
        return Err(CoreError::Capacity(format!(
            "sample of {total} tokens exceeds max_seq_len {max_seq_len}"
        )));
    }
    let mut ids = Vec::with_capacity(total);
    ids.extend_from_slice(&sample.visual);
    ids.extend_from_slice(&sample.question);
    ids.extend_from_slice(&sample.response);
    Sequence::new(
        ids,
        SegmentLayout::new(
            sample.visual.len(),
            sample.question.len(),
            sample.response.len(),
        ),
    )
}

/// Prompt sequence (visual + question) for decoding.
pub fn prompt_of(sample: &TaskSample) -> Sequence {
    let mut ids = Vec::with_capacity(sample.visual.len() + sample.question.len());
    ids.extend_from_slice(&sample.visual);
    ids.extend_from_slice(&sample.question);
    Sequence {
        token_ids: ids,
        layout: SegmentLayout::new(sample.visual.len(), sample.question.len(), 0),
    }
}
