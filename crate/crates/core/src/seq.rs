//! Token sequences and their visual / question / response segment layout.

use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};

/// Half-open spans partitioning `[0, n_total)` in order
/// visual → question → response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentLayout {
    pub visual: (usize, usize),
    pub question: (usize, usize),
    pub response: (usize, usize),
}

impl SegmentLayout {
    pub fn new(visual_len: usize, question_len: usize, response_len: usize) -> Self {
        let q_start = visual_len;
        let r_start = q_start + question_len;
        SegmentLayout {
            visual: (0, visual_len),
            question: (q_start, r_start),
            response: (r_start, r_start + response_len),
        }
    }

    pub fn total(&self) -> usize {
        self.response.1
    }

    pub fn visual_len(&self) -> usize {
        self.visual.1 - self.visual.0
    }

    pub fn question_len(&self) -> usize {
        self.question.1 - self.question.0
    }

    pub fn response_len(&self) -> usize {
        self.response.1 - self.response.0
    }

    pub fn response_start(&self) -> usize {
        self.response.0
    }

    pub fn is_visual(&self, pos: usize) -> bool {
        pos >= self.visual.0 && pos < self.visual.1
    }

    pub fn is_question(&self, pos: usize) -> bool {
        pos >= self.question.0 && pos < self.question.1
    }

    pub fn is_response(&self, pos: usize) -> bool {
        pos >= self.response.0 && pos < self.response.1
    }

    /// Spans must be contiguous, ordered and jointly exhaustive; the response
    /// span must be nonempty for training.
    pub fn validate(&self, n_total: usize, require_response: bool) -> Result<()> {
        if self.visual.0 != 0
            || self.visual.1 != self.question.0
            || self.question.1 != self.response.0
            || self.response.1 != n_total
        {
            return Err(CoreError::Invariant(format!(
                "segment spans {:?}/{:?}/{:?} do not partition [0, {n_total})",
                self.visual, self.question, self.response
            )));
        }
        if require_response && self.response_len() == 0 {
            return Err(CoreError::Invariant(
                "response span must be nonempty during training".into(),
            ));
        }
        Ok(())
    }
}

/// Token ids plus their segment layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sequence {
    pub token_ids: Vec<u32>,
    pub layout: SegmentLayout,
}

impl Sequence {
    pub fn new(token_ids: Vec<u32>, layout: SegmentLayout) -> Result<Self> {
        layout.validate(token_ids.len(), false)?;
        Ok(Sequence { token_ids, layout })
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Visual + question prefix, with an empty response span.
    pub fn prompt_only(&self) -> Sequence {
        let cut = self.layout.response.0;
        Sequence {
            token_ids: self.token_ids[..cut].to_vec(),
            layout: SegmentLayout::new(self.layout.visual_len(), self.layout.question_len(), 0),
        }
    }
}
