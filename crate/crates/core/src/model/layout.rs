use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{GiftError, Result};

/// Half-open index span `[start, start + len)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }

    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn contains(&self, i: usize) -> bool {
        self.range().contains(&i)
    }
}

/// Where the system, visual, query and generated tokens sit in a sequence.
/// The four spans are contiguous and appear in that order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentLayout {
    pub system: Span,
    pub visual: Span,
    pub query: Span,
    pub generated: Span,
}

impl SegmentLayout {
    pub fn from_lengths(system: usize, visual: usize, query: usize, generated: usize) -> Self {
        let system = Span { start: 0, len: system };
        let visual = Span { start: system.end(), len: visual };
        let query = Span { start: visual.end(), len: query };
        let generated = Span { start: query.end(), len: generated };
        Self { system, visual, query, generated }
    }

    pub fn total_len(&self) -> usize {
        self.generated.end()
    }

    pub fn with_generated(&self, generated: usize) -> Self {
        let mut out = *self;
        out.generated = Span { start: self.query.end(), len: generated };
        out
    }

    /// Check contiguity and that the sequence is exactly covered.
    pub fn validate(&self, seq_len: usize) -> Result<()> {
        let spans = [self.system, self.visual, self.query, self.generated];
        let mut expected_start = 0;
        for s in spans {
            if s.start != expected_start {
                return Err(GiftError::Shape(format!("layout spans are not contiguous: {self:?}")));
            }
            expected_start = s.end();
        }
        if expected_start != seq_len {
            return Err(GiftError::Shape(format!(
                "layout covers {expected_start} positions but sequence has {seq_len}"
            )));
        }
        Ok(())
    }
}
