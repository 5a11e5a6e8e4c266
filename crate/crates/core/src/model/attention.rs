use crate::error::{GiftError, Result};
use crate::model::layout::SegmentLayout;
use crate::tensors::DenseTensor;

/// Row sums of captured causal rows must be within this of one.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

/// Captured attention `A[layer][head][row][col]` for a causal sequence,
/// together with the layout it was captured under.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor {
    layers: usize,
    heads: usize,
    seq_len: usize,
    data: Vec<f32>,
    layout: SegmentLayout,
}

impl AttentionTensor {
    /// Build and validate: non-negative, finite, zero above the diagonal,
    /// rows summing to one within [`ROW_SUM_TOLERANCE`].
    pub fn new(
        layers: usize,
        heads: usize,
        seq_len: usize,
        data: Vec<f32>,
        layout: SegmentLayout,
    ) -> Result<Self> {
        let t = Self::new_unchecked(layers, heads, seq_len, data, layout)?;
        t.validate()?;
        Ok(t)
    }

    pub(crate) fn new_unchecked(
        layers: usize,
        heads: usize,
        seq_len: usize,
        data: Vec<f32>,
        layout: SegmentLayout,
    ) -> Result<Self> {
        if layers == 0 || heads == 0 || seq_len == 0 {
            return Err(GiftError::Shape("attention extents must be positive".into()));
        }
        if data.len() != layers * heads * seq_len * seq_len {
            return Err(GiftError::Shape(format!(
                "attention data has {} values, expected {}x{}x{}x{}",
                data.len(),
                layers,
                heads,
                seq_len,
                seq_len
            )));
        }
        layout.validate(seq_len)?;
        Ok(Self { layers, heads, seq_len, data, layout })
    }

    pub fn validate(&self) -> Result<()> {
        for l in 0..self.layers {
            for h in 0..self.heads {
                for i in 0..self.seq_len {
                    let row = self.row(l, h, i);
                    let mut sum = 0.0f64;
                    for (j, &a) in row.iter().enumerate() {
                        if !a.is_finite() || a < 0.0 {
                            return Err(GiftError::InvalidInput(format!(
                                "attention[{l}][{h}][{i}][{j}] = {a} is not a valid weight"
                            )));
                        }
                        if j > i && a != 0.0 {
                            return Err(GiftError::InvalidInput(format!(
                                "attention[{l}][{h}][{i}][{j}] violates causality"
                            )));
                        }
                        sum += a as f64;
                    }
                    if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                        return Err(GiftError::InvalidInput(format!(
                            "attention row [{l}][{h}][{i}] sums to {sum}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn from_dense(tensor: DenseTensor, layout: SegmentLayout) -> Result<Self> {
        let dims = tensor.dims().to_vec();
        if dims.len() != 4 || dims[2] != dims[3] {
            return Err(GiftError::Shape(format!(
                "attention tensor must be [layers, heads, n, n], got {dims:?}"
            )));
        }
        let (_, data) = tensor.into_parts();
        Self::new(dims[0], dims[1], dims[2], data, layout)
    }

    pub fn to_dense(&self) -> DenseTensor {
        DenseTensor::new(
            vec![self.layers, self.heads, self.seq_len, self.seq_len],
            self.data.clone(),
        )
        .expect("validated attention is a valid dense tensor")
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn layout(&self) -> &SegmentLayout {
        &self.layout
    }

    fn offset(&self, layer: usize, head: usize, row: usize) -> usize {
        ((layer * self.heads + head) * self.seq_len + row) * self.seq_len
    }

    #[inline]
    pub fn get(&self, layer: usize, head: usize, row: usize, col: usize) -> f32 {
        self.data[self.offset(layer, head, row) + col]
    }

    /// Full-width row (zeros past the diagonal).
    #[inline]
    pub fn row(&self, layer: usize, head: usize, row: usize) -> &[f32] {
        let o = self.offset(layer, head, row);
        &self.data[o..o + self.seq_len]
    }

    pub(crate) fn row_mut(&mut self, layer: usize, head: usize, row: usize) -> &mut [f32] {
        let o = self.offset(layer, head, row);
        &mut self.data[o..o + self.seq_len]
    }

    pub fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.layers {
            return Err(GiftError::LayerOutOfRange { layer, available: self.layers });
        }
        Ok(())
    }
}

/// Per-head attention rows for a single query position.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadRows {
    heads: usize,
    len: usize,
    data: Vec<f32>,
}

impl HeadRows {
    pub fn new(heads: usize, len: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != heads * len {
            return Err(GiftError::Shape(format!(
                "head rows hold {} values, expected {heads}x{len}",
                data.len()
            )));
        }
        Ok(Self { heads, len, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let len = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != len) {
            return Err(GiftError::Shape("head rows differ in length".into()));
        }
        Self::new(rows.len(), len, rows.concat())
    }

    pub fn zeros(heads: usize, len: usize) -> Self {
        Self { heads, len, data: vec![0.0; heads * len] }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Number of attended positions (current position + 1).
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn row(&self, head: usize) -> &[f32] {
        &self.data[head * self.len..(head + 1) * self.len]
    }

    pub fn row_mut(&mut self, head: usize) -> &mut [f32] {
        &mut self.data[head * self.len..(head + 1) * self.len]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Attention mass of `head` over `range`, accumulated in f64.
    pub fn mass(&self, head: usize, range: std::ops::Range<usize>) -> f64 {
        self.row(head)[range].iter().map(|&a| a as f64).sum()
    }
}
