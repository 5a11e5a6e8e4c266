use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GiftError, Result};
use crate::tokenizer::Vocabulary;

/// Categorical features of one grid cell; `None` means the cell is empty.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    #[serde(default)]
    pub shape: Option<String>,
    #[serde(default)]
    pub color: Option<String>,
}

/// Scene file: grid dims plus per-cell features in row-major order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<Cell>,
}

/// A visual token: vocabulary ids of the cell's features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VisualCell {
    pub shape: Option<u32>,
    pub color: Option<u32>,
}

impl Scene {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self { rows, cols, cells: vec![Cell::default(); rows * cols] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(GiftError::InvalidInput("scene grid must be non-empty".into()));
        }
        if self.cells.len() != self.rows * self.cols {
            return Err(GiftError::InvalidInput(format!(
                "scene is {}x{} but lists {} cells",
                self.rows,
                self.cols,
                self.cells.len()
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let scene: Scene = serde_json::from_str(text)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Map feature words to vocabulary ids; unknown words are rejected.
    pub fn visual_cells(&self, vocab: &Vocabulary) -> Result<Vec<VisualCell>> {
        self.validate()?;
        let lookup = |w: &Option<String>| -> Result<Option<u32>> {
            match w {
                None => Ok(None),
                Some(w) => vocab
                    .id(&w.to_lowercase())
                    .map(Some)
                    .ok_or_else(|| GiftError::InvalidInput(format!("scene feature {w:?} is not in the vocabulary"))),
            }
        };
        self.cells
            .iter()
            .map(|c| Ok(VisualCell { shape: lookup(&c.shape)?, color: lookup(&c.color)? }))
            .collect()
    }
}
