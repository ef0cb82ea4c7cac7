use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "v")]
    Vision,
    #[serde(rename = "t")]
    Text,
}

/// Per-token modality tags for a batch, with the token indices of each
/// modality precomputed in row order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModalityLayout {
    labels: Vec<Modality>,
    vision: Vec<usize>,
    text: Vec<usize>,
}

impl ModalityLayout {
    pub fn new(labels: Vec<Modality>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Input("batch has zero tokens".into()));
        }
        let mut vision = Vec::new();
        let mut text = Vec::new();
        for (i, m) in labels.iter().enumerate() {
            match m {
                Modality::Vision => vision.push(i),
                Modality::Text => text.push(i),
            }
        }
        Ok(Self {
            labels,
            vision,
            text,
        })
    }

    pub fn labels(&self) -> &[Modality] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn indices(&self, m: Modality) -> &[usize] {
        match m {
            Modality::Vision => &self.vision,
            Modality::Text => &self.text,
        }
    }

    pub fn count(&self, m: Modality) -> usize {
        self.indices(m).len()
    }

    pub fn has_both(&self) -> bool {
        !self.vision.is_empty() && !self.text.is_empty()
    }

    /// For every token, its row in the stacked `[vision rows; text rows]`
    /// layout.
    pub fn stacked_rows(&self) -> Vec<usize> {
        let nv = self.vision.len();
        let mut out = vec![0; self.labels.len()];
        for (r, &i) in self.vision.iter().enumerate() {
            out[i] = r;
        }
        for (r, &i) in self.text.iter().enumerate() {
            out[i] = nv + r;
        }
        out
    }

    /// Row index into a two-row `[vision; text]` table, per token.
    pub fn modality_rows(&self) -> Vec<usize> {
        self.labels
            .iter()
            .map(|m| match m {
                Modality::Vision => 0,
                Modality::Text => 1,
            })
            .collect()
    }
}
