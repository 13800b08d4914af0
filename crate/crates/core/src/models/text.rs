use candle_core::{Device, Tensor};

use super::Architecture;
use crate::caption::CaptionRecord;
use crate::nn::{Init, ParamSource};
use crate::{Error, Result};

/// Mean-pooled token embeddings over a closed vocabulary.
#[derive(Clone, Debug)]
pub struct TextEmbedder {
    vocabulary: Vec<String>,
    table: Tensor,
}

impl TextEmbedder {
    pub fn new(arch: &Architecture, src: &mut dyn ParamSource) -> Result<Self> {
        let t = &arch.text;
        let scale = 1.0 / (t.dim as f64).sqrt();
        Ok(Self {
            vocabulary: t.vocabulary.clone(),
            table: src.tensor("text.table", &[t.vocabulary.len(), t.dim], Init::Normal(scale))?,
        })
    }

    pub fn dim(&self) -> usize {
        self.table.dims()[1]
    }

    /// Pooling weights over the vocabulary, `(1, V)`.
    fn weights(&self, caption: &CaptionRecord) -> Result<Vec<f32>> {
        let tokens = caption.tokens();
        let mut w = vec![0f32; self.vocabulary.len()];
        for tok in &tokens {
            let i = self
                .vocabulary
                .iter()
                .position(|v| v == tok)
                .ok_or_else(|| Error::OutOfVocabulary(tok.clone()))?;
            w[i] += 1.0;
        }
        if !tokens.is_empty() {
            let n = tokens.len() as f32;
            w.iter_mut().for_each(|v| *v /= n);
        }
        Ok(w)
    }

    /// Embeddings of several captions, `(B, D)`.
    pub fn embed_batch(&self, captions: &[&CaptionRecord]) -> Result<Tensor> {
        let mut all = Vec::with_capacity(captions.len() * self.vocabulary.len());
        for c in captions {
            all.extend(self.weights(c)?);
        }
        let w = Tensor::from_vec(all, (captions.len(), self.vocabulary.len()), &Device::Cpu)?
            .to_dtype(self.table.dtype())?;
        Ok(w.matmul(&self.table)?)
    }

    /// Embedding of one caption, `(1, D)`; the empty caption maps to zero.
    pub fn embed(&self, caption: &CaptionRecord) -> Result<Tensor> {
        self.embed_batch(&[caption])
    }
}
