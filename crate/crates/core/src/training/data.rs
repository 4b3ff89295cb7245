//! Turning corpora into tokenised training sequences and batch orders.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ForgeError, Result};
use crate::multimodal::{assemble_sequence, ChatTemplate, MultimodalSequence};
use crate::synth_data::{TextInstruction, Tokenizer, VqaInstruction};

pub fn text_sequences(
    items: &[TextInstruction],
    tokenizer: &Tokenizer,
    template: &ChatTemplate,
) -> Result<Vec<MultimodalSequence>> {
    items
        .iter()
        .map(|it| assemble_sequence(template, None, &it.question, Some(&it.response), tokenizer))
        .collect()
}

pub fn vqa_sequences(
    items: &[VqaInstruction],
    tokenizer: &Tokenizer,
    template: &ChatTemplate,
) -> Result<Vec<MultimodalSequence>> {
    items
        .iter()
        .map(|it| assemble_sequence(template, Some(&it.image), &it.question, Some(&it.response), tokenizer))
        .collect()
}

/// Alternates vision-language and text items (equal counts, truncated to
/// the shorter list) for the first stage's two-stream mix.
pub fn mix_half_and_half(vl: &[MultimodalSequence], text: &[MultimodalSequence]) -> Vec<MultimodalSequence> {
    vl.iter()
        .zip(text)
        .flat_map(|(a, b)| [a.clone(), b.clone()])
        .collect()
}

/// Deterministic batch order: the run seed shuffles the corpus once and the
/// first `⌊fraction·n⌋` items form the stage's data; each epoch reshuffles
/// that subset. The last partial batch of an epoch is dropped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchOrder {
    selected: Vec<usize>,
    batch_size: usize,
    seed: u64,
}

impl BatchOrder {
    pub fn new(n_items: usize, data_fraction: f64, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(ForgeError::Config("batch_size must be positive".into()));
        }
        let mut idx: Vec<usize> = (0..n_items).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        idx.truncate((data_fraction * n_items as f64).floor() as usize);
        Ok(Self {
            selected: idx,
            batch_size,
            seed,
        })
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.selected.len() / self.batch_size
    }

    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order = self.selected.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1 + epoch as u64);
        order.shuffle(&mut rng);
        order
    }

    /// Item indices of 0-based `step`.
    pub fn batch(&self, step: usize) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let order = self.epoch_order(step / spe);
        let b = step % spe;
        order[b * self.batch_size..(b + 1) * self.batch_size].to_vec()
    }
}
