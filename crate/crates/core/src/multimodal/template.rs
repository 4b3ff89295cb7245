use serde::{Deserialize, Serialize};

use crate::error::{ForgeError, Result};
use crate::synth_data::tokenizer::{ASSISTANT, BOS, EOT, IMG, USER};
use crate::synth_data::{Raster, Tokenizer};

/// `<|bos|><|user|>\n{question}<|eot|><|assistant|>\n{response}<|eot|>`,
/// with `<|img|>`×`n_patches` right after `<|user|>\n` when an image is given.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTemplate {
    pub n_patches: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultimodalSequence {
    pub token_ids: Vec<u32>,
    /// `(start, length)` of the image placeholder run.
    pub image_span: Option<(usize, usize)>,
    /// `loss_mask[t]`: token `t` is a prediction target (scored from row `t − 1`).
    pub loss_mask: Vec<bool>,
    /// `(start, length)` spans of response tokens plus their end-of-turn marker.
    pub response_groups: Vec<(usize, usize)>,
    pub image: Option<Raster>,
}

impl MultimodalSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Number of positions scored by the loss.
    pub fn n_targets(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

impl ChatTemplate {
    /// The rendered text, with special markers, for inspection and fixtures.
    pub fn render_text(&self, has_image: bool, question: &str, response: Option<&str>) -> String {
        let img = if has_image { IMG.repeat(self.n_patches) } else { String::new() };
        let mut s = format!("{BOS}{USER}\n{img}{question}{EOT}{ASSISTANT}\n");
        if let Some(r) = response {
            s.push_str(r);
            s.push_str(EOT);
        }
        s
    }
}

/// Tokenise one turn under `template`. Without a response the sequence ends
/// at the assistant header and serves as a generation prompt.
pub fn assemble_sequence(
    template: &ChatTemplate,
    image: Option<&Raster>,
    question: &str,
    response: Option<&str>,
    tokenizer: &Tokenizer,
) -> Result<MultimodalSequence> {
    if question.is_empty() {
        return Err(ForgeError::Assembly("a turn needs a non-empty question".into()));
    }
    if response.is_some_and(str::is_empty) {
        return Err(ForgeError::Assembly("response must be non-empty when given".into()));
    }
    if image.is_some() && template.n_patches == 0 {
        return Err(ForgeError::Assembly("template has no image slots".into()));
    }
    let sp = |name| tokenizer.special_id(name);
    let mut ids = vec![sp(BOS)?, sp(USER)?];
    ids.extend(tokenizer.encode("\n")?);
    let image_span = image.map(|_| (ids.len(), template.n_patches));
    if image.is_some() {
        ids.extend(std::iter::repeat(sp(IMG)?).take(template.n_patches));
    }
    ids.extend(tokenizer.encode(question)?);
    ids.push(sp(EOT)?);
    ids.push(sp(ASSISTANT)?);
    ids.extend(tokenizer.encode("\n")?);
    let mut loss_mask = vec![false; ids.len()];
    let mut response_groups = Vec::new();
    if let Some(r) = response {
        let start = ids.len();
        ids.extend(tokenizer.encode(r)?);
        ids.push(sp(EOT)?);
        loss_mask.resize(ids.len(), true);
        response_groups.push((start, ids.len() - start));
    }
    Ok(MultimodalSequence {
        token_ids: ids,
        image_span,
        loss_mask,
        response_groups,
        image: image.cloned(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_turn_masks_response_and_eot() {
        let tok = Tokenizer::standard();
        let t = ChatTemplate { n_patches: 16 };
        let s = assemble_sequence(&t, None, "Say red", Some("red"), &tok).unwrap();
        assert!(s.image_span.is_none());
        let masked: Vec<u32> = s.token_ids.iter().zip(&s.loss_mask).filter(|(_, &m)| m).map(|(&i, _)| i).collect();
        let mut want = tok.encode("red").unwrap();
        want.push(tok.special_id(EOT).unwrap());
        assert_eq!(masked, want);
        assert_eq!(s.response_groups, vec![(s.len() - 4, 4)]);
        let text = tok.decode(&s.token_ids).unwrap();
        assert_eq!(text, t.render_text(false, "Say red", Some("red")));
    }

    #[test]
    fn image_turn_has_placeholder_run() {
        let tok = Tokenizer::standard();
        let t = ChatTemplate { n_patches: 16 };
        let img = Raster::blank(32, 32, 1);
        let s = assemble_sequence(&t, Some(&img), "How many shapes?", Some("2"), &tok).unwrap();
        let (start, len) = s.image_span.unwrap();
        assert_eq!((start, len), (3, 16));
        let img_id = tok.special_id(IMG).unwrap();
        assert_eq!(s.token_ids.iter().filter(|&&i| i == img_id).count(), 16);
        assert!(s.token_ids[start..start + len].iter().all(|&i| i == img_id));
        assert!(!s.loss_mask[start..start + len].iter().any(|&m| m));
    }

    #[test]
    fn malformed_turns_are_rejected() {
        let tok = Tokenizer::standard();
        let t = ChatTemplate { n_patches: 16 };
        assert!(matches!(assemble_sequence(&t, None, "", Some("x"), &tok), Err(ForgeError::Assembly(_))));
        assert!(matches!(assemble_sequence(&t, None, "q", Some(""), &tok), Err(ForgeError::Assembly(_))));
        let prompt = assemble_sequence(&t, None, "q", None, &tok).unwrap();
        assert!(prompt.loss_mask.iter().all(|&m| !m));
        assert!(prompt.response_groups.is_empty());
    }
}
