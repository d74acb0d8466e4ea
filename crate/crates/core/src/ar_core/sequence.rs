use serde::{Deserialize, Serialize};

use super::tokenizer::TextTokens;
use crate::error::{Error, Result};
use crate::streaming::{interleave, InterleavePolicy};

/// One position of the decoder input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Element {
    Utt,
    Spk,
    Text(u32),
    /// Index into the utterance's chunk list.
    Chunk(usize),
    TurnOfSpeech,
    Filling,
}

/// Decoder input layout with its loss mask and per-chunk stop labels.
///
/// `loss_mask[p]` is true iff element `p + 1` is a chunk target; the hidden
/// state read at `p` conditions that chunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderSequence {
    pub elements: Vec<Element>,
    pub loss_mask: Vec<bool>,
    pub stop_labels: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    Offline,
    Interleaved(InterleavePolicy),
}

impl DecoderSequence {
    /// Builds mask and stop labels from an element list.
    pub fn from_elements(elements: Vec<Element>) -> Self {
        let loss_mask = mask_before_chunks(&elements);
        let n = elements.iter().filter(|e| matches!(e, Element::Chunk(_))).count();
        let stop_labels = (0..n).map(|i| if i + 1 == n { 1.0 } else { 0.0 }).collect();
        Self {
            elements,
            loss_mask,
            stop_labels,
        }
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn num_chunks(&self) -> usize {
        self.elements
            .iter()
            .filter(|e| matches!(e, Element::Chunk(_)))
            .count()
    }

    pub fn num_text(&self) -> usize {
        self.elements
            .iter()
            .filter(|e| matches!(e, Element::Text(_)))
            .count()
    }

    /// Positions whose hidden state conditions a chunk, in chunk order.
    pub fn read_positions(&self) -> Vec<usize> {
        self.loss_mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::MalformedSequence(msg));
        if self.loss_mask.len() != self.elements.len() {
            return bad(format!(
                "mask has {} entries for {} elements",
                self.loss_mask.len(),
                self.elements.len()
            ));
        }
        if self.elements.len() < 2
            || self.elements[0] != Element::Utt
            || self.elements[1] != Element::Spk
        {
            return bad("sequence must start with UTT, SPK".into());
        }
        let mut next_chunk = 0;
        let mut tos = 0;
        for (p, e) in self.elements.iter().enumerate().skip(2) {
            match e {
                Element::Utt | Element::Spk => return bad(format!("extra prefix element at {p}")),
                Element::Chunk(k) => {
                    if *k != next_chunk {
                        return bad(format!("chunk {k} out of order at {p}"));
                    }
                    next_chunk += 1;
                }
                Element::TurnOfSpeech => tos += 1,
                _ => {}
            }
        }
        if tos > 1 {
            return bad(format!("{tos} turn-of-speech tokens"));
        }
        if mask_before_chunks(&self.elements) != self.loss_mask {
            return bad("loss mask does not mark the positions before chunk targets".into());
        }
        if self.stop_labels.len() != next_chunk {
            return bad(format!(
                "{} stop labels for {next_chunk} chunks",
                self.stop_labels.len()
            ));
        }
        Ok(())
    }
}

fn mask_before_chunks(elements: &[Element]) -> Vec<bool> {
    (0..elements.len())
        .map(|p| matches!(elements.get(p + 1), Some(Element::Chunk(_))))
        .collect()
}

/// `[UTT, SPK, TEXT.., TURN_OF_SPEECH, CHUNK..]`.
pub fn offline_layout(text: &[u32], num_chunks: usize) -> DecoderSequence {
    let mut elements = vec![Element::Utt, Element::Spk];
    elements.extend(text.iter().map(|&t| Element::Text(t)));
    elements.push(Element::TurnOfSpeech);
    elements.extend((0..num_chunks).map(Element::Chunk));
    DecoderSequence::from_elements(elements)
}

/// Training layout for one utterance.
pub fn build_training_sequence(
    text: &TextTokens,
    num_chunks: usize,
    layout: Layout,
) -> Result<DecoderSequence> {
    if num_chunks == 0 {
        return Err(Error::InvalidArgument(
            "a training sequence needs at least one chunk".into(),
        ));
    }
    match layout {
        Layout::Offline => Ok(offline_layout(&text.ids, num_chunks)),
        Layout::Interleaved(policy) => interleave(&text.ids, num_chunks, policy),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn text(n: usize) -> TextTokens {
        TextTokens::new((0..n as u32).map(|i| 3 + i % 10).collect(), 46).unwrap()
    }

    #[test]
    fn offline_layout_arithmetic() {
        let seq = build_training_sequence(&text(4), 3, Layout::Offline).unwrap();
        assert_eq!(seq.len(), 1 + 1 + 4 + 1 + 3);
        assert_eq!(seq.loss_mask.iter().filter(|&&m| m).count(), 3);
        assert_eq!(seq.read_positions(), vec![6, 7, 8]);
        assert_eq!(seq.stop_labels, vec![0.0, 0.0, 1.0]);
        seq.validate().unwrap();
    }

    #[test]
    fn interleaved_mode_matches_interleave() {
        let policy = InterleavePolicy::default();
        let a = build_training_sequence(&text(8), 6, Layout::Interleaved(policy)).unwrap();
        let b = interleave(&text(8).ids, 6, policy).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_chunks_is_an_error() {
        assert!(build_training_sequence(&text(3), 0, Layout::Offline).is_err());
    }

    #[test]
    fn validate_catches_mask_mismatch() {
        let mut seq = offline_layout(&[5, 6], 2);
        seq.loss_mask[0] = true;
        assert!(matches!(seq.validate(), Err(Error::MalformedSequence(_))));
        let mut seq = offline_layout(&[5, 6], 2);
        seq.elements.swap(5, 6);
        assert!(seq.validate().is_err());
    }
}
