use serde::{Deserialize, Serialize};

use crate::ar_core::{DecoderSequence, Element};
use crate::error::{Error, Result};

/// `n` text tokens are followed by `m` mel chunks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterleavePolicy {
    pub n: usize,
    pub m: usize,
}

impl Default for InterleavePolicy {
    fn default() -> Self {
        Self { n: 4, m: 3 }
    }
}

impl InterleavePolicy {
    pub fn new(n: usize, m: usize) -> Result<Self> {
        let p = Self { n, m };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 {
            return Err(Error::InvalidArgument(format!(
                "interleave ratio {}:{} must be positive",
                self.n, self.m
            )));
        }
        Ok(())
    }
}

/// An interleaved decoder layout.
pub type InterleavedSequence = DecoderSequence;

/// Lays out `text` and `num_chunks` chunk slots in `n:m` blocks.
///
/// * The turn-of-speech token directly follows the final text token; the
///   block's unused text slots are skipped and every remaining chunk
///   follows contiguously.
/// * If chunks run out first, the final partial chunk block is padded with
///   filling tokens, then the leftover text and turn-of-speech follow.
pub fn interleave(text: &[u32], num_chunks: usize, policy: InterleavePolicy) -> Result<InterleavedSequence> {
    policy.validate()?;
    if num_chunks == 0 {
        return Err(Error::InvalidArgument(
            "interleaving needs at least one chunk".into(),
        ));
    }
    let mut elements = vec![Element::Utt, Element::Spk];
    let push_text = |elements: &mut Vec<Element>, range: std::ops::Range<usize>| {
        elements.extend(text[range].iter().map(|&t| Element::Text(t)));
    };
    let (mut ti, mut ci) = (0, 0);
    if text.is_empty() {
        elements.push(Element::TurnOfSpeech);
    }
    while ti < text.len() {
        let k = policy.n.min(text.len() - ti);
        push_text(&mut elements, ti..ti + k);
        ti += k;
        if ti == text.len() {
            elements.push(Element::TurnOfSpeech);
            break;
        }
        let j = policy.m.min(num_chunks - ci);
        elements.extend((ci..ci + j).map(Element::Chunk));
        ci += j;
        if ci == num_chunks {
            elements.extend(std::iter::repeat_n(Element::Filling, policy.m - j));
            push_text(&mut elements, ti..text.len());
            ti = text.len();
            elements.push(Element::TurnOfSpeech);
        }
    }
    elements.extend((ci..num_chunks).map(Element::Chunk));
    Ok(DecoderSequence::from_elements(elements))
}

/// True exactly at positions immediately preceding a chunk target.
pub fn loss_mask(seq: &InterleavedSequence) -> Vec<bool> {
    seq.loss_mask.clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ar_core::offline_layout;
    use proptest::prelude::*;

    /// Compact rendering: T text, C chunk, S turn-of-speech, F filling.
    fn pattern(seq: &DecoderSequence) -> String {
        seq.elements[2..]
            .iter()
            .map(|e| match e {
                Element::Text(_) => 'T',
                Element::Chunk(_) => 'C',
                Element::TurnOfSpeech => 'S',
                Element::Filling => 'F',
                _ => '?',
            })
            .collect()
    }

    fn text(n: usize) -> Vec<u32> {
        (0..n as u32).map(|i| 3 + i).collect()
    }

    #[test]
    fn golden_full_single_block() {
        let seq = interleave(&text(4), 3, InterleavePolicy::default()).unwrap();
        assert_eq!(pattern(&seq), "TTTTSCCC");
    }

    #[test]
    fn golden_two_full_blocks() {
        let seq = interleave(&text(8), 6, InterleavePolicy::default()).unwrap();
        assert_eq!(pattern(&seq), "TTTTCCCTTTTSCCC");
    }

    #[test]
    fn golden_text_exhausted_mid_block() {
        let seq = interleave(&text(2), 3, InterleavePolicy::default()).unwrap();
        assert_eq!(pattern(&seq), "TTSCCC");
    }

    #[test]
    fn chunks_exhausted_first_uses_filling() {
        let seq = interleave(&text(9), 2, InterleavePolicy::default()).unwrap();
        assert_eq!(pattern(&seq), "TTTTCCFTTTTTS");
        let mask = loss_mask(&seq);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 2);
        for (p, e) in seq.elements.iter().enumerate() {
            if *e == Element::Filling {
                assert!(!mask[p]);
            }
        }
        seq.validate().unwrap();
    }

    #[test]
    fn filling_positions_are_never_masked() {
        let seq = interleave(&text(12), 4, InterleavePolicy::default()).unwrap();
        assert_eq!(pattern(&seq), "TTTTCCCTTTTCFFTTTTS");
        let fills: Vec<usize> = (0..seq.len())
            .filter(|&p| seq.elements[p] == Element::Filling)
            .collect();
        assert_eq!(fills.len(), 2);
        assert!(fills.iter().all(|&p| !seq.loss_mask[p]));
    }

    #[test]
    fn empty_text_goes_straight_to_speech() {
        let seq = interleave(&[], 2, InterleavePolicy::default()).unwrap();
        assert_eq!(pattern(&seq), "SCC");
    }

    #[test]
    fn invalid_policy_is_rejected() {
        assert!(interleave(&text(3), 3, InterleavePolicy { n: 0, m: 3 }).is_err());
        assert!(InterleavePolicy::new(4, 0).is_err());
    }

    proptest! {
        #[test]
        fn layout_invariants(len in 0usize..30, chunks in 1usize..30, n in 1usize..6, m in 1usize..6) {
            let t = text(len);
            let policy = InterleavePolicy { n, m };
            let seq = interleave(&t, chunks, policy).unwrap();
            seq.validate().unwrap();
            prop_assert_eq!(seq.num_chunks(), chunks);
            prop_assert_eq!(seq.num_text(), len);
            prop_assert_eq!(seq.loss_mask.iter().filter(|&&b| b).count(), chunks);
            let tos = seq.elements.iter().filter(|e| **e == Element::TurnOfSpeech).count();
            prop_assert_eq!(tos, 1);
            // same popcount as the offline layout of the same utterance
            let off = offline_layout(&t, chunks);
            prop_assert_eq!(
                off.loss_mask.iter().filter(|&&b| b).count(),
                seq.loss_mask.iter().filter(|&&b| b).count()
            );
            // text order is preserved
            let ids: Vec<u32> = seq.elements.iter().filter_map(|e| match e { Element::Text(t) => Some(*t), _ => None }).collect();
            prop_assert_eq!(ids, t.clone());
            // pure function
            prop_assert_eq!(interleave(&t, chunks, policy).unwrap(), seq);
        }
    }
}
