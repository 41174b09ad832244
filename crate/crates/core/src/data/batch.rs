use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tokenizer::{TokenSequence, BOS, EOS, PAD};

/// One training sequence, framed as `BOS t… EOS`, optionally tied to an image
/// by index into the phase's image table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub tokens: TokenSequence,
    pub image: Option<usize>,
}

/// Wraps content tokens in BOS/EOS, truncating content so the framed length
/// is at most `max_len`.
pub fn frame(content: &[u32], max_len: usize) -> TokenSequence {
    let keep = content.len().min(max_len.saturating_sub(2));
    let mut out = Vec::with_capacity(keep + 2);
    out.push(BOS);
    out.extend_from_slice(&content[..keep]);
    out.push(EOS);
    out
}

/// Right-padded token matrix `[rows × width]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub rows: usize,
    pub width: usize,
    pub tokens: Vec<u32>,
    pub lengths: Vec<usize>,
    /// Index of each row's example in the source slice.
    pub example_ids: Vec<usize>,
    pub images: Option<Vec<usize>>,
}

impl Batch {
    pub fn from_examples(examples: &[Example], ids: &[usize]) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let with_image = ids.iter().filter(|&&i| examples[i].image.is_some()).count();
        if with_image != 0 && with_image != ids.len() {
            return Err(Error::contract("batch mixes text-only and image examples"));
        }
        let width = ids.iter().map(|&i| examples[i].tokens.len()).max().unwrap_or(0);
        let mut tokens = Vec::with_capacity(ids.len() * width);
        let mut lengths = Vec::with_capacity(ids.len());
        for &i in ids {
            let t = &examples[i].tokens;
            tokens.extend_from_slice(t);
            tokens.extend(std::iter::repeat_n(PAD, width - t.len()));
            lengths.push(t.len());
        }
        let images = (with_image > 0).then(|| ids.iter().map(|&i| examples[i].image.unwrap()).collect());
        Ok(Self {
            rows: ids.len(),
            width,
            tokens,
            lengths,
            example_ids: ids.to_vec(),
            images,
        })
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.tokens[r * self.width..(r + 1) * self.width]
    }

    /// Token-level mask: true where a token is predicted, i.e. every real
    /// token after the leading BOS. PAD (and image slots, which are not part
    /// of `tokens`) are never included.
    pub fn loss_mask(&self) -> Vec<bool> {
        let mut m = Vec::with_capacity(self.tokens.len());
        for &len in &self.lengths {
            m.extend((0..self.width).map(|p| p >= 1 && p < len));
        }
        m
    }

    /// Next-token targets aligned with each position's logits, and whether
    /// that position contributes to the loss.
    pub fn targets_and_mask(&self) -> (Vec<u32>, Vec<bool>) {
        let token_mask = self.loss_mask();
        let mut targets = Vec::with_capacity(self.tokens.len());
        let mut mask = Vec::with_capacity(self.tokens.len());
        for r in 0..self.rows {
            for p in 0..self.width {
                let next = r * self.width + p + 1;
                if p + 1 < self.width {
                    targets.push(self.tokens[next]);
                    mask.push(token_mask[next]);
                } else {
                    targets.push(PAD);
                    mask.push(false);
                }
            }
        }
        (targets, mask)
    }

    pub fn predicted_tokens(&self) -> usize {
        self.lengths.iter().map(|l| l.saturating_sub(1)).sum()
    }
}

/// Partitions examples into batches of at most `batch_size`; the final batch
/// may be short. With `shuffle`, order is a seeded permutation that differs
/// per epoch.
pub fn make_batches(
    examples: &[Example],
    batch_size: usize,
    seed: u64,
    epoch: u64,
    shuffle: bool,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
    }
    order
        .chunks(batch_size)
        .map(|ids| Batch::from_examples(examples, ids))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn examples(lens: &[usize]) -> Vec<Example> {
        lens.iter()
            .enumerate()
            .map(|(i, &n)| Example {
                tokens: frame(&vec![10 + i as u32; n], 1000),
                image: None,
            })
            .collect()
    }

    #[test]
    fn ten_by_four() {
        let ex = examples(&[3; 10]);
        let b = make_batches(&ex, 4, 1, 0, true).unwrap();
        assert_eq!(b.iter().map(|b| b.rows).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert!(make_batches(&ex, 0, 1, 0, true).is_err());
    }

    #[test]
    fn seeded_and_epoch_dependent() {
        let ex = examples(&[2, 5, 1, 7, 3, 3, 4, 9]);
        let a = make_batches(&ex, 3, 7, 0, true).unwrap();
        assert_eq!(a, make_batches(&ex, 3, 7, 0, true).unwrap());
        let ids = |bs: &[Batch]| bs.iter().flat_map(|b| b.example_ids.clone()).collect::<Vec<_>>();
        assert_ne!(ids(&a), ids(&make_batches(&ex, 3, 7, 1, true).unwrap()));
    }

    #[test]
    fn frame_truncates_content() {
        assert_eq!(frame(&[7, 8, 9], 4), vec![BOS, 7, 8, EOS]);
        assert_eq!(frame(&[], 4), vec![BOS, EOS]);
    }

    #[test]
    fn targets_shift_by_one() {
        let ex = examples(&[2, 0]);
        let b = make_batches(&ex, 2, 0, 0, false).unwrap().remove(0);
        assert_eq!(b.width, 4);
        assert_eq!(b.row(1), &[BOS, EOS, PAD, PAD]);
        let (t, m) = b.targets_and_mask();
        assert_eq!(&t[..4], &[10, 10, EOS, PAD]);
        assert_eq!(&m[..4], &[true, true, true, false]);
        assert_eq!(&m[4..], &[true, false, false, false]);
        assert_eq!(b.predicted_tokens(), 4);
    }

    proptest! {
        #[test]
        fn epoch_partitions_every_position(
            lens in proptest::collection::vec(0usize..12, 1..30),
            bs in 1usize..8,
            seed in any::<u64>(),
        ) {
            let ex = examples(&lens);
            let batches = make_batches(&ex, bs, seed, 3, true).unwrap();
            let mut seen = vec![0usize; ex.len()];
            for b in &batches {
                prop_assert!(b.rows <= bs);
                let mask = b.loss_mask();
                for r in 0..b.rows {
                    seen[b.example_ids[r]] += 1;
                    let row = b.row(r);
                    prop_assert_eq!(&row[..b.lengths[r]], ex[b.example_ids[r]].tokens.as_slice());
                    for p in 0..b.width {
                        if row[p] == PAD {
                            prop_assert!(!mask[r * b.width + p]);
                        }
                    }
                }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
        }
    }
}
