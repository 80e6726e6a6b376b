//! P x K batch sampling with cyclic temporal windows.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// A training sequence held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSequence {
    /// Class index in `0..num_classes`.
    pub label: usize,
    pub len: usize,
    pub height: usize,
    pub width: usize,
    /// `len * height * width` silhouette values in {0, 1}.
    pub frames: Vec<u8>,
}

/// A sampled batch: `x: [P * K, T, 1, H, W]` and one label per sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub x: Tensor<T>,
    pub labels: Vec<usize>,
}

/// Frame indices of a `t`-frame window starting at `start`, wrapping modulo `len`.
pub fn window_indices(len: usize, t: usize, start: usize) -> Vec<usize> {
    (0..t).map(|j| (start + j) % len).collect()
}

/// Samples `p` distinct labels, `k` sequences of each (with replacement when
/// a label has fewer than `k`), and a random `t`-frame window from each.
/// Sequences at least `t` long use a contiguous window; shorter ones wrap.
pub fn pk_sample_batch<T: Element>(seqs: &[TrainSequence], p: usize, k: usize, t: usize, seed: u64) -> Result<Batch<T>> {
    let first = seqs
        .first()
        .ok_or_else(|| Error::Usage("cannot sample from an empty training set".into()))?;
    if p == 0 || k == 0 || t == 0 {
        return Err(Error::Config(format!("batch P={p}, K={k}, T={t} must be positive")));
    }
    let (h, w) = (first.height, first.width);
    if seqs.iter().any(|s| s.height != h || s.width != w || s.len == 0) {
        return Err(Error::Config("training sequences differ in frame size or are empty".into()));
    }
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in seqs.iter().enumerate() {
        by_label.entry(s.label).or_default().push(i);
    }
    if by_label.len() < p {
        return Err(Error::Sampling(format!(
            "P={p} identities requested but only {} available",
            by_label.len()
        )));
    }
    let labels: Vec<usize> = by_label.keys().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = h * w;
    let mut data = Vec::with_capacity(p * k * t * plane);
    let mut out_labels = Vec::with_capacity(p * k);
    for li in sample(&mut rng, labels.len(), p).into_iter() {
        let label = labels[li];
        let members = &by_label[&label];
        let picks: Vec<usize> = if members.len() >= k {
            sample(&mut rng, members.len(), k).into_iter().map(|i| members[i]).collect()
        } else {
            (0..k).map(|_| members[rng.gen_range(0..members.len())]).collect()
        };
        for si in picks {
            let s = &seqs[si];
            let start = if s.len >= t {
                rng.gen_range(0..=s.len - t)
            } else {
                rng.gen_range(0..s.len)
            };
            for f in window_indices(s.len, t, start) {
                data.extend(s.frames[f * plane..(f + 1) * plane].iter().map(|&v| T::cst(v as f64)));
            }
            out_labels.push(label);
        }
    }
    Ok(Batch {
        x: Tensor::new([p * k, t, 1, h, w], data)?,
        labels: out_labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seqs(ids: usize, per: usize, len: usize) -> Vec<TrainSequence> {
        (0..ids * per)
            .map(|i| TrainSequence {
                label: i / per,
                len,
                height: 2,
                width: 1,
                frames: (0..len * 2).map(|f| ((f / 2 + i) % 2) as u8).collect(),
            })
            .collect()
    }

    #[test]
    fn batch_size_and_labels() {
        let s = seqs(10, 3, 20);
        let b = pk_sample_batch::<f32>(&s, 8, 8, 30, 5).unwrap();
        assert_eq!(b.x.shape(), &[64, 30, 1, 2, 1]);
        assert_eq!(b.labels.len(), 64);
        for chunk in b.labels.chunks(8) {
            assert!(chunk.iter().all(|&l| l == chunk[0]));
        }
    }

    #[test]
    fn wrap_rule() {
        let w = window_indices(20, 30, 7);
        assert_eq!(&w[..13], &(7..20).collect::<Vec<_>>()[..]);
        assert_eq!(&w[13..], &(0..17).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn fixed_seed_repeats() {
        let s = seqs(6, 4, 12);
        let a = pk_sample_batch::<f32>(&s, 4, 4, 12, 11).unwrap();
        let b = pk_sample_batch::<f32>(&s, 4, 4, 12, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn errors() {
        assert!(matches!(pk_sample_batch::<f32>(&[], 2, 2, 3, 0), Err(Error::Usage(_))));
        assert!(matches!(pk_sample_batch::<f32>(&seqs(2, 2, 4), 3, 2, 3, 0), Err(Error::Sampling(_))));
    }
}
