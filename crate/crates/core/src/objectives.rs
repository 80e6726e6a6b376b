//! Part-wise batch-all triplet loss, part-wise cross entropy and their sum.

use crate::error::{Error, Result};
use crate::tensor::graph::{Backward, Values};
use crate::tensor::{Element, Graph, Tensor, Var};

/// Default triplet margin.
pub const DEFAULT_MARGIN: f64 = 0.2;

/// Squared distances below this are clamped before the square root so that
/// coincident embeddings have a finite (zero) gradient.
const DIST_FLOOR_SQ: f64 = 1e-12;

/// Scalar summaries of one loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub triplet_loss: f64,
    pub triplet_mean_dist_pos: f64,
    pub triplet_mean_dist_neg: f64,
    pub nonzero_triplet_fraction: f64,
    pub ce_loss: f64,
    pub ce_accuracy: f64,
    pub combined: f64,
}

/// Column header of the per-iteration metrics CSV.
pub const LOSS_CSV_HEADER: &str = "iter,triplet,mean_dist_pos,mean_dist_neg,nonzero_frac,ce,ce_acc,combined,lr";

impl LossReport {
    /// One metrics CSV row (without newline) in [`LOSS_CSV_HEADER`] order.
    pub fn csv_row(&self, iter: usize, lr: f64) -> String {
        format!(
            "{iter},{},{},{},{},{},{},{},{lr}",
            self.triplet_loss,
            self.triplet_mean_dist_pos,
            self.triplet_mean_dist_neg,
            self.nonzero_triplet_fraction,
            self.ce_loss,
            self.ce_accuracy,
            self.combined,
        )
    }

    pub fn is_finite(&self) -> bool {
        [
            self.triplet_loss,
            self.triplet_mean_dist_pos,
            self.triplet_mean_dist_neg,
            self.nonzero_triplet_fraction,
            self.ce_loss,
            self.ce_accuracy,
            self.combined,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Triplet statistics returned next to the loss node.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TripletStats {
    pub loss: f64,
    pub mean_dist_pos: f64,
    pub mean_dist_neg: f64,
    pub nonzero_fraction: f64,
}

/// Checks that the batch has at least two identities and that every identity
/// occurs at least twice.
pub fn check_pk_labels(labels: &[usize]) -> Result<()> {
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    if counts.len() < 2 {
        return Err(Error::Sampling(format!(
            "triplet mining needs at least 2 identities, batch has {}",
            counts.len()
        )));
    }
    if let Some((id, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(Error::Sampling(format!("identity {id} has a single sequence in the batch")));
    }
    Ok(())
}

struct TripletBackward<T> {
    /// d loss / d dist, `[P, N, N]`, already symmetric in (i, j) placement.
    coef: Vec<T>,
    /// Clamped distances `[P, N, N]`.
    dist: Vec<T>,
}

impl<T: Element> Backward<T> for TripletBackward<T> {
    fn backward(&self, values: &Values<'_, T>, inputs: &[Var], _: &Tensor<T>, gout: &[T], need: &[bool]) -> Vec<Option<Vec<T>>> {
        if !need[0] {
            return vec![None];
        }
        let x = values.get(inputs[0]);
        let s = x.shape();
        let (n, p, c) = (s[0], s[1], s[2]);
        let xd = x.data();
        let floor = T::cst(DIST_FLOOR_SQ.sqrt());
        let mut gx = vec![T::zero(); xd.len()];
        for part in 0..p {
            for i in 0..n {
                for j in 0..n {
                    let k = (part * n + i) * n + j;
                    let w = self.coef[k];
                    let d = self.dist[k];
                    if w == T::zero() || d <= floor {
                        continue;
                    }
                    let scale = w * gout[0] / d;
                    let (bi, bj) = ((i * p + part) * c, (j * p + part) * c);
                    for ch in 0..c {
                        let diff = (xd[bi + ch] - xd[bj + ch]) * scale;
                        gx[bi + ch] = gx[bi + ch] + diff;
                        gx[bj + ch] = gx[bj + ch] - diff;
                    }
                }
            }
        }
        vec![Some(gx)]
    }
}

/// Clamped Euclidean distances per part: `[P, N, N]` from `x: [N, P, C]`.
fn part_distances<T: Element>(x: &Tensor<T>) -> Vec<T> {
    let s = x.shape();
    let (n, p, c) = (s[0], s[1], s[2]);
    let xd = x.data();
    let floor = T::cst(DIST_FLOOR_SQ);
    let mut out = vec![T::zero(); p * n * n];
    for part in 0..p {
        for i in 0..n {
            for j in 0..i {
                let (bi, bj) = ((i * p + part) * c, (j * p + part) * c);
                let sq = (0..c).map(|ch| (xd[bi + ch] - xd[bj + ch]).powi(2)).sum::<T>();
                let d = sq.max(floor).sqrt();
                out[(part * n + i) * n + j] = d;
                out[(part * n + j) * n + i] = d;
            }
            out[(part * n + i) * n + i] = floor.sqrt();
        }
    }
    out
}

impl<T: Element> Graph<T> {
    /// Batch-all triplet loss on `parts: [N, P, C]`.
    ///
    /// For each part every (anchor, positive, negative) triple contributes
    /// `max(0, margin + d(a, p) - d(a, n))`; the part loss is the mean over
    /// nonzero terms (0 if none) and the result is the mean over parts.
    pub fn triplet_loss(&mut self, parts: Var, labels: &[usize], margin: f64) -> Result<(Var, TripletStats)> {
        let x = self.value(parts);
        let s = x.shape().to_vec();
        if s.len() != 3 || s[0] != labels.len() {
            return Err(Error::dim("triplet_loss", &s, &[labels.len()]));
        }
        check_pk_labels(labels)?;
        let (n, p) = (s[0], s[1]);
        let dist = part_distances(x);
        let m = T::cst(margin);
        let mut coef = vec![T::zero(); p * n * n];
        let (mut loss, mut nonzero, mut total) = (0.0, 0usize, 0usize);
        let (mut pos_sum, mut pos_cnt, mut neg_sum, mut neg_cnt) = (0.0, 0usize, 0.0, 0usize);
        for part in 0..p {
            let d = |i: usize, j: usize| dist[(part * n + i) * n + j];
            let mut part_sum = T::zero();
            let mut part_nz = 0usize;
            let mut hits: Vec<(usize, usize, usize)> = Vec::new();
            for a in 0..n {
                for q in 0..n {
                    if q == a {
                        continue;
                    }
                    if labels[q] == labels[a] {
                        pos_sum += d(a, q).to_f64().unwrap();
                        pos_cnt += 1;
                    } else {
                        neg_sum += d(a, q).to_f64().unwrap();
                        neg_cnt += 1;
                    }
                }
                for pp in (0..n).filter(|&j| j != a && labels[j] == labels[a]) {
                    for nn in (0..n).filter(|&j| labels[j] != labels[a]) {
                        total += 1;
                        let term = m + (d(a, pp) - d(a, nn));
                        if term > T::zero() {
                            part_sum = part_sum + term;
                            part_nz += 1;
                            hits.push((a, pp, nn));
                        }
                    }
                }
            }
            if part_nz > 0 {
                loss += (part_sum / T::cst(part_nz as f64)).to_f64().unwrap();
                nonzero += part_nz;
                let w = T::cst(1.0 / (part_nz as f64 * p as f64));
                for (a, pp, nn) in hits {
                    let base = part * n * n;
                    coef[base + a * n + pp] = coef[base + a * n + pp] + w;
                    coef[base + a * n + nn] = coef[base + a * n + nn] - w;
                }
            }
        }
        let loss = loss / p as f64;
        let stats = TripletStats {
            loss,
            mean_dist_pos: pos_sum / pos_cnt.max(1) as f64,
            mean_dist_neg: neg_sum / neg_cnt.max(1) as f64,
            nonzero_fraction: nonzero as f64 / total.max(1) as f64,
        };
        let out = Tensor::scalar(T::cst(loss));
        let v = self.push("triplet_loss", out, vec![parts], Box::new(TripletBackward { coef, dist }))?;
        Ok((v, stats))
    }

    /// Cross entropy of `logits: [N, P, K]` against one label per sample,
    /// averaged over parts and samples. Also returns per-part accuracy.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<(Var, f64)> {
        let x = self.value(logits);
        let s = x.shape().to_vec();
        if s.len() != 3 || s[0] != labels.len() {
            return Err(Error::dim("cross_entropy", &s, &[labels.len()]));
        }
        let (n, p, k) = (s[0], s[1], s[2]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Usage(format!("label {bad} out of range for {k} classes")));
        }
        let xd = x.data();
        let rows = n * p;
        let mut probs = vec![T::zero(); xd.len()];
        let mut loss = T::zero();
        let mut correct = 0usize;
        for r in 0..rows {
            let row = &xd[r * k..(r + 1) * k];
            let label = labels[r / p];
            let (arg, mx) = row
                .iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
            correct += usize::from(arg == label);
            let sum: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + sum.ln();
            loss = loss + lse - row[label];
            for (i, &v) in row.iter().enumerate() {
                probs[r * k + i] = (v - lse).exp();
            }
        }
        let inv = T::cst(1.0 / rows as f64);
        let out = Tensor::scalar(loss * inv);
        let rule = CrossEntropyBackward {
            probs,
            labels: labels.to_vec(),
            parts: p,
            classes: k,
        };
        let v = self.push("cross_entropy", out, vec![logits], Box::new(rule))?;
        Ok((v, correct as f64 / rows as f64))
    }

    /// `triplet(triplet_feat) + ce(logits)` with a populated report.
    pub fn combined_loss(
        &mut self,
        triplet_feat: Var,
        logits: Var,
        labels: &[usize],
        margin: f64,
    ) -> Result<(Var, LossReport)> {
        let (tri, ts) = self.triplet_loss(triplet_feat, labels, margin)?;
        let (ce, acc) = self.cross_entropy(logits, labels)?;
        let total = self.add(tri, ce)?;
        let ce_loss = self.value(ce).item().to_f64().unwrap();
        let report = LossReport {
            triplet_loss: ts.loss,
            triplet_mean_dist_pos: ts.mean_dist_pos,
            triplet_mean_dist_neg: ts.mean_dist_neg,
            nonzero_triplet_fraction: ts.nonzero_fraction,
            ce_loss,
            ce_accuracy: acc,
            combined: self.value(total).item().to_f64().unwrap(),
        };
        Ok((total, report))
    }
}

struct CrossEntropyBackward<T> {
    probs: Vec<T>,
    labels: Vec<usize>,
    parts: usize,
    classes: usize,
}

impl<T: Element> Backward<T> for CrossEntropyBackward<T> {
    fn backward(&self, _: &Values<'_, T>, _: &[Var], _: &Tensor<T>, gout: &[T], need: &[bool]) -> Vec<Option<Vec<T>>> {
        if !need[0] {
            return vec![None];
        }
        let k = self.classes;
        let rows = self.probs.len() / k;
        let scale = gout[0] / T::cst(rows as f64);
        let mut g: Vec<T> = self.probs.iter().map(|&v| v * scale).collect();
        for r in 0..rows {
            let i = r * k + self.labels[r / self.parts];
            g[i] = g[i] - scale;
        }
        vec![Some(g)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss_1d(x: Vec<f64>) -> (f64, TripletStats) {
        let mut g = Graph::<f64>::new();
        let n = x.len();
        let v = g.constant(Tensor::new([n, 1, 1], x).unwrap());
        let (l, s) = g.triplet_loss(v, &[0, 0, 1, 1], 0.2).unwrap();
        (g.value(l).item(), s)
    }

    #[test]
    fn single_margin_cases() {
        // anchor 0 sees its positive and both negatives at distance 1
        let (l, s) = loss_1d(vec![0.0, 1.0, -1.0, -1.0]);
        assert!((l - 0.2).abs() < 1e-12);
        assert_eq!(s.nonzero_fraction, 2.0 / 8.0);
        // positive at 0.5, negatives at 1: every margin satisfied
        let (l, s) = loss_1d(vec![0.0, 0.5, -1.0, -1.0]);
        assert_eq!(l, 0.0);
        assert_eq!(s.nonzero_fraction, 0.0);
    }

    #[test]
    fn sampling_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([3, 1, 2]));
        assert!(matches!(g.triplet_loss(x, &[0, 0, 0], 0.2), Err(Error::Sampling(_))));
        assert!(matches!(g.triplet_loss(x, &[0, 0, 1], 0.2), Err(Error::Sampling(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        let ce = |logits: Vec<f64>, label: usize| {
            let mut g = Graph::<f64>::new();
            let k = logits.len();
            let x = g.constant(Tensor::new([1, 1, k], logits).unwrap());
            let (l, _) = g.cross_entropy(x, &[label]).unwrap();
            g.value(l).item()
        };
        assert!((ce(vec![0.0, 0.0], 0) - 2f64.ln()).abs() < 1e-12);
        assert!((ce(vec![1.0, 0.0], 0) - 0.313262).abs() < 1e-6);
        let big = ce(vec![1000.0, 0.0], 0);
        assert!(big.is_finite() && big.abs() < 1e-12);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([1, 1, 2]));
        assert!(matches!(g.cross_entropy(x, &[2]), Err(Error::Usage(_))));
    }

    #[test]
    fn csv_row_layout() {
        let r = LossReport {
            triplet_loss: 0.2,
            combined: 0.9,
            ce_loss: 0.7,
            ..Default::default()
        };
        assert_eq!(r.csv_row(3, 0.1), "3,0.2,0,0,0,0.7,0,0.9,0.1");
        assert_eq!(LOSS_CSV_HEADER.split(',').count(), r.csv_row(0, 0.0).split(',').count());
    }
}
