//! Probe-to-gallery distances, Rank-k accuracy and mean average precision.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Ranks reported by default.
pub const DEFAULT_KS: [usize; 4] = [1, 5, 10, 20];

/// Row-major `probes x gallery` distances.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    pub probes: usize,
    pub gallery: usize,
    pub data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(probes: usize, gallery: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != probes * gallery {
            return Err(Error::dim("distance matrix", &[probes, gallery], &[data.len()]));
        }
        Ok(Self { probes, gallery, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Config("ragged distance rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.gallery..(i + 1) * self.gallery]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.gallery + j]
    }
}

/// Which (probe, gallery) pairs take part in ranking; `None` means all.
pub type PairMask = Option<Vec<Vec<bool>>>;

/// Mean over parts of the Euclidean distance between part vectors.
///
/// `probe: [Np, P, C]`, `gallery: [Ng, P, C]`.
pub fn distance_matrix<T: Element>(probe: &Tensor<T>, gallery: &Tensor<T>) -> Result<DistanceMatrix> {
    let (ps, gs) = (probe.shape(), gallery.shape());
    if ps.len() != 3 || gs.len() != 3 || ps[1..] != gs[1..] {
        return Err(Error::dim("distance_matrix", ps, gs));
    }
    let (np, ng, p, c) = (ps[0], gs[0], ps[1], ps[2]);
    let (pd, gd) = (probe.data(), gallery.data());
    let mut data = Vec::with_capacity(np * ng);
    for i in 0..np {
        for j in 0..ng {
            let mut acc = 0.0;
            for part in 0..p {
                let a = &pd[(i * p + part) * c..(i * p + part + 1) * c];
                let b = &gd[(j * p + part) * c..(j * p + part + 1) * c];
                let sq: f64 = a
                    .iter()
                    .zip(b)
                    .map(|(x, y)| (x.to_f64().unwrap() - y.to_f64().unwrap()).powi(2))
                    .sum();
                acc += sq.sqrt();
            }
            data.push(if p == 0 { 0.0 } else { acc / p as f64 });
        }
    }
    DistanceMatrix::new(np, ng, data)
}

/// Allowed pairs excluding those whose probe and gallery views are equal.
pub fn cross_view_mask<V: PartialEq>(probe_views: &[V], gallery_views: &[V]) -> Vec<Vec<bool>> {
    probe_views
        .iter()
        .map(|p| gallery_views.iter().map(|g| p != g).collect())
        .collect()
}

/// Gallery indices of probe `i` sorted by ascending distance, ties by index.
fn ranking(d: &DistanceMatrix, i: usize, mask: &PairMask) -> Vec<usize> {
    let row = d.row(i);
    let mut idx: Vec<usize> = (0..d.gallery)
        .filter(|&j| mask.as_ref().is_none_or(|m| m[i][j]))
        .collect();
    idx.sort_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    idx
}

fn check_protocol<L: Ord + Clone + std::fmt::Debug>(
    d: &DistanceMatrix,
    probe_labels: &[L],
    gallery_labels: &[L],
    mask: &PairMask,
) -> Result<()> {
    if d.probes != probe_labels.len() || d.gallery != gallery_labels.len() {
        return Err(Error::dim(
            "label count",
            &[d.probes, d.gallery],
            &[probe_labels.len(), gallery_labels.len()],
        ));
    }
    if let Some(m) = mask {
        if m.len() != d.probes || m.iter().any(|r| r.len() != d.gallery) {
            return Err(Error::dim("pair mask", &[d.probes, d.gallery], &[m.len()]));
        }
    }
    if d.probes == 0 {
        return Err(Error::Protocol("empty probe set".into()));
    }
    let mut missing = BTreeSet::new();
    for (i, l) in probe_labels.iter().enumerate() {
        let found = (0..d.gallery).any(|j| gallery_labels[j] == *l && mask.as_ref().is_none_or(|m| m[i][j]));
        if !found {
            missing.insert(l.clone());
        }
    }
    if !missing.is_empty() {
        return Err(Error::Protocol(format!("probe labels without a gallery match: {missing:?}")));
    }
    Ok(())
}

/// Fraction of probes with a correct match among their `k` nearest gallery
/// entries, for each `k` in `ks`.
pub fn rank_k<L: Ord + Clone + std::fmt::Debug>(
    d: &DistanceMatrix,
    probe_labels: &[L],
    gallery_labels: &[L],
    ks: &[usize],
    mask: &PairMask,
) -> Result<Vec<f64>> {
    check_protocol(d, probe_labels, gallery_labels, mask)?;
    let mut hits = vec![0usize; ks.len()];
    for i in 0..d.probes {
        let first = ranking(d, i, mask)
            .iter()
            .position(|&j| gallery_labels[j] == probe_labels[i])
            .expect("protocol check guarantees a match");
        for (h, &k) in hits.iter_mut().zip(ks) {
            *h += usize::from(first < k);
        }
    }
    Ok(hits.iter().map(|&h| h as f64 / d.probes as f64).collect())
}

/// Per-probe average precision.
pub fn average_precisions<L: Ord + Clone + std::fmt::Debug>(
    d: &DistanceMatrix,
    probe_labels: &[L],
    gallery_labels: &[L],
    mask: &PairMask,
) -> Result<Vec<f64>> {
    check_protocol(d, probe_labels, gallery_labels, mask)?;
    Ok((0..d.probes)
        .map(|i| {
            let (mut correct, mut sum) = (0usize, 0.0);
            for (r, &j) in ranking(d, i, mask).iter().enumerate() {
                if gallery_labels[j] == probe_labels[i] {
                    correct += 1;
                    sum += correct as f64 / (r + 1) as f64;
                }
            }
            sum / correct as f64
        })
        .collect())
}

pub fn mean_average_precision<L: Ord + Clone + std::fmt::Debug>(
    d: &DistanceMatrix,
    probe_labels: &[L],
    gallery_labels: &[L],
    mask: &PairMask,
) -> Result<f64> {
    let ap = average_precisions(d, probe_labels, gallery_labels, mask)?;
    Ok(ap.iter().sum::<f64>() / ap.len() as f64)
}

/// Retrieval results.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// `(k, accuracy)` pairs in ascending `k`.
    pub rank_k: Vec<(usize, f64)>,
    pub map_score: f64,
    pub per_probe_ap: Vec<f64>,
    pub distance_matrix: DistanceMatrix,
}

impl EvalReport {
    pub fn rank(&self, k: usize) -> Option<f64> {
        self.rank_k.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }

    /// `metric,value` CSV text, one row per rank and one for mAP.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in &self.rank_k {
            s.push_str(&format!("rank_{k},{v}\n"));
        }
        s.push_str(&format!("mAP,{}\n", self.map_score));
        s
    }
}

/// Distances, ranks and mAP in one call.
pub fn evaluate<T: Element, L: Ord + Clone + std::fmt::Debug>(
    probe: &Tensor<T>,
    gallery: &Tensor<T>,
    probe_labels: &[L],
    gallery_labels: &[L],
    ks: &[usize],
    mask: &PairMask,
) -> Result<EvalReport> {
    let d = distance_matrix(probe, gallery)?;
    let ranks = rank_k(&d, probe_labels, gallery_labels, ks, mask)?;
    let per_probe_ap = average_precisions(&d, probe_labels, gallery_labels, mask)?;
    Ok(EvalReport {
        rank_k: ks.iter().copied().zip(ranks).collect(),
        map_score: per_probe_ap.iter().sum::<f64>() / per_probe_ap.len() as f64,
        per_probe_ap,
        distance_matrix: d,
    })
}
