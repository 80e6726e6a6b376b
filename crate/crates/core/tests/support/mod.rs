//! Independent brute-force reference implementations shared by test targets.
#![allow(dead_code)]

use gaitrdae::tensor::Tensor;

/// Scalar evaluation of the adaptive average at one pixel of a frame series.
pub fn naive_pixel(series: &[f64], t: usize, dt: f64) -> f64 {
    let last = (series.len() - 1) as f64;
    let end = (t as f64 + dt).clamp(0.0, last);
    let e = end - t as f64;
    let a = e.abs();
    let (lo, hi) = (a.floor(), a.ceil());
    let step = |k: f64| -> f64 {
        let i = if e >= 0.0 { t as f64 + k } else { t as f64 - k };
        series[i as usize]
    };
    let tail = (hi - a) * step(lo) + (a - lo) * step(hi);
    let mut sum = 0.0;
    let mut k = 0.0;
    while k <= lo {
        sum += step(k);
        k += 1.0;
    }
    (tail + sum) / (hi + 1.0)
}

/// Triple loop over (channel, frame, pixel) around [`naive_pixel`].
pub fn naive_aggregate(f: &Tensor<f64>, dt: &Tensor<f64>) -> Vec<f64> {
    let s = f.shape();
    let (n, c, len, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let mut out = vec![0.0; f.numel()];
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let series: Vec<f64> = (0..len).map(|t| f.at(&[b, ch, t, y, x])).collect();
                    for t in 0..len {
                        let o = naive_pixel(&series, t, dt.at(&[b, 0, t, y, x]));
                        out[(((b * c + ch) * len + t) * h + y) * w + x] = o;
                    }
                }
            }
        }
    }
    out
}

/// Rank of the best correct match: the number of gallery entries strictly
/// closer than it.
pub fn brute_first_hit(row: &[f64], gallery: &[usize], label: usize) -> usize {
    let best = row
        .iter()
        .zip(gallery)
        .filter(|(_, &l)| l == label)
        .map(|(&d, _)| d)
        .fold(f64::INFINITY, f64::min);
    row.iter().filter(|&&d| d < best).count()
}

/// AP by definition: for each correct entry, precision among entries at
/// most as far.
pub fn brute_ap(row: &[f64], gallery: &[usize], label: usize) -> f64 {
    let correct: Vec<f64> = row.iter().zip(gallery).filter(|(_, &l)| l == label).map(|(&d, _)| d).collect();
    let mut sum = 0.0;
    for &d in &correct {
        let within = row.iter().filter(|&&e| e <= d).count();
        let hits = correct.iter().filter(|&&e| e <= d).count();
        sum += hits as f64 / within as f64;
    }
    sum / correct.len() as f64
}

/// Batch-all triplet loss by enumerating every triple.
pub fn brute_triplet(x: &[f64], n: usize, p: usize, c: usize, labels: &[usize], margin: f64) -> f64 {
    let dist = |i: usize, j: usize, part: usize| -> f64 {
        (0..c)
            .map(|ch| (x[(i * p + part) * c + ch] - x[(j * p + part) * c + ch]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut total = 0.0;
    for part in 0..p {
        let (mut sum, mut nonzero) = (0.0, 0usize);
        for a in 0..n {
            for pos in 0..n {
                if pos == a || labels[pos] != labels[a] {
                    continue;
                }
                for neg in 0..n {
                    if labels[neg] == labels[a] {
                        continue;
                    }
                    let term = (margin + dist(a, pos, part) - dist(a, neg, part)).max(0.0);
                    if term > 0.0 {
                        sum += term;
                        nonzero += 1;
                    }
                }
            }
        }
        total += if nonzero > 0 { sum / nonzero as f64 } else { 0.0 };
    }
    total / p as f64
}
