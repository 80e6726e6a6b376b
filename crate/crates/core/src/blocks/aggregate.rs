//! Per-pixel adaptive temporal aggregation driven by learned frame offsets.
//!
//! Features are `[N, C, T, H, W]`; offsets are `[N, 1, T, H, W]` in frame
//! units and are shared by all channels. For a pixel at frame `t` with offset
//! `dt`, the end point `t + dt` is clamped into `[0, T-1]`. With the clamped
//! offset `e >= 0` the output averages frames `t ..= t + floor(e)` plus a
//! linearly interpolated tail at `t + e`, divided by `ceil(e) + 1`:
//!
//! ```text
//! tail = (ceil(e) - e) * F[t + floor(e)] + (e - floor(e)) * F[t + ceil(e)]
//! out  = (tail + sum_{i=t}^{t+floor(e)} F[i]) / (ceil(e) + 1)
//! ```
//!
//! Negative offsets mirror this backwards in time: frames
//! `t - floor(|e|) ..= t` and a tail at `t - |e|`.
//!
//! The frame weights are nonnegative and sum to one. The summation bounds are
//! piecewise constant in `e`, so the offset gradient flows only through the
//! tail weights, and is zero once the end point saturates the clamp. At an
//! integer offset the output is continuous from the side nearer zero and the
//! gradient uses that side; at `e = 0` both sides are averaged.

use crate::error::{Error, Result};
use crate::tensor::graph::{Backward, Values};
use crate::tensor::{Element, Graph, Tensor, Var};

/// Frame weights of one output pixel.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Window<T> {
    /// Full-weight frames `first ..= last`.
    pub first: usize,
    pub last: usize,
    /// `ceil(|e|) + 1`.
    pub div: T,
    /// Interpolated tail frames and their (undivided) weights.
    pub tail: [(usize, T); 2],
    /// `d out / d dt = sum coeff * F[idx]`.
    pub slope: [(usize, T); 2],
}

pub(crate) fn window<T: Element>(t: usize, dt: T, len: usize) -> Window<T> {
    let zero = T::zero();
    let one = T::one();
    let tf = T::from_usize(t).unwrap();
    let top = T::from_usize(len - 1).unwrap();
    let end = tf + dt;
    let saturated = end < zero || end > top;
    let e = end.max(zero).min(top) - tf;
    let none = [(t, zero), (t, zero)];
    if e >= zero {
        let (f, c) = (e.floor(), e.ceil());
        let (fi, ci) = (f.to_usize().unwrap(), c.to_usize().unwrap());
        let div = c + one;
        let slope = if saturated {
            none
        } else if fi != ci {
            [(t + ci, div.recip()), (t + fi, -div.recip())]
        } else if fi == 0 {
            let q = T::cst(0.25);
            [((t + 1).min(len - 1), q), (t.saturating_sub(1), -q)]
        } else {
            [(t + fi, div.recip()), (t + fi - 1, -div.recip())]
        };
        Window {
            first: t,
            last: t + fi,
            div,
            tail: [(t + fi, c - e), (t + ci, e - f)],
            slope,
        }
    } else {
        let a = -e;
        let (f, c) = (a.floor(), a.ceil());
        let (fi, ci) = (f.to_usize().unwrap(), c.to_usize().unwrap());
        let div = c + one;
        let slope = if saturated {
            none
        } else if fi != ci {
            [(t - fi, div.recip()), (t - ci, -div.recip())]
        } else {
            [(t - fi + 1, div.recip()), (t - fi, -div.recip())]
        };
        Window {
            first: t - fi,
            last: t,
            div,
            tail: [(t - fi, c - a), (t - ci, a - f)],
            slope,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Tail,
    Aggregate,
}

fn check_shapes(f: &[usize], dt: &[usize]) -> Result<()> {
    let ok = f.len() == 5 && dt.len() == 5 && dt[1] == 1 && f[0] == dt[0] && f[2..] == dt[2..];
    if ok {
        Ok(())
    } else {
        Err(Error::dim("temporal aggregation", f, dt))
    }
}

fn forward<T: Element>(f: &Tensor<T>, dt: &Tensor<T>, kind: Kind) -> Tensor<T> {
    let s = f.shape();
    let (n, c, len, hw) = (s[0], s[1], s[2], s[3] * s[4]);
    let (fd, dd) = (f.data(), dt.data());
    let mut out = vec![T::zero(); fd.len()];
    for b in 0..n {
        for t in 0..len {
            for p in 0..hw {
                let w = window(t, dd[(b * len + t) * hw + p], len);
                for ch in 0..c {
                    let base = (b * c + ch) * len * hw + p;
                    let at = |i: usize| fd[base + i * hw];
                    let tail = w.tail[0].1 * at(w.tail[0].0) + w.tail[1].1 * at(w.tail[1].0);
                    out[base + t * hw] = match kind {
                        Kind::Tail => tail,
                        Kind::Aggregate => {
                            let mut acc = T::zero();
                            for i in w.first..=w.last {
                                acc = acc + at(i);
                            }
                            (acc + tail) / w.div
                        }
                    };
                }
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}

struct AggregateBackward(Kind);

impl<T: Element> Backward<T> for AggregateBackward {
    fn backward(
        &self,
        values: &Values<'_, T>,
        inputs: &[Var],
        _output: &Tensor<T>,
        gout: &[T],
        need: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let f = values.get(inputs[0]);
        let dt = values.get(inputs[1]);
        let s = f.shape();
        let (n, c, len, hw) = (s[0], s[1], s[2], s[3] * s[4]);
        let (fd, dd) = (f.data(), dt.data());
        let mut df = need[0].then(|| vec![T::zero(); fd.len()]);
        let mut ddt = need[1].then(|| vec![T::zero(); dd.len()]);
        for b in 0..n {
            for t in 0..len {
                for p in 0..hw {
                    let oi = (b * len + t) * hw + p;
                    let w = window(t, dd[oi], len);
                    let mut acc_dt = T::zero();
                    for ch in 0..c {
                        let base = (b * c + ch) * len * hw + p;
                        let g = gout[base + t * hw];
                        match self.0 {
                            Kind::Aggregate => {
                                if let Some(df) = df.as_mut() {
                                    let gd = g / w.div;
                                    for i in w.first..=w.last {
                                        df[base + i * hw] = df[base + i * hw] + gd;
                                    }
                                    for (i, wt) in w.tail {
                                        df[base + i * hw] = df[base + i * hw] + gd * wt;
                                    }
                                }
                                let sl = w.slope[0].1 * fd[base + w.slope[0].0 * hw]
                                    + w.slope[1].1 * fd[base + w.slope[1].0 * hw];
                                acc_dt = acc_dt + g * sl;
                            }
                            Kind::Tail => {
                                if let Some(df) = df.as_mut() {
                                    for (i, wt) in w.tail {
                                        df[base + i * hw] = df[base + i * hw] + g * wt;
                                    }
                                }
                                // only between integers; the tail jumps at integers
                                if w.tail[0].0 != w.tail[1].0 {
                                    let sl = w.slope[0].1 * fd[base + w.slope[0].0 * hw]
                                        + w.slope[1].1 * fd[base + w.slope[1].0 * hw];
                                    acc_dt = acc_dt + g * sl * w.div;
                                }
                            }
                        }
                    }
                    if let Some(ddt) = ddt.as_mut() {
                        ddt[oi] = acc_dt;
                    }
                }
            }
        }
        vec![df, ddt]
    }
}

impl<T: Element> Graph<T> {
    /// Interpolated tail `O` at `t + dt` (without the running sum or the
    /// normalization). `features: [N, C, T, H, W]`, `offsets: [N, 1, T, H, W]`.
    pub fn fractional_tail(&mut self, features: Var, offsets: Var) -> Result<Var> {
        check_shapes(self.shape(features), self.shape(offsets))?;
        let out = forward(self.value(features), self.value(offsets), Kind::Tail);
        self.push("fractional_tail", out, vec![features, offsets], Box::new(AggregateBackward(Kind::Tail)))
    }

    /// Adaptive temporal average over the per-pixel receptive field given by
    /// `offsets`. `features: [N, C, T, H, W]`, `offsets: [N, 1, T, H, W]`.
    pub fn aggregate_adaptive(&mut self, features: Var, offsets: Var) -> Result<Var> {
        check_shapes(self.shape(features), self.shape(offsets))?;
        let out = forward(self.value(features), self.value(offsets), Kind::Aggregate);
        self.push(
            "aggregate_adaptive",
            out,
            vec![features, offsets],
            Box::new(AggregateBackward(Kind::Aggregate)),
        )
    }
}

/// Plain-tensor form of [`Graph::aggregate_adaptive`].
pub fn aggregate_adaptive<T: Element>(features: &Tensor<T>, offsets: &Tensor<T>) -> Result<Tensor<T>> {
    check_shapes(features.shape(), offsets.shape())?;
    Ok(forward(features, offsets, Kind::Aggregate))
}

/// Plain-tensor form of [`Graph::fractional_tail`].
pub fn fractional_tail<T: Element>(features: &Tensor<T>, offsets: &Tensor<T>) -> Result<Tensor<T>> {
    check_shapes(features.shape(), offsets.shape())?;
    Ok(forward(features, offsets, Kind::Tail))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// One pixel, one channel: series `f` over time, offset `dt` at every frame.
    fn series(f: &[f64], dt: f64) -> (Tensor<f64>, Tensor<f64>) {
        let t = f.len();
        (
            Tensor::new([1, 1, t, 1, 1], f.to_vec()).unwrap(),
            Tensor::full([1, 1, t, 1, 1], dt),
        )
    }

    #[test]
    fn tail_vanishes_at_integer_offsets() {
        let (f, dt) = series(&[1.0, 2.0, 3.0, 4.0], 1.0);
        let o = fractional_tail(&f, &dt).unwrap();
        assert!(o.data()[..3].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tail_half_offsets() {
        let (f, dt) = series(&[2.0, 4.0, 9.0], 0.5);
        assert_eq!(fractional_tail(&f, &dt).unwrap().data()[0], 3.0);
        let (f, dt) = series(&[0.0, 10.0, 20.0], 1.5);
        assert_eq!(fractional_tail(&f, &dt).unwrap().data()[0], 15.0);
    }

    #[test]
    fn aggregate_hand_values() {
        let (f, dt) = series(&[2.0, 4.0, 9.0], 0.5);
        assert_eq!(aggregate_adaptive(&f, &dt).unwrap().data()[0], 2.5);
        let (a, b, c) = (3.0, 5.0, 11.0);
        let (f, dt) = series(&[a, b, c], 1.5);
        let v = aggregate_adaptive(&f, &dt).unwrap().data()[0];
        assert!((v - (a / 3.0 + b / 2.0 + c / 6.0)).abs() < 1e-14);
    }

    #[test]
    fn zero_offset_is_exact_identity() {
        let (f, dt) = series(&[0.1, -7.25, 3.3, 1e-3], 0.0);
        assert_eq!(aggregate_adaptive(&f, &dt).unwrap().data(), f.data());
    }

    #[test]
    fn endpoint_is_clamped() {
        // t=1, dt=5 in a 3-frame series clamps to e=1: mean of frames 1,2
        let (f, dt) = series(&[1.0, 2.0, 6.0], 5.0);
        assert_eq!(aggregate_adaptive(&f, &dt).unwrap().data()[1], 4.0);
        // t=1, dt=-5 clamps to e=-1: mean of frames 0,1
        let (f, dt) = series(&[1.0, 2.0, 6.0], -5.0);
        assert_eq!(aggregate_adaptive(&f, &dt).unwrap().data()[1], 1.5);
    }

    #[test]
    fn offset_gradient_is_zero_when_saturated() {
        let mut g = Graph::<f64>::new();
        let (f, dt) = series(&[1.0, 2.0, 6.0], 5.0);
        let f = g.constant(f);
        let dt = g.param(dt);
        let y = g.aggregate_adaptive(f, dt).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(dt).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_offset_gradient_is_central_difference() {
        let mut g = Graph::<f64>::new();
        let (f, dt) = series(&[1.0, 2.0, 6.0], 0.0);
        let f = g.constant(f);
        let dt = g.param(dt);
        let y = g.aggregate_adaptive(f, dt).unwrap();
        let y = g.slice(y, 2, 1, 1).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(dt).unwrap()[1], (6.0 - 1.0) / 4.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let f = Tensor::<f64>::zeros([1, 2, 3, 1, 1]);
        let dt = Tensor::<f64>::zeros([1, 2, 3, 1, 1]);
        assert!(aggregate_adaptive(&f, &dt).is_err());
    }
}
