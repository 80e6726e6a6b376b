//! Max / average pooling over 1-3 trailing spatial dims of `[N, C, ...]`.

use crate::error::{Error, Result};
use crate::tensor::graph::{Backward, Values};
use crate::tensor::{Element, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    /// Padded positions read as 0.
    Zero,
    /// Padded positions repeat the nearest edge value.
    Replicate,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub mode: PoolMode,
    pub window: Vec<usize>,
    pub stride: Vec<usize>,
    pub padding: Vec<usize>,
    pub pad_mode: PadMode,
}

impl PoolSpec {
    /// Non-overlapping windows without padding.
    pub fn tiled(mode: PoolMode, window: &[usize]) -> Self {
        Self {
            mode,
            window: window.to_vec(),
            stride: window.to_vec(),
            padding: vec![0; window.len()],
            pad_mode: PadMode::Zero,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Geom {
    planes: usize,
    input: [usize; 3],
    window: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    out: [usize; 3],
    replicate: bool,
}

impl Geom {
    fn new(x: &[usize], spec: &PoolSpec) -> Result<Self> {
        let nd = x.len().wrapping_sub(2);
        if !(1..=3).contains(&nd) {
            return Err(Error::dim("pool_nd", x, &spec.window));
        }
        if spec.window.len() != nd || spec.stride.len() != nd || spec.padding.len() != nd {
            return Err(Error::Config(format!(
                "pool_nd: window/stride/padding need {nd} entries"
            )));
        }
        let mut g = Geom {
            planes: x[0] * x[1],
            input: [1; 3],
            window: [1; 3],
            stride: [1; 3],
            pad: [0; 3],
            out: [1; 3],
            replicate: spec.pad_mode == PadMode::Replicate,
        };
        let off = 3 - nd;
        for d in 0..nd {
            let (i, w, s, p) = (x[2 + d], spec.window[d], spec.stride[d], spec.padding[d]);
            if w == 0 || s == 0 {
                return Err(Error::Config("pool_nd: zero window or stride".into()));
            }
            if w > i + 2 * p {
                return Err(Error::dim("pool_nd", x, &spec.window));
            }
            g.input[off + d] = i;
            g.window[off + d] = w;
            g.stride[off + d] = s;
            g.pad[off + d] = p;
            g.out[off + d] = (i + 2 * p - w) / s + 1;
        }
        Ok(g)
    }

    fn coord(&self, d: usize, o: usize, w: usize) -> Option<usize> {
        let c = (o * self.stride[d] + w) as isize - self.pad[d] as isize;
        let n = self.input[d] as isize;
        if (0..n).contains(&c) {
            Some(c as usize)
        } else if self.replicate {
            Some(c.clamp(0, n - 1) as usize)
        } else {
            None
        }
    }

    /// `(out_flat, src)` for every window element of every output position of
    /// one plane, in scan order; `src` is `None` for zero padding.
    fn taps(&self) -> Vec<(usize, Option<usize>)> {
        let mut taps = Vec::with_capacity(self.out.iter().product::<usize>() * self.window.iter().product::<usize>());
        self.for_each(|o, src| taps.push((o, src)));
        taps
    }

    fn for_each(&self, mut f: impl FnMut(usize, Option<usize>)) {
        let [_, ih, iw] = self.input;
        let [od, oh, ow] = self.out;
        let [wd, wh, ww] = self.window;
        let mut o = 0;
        for zd in 0..od {
            for yh in 0..oh {
                for xw in 0..ow {
                    for a in 0..wd {
                        let z = self.coord(0, zd, a);
                        for b in 0..wh {
                            let y = self.coord(1, yh, b);
                            for e in 0..ww {
                                let x = self.coord(2, xw, e);
                                let src = match (z, y, x) {
                                    (Some(z), Some(y), Some(x)) => Some((z * ih + y) * iw + x),
                                    _ => None,
                                };
                                f(o, src);
                            }
                        }
                    }
                    o += 1;
                }
            }
        }
    }
}

fn out_shape(x: &[usize], g: &Geom) -> Vec<usize> {
    let nd = x.len() - 2;
    let mut s = vec![x[0], x[1]];
    s.extend_from_slice(&g.out[3 - nd..]);
    s
}

/// Returns the pooled tensor and, for max mode, the flat source index of each
/// output (`usize::MAX` when the maximum came from zero padding).
fn pool_impl<T: Element>(x: &Tensor<T>, spec: &PoolSpec) -> Result<(Tensor<T>, Geom, Vec<usize>)> {
    let g = Geom::new(x.shape(), spec)?;
    let in_len: usize = g.input.iter().product();
    let out_len: usize = g.out.iter().product();
    let vol = T::from_usize(g.window.iter().product()).unwrap();
    let mut out = vec![T::zero(); g.planes * out_len];
    let mut arg = Vec::new();
    let taps = g.taps();
    match spec.mode {
        PoolMode::Avg => {
            for p in 0..g.planes {
                let xs = &x.data()[p * in_len..(p + 1) * in_len];
                let os = &mut out[p * out_len..(p + 1) * out_len];
                for &(o, src) in &taps {
                    if let Some(s) = src {
                        os[o] = os[o] + xs[s];
                    }
                }
                os.iter_mut().for_each(|v| *v = *v / vol);
            }
        }
        PoolMode::Max => {
            arg = vec![usize::MAX; g.planes * out_len];
            let mut seen = vec![false; out_len];
            for p in 0..g.planes {
                let xs = &x.data()[p * in_len..(p + 1) * in_len];
                let os = &mut out[p * out_len..(p + 1) * out_len];
                let am = &mut arg[p * out_len..(p + 1) * out_len];
                seen.fill(false);
                for &(o, src) in &taps {
                    let v = src.map_or(T::zero(), |s| xs[s]);
                    // strict comparison keeps the first maximum in scan order
                    if !seen[o] || v > os[o] {
                        seen[o] = true;
                        os[o] = v;
                        am[o] = src.map_or(usize::MAX, |s| p * in_len + s);
                    }
                }
            }
        }
    }
    Ok((Tensor::new(out_shape(x.shape(), &g), out)?, g, arg))
}

pub fn pool_nd<T: Element>(x: &Tensor<T>, spec: &PoolSpec) -> Result<Tensor<T>> {
    pool_impl(x, spec).map(|(t, _, _)| t)
}

struct PoolBackward {
    geom: Geom,
    mode: PoolMode,
    argmax: Vec<usize>,
}

impl<T: Element> Backward<T> for PoolBackward {
    fn backward(
        &self,
        values: &Values<'_, T>,
        inputs: &[Var],
        _output: &Tensor<T>,
        gout: &[T],
        _need: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let n = values.get(inputs[0]).numel();
        let mut dx = vec![T::zero(); n];
        match self.mode {
            PoolMode::Max => {
                for (&a, &g) in self.argmax.iter().zip(gout) {
                    if a != usize::MAX {
                        dx[a] = dx[a] + g;
                    }
                }
            }
            PoolMode::Avg => {
                let g = &self.geom;
                let in_len: usize = g.input.iter().product();
                let out_len: usize = g.out.iter().product();
                let vol = T::from_usize(g.window.iter().product()).unwrap();
                let taps = g.taps();
                for p in 0..g.planes {
                    let go = &gout[p * out_len..(p + 1) * out_len];
                    let dxs = &mut dx[p * in_len..(p + 1) * in_len];
                    for &(o, src) in &taps {
                        if let Some(s) = src {
                            dxs[s] = dxs[s] + go[o] / vol;
                        }
                    }
                }
            }
        }
        vec![Some(dx)]
    }
}

impl<T: Element> Graph<T> {
    /// Differentiable [`pool_nd`]. Max pooling routes the gradient to the first
    /// maximal element in scan order.
    pub fn pool_nd(&mut self, x: Var, spec: &PoolSpec) -> Result<Var> {
        let (out, geom, argmax) = pool_impl(self.value(x), spec)?;
        self.push(
            "pool_nd",
            out,
            vec![x],
            Box::new(PoolBackward {
                geom,
                mode: spec.mode,
                argmax,
            }),
        )
    }
}
