//! Reductions and layout operations.

use crate::error::{Error, Result};
use crate::tensor::graph::{Backward, Values};
use crate::tensor::{numel, strides, Element, Graph, Tensor, Var};

/// Maps each flat index of `shape` to its flat index in `reduced` (same rank,
/// reduced dims set to 1).
fn reduce_map(shape: &[usize], reduced: &[usize]) -> Vec<usize> {
    let rs = strides(reduced);
    let mut idx = vec![0usize; shape.len()];
    let mut map = Vec::with_capacity(numel(shape));
    for _ in 0..numel(shape) {
        map.push(
            idx.iter()
                .zip(reduced)
                .zip(&rs)
                .map(|((&i, &d), &s)| if d == 1 { 0 } else { i * s })
                .sum(),
        );
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

struct ReduceBackward {
    map: Vec<usize>,
    scale: f64,
}

impl<T: Element> Backward<T> for ReduceBackward {
    fn backward(
        &self,
        _values: &Values<'_, T>,
        _inputs: &[Var],
        _output: &Tensor<T>,
        gout: &[T],
        _need: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let s = T::cst(self.scale);
        vec![Some(self.map.iter().map(|&o| gout[o] * s).collect())]
    }
}

struct IndexBackward {
    /// Output flat index -> input flat index.
    map: Vec<usize>,
    input_len: usize,
}

impl<T: Element> Backward<T> for IndexBackward {
    fn backward(
        &self,
        _values: &Values<'_, T>,
        _inputs: &[Var],
        _output: &Tensor<T>,
        gout: &[T],
        _need: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let mut dx = vec![T::zero(); self.input_len];
        for (&i, &g) in self.map.iter().zip(gout) {
            dx[i] = dx[i] + g;
        }
        vec![Some(dx)]
    }
}

struct ConcatBackward {
    axis: usize,
}

impl<T: Element> Backward<T> for ConcatBackward {
    fn backward(
        &self,
        values: &Values<'_, T>,
        inputs: &[Var],
        output: &Tensor<T>,
        gout: &[T],
        need: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let shape = output.shape();
        let outer: usize = shape[..self.axis].iter().product();
        let inner: usize = shape[self.axis + 1..].iter().product();
        let total = shape[self.axis] * inner;
        let mut offset = 0;
        inputs
            .iter()
            .zip(need)
            .map(|(v, &nd)| {
                let len = values.get(*v).shape()[self.axis] * inner;
                let res = nd.then(|| {
                    let mut d = Vec::with_capacity(outer * len);
                    for o in 0..outer {
                        d.extend_from_slice(&gout[o * total + offset..o * total + offset + len]);
                    }
                    d
                });
                offset += len;
                res
            })
            .collect()
    }
}

struct ReshapeBackward;

impl<T: Element> Backward<T> for ReshapeBackward {
    fn backward(
        &self,
        _values: &Values<'_, T>,
        _inputs: &[Var],
        _output: &Tensor<T>,
        gout: &[T],
        _need: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        vec![Some(gout.to_vec())]
    }
}

impl<T: Element> Graph<T> {
    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.data(x).iter().copied().sum();
        self.push(
            "sum",
            Tensor::scalar(s),
            vec![x],
            Box::new(ReduceBackward {
                map: vec![0; n],
                scale: 1.0,
            }),
        )
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s: T = self.data(x).iter().copied().sum();
        self.push(
            "mean",
            Tensor::scalar(s / T::from_usize(n).unwrap()),
            vec![x],
            Box::new(ReduceBackward {
                map: vec![0; n],
                scale: 1.0 / n as f64,
            }),
        )
    }

    fn reduce_axes(&mut self, x: Var, axes: &[usize], mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axes.iter().any(|&a| a >= shape.len()) {
            return Err(Error::dim("reduce_axes", &shape, axes));
        }
        let mut reduced = shape.clone();
        let mut count = 1;
        for &a in axes {
            count *= reduced[a];
            reduced[a] = 1;
        }
        let map = reduce_map(&shape, &reduced);
        let mut out = vec![T::zero(); numel(&reduced)];
        for (&o, &v) in map.iter().zip(self.data(x)) {
            out[o] = out[o] + v;
        }
        let scale = if mean { 1.0 / count as f64 } else { 1.0 };
        if mean {
            let c = T::from_usize(count).unwrap();
            out.iter_mut().for_each(|v| *v = *v / c);
        }
        let t = Tensor::new(reduced, out)?;
        self.push("reduce_axes", t, vec![x], Box::new(ReduceBackward { map, scale }))
    }

    /// Sum over `axes`, keeping them as singleton dims.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce_axes(x, axes, false)
    }

    /// Mean over `axes`, keeping them as singleton dims.
    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce_axes(x, axes, true)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).numel() {
            return Err(Error::dim("reshape", self.shape(x), shape));
        }
        let t = Tensor::new(shape.to_vec(), self.data(x).to_vec())?;
        self.push("reshape", t, vec![x], Box::new(ReshapeBackward))
    }

    /// Reorders dims so that output dim `i` is input dim `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("permute", &shape, perm));
        }
        let st = strides(&shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let pst: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
        let n = numel(&shape);
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        let mut cur = 0usize;
        for _ in 0..n {
            map.push(cur);
            for d in (0..out_shape.len()).rev() {
                idx[d] += 1;
                cur += pst[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                cur -= pst[d] * idx[d];
                idx[d] = 0;
            }
        }
        let xd = self.data(x);
        let data = map.iter().map(|&i| xd[i]).collect();
        let t = Tensor::new(out_shape, data)?;
        self.push("permute", t, vec![x], Box::new(IndexBackward { map, input_len: n }))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::dim("slice", &shape, &[axis, start, len]));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut map = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            map.extend(base..base + len * inner);
        }
        let xd = self.data(x);
        let data = map.iter().map(|&i| xd[i]).collect();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let t = Tensor::new(out_shape, data)?;
        self.push(
            "slice",
            t,
            vec![x],
            Box::new(IndexBackward {
                map,
                input_len: numel(&shape),
            }),
        )
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::Usage("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::dim("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.data(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(shape, data)?;
        self.push("concat", t, xs.to_vec(), Box::new(ConcatBackward { axis }))
    }
}
