//! Elementwise unary maps and broadcasting binary arithmetic.

use crate::error::{Error, Result};
use crate::tensor::graph::{Backward, Values};
use crate::tensor::{numel, strides, Element, Graph, Tensor, Var};

/// Elementwise unary function.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    /// Subgradient 0 at exactly 0.
    Abs,
    Relu,
    /// Gradient 0 outside `[lo, hi]`.
    Clamp(f64, f64),
    Exp,
    Ln,
    Sqrt,
    /// `ln(1 + e^x)`.
    Softplus,
    Recip,
    Square,
    Neg,
    Scale(f64),
    Shift(f64),
    Powf(f64),
}

impl Unary {
    pub fn apply<T: Element>(self, x: T) -> T {
        match self {
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Abs => x.abs(),
            Unary::Relu => x.max(T::zero()),
            Unary::Clamp(lo, hi) => x.max(T::cst(lo)).min(T::cst(hi)),
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Softplus => softplus(x),
            Unary::Recip => x.recip(),
            Unary::Square => x * x,
            Unary::Neg => -x,
            Unary::Scale(s) => x * T::cst(s),
            Unary::Shift(s) => x + T::cst(s),
            Unary::Powf(p) => x.powf(T::cst(p)),
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative<T: Element>(self, x: T, y: T) -> T {
        let one = T::one();
        match self {
            Unary::Tanh => one - y * y,
            Unary::Sigmoid => y * (one - y),
            Unary::Abs => {
                if x > T::zero() {
                    one
                } else if x < T::zero() {
                    -one
                } else {
                    T::zero()
                }
            }
            Unary::Relu => {
                if x > T::zero() {
                    one
                } else {
                    T::zero()
                }
            }
            Unary::Clamp(lo, hi) => {
                if x >= T::cst(lo) && x <= T::cst(hi) {
                    one
                } else {
                    T::zero()
                }
            }
            Unary::Exp => y,
            Unary::Ln => x.recip(),
            Unary::Sqrt => T::cst(0.5) / y,
            Unary::Softplus => sigmoid(x),
            Unary::Recip => -y * y,
            Unary::Square => x + x,
            Unary::Neg => -one,
            Unary::Scale(s) => T::cst(s),
            Unary::Shift(_) => one,
            Unary::Powf(p) => T::cst(p) * x.powf(T::cst(p - 1.0)),
        }
    }
}

pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Element>(x: T) -> T {
    // ln(1+e^x) = max(x,0) + ln(1+e^-|x|)
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

struct UnaryBackward(Unary);

impl<T: Element> Backward<T> for UnaryBackward {
    fn backward(
        &self,
        values: &Values<'_, T>,
        inputs: &[Var],
        output: &Tensor<T>,
        gout: &[T],
        _need: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let x = values.get(inputs[0]).data();
        let dx = x
            .iter()
            .zip(output.data())
            .zip(gout)
            .map(|((&x, &y), &g)| g * self.0.derivative(x, y))
            .collect();
        vec![Some(dx)]
    }
}

/// Broadcast result shape; operands need equal rank and each dim equal or 1.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::dim(op, a, b));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::dim(op, a, b)),
        })
        .collect()
}

/// For every flat index of `out`, the flat index into a broadcast operand of
/// shape `src`.
fn broadcast_map(out: &[usize], src: &[usize]) -> Vec<usize> {
    let n = numel(out);
    if out == src {
        return (0..n).collect();
    }
    let ss = strides(src);
    let eff: Vec<usize> = src
        .iter()
        .zip(&ss)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let mut idx = vec![0usize; out.len()];
    let mut map = Vec::with_capacity(n);
    let mut cur = 0usize;
    for _ in 0..n {
        map.push(cur);
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            cur += eff[d];
            if idx[d] < out[d] {
                break;
            }
            cur -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

struct BinaryBackward {
    op: BinOp,
    amap: Vec<usize>,
    bmap: Vec<usize>,
}

impl<T: Element> Backward<T> for BinaryBackward {
    fn backward(
        &self,
        values: &Values<'_, T>,
        inputs: &[Var],
        _output: &Tensor<T>,
        gout: &[T],
        need: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let a = values.get(inputs[0]).data();
        let b = values.get(inputs[1]).data();
        let mut da = need[0].then(|| vec![T::zero(); a.len()]);
        let mut db = need[1].then(|| vec![T::zero(); b.len()]);
        for (o, &g) in gout.iter().enumerate() {
            let (i, j) = (self.amap[o], self.bmap[o]);
            let (ga, gb) = match self.op {
                BinOp::Add => (g, g),
                BinOp::Sub => (g, -g),
                BinOp::Mul => (g * b[j], g * a[i]),
                BinOp::Div => (g / b[j], -g * a[i] / (b[j] * b[j])),
            };
            if let Some(da) = da.as_mut() {
                da[i] = da[i] + ga;
            }
            if let Some(db) = db.as_mut() {
                db[j] = db[j] + gb;
            }
        }
        vec![da, db]
    }
}

struct PowVarBackward;

impl<T: Element> Backward<T> for PowVarBackward {
    fn backward(
        &self,
        values: &Values<'_, T>,
        inputs: &[Var],
        output: &Tensor<T>,
        gout: &[T],
        need: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let x = values.get(inputs[0]).data();
        let p = values.get(inputs[1]).item();
        let y = output.data();
        let dx = need[0].then(|| {
            x.iter()
                .zip(y)
                .zip(gout)
                .map(|((&x, &y), &g)| g * p * y / x)
                .collect()
        });
        let dp = need[1].then(|| {
            let s = x
                .iter()
                .zip(y)
                .zip(gout)
                .fold(T::zero(), |acc, ((&x, &y), &g)| acc + g * y * x.ln());
            vec![s]
        });
        vec![dx, dp]
    }
}

impl<T: Element> Graph<T> {
    pub fn unary(&mut self, x: Var, f: Unary) -> Result<Var> {
        let out = Tensor::new(
            self.shape(x).to_vec(),
            self.data(x).iter().map(|&v| f.apply(v)).collect(),
        )?;
        self.push("unary", out, vec![x], Box::new(UnaryBackward(f)))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Abs)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(x, Unary::Clamp(lo, hi))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(x, Unary::Scale(s))
    }

    pub fn shift(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(x, Unary::Shift(s))
    }

    pub(crate) fn binary(&mut self, a: Var, b: Var, op: BinOp) -> Result<Var> {
        let name = match op {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        };
        let shape = broadcast_shape(name, self.shape(a), self.shape(b))?;
        let amap = broadcast_map(&shape, self.shape(a));
        let bmap = broadcast_map(&shape, self.shape(b));
        let (ad, bd) = (self.data(a), self.data(b));
        let data = amap
            .iter()
            .zip(&bmap)
            .map(|(&i, &j)| {
                let (x, y) = (ad[i], bd[j]);
                match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    BinOp::Div => x / y,
                }
            })
            .collect();
        let out = Tensor::new(shape, data)?;
        self.push(name, out, vec![a, b], Box::new(BinaryBackward { op, amap, bmap }))
    }

    /// `a + b` with singleton-dim broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinOp::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinOp::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinOp::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinOp::Div)
    }

    /// `x^p` elementwise for positive `x` and a scalar variable exponent `p`.
    pub fn pow_var(&mut self, x: Var, p: Var) -> Result<Var> {
        if self.value(p).numel() != 1 {
            return Err(Error::dim("pow_var", self.shape(x), self.shape(p)));
        }
        let pv = self.value(p).item();
        let out = Tensor::new(
            self.shape(x).to_vec(),
            self.data(x).iter().map(|&v| v.powf(pv)).collect(),
        )?;
        self.push("pow_var", out, vec![x, p], Box::new(PowVarBackward))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_and_tanh_values() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((0.5f64.tanh() - 0.462117).abs() < 5e-7);
    }

    #[test]
    fn abs_backward_sign_and_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new([3], vec![-3.0, 0.0, 2.0]).unwrap());
        let y = g.abs(x).unwrap();
        assert_eq!(g.data(y), &[3.0, 0.0, 2.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new([3], vec![-2.0, 0.5, 2.0]).unwrap());
        let y = g.clamp(x, -1.0, 1.0).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.data(y), &[-1.0, 0.5, 1.0]);
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn broadcast_over_channels_and_reduction_in_backward() {
        let mut g = Graph::<f64>::new();
        // [T=2, C=3, H=1, W=2] times mask [2, 1, 1, 2]
        let f = g.param(Tensor::from_fn([2, 3, 1, 2], |i| i as f64));
        let m = g.param(Tensor::new([2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.mul(f, m).unwrap();
        assert_eq!(g.shape(y), &[2, 3, 1, 2]);
        assert_eq!(g.value(y).at(&[1, 2, 0, 1]), 11.0 * 4.0);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        // d/dm[t,0,0,w] = sum_c f[t,c,0,w]
        assert_eq!(g.grad(m).unwrap(), &[6.0, 9.0, 24.0, 27.0]);
    }

    #[test]
    fn non_broadcastable_shapes_fail() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([3, 2]));
        assert!(matches!(g.add(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(1000.0f64) - 1000.0).abs() < 1e-12);
        assert!(softplus(-1000.0f64) >= 0.0);
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
    }
}
