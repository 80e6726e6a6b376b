use crate::error::{Error, Result};
use crate::tensor::graph::{Backward, Values};
use crate::tensor::{Element, Graph, Tensor, Var};

struct LinearBackward {
    rows: usize,
    din: usize,
    dout: usize,
}

impl<T: Element> Backward<T> for LinearBackward {
    fn backward(
        &self,
        values: &Values<'_, T>,
        inputs: &[Var],
        _output: &Tensor<T>,
        gout: &[T],
        need: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let (rows, din, dout) = (self.rows, self.din, self.dout);
        let x = values.get(inputs[0]).data();
        let w = values.get(inputs[1]).data();
        let dx = need[0].then(|| {
            let mut dx = vec![T::zero(); rows * din];
            T::gemm(rows, dout, din, T::one(), gout, (dout, 1), w, (din, 1), T::zero(), &mut dx, (din, 1));
            dx
        });
        let dw = need[1].then(|| {
            let mut dw = vec![T::zero(); dout * din];
            T::gemm(dout, rows, din, T::one(), gout, (1, dout), x, (din, 1), T::zero(), &mut dw, (din, 1));
            dw
        });
        let mut res = vec![dx, dw];
        if inputs.len() == 3 {
            res.push(need[2].then(|| {
                let mut db = vec![T::zero(); dout];
                for r in 0..rows {
                    for (d, &g) in db.iter_mut().zip(&gout[r * dout..(r + 1) * dout]) {
                        *d = *d + g;
                    }
                }
                db
            }));
        }
        res
    }
}

impl<T: Element> Graph<T> {
    /// Affine map `x W^T + b` along the trailing dim.
    ///
    /// `x` is `[..., D_in]`, `weight` is `[D_out, D_in]`, `bias` is `[D_out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        let din = *xs.last().ok_or_else(|| Error::dim("linear", &xs, &ws))?;
        if ws.len() != 2 || ws[1] != din {
            return Err(Error::dim("linear", &xs, &ws));
        }
        let dout = ws[0];
        if let Some(b) = bias {
            if self.shape(b) != [dout] {
                return Err(Error::dim("linear bias", self.shape(b), &[dout]));
            }
        }
        let rows = self.value(x).numel() / din.max(1);
        let mut y = vec![T::zero(); rows * dout];
        T::gemm(rows, din, dout, T::one(), self.data(x), (din, 1), self.data(weight), (1, din), T::zero(), &mut y, (dout, 1));
        if let Some(b) = bias {
            let bd = self.data(b);
            for r in 0..rows {
                for (v, &bv) in y[r * dout..(r + 1) * dout].iter_mut().zip(bd) {
                    *v = *v + bv;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let out = Tensor::new(shape, y)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.push("linear", out, inputs, Box::new(LinearBackward { rows, din, dout }))
    }
}
