//! Batch normalization over the leading (batch) dim of `[N, D]` inputs.

use crate::error::{Error, Result};
use crate::tensor::graph::{Backward, Values};
use crate::tensor::{Element, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Element> BatchNormState<T> {
    /// Mean 0, variance 1, momentum 0.1, eps 1e-5.
    pub fn new(features: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); features],
            running_var: vec![T::one(); features],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

struct BatchNormBackward<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    n: usize,
    d: usize,
    train: bool,
}

impl<T: Element> Backward<T> for BatchNormBackward<T> {
    fn backward(
        &self,
        values: &Values<'_, T>,
        inputs: &[Var],
        _output: &Tensor<T>,
        gout: &[T],
        need: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let (n, d) = (self.n, self.d);
        let gamma = values.get(inputs[1]).data();
        let mut dgamma = vec![T::zero(); d];
        let mut dbeta = vec![T::zero(); d];
        for r in 0..n {
            for j in 0..d {
                let g = gout[r * d + j];
                dgamma[j] = dgamma[j] + g * self.xhat[r * d + j];
                dbeta[j] = dbeta[j] + g;
            }
        }
        let dx = need[0].then(|| {
            let mut dx = vec![T::zero(); n * d];
            let nf = T::from_usize(n).unwrap();
            for j in 0..d {
                for r in 0..n {
                    let dxhat = gout[r * d + j] * gamma[j];
                    dx[r * d + j] = if self.train {
                        // (N dxhat - sum dxhat - xhat * sum(dxhat xhat)) / (N std)
                        (nf * dxhat - dbeta[j] * gamma[j] - self.xhat[r * d + j] * dgamma[j] * gamma[j])
                            * self.inv_std[j]
                            / nf
                    } else {
                        dxhat * self.inv_std[j]
                    };
                }
            }
            dx
        });
        vec![dx, need[1].then_some(dgamma), need[2].then_some(dbeta)]
    }
}

impl<T: Element> Graph<T> {
    /// Batch norm of `x: [N, D]` with per-feature `gamma`, `beta`.
    ///
    /// Train mode normalizes with the biased batch variance and folds the
    /// batch statistics into `state` (unbiased variance for the running
    /// estimate); eval mode uses the running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState<T>,
        mode: NormMode,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::dim("batch_norm", &xs, self.shape(gamma)));
        }
        let (n, d) = (xs[0], xs[1]);
        for v in [gamma, beta] {
            if self.shape(v) != [d] {
                return Err(Error::dim("batch_norm", &xs, self.shape(v)));
            }
        }
        if state.running_mean.len() != d {
            return Err(Error::dim("batch_norm state", &xs, &[state.running_mean.len()]));
        }
        let train = mode == NormMode::Train;
        if train && n < 2 {
            return Err(Error::Config(format!("batch_norm in train mode needs N >= 2, got {n}")));
        }
        let xd = self.data(x);
        let eps = T::cst(state.eps);
        let (mean, var) = if train {
            let nf = T::from_usize(n).unwrap();
            let mut mean = vec![T::zero(); d];
            let mut var = vec![T::zero(); d];
            for r in 0..n {
                for j in 0..d {
                    mean[j] = mean[j] + xd[r * d + j];
                }
            }
            mean.iter_mut().for_each(|m| *m = *m / nf);
            for r in 0..n {
                for j in 0..d {
                    let c = xd[r * d + j] - mean[j];
                    var[j] = var[j] + c * c;
                }
            }
            var.iter_mut().for_each(|v| *v = *v / nf);
            (mean, var)
        } else {
            (state.running_mean.clone(), state.running_var.clone())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![T::zero(); n * d];
        let mut y = vec![T::zero(); n * d];
        for r in 0..n {
            for j in 0..d {
                let h = (xd[r * d + j] - mean[j]) * inv_std[j];
                xhat[r * d + j] = h;
                y[r * d + j] = gd[j] * h + bd[j];
            }
        }
        if train {
            let m = T::cst(state.momentum);
            let unbias = T::from_usize(n).unwrap() / T::from_usize(n - 1).unwrap();
            for j in 0..d {
                state.running_mean[j] = (T::one() - m) * state.running_mean[j] + m * mean[j];
                state.running_var[j] = (T::one() - m) * state.running_var[j] + m * var[j] * unbias;
            }
        }
        let out = Tensor::new(xs, y)?;
        self.push(
            "batch_norm",
            out,
            vec![x, gamma, beta],
            Box::new(BatchNormBackward {
                xhat,
                inv_std,
                n,
                d,
                train,
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bn(x: Vec<f64>, eps: f64) -> Vec<f64> {
        let n = x.len();
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new([n, 1], x).unwrap());
        let gamma = g.constant(Tensor::ones([1]));
        let beta = g.constant(Tensor::zeros([1]));
        let mut st = BatchNormState::new(1);
        st.eps = eps;
        let y = g.batch_norm(x, gamma, beta, &mut st, NormMode::Train).unwrap();
        g.data(y).to_vec()
    }

    #[test]
    fn hand_normalization() {
        let y = bn(vec![0.0, 2.0], 1e-5);
        // (±1)/sqrt(1 + 1e-5)
        let e = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y[0] + e).abs() < 1e-15 && (y[1] - e).abs() < 1e-15);
        let y = bn(vec![-1.0, 1.0], 1e-300);
        assert_eq!(y, vec![-1.0, 1.0]);
        let y = bn(vec![3.0, 3.0, 3.0], 1e-5);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_of_one_rejected_in_train_mode() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([1, 2]));
        let gamma = g.constant(Tensor::ones([2]));
        let beta = g.constant(Tensor::zeros([2]));
        let mut st = BatchNormState::new(2);
        assert!(matches!(
            g.batch_norm(x, gamma, beta, &mut st, NormMode::Train),
            Err(Error::Config(_))
        ));
        assert!(g.batch_norm(x, gamma, beta, &mut st, NormMode::Eval).is_ok());
    }

    #[test]
    fn running_stats_update_with_momentum() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new([2, 1], vec![0.0, 2.0]).unwrap());
        let gamma = g.constant(Tensor::ones([1]));
        let beta = g.constant(Tensor::zeros([1]));
        let mut st = BatchNormState::new(1);
        g.batch_norm(x, gamma, beta, &mut st, NormMode::Train).unwrap();
        assert!((st.running_mean[0] - 0.1).abs() < 1e-15);
        // unbiased batch var = 2
        assert!((st.running_var[0] - (0.9 + 0.2)).abs() < 1e-15);
    }
}
