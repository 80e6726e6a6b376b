//! Region-aware dynamic aggregation: per-pixel learned temporal receptive
//! fields over a slice of the channels, followed by a spatio-temporal conv.

use super::params::{Bound, Init, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Element, Graph, Var};

/// Graph handles of one RDA block.
#[derive(Clone, Copy, Debug)]
pub struct RdaVars {
    /// `[1, C_sel, 3, 3, 3]`
    pub offset_weight: Var,
    pub offset_bias: Var,
    /// `[C_out, C_in, 3, 3, 3]`
    pub fuse_weight: Var,
    pub fuse_bias: Var,
}

impl RdaVars {
    pub fn bind(b: &Bound, prefix: &str) -> Result<Self> {
        Ok(Self {
            offset_weight: b.get(&format!("{prefix}.offset.weight"))?,
            offset_bias: b.get(&format!("{prefix}.offset.bias"))?,
            fuse_weight: b.get(&format!("{prefix}.fuse.weight"))?,
            fuse_bias: b.get(&format!("{prefix}.fuse.bias"))?,
        })
    }
}

/// Registers RDA parameters. The offset predictor starts at zero, so a fresh
/// block aggregates nothing and behaves as a plain 3x3x3 conv.
pub fn init_rda<T: Element>(store: &mut ParamStore<T>, prefix: &str, cin: usize, cout: usize, selected: usize, seed: u64) {
    store.init(&format!("{prefix}.offset.weight"), &[1, selected, 3, 3, 3], Init::Zeros, true, seed);
    store.init(&format!("{prefix}.offset.bias"), &[1], Init::Zeros, false, seed);
    store.init(
        &format!("{prefix}.fuse.weight"),
        &[cout, cin, 3, 3, 3],
        Init::FanInUniform {
            fan_in: cin * 27,
            gain: 3.0,
        },
        true,
        seed,
    );
    store.init(&format!("{prefix}.fuse.bias"), &[cout], Init::Zeros, false, seed);
}

/// `dt = T * tanh(conv3d(selected, kernel, pad 1))`, shape `[N, 1, T, H, W]`.
pub fn predict_offsets<T: Element>(g: &mut Graph<T>, selected: Var, weight: Var, bias: Var) -> Result<Var> {
    let s = g.shape(selected);
    if s.len() != 5 || s[1] == 0 {
        return Err(Error::Config(format!("offset prediction needs [N, C_sel>0, T, H, W], got {s:?}")));
    }
    let frames = s[2] as f64;
    let raw = g.conv_nd(selected, weight, Some(bias), &ConvSpec::same(&[1, 1, 1]))?;
    let act = g.tanh(raw)?;
    g.scale(act, frames)
}

#[derive(Clone, Copy, Debug)]
pub struct RdaOutput {
    pub output: Var,
    pub offsets: Var,
}

/// RDA block on `f: [N, C_in, T, H, W]`.
///
/// The first `selected` channels are aggregated over their learned receptive
/// fields, concatenated back with the untouched remainder, and fused by a
/// 3x3x3 conv to `C_out` channels.
pub fn rda_forward<T: Element>(g: &mut Graph<T>, f: Var, vars: &RdaVars, selected: usize) -> Result<RdaOutput> {
    let c = g.shape(f)[1];
    if selected == 0 || selected > c {
        return Err(Error::Config(format!("RDA selects {selected} of {c} channels")));
    }
    let head = g.slice(f, 1, 0, selected)?;
    let offsets = predict_offsets(g, head, vars.offset_weight, vars.offset_bias)?;
    let agg = g.aggregate_adaptive(head, offsets)?;
    let merged = if selected < c {
        let rest = g.slice(f, 1, selected, c - selected)?;
        g.concat(&[agg, rest], 1)?
    } else {
        agg
    };
    let output = g.conv_nd(merged, vars.fuse_weight, Some(vars.fuse_bias), &ConvSpec::same(&[1, 1, 1]))?;
    Ok(RdaOutput { output, offsets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_kernel_gives_zero_offsets() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn([1, 2, 6, 3, 3], |i| (i as f64).sin()));
        let w = g.constant(Tensor::zeros([1, 2, 3, 3, 3]));
        let b = g.constant(Tensor::zeros([1]));
        let dt = predict_offsets(&mut g, x, w, b).unwrap();
        assert_eq!(g.shape(dt), &[1, 1, 6, 3, 3]);
        assert!(g.data(dt).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn centered_delta_kernel_on_constant_input() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones([1, 1, 4, 3, 3]));
        let mut k = Tensor::zeros([1, 1, 3, 3, 3]);
        k.data_mut()[13] = 0.5;
        let w = g.constant(k);
        let b = g.constant(Tensor::zeros([1]));
        let dt = predict_offsets(&mut g, x, w, b).unwrap();
        let v = g.value(dt).at(&[0, 0, 1, 1, 1]);
        assert!((v - 4.0 * 0.5f64.tanh()).abs() < 1e-12);
        assert!((v - 1.848468).abs() < 1e-6);
    }

    #[test]
    fn offsets_bounded_by_sequence_length() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn([1, 1, 6, 2, 2], |i| 100.0 * (i as f64 - 10.0)));
        let w = g.constant(Tensor::full([1, 1, 3, 3, 3], 50.0));
        let b = g.constant(Tensor::zeros([1]));
        let dt = predict_offsets(&mut g, x, w, b).unwrap();
        assert!(g.data(dt).iter().all(|v| v.abs() <= 6.0));
    }
}
