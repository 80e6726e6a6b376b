//! Motion excitation: a spatial gate from aligned adjacent-frame differences
//! (SME), a channel gate from local high-frequency temporal energy (CME), and
//! their residual sum (RDE). All tensors are `[N, C, T, H, W]`.

use super::params::{Bound, Init, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Element, Graph, PadMode, PoolMode, PoolSpec, Var};

/// Two pointwise linear layers over channels with a relu between them.
#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl MlpVars {
    fn bind(b: &Bound, prefix: &str) -> Result<Self> {
        Ok(Self {
            w1: b.get(&format!("{prefix}.mlp.w1"))?,
            b1: b.get(&format!("{prefix}.mlp.b1"))?,
            w2: b.get(&format!("{prefix}.mlp.w2"))?,
            b2: b.get(&format!("{prefix}.mlp.b2"))?,
        })
    }
}

/// The output layer is zero so that a fresh block contributes nothing.
fn init_mlp<T: Element>(store: &mut ParamStore<T>, prefix: &str, c: usize, seed: u64) {
    store.init(
        &format!("{prefix}.mlp.w1"),
        &[c, c, 1, 1, 1],
        Init::FanInUniform { fan_in: c, gain: 6.0 },
        true,
        seed,
    );
    store.init(&format!("{prefix}.mlp.b1"), &[c], Init::Zeros, false, seed);
    store.init(&format!("{prefix}.mlp.w2"), &[c, c, 1, 1, 1], Init::Zeros, true, seed);
    store.init(&format!("{prefix}.mlp.b2"), &[c], Init::Zeros, false, seed);
}

/// Channel MLP applied independently at every (t, h, w) position.
pub fn mlp<T: Element>(g: &mut Graph<T>, x: Var, m: &MlpVars) -> Result<Var> {
    let pw = ConvSpec::same(&[0, 0, 0]);
    let h = g.conv_nd(x, m.w1, Some(m.b1), &pw)?;
    let h = g.relu(h)?;
    g.conv_nd(h, m.w2, Some(m.b2), &pw)
}

/// `mlp(sigmoid(mask) * f + f)` with `mask` broadcast against `f`.
fn gated_residual<T: Element>(g: &mut Graph<T>, f: Var, mask: Var, m: &MlpVars) -> Result<Var> {
    let gate = g.sigmoid(mask)?;
    let w = g.mul(f, gate)?;
    let r = g.add(w, f)?;
    mlp(g, r, m)
}

#[derive(Clone, Copy, Debug)]
pub struct SmeVars {
    /// Depthwise `[C, 1, 1, 3, 3]`.
    pub align: Var,
    pub mlp: MlpVars,
}

impl SmeVars {
    pub fn bind(b: &Bound, prefix: &str) -> Result<Self> {
        Ok(Self {
            align: b.get(&format!("{prefix}.align"))?,
            mlp: MlpVars::bind(b, prefix)?,
        })
    }
}

pub fn init_sme<T: Element>(store: &mut ParamStore<T>, prefix: &str, c: usize, seed: u64) {
    store.init(
        &format!("{prefix}.align"),
        &[c, 1, 1, 3, 3],
        Init::FanInUniform { fan_in: 9, gain: 3.0 },
        true,
        seed,
    );
    init_mlp(store, prefix, c, seed);
}

/// Spatial motion mask `[N, 1, T, H, W]`:
/// `M[t] = mean_c(align(F[t])_c - F[t-1]_c)` for `t >= 1`, and `M[0] = M[1]`.
pub fn sme_mask<T: Element>(g: &mut Graph<T>, f: Var, align: Var) -> Result<Var> {
    let s = g.shape(f).to_vec();
    if s.len() != 5 {
        return Err(Error::dim("sme_mask", &s, g.shape(align)));
    }
    let (c, len) = (s[1], s[2]);
    if len < 2 {
        return Err(Error::SequenceLength {
            op: "sme_mask",
            needed: 2,
            got: len,
        });
    }
    let aligned = g.conv_nd(f, align, None, &ConvSpec::same(&[0, 1, 1]).with_groups(c))?;
    let cur = g.slice(aligned, 2, 1, len - 1)?;
    let prev = g.slice(f, 2, 0, len - 1)?;
    let diff = g.sub(cur, prev)?;
    let m = g.mean_axes(diff, &[1])?;
    let first = g.slice(m, 2, 0, 1)?;
    g.concat(&[first, m], 2)
}

pub fn sme_forward<T: Element>(g: &mut Graph<T>, f: Var, vars: &SmeVars) -> Result<Var> {
    let mask = sme_mask(g, f, vars.align)?;
    gated_residual(g, f, mask, &vars.mlp)
}

#[derive(Clone, Copy, Debug)]
pub struct CmeVars {
    /// Temporal `[C, C, 3, 1, 1]`.
    pub temporal: Var,
    pub temporal_bias: Var,
    pub mlp: MlpVars,
}

impl CmeVars {
    pub fn bind(b: &Bound, prefix: &str) -> Result<Self> {
        Ok(Self {
            temporal: b.get(&format!("{prefix}.temporal.weight"))?,
            temporal_bias: b.get(&format!("{prefix}.temporal.bias"))?,
            mlp: MlpVars::bind(b, prefix)?,
        })
    }
}

pub fn init_cme<T: Element>(store: &mut ParamStore<T>, prefix: &str, c: usize, seed: u64) {
    store.init(
        &format!("{prefix}.temporal.weight"),
        &[c, c, 3, 1, 1],
        Init::FanInUniform {
            fan_in: 3 * c,
            gain: 3.0,
        },
        true,
        seed,
    );
    store.init(&format!("{prefix}.temporal.bias"), &[c], Init::Zeros, false, seed);
    init_mlp(store, prefix, c, seed);
}

/// Local temporal context: average over 5 frames, stride 1, replicate padding.
pub fn local_pool_spec() -> PoolSpec {
    PoolSpec {
        mode: PoolMode::Avg,
        window: vec![5, 1, 1],
        stride: vec![1, 1, 1],
        padding: vec![2, 0, 0],
        pad_mode: PadMode::Replicate,
    }
}

/// High-frequency motion `|F - avgpool_t(F)|`.
pub fn cme_motion<T: Element>(g: &mut Graph<T>, f: Var) -> Result<Var> {
    let local = g.pool_nd(f, &local_pool_spec())?;
    let d = g.sub(f, local)?;
    g.abs(d)
}

/// Channel gate logits `[N, C, T, 1, 1]` from spatially pooled motion.
pub fn cme_mask<T: Element>(g: &mut Graph<T>, f: Var, vars: &CmeVars) -> Result<Var> {
    let motion = cme_motion(g, f)?;
    let pooled = g.mean_axes(motion, &[3, 4])?;
    g.conv_nd(pooled, vars.temporal, Some(vars.temporal_bias), &ConvSpec::same(&[1, 0, 0]))
}

pub fn cme_forward<T: Element>(g: &mut Graph<T>, f: Var, vars: &CmeVars) -> Result<Var> {
    let mask = cme_mask(g, f, vars)?;
    gated_residual(g, f, mask, &vars.mlp)
}

/// `f + sme(f) + cme(f)`, each branch optional.
pub fn rde_forward<T: Element>(g: &mut Graph<T>, f: Var, sme: Option<&SmeVars>, cme: Option<&CmeVars>) -> Result<Var> {
    let mut out = f;
    if let Some(s) = sme {
        let y = sme_forward(g, f, s)?;
        out = g.add(out, y)?;
    }
    if let Some(c) = cme {
        let y = cme_forward(g, f, c)?;
        out = g.add(out, y)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn delta_align(c: usize) -> Tensor<f64> {
        Tensor::from_fn([c, 1, 1, 3, 3], |i| if i % 9 == 4 { 1.0 } else { 0.0 })
    }

    fn static_seq(c: usize, t: usize) -> Tensor<f64> {
        // every frame identical
        Tensor::from_fn([1, c, t, 4, 5], |i| {
            let hw = i % 20;
            let ch = i / (20 * t);
            (hw as f64 * 0.3 + ch as f64).cos()
        })
    }

    #[test]
    fn static_sequence_has_zero_spatial_mask() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(static_seq(3, 5));
        let k = g.constant(delta_align(3));
        let m = sme_mask(&mut g, f, k).unwrap();
        assert_eq!(g.shape(m), &[1, 1, 5, 4, 5]);
        assert!(g.data(m).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn first_mask_frame_copies_second() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(Tensor::from_fn([2, 3, 4, 3, 3], |i| ((i * 7919) % 13) as f64 - 6.0));
        let k = g.constant(Tensor::from_fn([3, 1, 1, 3, 3], |i| (i as f64 * 0.1).sin()));
        let m = sme_mask(&mut g, f, k).unwrap();
        let v = g.value(m);
        for n in 0..2 {
            for p in 0..9 {
                assert_eq!(v.at(&[n, 0, 0, p / 3, p % 3]), v.at(&[n, 0, 1, p / 3, p % 3]));
            }
        }
    }

    #[test]
    fn single_channel_difference() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(Tensor::new([1, 1, 2, 1, 1], vec![3.0, 5.0]).unwrap());
        let mut k = Tensor::zeros([1, 1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let k = g.constant(k);
        let m = sme_mask(&mut g, f, k).unwrap();
        assert_eq!(g.data(m), &[2.0, 2.0]);
    }

    #[test]
    fn one_frame_is_sequence_error() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(Tensor::zeros([1, 1, 1, 2, 2]));
        let k = g.constant(delta_align(1));
        assert!(matches!(sme_mask(&mut g, f, k), Err(Error::SequenceLength { .. })));
    }

    #[test]
    fn motion_of_static_sequence_is_zero() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(static_seq(2, 6));
        let d = cme_motion(&mut g, f).unwrap();
        assert!(g.data(d).iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn motion_spike() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(Tensor::new([1, 1, 5, 1, 1], vec![0.0, 0.0, 10.0, 0.0, 0.0]).unwrap());
        let d = cme_motion(&mut g, f).unwrap();
        assert_eq!(g.data(d)[2], 8.0);
        assert!(g.data(d).iter().all(|&v| v >= 0.0));
    }

    fn identity_mlp(g: &mut Graph<f64>, c: usize) -> MlpVars {
        // relu(x) on nonnegative input, then identity: identity overall
        let eye = Tensor::from_fn([c, c, 1, 1, 1], |i| if i / c == i % c { 1.0 } else { 0.0 });
        MlpVars {
            w1: g.constant(eye.clone()),
            b1: g.constant(Tensor::zeros([c])),
            w2: g.constant(eye),
            b2: g.constant(Tensor::zeros([c])),
        }
    }

    #[test]
    fn zero_mask_with_identity_mlp_scales_by_one_and_a_half() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(Tensor::from_fn([1, 2, 3, 2, 2], |i| i as f64 * 0.25));
        let mask = g.constant(Tensor::zeros([1, 1, 3, 2, 2]));
        let m = identity_mlp(&mut g, 2);
        let y = gated_residual(&mut g, f, mask, &m).unwrap();
        for (a, b) in g.data(y).iter().zip(g.data(f)) {
            assert_eq!(*a, 1.5 * b);
        }
    }

    #[test]
    fn cme_static_sequence_identity_mlp() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(static_seq(2, 6).reshape([1, 2, 6, 4, 5]).unwrap());
        let f_abs = g.abs(f).unwrap();
        let m = identity_mlp(&mut g, 2);
        let vars = CmeVars {
            temporal: g.constant(Tensor::from_fn([2, 2, 3, 1, 1], |i| i as f64 - 5.0)),
            temporal_bias: g.constant(Tensor::zeros([2])),
            mlp: m,
        };
        let y = cme_forward(&mut g, f_abs, &vars).unwrap();
        for (a, b) in g.data(y).iter().zip(g.data(f_abs)) {
            assert!((a - 1.5 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn rde_identity_cases() {
        let mut store = ParamStore::<f64>::new();
        init_sme(&mut store, "sme", 3, 1);
        init_cme(&mut store, "cme", 3, 1);
        let mut g = Graph::<f64>::new();
        let b = store.bind(&mut g, false);
        let sme = SmeVars::bind(&b, "sme").unwrap();
        let cme = CmeVars::bind(&b, "cme").unwrap();
        let f = g.constant(Tensor::from_fn([1, 3, 6, 3, 3], |i| (i as f64 * 0.7).sin()));
        let off = rde_forward(&mut g, f, None, None).unwrap();
        assert_eq!(off, f);
        // zero output layers make both branches vanish
        let both = rde_forward(&mut g, f, Some(&sme), Some(&cme)).unwrap();
        assert_eq!(g.data(both), g.data(f));
    }
}
