//! Four-stage backbone, GeM horizontal part pooling, BNNeck heads and the
//! assembled model.

use std::path::Path;

use super::config::ModelConfig;
use super::excitation::{init_cme, init_sme, rde_forward, CmeVars, SmeVars};
use super::params::{Bound, Init, ParamStore};
use super::rda::{init_rda, rda_forward, RdaVars};
use crate::error::{Error, Result};
use crate::tensor::grdt::{self, GrdtTensor};
use crate::tensor::{BatchNormState, ConvSpec, Element, Graph, NormMode, PoolMode, PoolSpec, Tensor, Var};

/// Initial GeM exponent.
pub const GEM_P_INIT: f64 = 3.0;
/// Lower bound added to `softplus` when mapping the raw GeM parameter to `p`.
pub const GEM_P_FLOOR: f64 = 1e-3;
/// Added to rectified features before GeM so that `x^p` and `ln x` stay finite.
pub const GEM_EPS: f64 = 1e-6;

/// Temporal conv with kernel 3, stride 3, 1x1 spatial; `[N,C,T,H,W] -> [N,C,T/3,H,W]`.
pub fn lta_forward<T: Element>(g: &mut Graph<T>, f: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
    let s = g.shape(f);
    if s.len() != 5 || !s[2].is_multiple_of(3) {
        return Err(Error::Config(format!(
            "local temporal aggregation needs a frame count divisible by 3, got shape {s:?}"
        )));
    }
    g.conv_nd(f, weight, bias, &ConvSpec::same(&[0, 0, 0]).with_stride(&[3, 1, 1]))
}

/// GeM pooling over horizontal strips.
///
/// `feature: [N, C, H, W]`, `raw_p` a scalar mapped to `p = softplus(raw_p) +
/// 1e-3`. Each of `parts` strips of `H / parts` rows yields one part vector
/// `(mean(v^p))^(1/p)` over `v = relu(x) + 1e-6`. Returns `[N, parts, C]`.
pub fn gem_hpp<T: Element>(g: &mut Graph<T>, feature: Var, raw_p: Var, parts: usize) -> Result<Var> {
    let s = g.shape(feature).to_vec();
    if s.len() != 4 || parts == 0 || !s[2].is_multiple_of(parts) {
        return Err(Error::dim("gem_hpp", &s, &[parts]));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let sp = g.unary(raw_p, crate::tensor::Unary::Softplus)?;
    let p = g.shift(sp, GEM_P_FLOOR)?;
    let inv_p = g.unary(p, crate::tensor::Unary::Recip)?;
    let v = g.relu(feature)?;
    let v = g.shift(v, GEM_EPS)?;
    let v = g.pow_var(v, p)?;
    let v = g.reshape(v, &[n, c, parts, (h / parts) * w])?;
    let m = g.mean_axes(v, &[3])?;
    let m = g.pow_var(m, inv_p)?;
    let m = g.reshape(m, &[n, c, parts])?;
    g.permute(m, &[0, 2, 1])
}

/// Raw GeM parameter giving `p = GEM_P_INIT`.
pub fn gem_raw_init() -> f64 {
    // inverse softplus
    (GEM_P_INIT - GEM_P_FLOOR).exp_m1().ln()
}

#[derive(Clone, Copy, Debug)]
pub struct NeckOutput {
    /// Pre-BN parts `[N, P, C]`, used by the triplet loss.
    pub triplet_feat: Var,
    /// Post-BN parts `[N, P, C]`, used for retrieval.
    pub infer_feat: Var,
    /// Per-part logits `[N, P, K]`.
    pub logits: Var,
}

/// Per-part batch norm followed by a per-part bias-free linear classifier.
///
/// `gamma`, `beta` are `[P * C]`; `classifier` is `[P, K, C]`.
pub fn bnneck_forward<T: Element>(
    g: &mut Graph<T>,
    parts: Var,
    gamma: Var,
    beta: Var,
    classifier: Var,
    state: &mut BatchNormState<T>,
    mode: NormMode,
) -> Result<NeckOutput> {
    let s = g.shape(parts).to_vec();
    let cs = g.shape(classifier).to_vec();
    if s.len() != 3 || cs.len() != 3 || cs[0] != s[1] || cs[2] != s[2] {
        return Err(Error::dim("bnneck", &s, &cs));
    }
    let (n, p, c, k) = (s[0], s[1], s[2], cs[1]);
    let flat = g.reshape(parts, &[n, p * c])?;
    let normed = g.batch_norm(flat, gamma, beta, state, mode)?;
    let infer = g.reshape(normed, &[n, p, c])?;
    let mut per_part = Vec::with_capacity(p);
    for i in 0..p {
        let x = g.slice(infer, 1, i, 1)?;
        let x = g.reshape(x, &[n, c])?;
        let w = g.slice(classifier, 0, i, 1)?;
        let w = g.reshape(w, &[k, c])?;
        let y = g.linear(x, w, None)?;
        per_part.push(g.reshape(y, &[n, 1, k])?);
    }
    let logits = g.concat(&per_part, 1)?;
    Ok(NeckOutput {
        triplet_feat: parts,
        infer_feat: infer,
        logits,
    })
}

/// Backbone result: `[N, C4, H/2, W/2]` and the offsets of every RDA stage.
#[derive(Clone, Debug)]
pub struct BackboneOutput {
    pub feature: Var,
    /// `(stage, offsets [N, 1, T', H', W'])` for stages 2-4 when RDA is on.
    pub offsets: Vec<(usize, Var)>,
}

fn conv3(cin: usize, gain: f64, k: [usize; 3]) -> Init {
    Init::FanInUniform {
        fan_in: cin * k.iter().product::<usize>(),
        gain,
    }
}

/// Registers every parameter of the model described by `cfg`.
pub fn init_params<T: Element>(cfg: &ModelConfig, seed: u64) -> ParamStore<T> {
    let mut s = ParamStore::new();
    let [c1, c2, c3, c4] = cfg.channels;
    s.init("stage1.conv.weight", &[c1, 1, 3, 3, 3], conv3(1, 6.0, [3, 3, 3]), true, seed);
    s.init("stage1.conv.bias", &[c1], Init::Zeros, false, seed);
    s.init("lta.weight", &[c1, c1, 3, 1, 1], conv3(c1, 3.0, [3, 1, 1]), true, seed);
    s.init("lta.bias", &[c1], Init::Zeros, false, seed);
    for (stage, cin, cout) in [(2, c1, c2), (3, c2, c3), (4, c3, c4)] {
        s.init(&format!("stage{stage}.conv.weight"), &[cout, cin, 1, 3, 3], conv3(cin, 6.0, [1, 3, 3]), true, seed);
        s.init(&format!("stage{stage}.conv.bias"), &[cout], Init::Zeros, false, seed);
        if cfg.enable_rda {
            init_rda(&mut s, &format!("stage{stage}.rda"), cin, cout, cfg.selected_channels(cin), seed);
        }
    }
    if cfg.enable_sme {
        init_sme(&mut s, "stage3.sme", c3, seed);
    }
    if cfg.enable_cme {
        init_cme(&mut s, "stage3.cme", c3, seed);
    }
    s.insert("gem.raw_p", Tensor::scalar(T::cst(gem_raw_init())), false);
    let pc = cfg.parts * c4;
    s.init("neck.bn.gamma", &[pc], Init::Const(1.0), false, seed);
    s.init("neck.bn.beta", &[pc], Init::Zeros, false, seed);
    s.init("neck.classifier", &[cfg.parts, cfg.num_classes, c4], conv3(c4, 1.0, [1, 1, 1]), true, seed);
    s
}

/// Runs stages 1-4 on `x: [N, T, 1, H, W]` (silhouettes in [0, 1]).
pub fn backbone_forward<T: Element>(g: &mut Graph<T>, cfg: &ModelConfig, b: &Bound, x: Var) -> Result<BackboneOutput> {
    let s = g.shape(x).to_vec();
    if s.len() != 5 || s[2] != 1 || s[3] != cfg.height || s[4] != cfg.width {
        return Err(Error::dim("backbone input [N, T, 1, H, W]", &s, &[cfg.height, cfg.width]));
    }
    if !s[1].is_multiple_of(3) || s[1] == 0 {
        return Err(Error::Config(format!("sequence length {} is not a positive multiple of 3", s[1])));
    }
    let (n, t) = (s[0], s[1]);
    let x = g.reshape(x, &[n, 1, t, cfg.height, cfg.width])?;

    let y = g.conv_nd(x, b.get("stage1.conv.weight")?, Some(b.get("stage1.conv.bias")?), &ConvSpec::same(&[1, 1, 1]))?;
    let y = g.relu(y)?;
    let mut y = lta_forward(g, y, b.get("lta.weight")?, Some(b.get("lta.bias")?))?;

    let mut offsets = Vec::new();
    for stage in 2..=4 {
        let cin = g.shape(y)[1];
        let conv = g.conv_nd(
            y,
            b.get(&format!("stage{stage}.conv.weight"))?,
            Some(b.get(&format!("stage{stage}.conv.bias"))?),
            &ConvSpec::same(&[0, 1, 1]),
        )?;
        let conv = g.relu(conv)?;
        let fused = if cfg.enable_rda {
            let vars = RdaVars::bind(b, &format!("stage{stage}.rda"))?;
            let r = rda_forward(g, y, &vars, cfg.selected_channels(cin))?;
            offsets.push((stage, r.offsets));
            g.add(r.output, conv)?
        } else {
            conv
        };
        y = match stage {
            2 => g.pool_nd(fused, &PoolSpec::tiled(PoolMode::Avg, &[1, 2, 2]))?,
            3 => {
                let sme = cfg.enable_sme.then(|| SmeVars::bind(b, "stage3.sme")).transpose()?;
                let cme = cfg.enable_cme.then(|| CmeVars::bind(b, "stage3.cme")).transpose()?;
                rde_forward(g, fused, sme.as_ref(), cme.as_ref())?
            }
            _ => {
                let frames = g.shape(fused)[2];
                let m = g.pool_nd(fused, &PoolSpec::tiled(PoolMode::Max, &[frames, 1, 1]))?;
                let ms = g.shape(m).to_vec();
                g.reshape(m, &[ms[0], ms[1], ms[3], ms[4]])?
            }
        };
    }
    Ok(BackboneOutput { feature: y, offsets })
}

/// Everything a forward pass produces.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub neck: NeckOutput,
    pub backbone: BackboneOutput,
    pub params: Bound,
}

/// Configuration, learnable parameters and batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct GaitModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub neck_state: BatchNormState<T>,
}

impl<T: Element> GaitModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, seed);
        let neck_state = BatchNormState::new(config.parts * config.channels[3]);
        Ok(Self {
            config,
            params,
            neck_state,
        })
    }

    /// Full forward on `x: [N, T, 1, H, W]`. Parameters are bound as
    /// trainable leaves iff `trainable`.
    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, mode: NormMode, trainable: bool) -> Result<ModelOutput> {
        let b = self.params.bind(g, trainable);
        let backbone = backbone_forward(g, &self.config, &b, x)?;
        let parts = gem_hpp(g, backbone.feature, b.get("gem.raw_p")?, self.config.parts)?;
        let neck = bnneck_forward(
            g,
            parts,
            b.get("neck.bn.gamma")?,
            b.get("neck.bn.beta")?,
            b.get("neck.classifier")?,
            &mut self.neck_state,
            mode,
        )?;
        Ok(ModelOutput {
            neck,
            backbone,
            params: b,
        })
    }

    /// Post-BN part embeddings `[N, P, C]` in eval mode.
    pub fn embed(&mut self, x: Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x);
        let out = self.forward(&mut g, xv, NormMode::Eval, false)?;
        Ok(g.value(out.neck.infer_feat).clone())
    }

    pub fn cast<U: Element>(&self) -> GaitModel<U> {
        let cv = |v: &[T]| v.iter().map(|x| U::from_f64(x.to_f64().unwrap()).unwrap()).collect();
        GaitModel {
            config: self.config.clone(),
            params: self.params.cast(),
            neck_state: BatchNormState {
                running_mean: cv(&self.neck_state.running_mean),
                running_var: cv(&self.neck_state.running_var),
                momentum: self.neck_state.momentum,
                eps: self.neck_state.eps,
            },
        }
    }

    /// Writes a checkpoint: a `config` record holding `header` as UTF-8 bytes,
    /// every parameter, and the neck running statistics.
    pub fn save(&self, path: impl AsRef<Path>, header: &str) -> Result<()> {
        let mut records = vec![(
            CONFIG_RECORD.to_string(),
            GrdtTensor::u8(vec![header.len()], header.as_bytes().to_vec())?,
        )];
        records.extend(self.params.to_records());
        let n = self.neck_state.running_mean.len();
        records.push((
            RUNNING_MEAN.to_string(),
            GrdtTensor::from(&Tensor::new([n], self.neck_state.running_mean.clone())?),
        ));
        records.push((
            RUNNING_VAR.to_string(),
            GrdtTensor::from(&Tensor::new([n], self.neck_state.running_var.clone())?),
        ));
        grdt::write_named(path, &records)
    }

    /// Loads values saved by [`GaitModel::save`] into a model built from
    /// `config`; returns the header text.
    pub fn load(path: impl AsRef<Path>, config: ModelConfig) -> Result<(Self, String)> {
        let records = grdt::read_named(path.as_ref())?;
        let mut model = Self::new(config, 0)?;
        model.params.load_records(&records)?;
        let find = |name: &str| {
            records
                .iter()
                .find(|(k, _)| k == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::format(path.as_ref(), format!("missing record {name}")))
        };
        let mean = find(RUNNING_MEAN)?.to_tensor::<T>();
        let var = find(RUNNING_VAR)?.to_tensor::<T>();
        if mean.numel() != model.neck_state.running_mean.len() || var.numel() != mean.numel() {
            return Err(Error::dim("load running stats", &[model.neck_state.running_mean.len()], mean.shape()));
        }
        model.neck_state.running_mean = mean.into_data();
        model.neck_state.running_var = var.into_data();
        let header = read_header(path.as_ref())?;
        Ok((model, header))
    }
}

const CONFIG_RECORD: &str = "config";
const RUNNING_MEAN: &str = "neck.bn.running_mean";
const RUNNING_VAR: &str = "neck.bn.running_var";

/// The UTF-8 header blob of a checkpoint.
pub fn read_header(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let records = grdt::read_named(path)?;
    let (_, t) = records
        .iter()
        .find(|(k, _)| k == CONFIG_RECORD)
        .ok_or_else(|| Error::format(path, "missing config record"))?;
    let bytes = t.as_u8().ok_or_else(|| Error::format(path, "config record is not u8"))?;
    String::from_utf8(bytes.to_vec()).map_err(|_| Error::format(path, "config record is not UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lta_averaging_kernel() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new([1, 1, 3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap());
        let w = g.constant(Tensor::full([1, 1, 3, 1, 1], 1.0 / 3.0));
        let y = lta_forward(&mut g, x, w, None).unwrap();
        assert!((g.data(y)[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn lta_thirds_the_frames_and_delta_picks_middle() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn([1, 1, 30, 2, 2], |i| i as f64));
        let w = g.constant(Tensor::new([1, 1, 3, 1, 1], vec![0.0, 1.0, 0.0]).unwrap());
        let y = lta_forward(&mut g, x, w, None).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 10, 2, 2]);
        for t in 0..10 {
            assert_eq!(g.value(y).at(&[0, 0, t, 0, 0]), ((3 * t + 1) * 4) as f64);
        }
        let bad = g.constant(Tensor::zeros([1, 1, 10, 2, 2]));
        assert!(matches!(lta_forward(&mut g, bad, w, None), Err(Error::Config(_))));
    }

    fn gem_rows(rows: Vec<f64>, w: usize, p: f64) -> Vec<f64> {
        let h = rows.len() / w;
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new([1, 1, h, w], rows).unwrap());
        let raw = (p - GEM_P_FLOOR).exp_m1().ln();
        let rp = g.constant(Tensor::scalar(raw));
        let y = gem_hpp(&mut g, x, rp, h).unwrap();
        g.data(y).to_vec()
    }

    #[test]
    fn gem_values() {
        let v = gem_rows(vec![1.0, 2.0], 2, 2.0);
        assert!((v[0] - 1.581139).abs() < 1e-5);
        let v = gem_rows(vec![1.0, 2.0, 6.0, 3.0, 3.0, 3.0], 3, 1.0);
        assert!((v[0] - 3.0).abs() < 1e-5 && (v[1] - 3.0).abs() < 1e-5);
        let v = gem_rows(vec![0.5, 4.0, 2.0], 3, 64.0);
        assert!((v[0] - 4.0).abs() / 4.0 < 0.02);
    }

    #[test]
    fn gem_raw_init_maps_to_three() {
        let sp = crate::tensor::ops::pointwise::softplus(gem_raw_init()) + GEM_P_FLOOR;
        assert!((sp - 3.0).abs() < 1e-12);
    }

    #[test]
    fn neck_eval_identity_and_uniform_logits() {
        let mut g = Graph::<f64>::new();
        let parts = g.constant(Tensor::from_fn([3, 2, 4], |i| i as f64 - 7.0));
        let gamma = g.constant(Tensor::ones([8]));
        let beta = g.constant(Tensor::zeros([8]));
        let cls = g.constant(Tensor::zeros([2, 5, 4]));
        let mut st = BatchNormState::new(8);
        st.eps = 0.0;
        let out = bnneck_forward(&mut g, parts, gamma, beta, cls, &mut st, NormMode::Eval).unwrap();
        assert_eq!(g.data(out.infer_feat), g.data(parts));
        assert_eq!(g.shape(out.logits), &[3, 2, 5]);
        assert!(g.data(out.logits).iter().all(|&v| v == 0.0));
        let one = g.constant(Tensor::zeros([1, 2, 4]));
        assert!(bnneck_forward(&mut g, one, gamma, beta, cls, &mut st, NormMode::Train).is_err());
    }

    #[test]
    fn backbone_shape_trace_desk() {
        let cfg = ModelConfig::desk(4);
        let mut model = GaitModel::<f32>::new(cfg.clone(), 1).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([2, 12, 1, 32, 22]));
        let out = model.forward(&mut g, x, NormMode::Train, true).unwrap();
        assert_eq!(g.shape(out.backbone.feature), &[2, 64, 16, 11]);
        assert_eq!(g.shape(out.neck.infer_feat), &[2, 16, 64]);
        assert_eq!(g.shape(out.neck.logits), &[2, 16, 4]);
        let shapes: Vec<_> = out.backbone.offsets.iter().map(|(s, v)| (*s, g.shape(*v).to_vec())).collect();
        assert_eq!(
            shapes,
            vec![(2, vec![2, 1, 4, 32, 22]), (3, vec![2, 1, 4, 16, 11]), (4, vec![2, 1, 4, 16, 11])]
        );
    }
}
