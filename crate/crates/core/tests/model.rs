use gaitrdae::blocks::model::{backbone_forward, init_params};
use gaitrdae::blocks::{GaitModel, ModelConfig};
use gaitrdae::tensor::{ConvSpec, Graph, NormMode, PoolMode, PoolSpec, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn baseline_config() -> ModelConfig {
    ModelConfig {
        enable_rda: false,
        enable_sme: false,
        enable_cme: false,
        ..ModelConfig::desk(4)
    }
}

fn input(n: usize, cfg: &ModelConfig, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([n, cfg.frames, 1, cfg.height, cfg.width], |_| f64::from(rng.gen_bool(0.4)))
}

/// Conv-only network assembled directly from graph ops.
fn plain_backbone(g: &mut Graph<f64>, p: &dyn Fn(&mut Graph<f64>, &str) -> Var, x: Var) -> Var {
    let s = g.shape(x).to_vec();
    let x = g.reshape(x, &[s[0], 1, s[1], s[3], s[4]]).unwrap();
    let (w, b) = (p(g, "stage1.conv.weight"), p(g, "stage1.conv.bias"));
    let y = g.conv_nd(x, w, Some(b), &ConvSpec::same(&[1, 1, 1])).unwrap();
    let y = g.relu(y).unwrap();
    let (w, b) = (p(g, "lta.weight"), p(g, "lta.bias"));
    let mut y = g
        .conv_nd(y, w, Some(b), &ConvSpec::same(&[0, 0, 0]).with_stride(&[3, 1, 1]))
        .unwrap();
    for stage in 2..=4 {
        let (w, b) = (p(g, &format!("stage{stage}.conv.weight")), p(g, &format!("stage{stage}.conv.bias")));
        let c = g.conv_nd(y, w, Some(b), &ConvSpec::same(&[0, 1, 1])).unwrap();
        let c = g.relu(c).unwrap();
        y = match stage {
            2 => g.pool_nd(c, &PoolSpec::tiled(PoolMode::Avg, &[1, 2, 2])).unwrap(),
            3 => c,
            _ => {
                let t = g.shape(c)[2];
                g.pool_nd(c, &PoolSpec::tiled(PoolMode::Max, &[t, 1, 1])).unwrap()
            }
        };
    }
    let s = g.shape(y).to_vec();
    g.reshape(y, &[s[0], s[1], s[3], s[4]]).unwrap()
}

#[test]
fn disabled_modules_match_a_plain_conv_network_bit_exactly() {
    let cfg = baseline_config();
    let store = init_params::<f64>(&cfg, 21);
    assert!(store.iter().all(|(n, _)| !n.contains("rda") && !n.contains("sme") && !n.contains("cme")));
    let x = input(2, &cfg, 1);

    let mut g = Graph::new();
    let b = store.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let out = backbone_forward(&mut g, &cfg, &b, xv).unwrap();
    assert!(out.offsets.is_empty());
    let got = g.value(out.feature).clone();

    let mut g = Graph::new();
    let xv = g.constant(x);
    let lookup = |g: &mut Graph<f64>, name: &str| g.constant(store.get(name).unwrap().value.clone());
    let want = plain_backbone(&mut g, &lookup, xv);
    assert_eq!(got.shape(), &[2, 64, 16, 11]);
    assert_eq!(got.data(), g.data(want));
}

#[test]
fn shared_parameters_do_not_depend_on_toggles() {
    let full = init_params::<f64>(&ModelConfig::desk(4), 21);
    let base = init_params::<f64>(&baseline_config(), 21);
    for (name, p) in base.iter() {
        assert_eq!(full.get(name).unwrap(), p, "{name}");
    }
}

#[test]
fn fresh_full_model_starts_from_zero_offsets() {
    let cfg = ModelConfig::desk(4);
    let store = init_params::<f64>(&cfg, 2);
    let mut g = Graph::new();
    let b = store.bind(&mut g, false);
    let xv = g.constant(input(1, &cfg, 3));
    let out = backbone_forward(&mut g, &cfg, &b, xv).unwrap();
    assert_eq!(out.offsets.len(), 3);
    for (_, dt) in &out.offsets {
        assert!(g.data(*dt).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn offsets_stay_below_the_frame_count() {
    let cfg = ModelConfig::desk(4);
    let mut store = init_params::<f64>(&cfg, 2);
    for (name, p) in store.iter_mut() {
        if name.contains("offset") {
            p.value.data_mut().iter_mut().for_each(|v| *v = 50.0);
        }
    }
    let mut g = Graph::new();
    let b = store.bind(&mut g, false);
    let xv = g.constant(input(1, &cfg, 4));
    let out = backbone_forward(&mut g, &cfg, &b, xv).unwrap();
    for (_, dt) in &out.offsets {
        let t = g.shape(*dt)[2] as f64;
        assert!(g.data(*dt).iter().all(|v| v.abs() <= t));
    }
}

#[test]
fn eval_mode_embedding_is_deterministic_and_batch_independent() {
    let cfg = ModelConfig::desk(4);
    let mut model = GaitModel::<f32>::new(cfg.clone(), 8).unwrap();
    let x: Tensor<f32> = input(2, &cfg, 5).cast();
    let both = model.embed(x.clone()).unwrap();
    assert_eq!(both.shape(), &[2, 16, 64]);
    let again = model.embed(x.clone()).unwrap();
    assert_eq!(both, again);
    let half = x.data().len() / 2;
    let first = Tensor::new([1, cfg.frames, 1, cfg.height, cfg.width], x.data()[..half].to_vec()).unwrap();
    let one = model.embed(first).unwrap();
    assert_eq!(one.data(), &both.data()[..one.numel()]);

    let mut g = Graph::new();
    let xv = g.constant(x);
    let before = model.neck_state.clone();
    model.forward(&mut g, xv, NormMode::Eval, false).unwrap();
    assert_eq!(model.neck_state, before);
}
