//! Finite-difference checks over every primitive op, every block and a
//! micro-sized full model, in f64.

use std::time::Instant;

use gaitrdae::blocks::config::ModelConfig;
use gaitrdae::blocks::excitation::{cme_forward, init_cme, init_sme, rde_forward, sme_forward, CmeVars, SmeVars};
use gaitrdae::blocks::model::{backbone_forward, bnneck_forward, gem_hpp, gem_raw_init, init_params, lta_forward};
use gaitrdae::blocks::params::{Bound, Init, ParamStore};
use gaitrdae::blocks::rda::{init_rda, rda_forward, RdaVars};
use gaitrdae::tensor::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use gaitrdae::tensor::{BatchNormState, ConvSpec, Graph, NormMode, PadMode, PoolMode, PoolSpec, Tensor, Unary, Var};
use gaitrdae::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CliError, CliResult};

type CheckFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// One function to check at one point.
pub struct Case {
    pub name: String,
    pub points: Vec<Tensor<f64>>,
    pub f: CheckFn,
}

/// Outcome of one case.
#[derive(Clone, Debug)]
pub struct CheckLine {
    pub name: String,
    pub report: GradCheckReport,
    pub seconds: f64,
}

impl CheckLine {
    pub fn render(&self) -> String {
        let r = &self.report;
        format!(
            "{} {} max_rel_err={:.3e} checked={} time={:.2}s{}",
            if r.pass { "PASS" } else { "FAIL" },
            self.name,
            r.max_rel_err,
            r.checked,
            self.seconds,
            r.nan_at.map(|c| format!(" nan_at={c:?}")).unwrap_or_default()
        )
    }
}

/// Deterministic pseudo-random weights in [-1, 1] keyed by position.
fn weights(shape: &[usize]) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// `sum(y * R)` for fixed random `R`, so every output coordinate matters.
fn weighted_sum(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let r = g.constant(weights(g.shape(y)));
    let p = g.mul(y, r)?;
    g.sum(p)
}

struct Gen(ChaCha8Rng);

impl Gen {
    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| self.0.gen_range(lo..hi))
    }

    /// Values with `lo <= |v| < hi` and random sign.
    fn away_from_zero(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| {
            let v = self.0.gen_range(lo..hi);
            if self.0.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
    }

    /// Offsets in `(-limit, limit)` at least 0.1 away from any integer.
    fn offsets(&mut self, shape: &[usize], limit: i64) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| {
            let n = self.0.gen_range(-limit..limit) as f64;
            n + self.0.gen_range(0.1..0.9)
        })
    }
}

fn case(name: &str, points: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        name: name.to_string(),
        points,
        f: Box::new(f),
    }
}

fn unary_case(name: &str, op: Unary, x: Tensor<f64>) -> Case {
    case(&format!("op:{name}"), vec![x], move |g, v| {
        let y = g.unary(v[0], op)?;
        weighted_sum(g, y)
    })
}

/// Every primitive op.
pub fn op_cases(seed: u64) -> Vec<Case> {
    let mut gen = Gen(ChaCha8Rng::seed_from_u64(seed));
    let s = [3, 4, 5];
    let mut cases = vec![
        case(
            "op:conv_nd",
            vec![
                gen.uniform(&[2, 4, 4, 5, 5], -1.0, 1.0),
                gen.uniform(&[6, 2, 3, 3, 3], -0.5, 0.5),
                gen.uniform(&[6], -0.5, 0.5),
            ],
            |g, v| {
                let spec = ConvSpec::same(&[1, 1, 0]).with_groups(2).with_stride(&[1, 2, 1]);
                let y = g.conv_nd(v[0], v[1], Some(v[2]), &spec)?;
                weighted_sum(g, y)
            },
        ),
        case(
            "op:conv_nd_1d",
            vec![gen.uniform(&[2, 3, 7], -1.0, 1.0), gen.uniform(&[4, 3, 3], -0.5, 0.5)],
            |g, v| {
                let y = g.conv_nd(v[0], v[1], None, &ConvSpec::same(&[1]).with_stride(&[2]))?;
                weighted_sum(g, y)
            },
        ),
        case("op:pool_max", vec![gen.uniform(&[2, 3, 4, 5, 5], -1.0, 1.0)], |g, v| {
            let spec = PoolSpec {
                mode: PoolMode::Max,
                window: vec![2, 3, 3],
                stride: vec![1, 2, 2],
                padding: vec![0, 1, 1],
                pad_mode: PadMode::Zero,
            };
            let y = g.pool_nd(v[0], &spec)?;
            weighted_sum(g, y)
        }),
        case("op:pool_avg_replicate", vec![gen.uniform(&[2, 3, 6, 2, 2], -1.0, 1.0)], |g, v| {
            let spec = PoolSpec {
                mode: PoolMode::Avg,
                window: vec![5, 1, 1],
                stride: vec![1, 1, 1],
                padding: vec![2, 0, 0],
                pad_mode: PadMode::Replicate,
            };
            let y = g.pool_nd(v[0], &spec)?;
            weighted_sum(g, y)
        }),
        case(
            "op:linear",
            vec![
                gen.uniform(&[3, 4, 5], -1.0, 1.0),
                gen.uniform(&[6, 5], -1.0, 1.0),
                gen.uniform(&[6], -1.0, 1.0),
            ],
            |g, v| {
                let y = g.linear(v[0], v[1], Some(v[2]))?;
                weighted_sum(g, y)
            },
        ),
        case(
            "op:batch_norm",
            vec![
                gen.uniform(&[6, 5], -1.0, 1.0),
                gen.uniform(&[5], 0.5, 1.5),
                gen.uniform(&[5], -0.5, 0.5),
            ],
            |g, v| {
                let mut st = BatchNormState::new(5);
                let y = g.batch_norm(v[0], v[1], v[2], &mut st, NormMode::Train)?;
                weighted_sum(g, y)
            },
        ),
    ];
    let unary: Vec<(&str, Unary, Tensor<f64>)> = vec![
        ("tanh", Unary::Tanh, gen.uniform(&s, -2.0, 2.0)),
        ("sigmoid", Unary::Sigmoid, gen.uniform(&s, -3.0, 3.0)),
        ("relu", Unary::Relu, gen.away_from_zero(&s, 0.05, 1.0)),
        ("abs", Unary::Abs, gen.away_from_zero(&s, 0.05, 1.0)),
        ("clamp", Unary::Clamp(-0.5, 0.5), {
            let mut t = gen.uniform(&s, -1.0, 1.0);
            t.data_mut().iter_mut().for_each(|v| {
                if (v.abs() - 0.5).abs() < 0.05 {
                    *v *= 0.8;
                }
            });
            t
        }),
        ("exp", Unary::Exp, gen.uniform(&s, -1.0, 1.0)),
        ("ln", Unary::Ln, gen.uniform(&s, 0.5, 2.0)),
        ("sqrt", Unary::Sqrt, gen.uniform(&s, 0.5, 2.0)),
        ("softplus", Unary::Softplus, gen.uniform(&s, -3.0, 3.0)),
        ("recip", Unary::Recip, gen.uniform(&s, 0.5, 2.0)),
        ("square", Unary::Square, gen.uniform(&s, -1.0, 1.0)),
        ("neg", Unary::Neg, gen.uniform(&s, -1.0, 1.0)),
        ("scale", Unary::Scale(-1.7), gen.uniform(&s, -1.0, 1.0)),
        ("shift", Unary::Shift(0.3), gen.uniform(&s, -1.0, 1.0)),
        ("powf", Unary::Powf(1.7), gen.uniform(&s, 0.5, 2.0)),
    ];
    cases.extend(unary.into_iter().map(|(n, op, x)| unary_case(n, op, x)));
    for (name, which) in [("add", 0), ("sub", 1), ("mul", 2), ("div", 3)] {
        let a = gen.uniform(&[3, 1, 4], -1.0, 1.0);
        let b = if which == 3 {
            gen.away_from_zero(&[1, 5, 4], 0.5, 2.0)
        } else {
            gen.uniform(&[1, 5, 4], -1.0, 1.0)
        };
        cases.push(case(&format!("op:{name}"), vec![a, b], move |g, v| {
            let y = match which {
                0 => g.add(v[0], v[1])?,
                1 => g.sub(v[0], v[1])?,
                2 => g.mul(v[0], v[1])?,
                _ => g.div(v[0], v[1])?,
            };
            weighted_sum(g, y)
        }));
    }
    cases.push(case(
        "op:pow_var",
        vec![gen.uniform(&[3, 4], 0.5, 2.0), Tensor::scalar(2.3)],
        |g, v| {
            let y = g.pow_var(v[0], v[1])?;
            weighted_sum(g, y)
        },
    ));
    let x = gen.uniform(&[2, 3, 4], -1.0, 1.0);
    cases.push(case("op:sum", vec![x.clone()], |g, v| {
        let sq = g.unary(v[0], Unary::Square)?;
        g.sum(sq)
    }));
    cases.push(case("op:mean", vec![x.clone()], |g, v| {
        let sq = g.unary(v[0], Unary::Square)?;
        g.mean(sq)
    }));
    cases.push(case("op:sum_axes", vec![x.clone()], |g, v| {
        let y = g.sum_axes(v[0], &[0, 2])?;
        let y = g.unary(y, Unary::Square)?;
        weighted_sum(g, y)
    }));
    cases.push(case("op:mean_axes", vec![x.clone()], |g, v| {
        let y = g.mean_axes(v[0], &[1])?;
        let y = g.unary(y, Unary::Square)?;
        weighted_sum(g, y)
    }));
    cases.push(case("op:reshape", vec![x.clone()], |g, v| {
        let y = g.reshape(v[0], &[6, 4])?;
        weighted_sum(g, y)
    }));
    cases.push(case("op:permute", vec![x.clone()], |g, v| {
        let y = g.permute(v[0], &[2, 0, 1])?;
        weighted_sum(g, y)
    }));
    cases.push(case("op:slice", vec![x.clone()], |g, v| {
        let y = g.slice(v[0], 2, 1, 2)?;
        weighted_sum(g, y)
    }));
    cases.push(case(
        "op:concat",
        vec![x, gen.uniform(&[2, 1, 4], -1.0, 1.0)],
        |g, v| {
            let y = g.concat(&[v[0], v[1]], 1)?;
            weighted_sum(g, y)
        },
    ));
    let f = gen.uniform(&[2, 3, 6, 3, 3], -1.0, 1.0);
    let dt = gen.offsets(&[2, 1, 6, 3, 3], 3);
    cases.push(case("op:fractional_tail", vec![f.clone(), dt.clone()], |g, v| {
        let y = g.fractional_tail(v[0], v[1])?;
        weighted_sum(g, y)
    }));
    cases.push(case("op:aggregate_adaptive", vec![f, dt], |g, v| {
        let y = g.aggregate_adaptive(v[0], v[1])?;
        weighted_sum(g, y)
    }));
    cases
}

/// Randomizes every parameter so that zero-initialized ones are generic too.
fn jitter(store: &mut ParamStore<f64>, gen: &mut Gen) {
    for (_, p) in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += gen.0.gen_range(-0.3..0.3);
        }
    }
}

/// Points `[input, params...]` and a function binding the params by name.
fn block_case(
    name: &str,
    input: Tensor<f64>,
    store: ParamStore<f64>,
    forward: impl Fn(&mut Graph<f64>, Var, &Bound) -> Result<Var> + 'static,
) -> Case {
    let names: Vec<String> = store.iter().map(|(k, _)| k.to_string()).collect();
    let mut points = vec![input];
    points.extend(store.iter().map(|(_, p)| p.value.clone()));
    case(name, points, move |g, v| {
        let b = Bound::from_vars(names.iter().cloned().zip(v[1..].iter().copied()));
        let y = forward(g, v[0], &b)?;
        weighted_sum(g, y)
    })
}

/// Every block, the losses and their combination.
pub fn block_cases(seed: u64) -> Vec<Case> {
    let mut gen = Gen(ChaCha8Rng::seed_from_u64(seed ^ 0xb10c));
    let mut cases = Vec::new();

    let mut s = ParamStore::new();
    init_rda(&mut s, "rda", 4, 5, 2, seed);
    jitter(&mut s, &mut gen);
    cases.push(block_case("block:rda", gen.uniform(&[2, 4, 6, 4, 3], -1.0, 1.0), s, |g, x, b| {
        let vars = RdaVars::bind(b, "rda")?;
        Ok(rda_forward(g, x, &vars, 2)?.output)
    }));

    let mut s = ParamStore::new();
    init_sme(&mut s, "sme", 3, seed);
    jitter(&mut s, &mut gen);
    cases.push(block_case("block:sme", gen.uniform(&[2, 3, 4, 4, 3], -1.0, 1.0), s, |g, x, b| {
        sme_forward(g, x, &SmeVars::bind(b, "sme")?)
    }));

    let mut s = ParamStore::new();
    init_cme(&mut s, "cme", 3, seed);
    jitter(&mut s, &mut gen);
    cases.push(block_case("block:cme", gen.uniform(&[2, 3, 6, 3, 3], -1.0, 1.0), s, |g, x, b| {
        cme_forward(g, x, &CmeVars::bind(b, "cme")?)
    }));

    let mut s = ParamStore::new();
    init_sme(&mut s, "sme", 3, seed);
    init_cme(&mut s, "cme", 3, seed);
    jitter(&mut s, &mut gen);
    cases.push(block_case("block:rde", gen.uniform(&[2, 3, 4, 3, 3], -1.0, 1.0), s, |g, x, b| {
        let sme = SmeVars::bind(b, "sme")?;
        let cme = CmeVars::bind(b, "cme")?;
        rde_forward(g, x, Some(&sme), Some(&cme))
    }));

    let mut s = ParamStore::new();
    s.init("lta.weight", &[3, 3, 3, 1, 1], Init::FanInUniform { fan_in: 9, gain: 3.0 }, true, seed);
    s.init("lta.bias", &[3], Init::Zeros, false, seed);
    jitter(&mut s, &mut gen);
    cases.push(block_case("block:lta", gen.uniform(&[2, 3, 9, 2, 3], -1.0, 1.0), s, |g, x, b| {
        lta_forward(g, x, b.get("lta.weight")?, Some(b.get("lta.bias")?))
    }));

    let mut s = ParamStore::new();
    s.insert("gem.raw_p", Tensor::scalar(gem_raw_init() + gen.0.gen_range(-0.3..0.3)), false);
    cases.push(block_case("block:gem_hpp", gen.uniform(&[2, 3, 4, 3], 0.1, 1.5), s, |g, x, b| {
        gem_hpp(g, x, b.get("gem.raw_p")?, 2)
    }));

    let mut s = ParamStore::new();
    s.init("gamma", &[8], Init::Const(1.0), false, seed);
    s.init("beta", &[8], Init::Zeros, false, seed);
    s.init("cls", &[2, 3, 4], Init::FanInUniform { fan_in: 4, gain: 1.0 }, true, seed);
    jitter(&mut s, &mut gen);
    cases.push(block_case("block:bnneck", gen.uniform(&[5, 2, 4], -1.0, 1.0), s, |g, x, b| {
        let mut st = BatchNormState::new(8);
        let out = bnneck_forward(g, x, b.get("gamma")?, b.get("beta")?, b.get("cls")?, &mut st, NormMode::Train)?;
        let flat_i = g.reshape(out.infer_feat, &[5, 8])?;
        let flat_l = g.reshape(out.logits, &[5, 6])?;
        g.concat(&[flat_i, flat_l], 1)
    }));

    let labels = [0usize, 0, 1, 1, 2, 2];
    let parts = gen.uniform(&[6, 3, 4], -1.0, 1.0);
    cases.push(case("block:triplet", vec![parts.clone()], move |g, v| {
        Ok(g.triplet_loss(v[0], &labels, 0.2)?.0)
    }));
    let logits = gen.uniform(&[6, 3, 3], -2.0, 2.0);
    cases.push(case("block:cross_entropy", vec![logits.clone()], move |g, v| {
        Ok(g.cross_entropy(v[0], &labels)?.0)
    }));
    cases.push(case("block:combined", vec![parts, logits], move |g, v| {
        Ok(g.combined_loss(v[0], v[1], &labels, 0.2)?.0)
    }));
    cases
}

/// The smallest valid model: 6 frames of 16x12, channels [2, 2, 4, 4].
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        height: 16,
        width: 12,
        channels: [2, 2, 4, 4],
        offset_ratio: 0.5,
        enable_rda: true,
        enable_sme: true,
        enable_cme: true,
        parts: 2,
        num_classes: 2,
        frames: 6,
    }
}

/// Full network with the combined loss on a 2 x 2 batch.
pub fn model_case(seed: u64) -> Case {
    let mut gen = Gen(ChaCha8Rng::seed_from_u64(seed ^ 0x30de1));
    let cfg = micro_config();
    let mut store = init_params::<f64>(&cfg, seed);
    jitter(&mut store, &mut gen);
    let names: Vec<String> = store.iter().map(|(k, _)| k.to_string()).collect();
    let mut points = vec![gen.uniform(&[4, cfg.frames, 1, cfg.height, cfg.width], 0.0, 1.0)];
    points.extend(store.iter().map(|(_, p)| p.value.clone()));
    let labels = [0usize, 0, 1, 1];
    case("model:micro", points, move |g, v| {
        let b = Bound::from_vars(names.iter().cloned().zip(v[1..].iter().copied()));
        let bb = backbone_forward(g, &cfg, &b, v[0])?;
        let parts = gem_hpp(g, bb.feature, b.get("gem.raw_p")?, cfg.parts)?;
        let mut st = BatchNormState::new(cfg.parts * cfg.channels[3]);
        let neck = bnneck_forward(
            g,
            parts,
            b.get("neck.bn.gamma")?,
            b.get("neck.bn.beta")?,
            b.get("neck.classifier")?,
            &mut st,
            NormMode::Train,
        )?;
        Ok(g.combined_loss(neck.triplet_feat, neck.logits, &labels, 0.2)?.0)
    })
}

/// Cases selected by `scope`: `all`, `op`, `block`, `model`, `op:<name>` or
/// `block:<name>`.
pub fn select(scope: &str, seed: u64) -> CliResult<Vec<Case>> {
    let all_ops = || op_cases(seed);
    let all_blocks = || block_cases(seed);
    let cases = match scope {
        "all" => {
            let mut v = all_ops();
            v.extend(all_blocks());
            v.push(model_case(seed));
            v
        }
        "op" => all_ops(),
        "block" => all_blocks(),
        "model" => vec![model_case(seed)],
        s if s.starts_with("op:") => all_ops().into_iter().filter(|c| c.name == s).collect(),
        s if s.starts_with("block:") => all_blocks().into_iter().filter(|c| c.name == s).collect(),
        _ => Vec::new(),
    };
    if cases.is_empty() {
        return Err(CliError::Usage(format!(
            "unknown gradcheck scope {scope:?}; use all, op, block, model, op:<name> or block:<name>"
        )));
    }
    Ok(cases)
}

/// Runs the selected checks with the standard tolerances, reporting each
/// line as it completes.
pub fn run(scope: &str, seed: u64, mut on_line: impl FnMut(&CheckLine)) -> CliResult<Vec<CheckLine>> {
    let opts = GradCheckOptions {
        seed,
        ..GradCheckOptions::default()
    };
    let mut lines = Vec::new();
    for c in select(scope, seed)? {
        let t0 = Instant::now();
        let report = grad_check(&c.f, &c.points, &opts)?;
        let line = CheckLine {
            name: c.name,
            report,
            seconds: t0.elapsed().as_secs_f64(),
        };
        on_line(&line);
        lines.push(line);
    }
    Ok(lines)
}
