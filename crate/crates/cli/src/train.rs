//! SGD training loop over P x K batches of the synthetic training split.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use gaitrdae::blocks::GaitModel;
use gaitrdae::objectives::{LossReport, LOSS_CSV_HEADER};
use gaitrdae::synth::dataset::{load_frames, manifest_root, read_manifest};
use gaitrdae::synth::{pk_sample_batch, Role, TrainSequence};
use gaitrdae::tensor::{Graph, NormMode};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// Everything a finished run leaves behind.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: GaitModel<f32>,
    pub config: RunConfig,
    pub reports: Vec<LossReport>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// Loads every `train` row of a manifest. Labels are the rank of the
/// identity among the sorted training identities.
pub fn load_train_set(manifest: &Path) -> CliResult<Vec<TrainSequence>> {
    let root = manifest_root(manifest);
    let entries = read_manifest(manifest)?;
    let ids: std::collections::BTreeSet<usize> =
        entries.iter().filter(|e| e.role == Role::Train).map(|e| e.id).collect();
    let label: BTreeMap<usize, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut out = Vec::new();
    for e in entries.iter().filter(|e| e.role == Role::Train) {
        let t = load_frames(&root, e)?;
        out.push(TrainSequence {
            label: label[&e.id],
            len: t.shape[0],
            height: t.shape[2],
            width: t.shape[3],
            frames: t.as_u8().expect("checked by load_frames").to_vec(),
        });
    }
    if out.is_empty() {
        return Err(CliError::Usage(format!("{} has no training sequences", manifest.display())));
    }
    Ok(out)
}

/// Distinct per-iteration batch seeds derived from the run seed.
pub fn batch_seed(seed: u64, iter: usize) -> u64 {
    let mut z = seed ^ (iter as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Heavy-ball SGD with decoupled-from-BN weight decay.
struct Sgd {
    velocity: BTreeMap<String, Vec<f32>>,
    momentum: f32,
    weight_decay: f32,
}

impl Sgd {
    fn step(&mut self, model: &mut GaitModel<f32>, grads: &BTreeMap<String, Vec<f32>>, lr: f32, scale: f32) {
        for (name, p) in model.params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; g.len()]);
            let decay = if p.decay { self.weight_decay } else { 0.0 };
            for ((w, &gi), vi) in p.value.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + scale * gi + decay * *w;
                *w -= lr * *vi;
            }
        }
    }
}

/// Factor bringing the global L2 norm of `grads` down to `max_norm`; 1 when
/// it is already within bounds or `max_norm` is 0.
pub fn clip_scale(grads: &BTreeMap<String, Vec<f32>>, max_norm: f64) -> f32 {
    let norm = grads.values().flatten().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        (max_norm / norm) as f32
    } else {
        1.0
    }
}

fn non_finite(report: &LossReport, grads: &BTreeMap<String, Vec<f32>>) -> Option<String> {
    if !report.is_finite() {
        return Some("loss is not finite".into());
    }
    grads
        .iter()
        .find(|(_, g)| g.iter().any(|v| !v.is_finite()))
        .map(|(n, _)| format!("gradient of {n} is not finite"))
}

/// Trains on the manifest at `manifest`, writing `metrics.csv`,
/// `checkpoint_iter<m>.grdt` at each milestone and `checkpoint.grdt` into
/// `out`. `progress` receives each report as it is produced.
pub fn train(
    cfg: &RunConfig,
    manifest: &Path,
    out: &Path,
    mut progress: impl FnMut(usize, &LossReport),
) -> CliResult<TrainOutcome> {
    cfg.validate()?;
    let seqs = load_train_set(manifest)?;
    let classes = seqs.iter().map(|s| s.label).max().unwrap_or(0) + 1;
    let mut cfg = cfg.clone();
    cfg.model.num_classes = classes;
    let model_cfg = cfg.model_config()?;
    if seqs[0].height != model_cfg.height || seqs[0].width != model_cfg.width {
        return Err(CliError::Config(format!(
            "dataset frames are {}x{} but the model expects {}x{}",
            seqs[0].height, seqs[0].width, model_cfg.height, model_cfg.width
        )));
    }
    if cfg.train.p > classes {
        return Err(CliError::Config(format!(
            "batch needs P={} identities but the training set has {classes}",
            cfg.train.p
        )));
    }
    std::fs::create_dir_all(out).map_err(|e| gaitrdae::Error::io(out, e))?;
    let metrics = out.join("metrics.csv");
    let file = File::create(&metrics).map_err(|e| gaitrdae::Error::io(&metrics, e))?;
    let mut csv = BufWriter::new(file);
    let io = |e| CliError::Core(gaitrdae::Error::io(out.join("metrics.csv"), e));
    writeln!(csv, "{LOSS_CSV_HEADER}").map_err(io)?;

    let header = cfg.serialize();
    let mut model = GaitModel::<f32>::new(model_cfg, cfg.seed)?;
    let mut sgd = Sgd {
        velocity: BTreeMap::new(),
        momentum: cfg.train.momentum as f32,
        weight_decay: cfg.train.weight_decay as f32,
    };
    let mut reports: Vec<LossReport> = Vec::with_capacity(cfg.train.max_iters);
    for iter in 0..cfg.train.max_iters {
        let lr = cfg.lr_at(iter);
        let batch = pk_sample_batch::<f32>(&seqs, cfg.train.p, cfg.train.k, model.config.frames, batch_seed(cfg.seed, iter))?;
        let mut g = Graph::new();
        g.set_check_finite(true);
        let x = g.constant(batch.x);
        let step = (|| {
            let fwd = model.forward(&mut g, x, NormMode::Train, true)?;
            let (loss, report) = g.combined_loss(fwd.neck.triplet_feat, fwd.neck.logits, &batch.labels, cfg.train.margin)?;
            g.backward(loss)?;
            let grads: BTreeMap<String, Vec<f32>> = fwd
                .params
                .iter()
                .filter_map(|(n, v)| g.grad(v).map(|d| (n.to_string(), d.to_vec())))
                .collect();
            Ok::<_, gaitrdae::Error>((report, grads))
        })();
        let last = reports.last().map(|r| r.csv_row(iter.saturating_sub(1), cfg.lr_at(iter.saturating_sub(1))));
        let numeric = |what: String| {
            CliError::Numeric(format!(
                "iteration {iter}: {what}; last finite report: {}",
                last.clone().unwrap_or_else(|| "none".into())
            ))
        };
        let (report, grads) = match step {
            Ok(v) => v,
            Err(e @ gaitrdae::Error::NonFinite { .. }) => return Err(numeric(e.to_string())),
            Err(e) => return Err(e.into()),
        };
        if let Some(what) = non_finite(&report, &grads) {
            return Err(numeric(what));
        }
        sgd.step(&mut model, &grads, lr as f32, clip_scale(&grads, cfg.train.clip_norm));
        writeln!(csv, "{}", report.csv_row(iter, lr)).map_err(io)?;
        progress(iter, &report);
        reports.push(report);
        if cfg.train.milestones.contains(&(iter + 1)) {
            model.save(out.join(format!("checkpoint_iter{}.grdt", iter + 1)), &header)?;
        }
    }
    csv.flush().map_err(io)?;
    let checkpoint = out.join("checkpoint.grdt");
    model.save(&checkpoint, &header)?;
    Ok(TrainOutcome {
        model,
        config: cfg,
        reports,
        checkpoint,
        metrics,
    })
}

/// Restores a model and its run configuration from a checkpoint.
pub fn load_checkpoint(path: &Path) -> CliResult<(GaitModel<f32>, RunConfig)> {
    let header = gaitrdae::blocks::model::read_header(path)?;
    let cfg = RunConfig::parse(&header)?;
    let (model, _) = GaitModel::load(path, cfg.model_config()?)?;
    Ok((model, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipping_bounds_the_global_norm() {
        let grads = BTreeMap::from([("a".to_string(), vec![3.0f32]), ("b".to_string(), vec![0.0, 4.0])]);
        assert_eq!(clip_scale(&grads, 0.0), 1.0);
        assert_eq!(clip_scale(&grads, 5.0), 1.0);
        assert_eq!(clip_scale(&grads, 10.0), 1.0);
        assert_eq!(clip_scale(&grads, 2.5), 0.5);
    }
}
