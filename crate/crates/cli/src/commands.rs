//! Library entry points behind each subcommand.

use std::path::{Path, PathBuf};

use gaitrdae::eval::{cross_view_mask, evaluate, EvalReport, DEFAULT_KS};
use gaitrdae::synth::dataset::{build_dataset, load_frames, load_masks, manifest_root, read_manifest};
use gaitrdae::synth::{ManifestEntry, Role};
use gaitrdae::tensor::grdt::{self, GrdtTensor};
use gaitrdae::tensor::{Graph, NormMode, Tensor};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::pgm;
use crate::train::load_checkpoint;

/// Refuses to overwrite `path` unless `force` is set.
pub fn guard_output(path: &Path, force: bool) -> CliResult<()> {
    if path.exists() && !force {
        return Err(CliError::Usage(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

/// Renders the configured synthetic dataset into `out`.
pub fn synth(cfg: &RunConfig, out: &Path, force: bool) -> CliResult<Vec<ManifestEntry>> {
    let spec = cfg.dataset_spec()?;
    let manifest = out.join("manifest.csv");
    guard_output(&manifest, force)?;
    let seqs = out.join("seqs");
    if seqs.exists() {
        guard_output(&seqs, force)?;
        std::fs::remove_dir_all(&seqs).map_err(|e| gaitrdae::Error::io(&seqs, e))?;
    }
    Ok(build_dataset(&spec, out)?)
}

/// Loads a sequence as a `[1, T, 1, H, W]` float batch.
fn sequence_input(root: &Path, entry: &ManifestEntry) -> CliResult<Tensor<f32>> {
    let t = load_frames(root, entry)?;
    let s = t.shape.clone();
    Ok(t.to_tensor::<f32>().reshape([1, s[0], s[1], s[2], s[3]])?)
}

/// Post-BN part embeddings `[P, C]` of every manifest row, keyed by path,
/// computed on the full sequence.
pub fn embed(checkpoint: &Path, manifest: &Path) -> CliResult<Vec<(String, Tensor<f32>)>> {
    let (mut model, _) = load_checkpoint(checkpoint)?;
    let root = manifest_root(manifest);
    let mut out = Vec::new();
    for e in read_manifest(manifest)? {
        let x = sequence_input(&root, &e)?;
        let s = x.shape();
        if s[3] != model.config.height || s[4] != model.config.width {
            return Err(CliError::Config(format!(
                "{} is {}x{} but the checkpoint expects {}x{}",
                e.path, s[3], s[4], model.config.height, model.config.width
            )));
        }
        if s[1] % 3 != 0 {
            return Err(CliError::Config(format!(
                "{} has {} frames, not a multiple of 3",
                e.path, s[1]
            )));
        }
        let emb = model.embed(x)?;
        let es = emb.shape().to_vec();
        out.push((e.path.clone(), emb.reshape([es[1], es[2]])?));
    }
    Ok(out)
}

pub fn write_embeddings(path: &Path, embeddings: &[(String, Tensor<f32>)]) -> CliResult<()> {
    let records: Vec<(String, GrdtTensor)> = embeddings.iter().map(|(k, t)| (k.clone(), GrdtTensor::from(t))).collect();
    Ok(grdt::write_named(path, &records)?)
}

pub fn read_embeddings(path: &Path) -> CliResult<Vec<(String, Tensor<f32>)>> {
    Ok(grdt::read_named(path)?
        .into_iter()
        .map(|(k, t)| (k, t.to_tensor::<f32>()))
        .collect())
}

fn stack(rows: &[&Tensor<f32>]) -> CliResult<Tensor<f32>> {
    let shape = rows.first().map(|t| t.shape().to_vec()).unwrap_or_else(|| vec![0, 0]);
    if rows.iter().any(|t| t.shape() != shape.as_slice()) {
        return Err(CliError::Config("embeddings differ in shape".into()));
    }
    let data = rows.iter().flat_map(|t| t.data().iter().copied()).collect();
    Ok(Tensor::new([rows.len(), shape[0], shape[1]], data)?)
}

/// View tag compared exactly.
fn view_key(e: &ManifestEntry) -> (u64, u64) {
    (e.view_scale.to_bits(), e.view_shear.to_bits())
}

/// Gallery and probe rows of a manifest looked up in `embeddings`.
pub fn evaluate_embeddings(
    embeddings: &[(String, Tensor<f32>)],
    entries: &[ManifestEntry],
    cross_view: bool,
) -> CliResult<EvalReport> {
    let find = |e: &ManifestEntry| {
        embeddings
            .iter()
            .find(|(k, _)| *k == e.path)
            .map(|(_, t)| t)
            .ok_or_else(|| CliError::Usage(format!("no embedding for {}", e.path)))
    };
    let gallery: Vec<&ManifestEntry> = entries.iter().filter(|e| e.role == Role::Gallery).collect();
    let probes: Vec<&ManifestEntry> = entries.iter().filter(|e| e.role == Role::Probe).collect();
    if probes.is_empty() {
        return Err(gaitrdae::Error::Protocol("manifest has no probe sequences".into()).into());
    }
    let g = stack(&gallery.iter().map(|e| find(e)).collect::<CliResult<Vec<_>>>()?)?;
    let p = stack(&probes.iter().map(|e| find(e)).collect::<CliResult<Vec<_>>>()?)?;
    let gl: Vec<usize> = gallery.iter().map(|e| e.id).collect();
    let pl: Vec<usize> = probes.iter().map(|e| e.id).collect();
    let mask = cross_view.then(|| {
        let pv: Vec<_> = probes.iter().map(|e| view_key(e)).collect();
        let gv: Vec<_> = gallery.iter().map(|e| view_key(e)).collect();
        cross_view_mask(&pv, &gv)
    });
    Ok(evaluate(&p, &g, &pl, &gl, &DEFAULT_KS, &mask)?)
}

/// Evaluates embeddings against a manifest; optionally dumps the distance
/// matrix as a `[probes, gallery]` f64 GRDT.
pub fn eval(embeddings: &Path, manifest: &Path, cross_view: bool, dump: Option<&Path>) -> CliResult<EvalReport> {
    let emb = read_embeddings(embeddings)?;
    let entries = read_manifest(manifest)?;
    let report = evaluate_embeddings(&emb, &entries, cross_view)?;
    if let Some(path) = dump {
        let d = &report.distance_matrix;
        let t = Tensor::new([d.probes, d.gallery], d.data.clone())?;
        grdt::write(path, &GrdtTensor::from(&t))?;
    }
    Ok(report)
}

/// Mean |offset| over motion and static pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RegionStats {
    pub motion_mean: f64,
    pub static_mean: f64,
    pub motion_pixels: usize,
    pub static_pixels: usize,
}

impl RegionStats {
    pub fn to_csv(&self) -> String {
        format!(
            "region,pixels,mean_abs_dt\nmotion,{},{}\nstatic,{},{}\n",
            self.motion_pixels, self.motion_mean, self.static_pixels, self.static_mean
        )
    }
}

/// Majority-vote downsampling of a binary `h x w` mask by `f x f` blocks; a
/// block is set when more than half of its pixels are.
pub fn downsample_mask(mask: &[u8], h: usize, w: usize, f: usize) -> Vec<u8> {
    let (oh, ow) = (h / f, w / f);
    let mut out = vec![0u8; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            let n: usize = (0..f)
                .flat_map(|dr| (0..f).map(move |dc| (dr, dc)))
                .map(|(dr, dc)| mask[(r * f + dr) * w + c * f + dc] as usize)
                .sum();
            out[r * ow + c] = (2 * n > f * f) as u8;
        }
    }
    out
}

/// Result of an offsets export.
#[derive(Clone, Debug)]
pub struct OffsetsExport {
    pub stats: RegionStats,
    /// `|dt|` of the first selected sequence, `[T', H', W']`.
    pub magnitudes: Tensor<f64>,
    pub heatmaps: Vec<PathBuf>,
}

/// Stage-3 offset magnitudes of the selected sequences (all gallery and
/// probe rows when `sequence` is `None`). Writes per-frame PGM heatmaps and
/// the raw offsets of the first sequence, and region statistics pooled over
/// all of them, into `out`.
pub fn offsets(checkpoint: &Path, manifest: &Path, sequence: Option<&str>, out: &Path, force: bool) -> CliResult<OffsetsExport> {
    let (mut model, _) = load_checkpoint(checkpoint)?;
    if !model.config.enable_rda {
        return Err(CliError::Usage("checkpoint was trained without RDA; there are no offsets".into()));
    }
    let root = manifest_root(manifest);
    let entries = read_manifest(manifest)?;
    let selected: Vec<&ManifestEntry> = match sequence {
        Some(p) => vec![entries
            .iter()
            .find(|e| e.path == p)
            .ok_or_else(|| CliError::Usage(format!("{p} is not in the manifest")))?],
        None => entries.iter().filter(|e| e.role != Role::Train).collect(),
    };
    if selected.is_empty() {
        return Err(CliError::Usage("no sequences selected".into()));
    }
    guard_output(&out.join("region_stats.csv"), force)?;
    std::fs::create_dir_all(out).map_err(|e| gaitrdae::Error::io(out, e))?;

    let (mut msum, mut mcnt, mut ssum, mut scnt) = (0.0, 0usize, 0.0, 0usize);
    let mut first: Option<Tensor<f64>> = None;
    for e in &selected {
        let (motion, stat) = load_masks(&root, e).map_err(|err| {
            CliError::Usage(format!("region statistics need masks for {}: {err}", e.path))
        })?;
        let x = sequence_input(&root, e)?;
        let (h, w) = (x.shape()[3], x.shape()[4]);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let fwd = model.forward(&mut g, xv, NormMode::Eval, false)?;
        let (_, dt) = fwd
            .backbone
            .offsets
            .iter()
            .find(|(s, _)| *s == 3)
            .copied()
            .ok_or_else(|| CliError::Usage("model has no stage-3 offsets".into()))?;
        let s = g.shape(dt).to_vec();
        let (frames, oh, ow) = (s[2], s[3], s[4]);
        let f = h / oh;
        if f == 0 || h != oh * f || w / f != ow {
            return Err(CliError::Config(format!("offset map {oh}x{ow} does not tile {h}x{w}")));
        }
        let mm = downsample_mask(&motion, h, w, f);
        let sm = downsample_mask(&stat, h, w, f);
        let mag: Vec<f64> = g.data(dt).iter().map(|v| v.abs() as f64).collect();
        for t in 0..frames {
            for i in 0..oh * ow {
                let v = mag[t * oh * ow + i];
                if mm[i] == 1 {
                    msum += v;
                    mcnt += 1;
                }
                if sm[i] == 1 {
                    ssum += v;
                    scnt += 1;
                }
            }
        }
        if first.is_none() {
            first = Some(Tensor::new([frames, oh, ow], mag)?);
        }
    }
    let stats = RegionStats {
        motion_mean: if mcnt > 0 { msum / mcnt as f64 } else { 0.0 },
        static_mean: if scnt > 0 { ssum / scnt as f64 } else { 0.0 },
        motion_pixels: mcnt,
        static_pixels: scnt,
    };
    let magnitudes = first.expect("at least one sequence");
    let (frames, oh, ow) = (magnitudes.shape()[0], magnitudes.shape()[1], magnitudes.shape()[2]);
    let max = magnitudes.data().iter().fold(0.0f64, |a, &b| a.max(b));
    let mut heatmaps = Vec::with_capacity(frames);
    for t in 0..frames {
        let path = out.join(format!("offsets_t{t:02}.pgm"));
        let plane = &magnitudes.data()[t * oh * ow..(t + 1) * oh * ow];
        pgm::write(&path, ow, oh, &pgm::normalize(plane, max))?;
        heatmaps.push(path);
    }
    grdt::write(out.join("offsets.grdt"), &GrdtTensor::from(&magnitudes))?;
    let csv = out.join("region_stats.csv");
    std::fs::write(&csv, stats.to_csv()).map_err(|e| gaitrdae::Error::io(&csv, e))?;
    Ok(OffsetsExport {
        stats,
        magnitudes,
        heatmaps,
    })
}
