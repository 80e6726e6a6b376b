//! Synthetic dataset generation, manifest CSV and on-disk sequence files.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::walker::{apply_covariate, generate_walker, Covariate, SilhouetteSequence, View, WalkerIdentity};
use crate::error::{Error, Result};
use crate::tensor::grdt::{self, GrdtTensor};

/// Manifest column order.
pub const MANIFEST_HEADER: [&str; 6] = ["path", "id", "covariate", "view_scale", "view_shear", "role"];

/// Gallery size per test identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GalleryProtocol {
    /// The first two sequences of each test identity form the gallery.
    Grew,
    /// The first sequence of each test identity forms the gallery.
    Gait3d,
}

impl GalleryProtocol {
    pub fn gallery_per_id(self) -> usize {
        match self {
            Self::Grew => 2,
            Self::Gait3d => 1,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "grew" => Ok(Self::Grew),
            "gait3d" => Ok(Self::Gait3d),
            _ => Err(Error::Config(format!("unknown protocol {s:?}; expected grew or gait3d"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Grew => "grew",
            Self::Gait3d => "gait3d",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Train,
    Gallery,
    Probe,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Gallery => "gallery",
            Self::Probe => "probe",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "gallery" => Ok(Self::Gallery),
            "probe" => Ok(Self::Probe),
            _ => Err(Error::Config(format!("unknown role {s:?}"))),
        }
    }
}

/// One manifest row. `path` is relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: String,
    pub id: usize,
    pub covariate: Covariate,
    pub view_scale: f64,
    pub view_shear: f64,
    pub role: Role,
}

impl ManifestEntry {
    pub fn view(&self) -> View {
        View {
            scale: self.view_scale,
            shear: self.view_shear,
        }
    }

    /// Path of the companion mask container.
    pub fn masks_path(&self) -> String {
        match self.path.strip_suffix(".grdt") {
            Some(stem) => format!("{stem}_masks.grdt"),
            None => format!("{}_masks.grdt", self.path),
        }
    }
}

/// Dataset shape and split.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub train_ids: usize,
    pub test_ids: usize,
    pub seqs_per_id: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub protocol: GalleryProtocol,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            train_ids: 16,
            test_ids: 8,
            seqs_per_id: 8,
            frames: 12,
            height: 32,
            width: 22,
            protocol: GalleryProtocol::Grew,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train_ids < 2 || self.test_ids < 1 {
            return Err(Error::Config(format!(
                "need at least 2 training and 1 test identity, got {} and {}",
                self.train_ids, self.test_ids
            )));
        }
        let g = self.protocol.gallery_per_id();
        if self.seqs_per_id < g + 1 {
            return Err(Error::Config(format!(
                "{} protocol needs at least {} sequences per identity, got {}",
                self.protocol.as_str(),
                g + 1,
                self.seqs_per_id
            )));
        }
        if self.frames == 0 || self.height < 16 || self.width < 11 {
            return Err(Error::Config(format!(
                "sequence shape {}x{}x{} too small",
                self.frames, self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Views cycled over the sequences of an identity.
pub const VIEWS: [View; 3] = [
    View { scale: 1.0, shear: 0.0 },
    View {
        scale: 0.94,
        shear: 0.08,
    },
    View {
        scale: 1.04,
        shear: -0.08,
    },
];

/// Conditions cycled over the sequences of an identity.
pub const COVARIATES: [Covariate; 4] = [Covariate::Nm, Covariate::Nm, Covariate::Bg, Covariate::Cl];

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const MAX_IDENTITY_DRAWS: usize = 64;

/// Renders sequence `k` of identity `id` as written by [`build_dataset`].
pub fn render_sequence(spec: &DatasetSpec, id: usize, k: usize) -> Result<SilhouetteSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, id as u64, u64::MAX));
    let view = VIEWS[k % VIEWS.len()];
    let covariate = COVARIATES[k % COVARIATES.len()];
    let seq_seed = mix(spec.seed, id as u64, k as u64);
    let mut last = None;
    for _ in 0..MAX_IDENTITY_DRAWS {
        let base = WalkerIdentity::random(&mut rng, spec.height);
        let walker = WalkerIdentity {
            phase: base.phase + k as f64 * 1.9,
            ..base
        };
        let all_fit = VIEWS
            .iter()
            .all(|&v| generate_walker(&walker, id, spec.frames, spec.height, spec.width, v, seq_seed).is_ok());
        if !all_fit {
            last = Some(generate_walker(&walker, id, spec.frames, spec.height, spec.width, view, seq_seed));
            continue;
        }
        let seq = generate_walker(&walker, id, spec.frames, spec.height, spec.width, view, seq_seed)?;
        return Ok(apply_covariate(&seq, covariate, seq_seed ^ 0x5bd1_e995));
    }
    match last {
        Some(Err(e)) => Err(e),
        _ => Err(Error::Geometry(format!("no identity fits a {}x{} frame", spec.height, spec.width))),
    }
}

/// Generates every sequence, writes `<out>/seqs/*.grdt` and `<out>/manifest.csv`,
/// and returns the manifest rows. Train identities are `0..train_ids`; test
/// identities follow.
pub fn build_dataset(spec: &DatasetSpec, out: &Path) -> Result<Vec<ManifestEntry>> {
    spec.validate()?;
    let seq_dir = out.join("seqs");
    fs::create_dir_all(&seq_dir).map_err(|e| Error::io(&seq_dir, e))?;
    let gallery = spec.protocol.gallery_per_id();
    let mut entries = Vec::new();
    for id in 0..spec.train_ids + spec.test_ids {
        for k in 0..spec.seqs_per_id {
            let seq = render_sequence(spec, id, k)?;
            let role = if id < spec.train_ids {
                Role::Train
            } else if k < gallery {
                Role::Gallery
            } else {
                Role::Probe
            };
            let entry = ManifestEntry {
                path: format!("seqs/{id:04}_{k:02}.grdt"),
                id,
                covariate: seq.covariate,
                view_scale: seq.view.scale,
                view_shear: seq.view.shear,
                role,
            };
            write_sequence(out, &entry, &seq)?;
            entries.push(entry);
        }
    }
    write_manifest(&out.join("manifest.csv"), &entries)?;
    Ok(entries)
}

/// Writes the frames `[T, 1, H, W]` and the `motion` / `static` masks `[1, H, W]`.
pub fn write_sequence(root: &Path, entry: &ManifestEntry, seq: &SilhouetteSequence) -> Result<()> {
    let frames = GrdtTensor::u8(vec![seq.len, 1, seq.height, seq.width], seq.frames.clone())?;
    grdt::write(root.join(&entry.path), &frames)?;
    let plane = vec![1, seq.height, seq.width];
    let masks = [
        ("motion".to_string(), GrdtTensor::u8(plane.clone(), seq.motion_mask.clone())?),
        ("static".to_string(), GrdtTensor::u8(plane, seq.static_mask.clone())?),
    ];
    grdt::write_named(root.join(entry.masks_path()), &masks)
}

/// Silhouettes of one manifest row, `[T, 1, H, W]` u8.
pub fn load_frames(root: &Path, entry: &ManifestEntry) -> Result<GrdtTensor> {
    let path = root.join(&entry.path);
    let t = grdt::read(&path)?;
    if t.shape.len() != 4 || t.shape[1] != 1 || t.as_u8().is_none() {
        return Err(Error::format(&path, format!("expected u8 [T, 1, H, W], got {:?}", t.shape)));
    }
    Ok(t)
}

/// Motion and static masks `(motion, static)`, each `H * W` values.
pub fn load_masks(root: &Path, entry: &ManifestEntry) -> Result<(Vec<u8>, Vec<u8>)> {
    let path = root.join(entry.masks_path());
    let records = grdt::read_named(&path)?;
    let get = |name: &str| -> Result<Vec<u8>> {
        records
            .iter()
            .find(|(k, _)| k == name)
            .and_then(|(_, t)| t.as_u8())
            .map(<[u8]>::to_vec)
            .ok_or_else(|| Error::format(&path, format!("missing u8 mask {name}")))
    };
    Ok((get("motion")?, get("static")?))
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(MANIFEST_HEADER)?;
    for e in entries {
        w.write_record([
            e.path.clone(),
            e.id.to_string(),
            e.covariate.as_str().to_string(),
            e.view_scale.to_string(),
            e.view_shear.to_string(),
            e.role.as_str().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(std::io::BufReader::new(file));
    let header = r.headers()?.clone();
    if header.iter().ne(MANIFEST_HEADER) {
        return Err(Error::format(path, format!("manifest header {header:?} != {MANIFEST_HEADER:?}")));
    }
    let bad = |line: usize, what: &str| Error::format(path, format!("line {line}: invalid {what}"));
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let field = |j: usize| rec.get(j).ok_or_else(|| bad(line, MANIFEST_HEADER[j]));
        out.push(ManifestEntry {
            path: field(0)?.to_string(),
            id: field(1)?.parse().map_err(|_| bad(line, "id"))?,
            covariate: Covariate::parse(field(2)?)?,
            view_scale: field(3)?.parse().map_err(|_| bad(line, "view_scale"))?,
            view_shear: field(4)?.parse().map_err(|_| bad(line, "view_shear"))?,
            role: Role::parse(field(5)?)?,
        });
    }
    Ok(out)
}

/// Directory holding a manifest, against which its paths resolve.
pub fn manifest_root(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn protocol_sizes() {
        let mut spec = DatasetSpec {
            seqs_per_id: 2,
            ..DatasetSpec::default()
        };
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
        spec.protocol = GalleryProtocol::Gait3d;
        spec.validate().unwrap();
        let zero = DatasetSpec {
            train_ids: 0,
            ..DatasetSpec::default()
        };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn masks_path_suffix() {
        let e = ManifestEntry {
            path: "seqs/0001_03.grdt".into(),
            id: 1,
            covariate: Covariate::Nm,
            view_scale: 1.0,
            view_shear: 0.0,
            role: Role::Train,
        };
        assert_eq!(e.masks_path(), "seqs/0001_03_masks.grdt");
    }

    #[test]
    fn every_default_sequence_renders() {
        let spec = DatasetSpec::default();
        for id in 0..spec.train_ids + spec.test_ids {
            for k in 0..spec.seqs_per_id {
                render_sequence(&spec, id, k).unwrap();
            }
        }
    }
}
