use gaitrdae::synth::dataset::{build_dataset, load_frames, load_masks, read_manifest, render_sequence};
use gaitrdae::synth::walker::{apply_covariate, generate_walker, Covariate, View, WalkerIdentity, MIN_FOREGROUND};
use gaitrdae::synth::sampler::window_indices;
use gaitrdae::synth::{pk_sample_batch, DatasetSpec, GalleryProtocol, Role, TrainSequence};
use gaitrdae::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FRONT: View = View { scale: 1.0, shear: 0.0 };

/// `(motion, static)` pixel fractions of the foreground bounding box.
fn region_fractions(motion: &[u8], stat: &[u8], frames: &[u8], h: usize, w: usize) -> (f64, f64) {
    let n = h * w;
    let (mut y0, mut y1, mut x0, mut x1) = (h, 0, w, 0);
    for (i, _) in frames.iter().enumerate().filter(|(_, &v)| v == 1) {
        let (y, x) = ((i % n) / w, i % w);
        y0 = y0.min(y);
        y1 = y1.max(y);
        x0 = x0.min(x);
        x1 = x1.max(x);
    }
    let area = ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
    let count = |m: &[u8]| m.iter().filter(|&&v| v == 1).count() as f64;
    (count(motion) / area, count(stat) / area)
}

#[test]
fn default_walkers_have_both_regions_and_enough_foreground() {
    let spec = DatasetSpec::default();
    for id in 0..spec.train_ids + spec.test_ids {
        for k in 0..spec.seqs_per_id {
            let s = render_sequence(&spec, id, k).unwrap();
            assert!(s.frames.iter().all(|&v| v <= 1));
            for t in 0..s.len {
                let fg = s.frame(t).iter().filter(|&&v| v == 1).count();
                assert!(fg >= MIN_FOREGROUND, "id {id} seq {k} frame {t}: {fg} pixels");
            }
            assert!(s.motion_mask.iter().zip(&s.static_mask).all(|(&m, &st)| m & st == 0));
            let (m, st) = region_fractions(&s.motion_mask, &s.static_mask, &s.frames, s.height, s.width);
            assert!(m >= 0.10 && st >= 0.10, "id {id} seq {k}: motion {m:.3} static {st:.3}");
        }
    }
}

#[test]
fn walkers_are_deterministic_and_follow_the_kinematics() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ident = WalkerIdentity::random(&mut rng, 32);
    let a = generate_walker(&ident, 0, 12, 32, 22, FRONT, 5).unwrap();
    let b = generate_walker(&ident, 0, 12, 32, 22, FRONT, 5).unwrap();
    assert_eq!(a, b);
    assert!((ident.leg_angle(0) - ident.amplitude * ident.phase.sin()).abs() < 1e-12);
    let t = 7;
    let want = ident.amplitude * (2.0 * std::f64::consts::PI * ident.frequency * t as f64 + ident.phase).sin();
    assert!((ident.leg_angle(t) - want).abs() < 1e-12);

    let still = WalkerIdentity { amplitude: 0.0, ..ident };
    let s = generate_walker(&still, 0, 6, 32, 22, FRONT, 5).unwrap();
    for t in 1..6 {
        assert_eq!(s.frame(t), s.frame(0));
    }
}

#[test]
fn oversized_limbs_are_a_geometry_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ident = WalkerIdentity {
        thigh: 40.0,
        ..WalkerIdentity::random(&mut rng, 32)
    };
    let err = generate_walker(&ident, 0, 12, 32, 22, FRONT, 0).unwrap_err();
    assert!(matches!(&err, Error::Geometry(m) if m.contains("phase")), "{err}");
}

#[test]
fn covariates_add_pixels_where_expected() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ident = WalkerIdentity::random(&mut rng, 32);
    let nm = generate_walker(&ident, 0, 12, 32, 22, FRONT, 1).unwrap();
    assert_eq!(apply_covariate(&nm, Covariate::Nm, 2).frames, nm.frames);
    let bg = apply_covariate(&nm, Covariate::Bg, 2);
    assert!(bg.foreground() > nm.foreground());
    let cl = apply_covariate(&nm, Covariate::Cl, 2);
    let torso = |s: &gaitrdae::synth::SilhouetteSequence| s.torso_mask.iter().filter(|&&v| v == 1).count();
    assert!(torso(&cl) > torso(&nm));
    for (i, (&a, &b)) in nm.frames.iter().zip(&cl.frames).enumerate() {
        assert!(b >= a, "coat removed pixel {i}");
    }
}

#[test]
fn dataset_split_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = DatasetSpec {
        train_ids: 3,
        test_ids: 2,
        seqs_per_id: 4,
        ..DatasetSpec::default()
    };
    let entries = build_dataset(&spec, dir.path()).unwrap();
    let manifest = dir.path().join("manifest.csv");
    let text = std::fs::read_to_string(&manifest).unwrap();
    assert!(text.starts_with("path,id,covariate,view_scale,view_shear,role\n"));
    assert_eq!(read_manifest(&manifest).unwrap(), entries);

    let train: std::collections::BTreeSet<_> = entries.iter().filter(|e| e.role == Role::Train).map(|e| e.id).collect();
    let test: std::collections::BTreeSet<_> = entries.iter().filter(|e| e.role != Role::Train).map(|e| e.id).collect();
    assert!(train.is_disjoint(&test));
    for id in &test {
        let gallery = entries.iter().filter(|e| e.id == *id && e.role == Role::Gallery).count();
        let probe = entries.iter().filter(|e| e.id == *id && e.role == Role::Probe).count();
        assert_eq!((gallery, probe), (2, 2));
    }
    for e in &entries {
        let seq = render_sequence(&spec, e.id, e.path[e.path.len() - 7..e.path.len() - 5].parse().unwrap()).unwrap();
        let frames = load_frames(dir.path(), e).unwrap();
        assert_eq!(frames.shape, vec![spec.frames, 1, spec.height, spec.width]);
        assert_eq!(frames.as_u8().unwrap(), seq.frames.as_slice());
        let (m, s) = load_masks(dir.path(), e).unwrap();
        assert_eq!((m, s), (seq.motion_mask, seq.static_mask));
    }

    let again = tempfile::tempdir().unwrap();
    build_dataset(&spec, again.path()).unwrap();
    for e in &entries {
        let a = std::fs::read(dir.path().join(&e.path)).unwrap();
        let b = std::fs::read(again.path().join(&e.path)).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn gait3d_protocol_keeps_one_gallery_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let spec = DatasetSpec {
        train_ids: 2,
        test_ids: 2,
        seqs_per_id: 3,
        protocol: GalleryProtocol::Gait3d,
        ..DatasetSpec::default()
    };
    let entries = build_dataset(&spec, dir.path()).unwrap();
    let gallery = entries.iter().filter(|e| e.role == Role::Gallery).count();
    assert_eq!(gallery, 2);
    let bad = DatasetSpec {
        seqs_per_id: 2,
        ..DatasetSpec::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}

#[test]
fn sampler_windows_and_batches() {
    let wrapped: Vec<usize> = (0..30).map(|i| (15 + i) % 20).collect();
    assert_eq!(window_indices(20, 30, 15), wrapped);
    assert_eq!(&wrapped[..5], &[15, 16, 17, 18, 19]);
    assert_eq!(wrapped[29], (15 + 9) % 20);
    let seqs: Vec<TrainSequence> = (0..10)
        .map(|i| TrainSequence {
            label: i / 2,
            len: 4,
            height: 2,
            width: 2,
            frames: vec![(i % 2) as u8; 16],
        })
        .collect();
    let a = pk_sample_batch::<f32>(&seqs, 3, 4, 6, 9).unwrap();
    let b = pk_sample_batch::<f32>(&seqs, 3, 4, 6, 9).unwrap();
    assert_eq!(a.x.shape(), &[12, 6, 1, 2, 2]);
    assert_eq!(a.labels, b.labels);
    assert_eq!(a.x.data(), b.x.data());
    for p in 0..3 {
        assert!(a.labels[p * 4..(p + 1) * 4].iter().all(|&l| l == a.labels[p * 4]));
    }
    assert!(matches!(pk_sample_batch::<f32>(&[], 2, 2, 6, 0), Err(Error::Usage(_))));
    assert!(matches!(pk_sample_batch::<f32>(&seqs, 6, 2, 6, 0), Err(Error::Sampling(_))));
}
