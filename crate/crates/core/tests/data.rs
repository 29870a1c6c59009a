use std::fs;
use std::path::Path;

use idet_core::data::{
    generate_synthetic, load_dataset, load_pair, read_pgm_mask, read_ppm, save_pair, synth_pair, write_pgm, write_ppm,
    ImagePair, SynthConfig,
};
use idet_core::{Error, Mask, RngSeed, Tensor};
use rand::Rng;

fn small_cfg(seed: u64) -> SynthConfig {
    SynthConfig {
        n_pairs: 6,
        height: 32,
        width: 48,
        seed: RngSeed(seed),
        ..SynthConfig::default()
    }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn mask_roundtrip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.pgm");
    let m = Mask::from_fn(7, 9, |y, x| (y * x) % 4 == 1);
    write_pgm(&p, &m).unwrap();
    assert_eq!(read_pgm_mask(&p).unwrap(), m);
}

#[test]
fn image_roundtrip_within_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("i.ppm");
    let mut rng = RngSeed(1).rng();
    let img = Tensor::<f32>::from_fn(&[3, 5, 6], |_| rng.random_range(0.0..1.0));
    write_ppm(&p, &img).unwrap();
    let back = read_ppm(&p).unwrap();
    assert_eq!(back.shape(), img.shape());
    assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-6);
}

#[test]
fn gray_mask_value_is_rejected_with_file_name() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad_gt.pgm");
    let mut bytes = b"P5\n2 2\n255\n".to_vec();
    bytes.extend([0, 255, 128, 0]);
    fs::write(&p, bytes).unwrap();
    let err = read_pgm_mask(&p).unwrap_err();
    assert!(matches!(err, Error::Parse { .. }));
    let msg = err.to_string();
    assert!(msg.contains("bad_gt.pgm") && msg.contains("128"), "{msg}");
}

#[test]
fn malformed_files_are_parse_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [(&str, &[u8]); 4] = [
        ("trunc.ppm", b"P6\n2 2\n255\n\x00\x01\x02"),
        ("magic.ppm", b"P3\n1 1\n255\n\x00\x00\x00"),
        ("header.ppm", b"P6\n2"),
        ("maxval.ppm", b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00"),
    ];
    for (name, bytes) in cases {
        let p = dir.path().join(name);
        fs::write(&p, bytes).unwrap();
        let err = read_ppm(&p).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{name}: {err}");
        assert!(err.to_string().contains(name));
    }
}

#[test]
fn header_comments_are_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.pgm");
    fs::write(&p, b"P5\n# made by hand\n2 1\n255\n\xff\x00").unwrap();
    assert_eq!(read_pgm_mask(&p).unwrap().data(), &[1, 0]);
}

#[test]
fn pair_roundtrip_through_directory() {
    let dir = tempfile::tempdir().unwrap();
    let pair = synth_pair(&small_cfg(2), 3).unwrap();
    save_pair(dir.path(), &pair).unwrap();
    let back = load_pair(dir.path(), &pair.id).unwrap();
    assert_eq!(back.gt, pair.gt);
    assert!(back.x.max_abs_diff(&pair.x) <= 1.0 / 255.0);
    assert!(back.y.max_abs_diff(&pair.y) <= 1.0 / 255.0);
}

#[test]
fn generation_is_byte_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_synthetic(&small_cfg(9), a.path()).unwrap();
    generate_synthetic(&small_cfg(9), b.path()).unwrap();
    assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
    let ids: Vec<String> = load_dataset(a.path()).unwrap().into_iter().map(|p| p.id).collect();
    assert_eq!(ids.len(), 6);
    let c = tempfile::tempdir().unwrap();
    generate_synthetic(&small_cfg(10), c.path()).unwrap();
    assert_ne!(dir_bytes(a.path()), dir_bytes(c.path()));
}

#[test]
fn null_case_has_identical_images_and_empty_mask() {
    let cfg = SynthConfig {
        photometric_jitter: 0.0,
        min_changes: 0,
        max_changes: 0,
        ..small_cfg(4)
    };
    for i in 0..4 {
        let p = synth_pair(&cfg, i).unwrap();
        assert_eq!(p.gt.count_ones(), 0);
        assert_eq!(p.x, p.y);
    }
}

#[test]
fn ground_truth_covers_exactly_the_object_edits() {
    let clean = SynthConfig {
        photometric_jitter: 0.0,
        ..small_cfg(5)
    };
    let jittered = SynthConfig {
        photometric_jitter: 0.2,
        ..small_cfg(5)
    };
    for i in 0..8 {
        let a: ImagePair = synth_pair(&clean, i).unwrap();
        let b = synth_pair(&jittered, i).unwrap();
        // jitter changes Y but never the mask
        assert_eq!(a.gt, b.gt);
        assert_ne!(a.y, b.y);
        let (h, w) = a.size();
        for y in 0..h {
            for x in 0..w {
                let differs = (0..3).any(|c| a.x.data()[(c * h + y) * w + x] != a.y.data()[(c * h + y) * w + x]);
                if differs {
                    assert!(a.gt.get(y, x), "pixel ({y},{x}) of pair {i} changed outside gt");
                }
            }
        }
    }
}

#[test]
fn mean_change_ratio_tracks_target() {
    let cfg = SynthConfig {
        n_pairs: 100,
        change_ratio_target: 0.07,
        ..SynthConfig::default()
    };
    let mean: f64 = (0..100).map(|i| synth_pair(&cfg, i).unwrap().gt.ratio()).sum::<f64>() / 100.0;
    assert!((mean - 0.07).abs() <= 0.035, "mean ratio {mean}");
}

#[test]
fn infeasible_ratio_is_a_config_error() {
    let cfg = SynthConfig {
        change_ratio_target: 0.001,
        height: 16,
        width: 16,
        ..SynthConfig::default()
    };
    assert!(matches!(synth_pair(&cfg, 0), Err(Error::Config(_))));
}
