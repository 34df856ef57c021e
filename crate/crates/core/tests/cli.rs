use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specgt::cube_io::{
    read_cube, read_fraction_map, read_label_map, with_suffix, write_cube, write_endmembers, EndmemberLibrary,
    SpectralCube,
};
use specgt::dataset::{write_dataset, BandStats, Patch, PatchDataset, PatchSource};
use specgt::resolution::argmax;
use specgt::scenegen::default_library;

fn specgt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_specgt"))
        .args(args)
        .arg("--quiet")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = specgt(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn fails_with(args: &[&str], code: i32) -> String {
    let out = specgt(args);
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(out.status.code(), Some(code), "{args:?}: {stderr}");
    assert_eq!(stderr.trim_end().lines().count(), 1, "diagnostic is one line: {stderr}");
    stderr
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_spec(dir: &Path, rows: usize, cols: usize, seed: u64) -> PathBuf {
    let p = dir.join(format!("spec{seed}.json"));
    std::fs::write(
        &p,
        format!(r#"{{"rows":{rows},"cols":{cols},"smoothness":4.0,"noise_sigma":0.0,"seed":{seed}}}"#),
    )
    .unwrap();
    p
}

fn gen_scene(dir: &Path, rows: usize, cols: usize, seed: u64) -> (PathBuf, PathBuf) {
    let spec = write_spec(dir, rows, cols, seed);
    let out = dir.join(format!("scene{seed}"));
    let em = dir.join("em.csv");
    ok(&["gen-scene", "--spec", s(&spec), "--out", s(&out), "--endmembers-out", s(&em)]);
    (out, em)
}

#[test]
fn gen_scene_writes_three_artifacts_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, _) = gen_scene(dir.path(), 30, 20, 5);
    for suffix in [".json", ".bin", ".fractions.json", ".fractions.bin", ".labels.json", ".labels.bin"] {
        assert!(with_suffix(&a, suffix).exists(), "{suffix}");
    }
    let spec = dir.path().join("spec5.json");
    let b = dir.path().join("again");
    ok(&["gen-scene", "--spec", s(&spec), "--out", s(&b)]);
    for suffix in [".bin", ".fractions.bin", ".labels.bin", ".labels.json"] {
        assert_eq!(
            std::fs::read(with_suffix(&a, suffix)).unwrap(),
            std::fs::read(with_suffix(&b, suffix)).unwrap(),
            "{suffix}"
        );
    }
}

#[test]
fn gen_scene_reports_missing_and_bad_specs() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let msg = fails_with(&["gen-scene", "--spec", s(&missing), "--out", s(&dir.path().join("x"))], 2);
    assert!(msg.contains("missing.json"), "{msg}");

    let bad = write_spec(dir.path(), 0, 10, 1);
    fails_with(&["gen-scene", "--spec", s(&bad), "--out", s(&dir.path().join("x"))], 2);
    std::fs::write(&bad, "{ not json").unwrap();
    fails_with(&["gen-scene", "--spec", s(&bad), "--out", s(&dir.path().join("x"))], 2);
}

#[test]
fn usage_errors_exit_with_two() {
    fails_with(&["no-such-command"], 2);
    fails_with(&["unmix", "--cube", "a"], 2);
    let out = Command::new(env!("CARGO_BIN_EXE_specgt"))
        .args(["eval", "--pred", "a", "--gt", "b", "--out", "c"])
        .env("SPECGT_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unmix_recovers_pure_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let lib = default_library();
    let d = lib.d();
    let pixels: Vec<f64> = (0..4 * d).flat_map(|i| lib.spectrum(i % d).to_vec()).collect();
    let cube = SpectralCube::from_pixels(4, d, lib.band_centers().to_vec(), lib.band_widths().to_vec(), &pixels)
        .unwrap();
    let (cube_p, em_p, out) = (dir.path().join("pure"), dir.path().join("em.csv"), dir.path().join("un"));
    write_cube(&cube, &cube_p).unwrap();
    write_endmembers(&lib, &em_p).unwrap();
    ok(&["unmix", "--cube", s(&cube_p), "--endmembers", s(&em_p), "--out", s(&out)]);
    let (fm, names) = read_fraction_map(&out).unwrap();
    assert_eq!(names, lib.names());
    for i in 0..4 * d {
        let f = fm.pixel(i / d, i % d);
        for (k, v) in f.iter().enumerate() {
            let want = if k == i % d { 1.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-6, "pixel {i} class {k}: {v}");
        }
    }
    let report = std::fs::read_to_string(with_suffix(&out, ".report.csv")).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "pixels,mean_iterations,non_converged");
    assert!(lines[1].starts_with(&format!("{},", 4 * d)));
}

#[test]
fn unmix_objectives_agree_on_labels() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, em) = gen_scene(dir.path(), 40, 40, 9);
    let (sam, l2) = (dir.path().join("sam"), dir.path().join("l2"));
    ok(&["unmix", "--cube", s(&scene), "--endmembers", s(&em), "--out", s(&sam)]);
    ok(&["unmix", "--cube", s(&scene), "--endmembers", s(&em), "--out", s(&l2), "--objective", "l2"]);
    let (a, _) = read_fraction_map(&sam).unwrap();
    let (b, _) = read_fraction_map(&l2).unwrap();
    let n = a.rows() * a.cols();
    let agree = (0..n)
        .filter(|&i| argmax(a.pixel(i / a.cols(), i % a.cols())) == argmax(b.pixel(i / b.cols(), i % b.cols())))
        .count();
    assert!(agree as f64 >= 0.99 * n as f64, "{agree}/{n}");
}

#[test]
fn unmix_rejects_mismatched_band_grid() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, _) = gen_scene(dir.path(), 10, 10, 2);
    let lib = default_library();
    let shifted: Vec<f64> = lib.band_centers().iter().map(|c| c + 1.5).collect();
    let other = EndmemberLibrary::new(
        lib.names().to_vec(),
        shifted,
        lib.band_widths().to_vec(),
        lib.spectra().to_vec(),
    )
    .unwrap();
    let em = dir.path().join("shifted.csv");
    write_endmembers(&other, &em).unwrap();
    fails_with(&["unmix", "--cube", s(&scene), "--endmembers", s(&em), "--out", s(&dir.path().join("u"))], 3);
}

#[test]
fn adapt_with_unit_factor_and_own_grid_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, _) = gen_scene(dir.path(), 12, 9, 4);
    let out = dir.path().join("same");
    ok(&["adapt", "--cube", s(&scene), "--factor", "1", "--out", s(&out)]);
    assert_eq!(read_cube(&out).unwrap(), read_cube(&scene).unwrap());
}

#[test]
fn adapt_and_synth_gt_downsample_by_the_factor() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, em) = gen_scene(dir.path(), 50, 50, 6);
    let bands = dir.path().join("bands.json");
    specgt::resolution::BandSpec::venus_like().write(&bands).unwrap();
    let adapted = dir.path().join("adapted");
    ok(&["adapt", "--cube", s(&scene), "--bands", s(&bands), "--factor", "5", "--out", s(&adapted)]);
    let cube = read_cube(&adapted).unwrap();
    assert_eq!((cube.rows(), cube.cols(), cube.bands()), (10, 10, 11));

    let un = dir.path().join("un");
    ok(&["unmix", "--cube", s(&scene), "--endmembers", s(&em), "--out", s(&un)]);
    let gt = dir.path().join("gt");
    ok(&["synth-gt", "--fractions", s(&un), "--factor", "5", "--out", s(&gt)]);
    let labels = read_label_map(&gt).unwrap();
    assert_eq!((labels.rows(), labels.cols()), (10, 10));

    // Naive block sums, then first maximal index.
    let (fm, _) = read_fraction_map(&un).unwrap();
    for br in 0..10 {
        for bc in 0..10 {
            let mut acc = vec![0.0; fm.d()];
            for r in 0..5 {
                for c in 0..5 {
                    for (k, v) in fm.pixel(br * 5 + r, bc * 5 + c).iter().enumerate() {
                        acc[k] += v;
                    }
                }
            }
            let mut best = 0;
            for k in 1..acc.len() {
                if acc[k] > acc[best] {
                    best = k;
                }
            }
            assert_eq!(labels.get(br, bc) as usize, best, "block {br},{bc}");
        }
    }

    fails_with(&["synth-gt", "--fractions", s(&un), "--factor", "51", "--out", s(&gt)], 3);
    fails_with(&["adapt", "--cube", s(&scene), "--factor", "60", "--out", s(&adapted)], 3);
}

#[test]
fn eval_of_identical_maps_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, _) = gen_scene(dir.path(), 20, 20, 8);
    let (metrics, confusion) = (dir.path().join("m.json"), dir.path().join("c.csv"));
    ok(&["eval", "--pred", s(&scene), "--gt", s(&scene), "--out", s(&metrics), "--confusion", s(&confusion)]);
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(&metrics).unwrap()).unwrap();
    assert_eq!(m["overall_accuracy"], 1.0);
    assert_eq!(m["n_evaluated"], 400);
    for key in ["per_class_accuracy", "confusion_matrix", "n_sentinel"] {
        assert!(m.get(key).is_some(), "{key}");
    }
    assert!(std::fs::read_to_string(&confusion).unwrap().starts_with("truth,"));
    let png = dir.path().join("labels.png");
    ok(&["render", "--labels", s(&scene), "--out", s(&png)]);
    assert_eq!(&std::fs::read(&png).unwrap()[..4], b"\x89PNG");
}

fn overfit_fixture(path: &Path) {
    let (n, bands, classes) = (5, 11, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let patches = (0..20)
        .map(|i| {
            let values = (0..n * n * bands).map(|_| rng.random_range(-1.0..1.0)).collect();
            let source = PatchSource { image: 0, row: i, col: 0 };
            Patch::new(n, bands, values, (i % classes) as u8, source).unwrap()
        })
        .collect();
    let names = (0..classes).map(|k| format!("c{k}")).collect();
    let stats = BandStats {
        mean: vec![0.0; bands],
        std: vec![1.0; bands],
    };
    write_dataset(&PatchDataset::new(n, bands, names, stats, patches).unwrap(), path).unwrap();
}

#[test]
fn train_overfits_the_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("fixture");
    overfit_fixture(&with_suffix(&ds, ".train"));
    let model = dir.path().join("model");
    #[rustfmt::skip]
    ok(&[
        "train", "--dataset", s(&ds), "--out", s(&model),
        "--epochs", "200", "--per-label", "3", "--batch-size", "21",
        "--dropout", "0", "--noise-sigma", "0", "--seed", "3",
    ]);
    let history = std::fs::read_to_string(with_suffix(&model, ".history.csv")).unwrap();
    let last = history.lines().last().unwrap();
    let loss: f64 = last.split(',').nth(1).unwrap().parse().unwrap();
    assert!(loss < 0.05, "{last}");
    assert!(with_suffix(&model, ".bin").exists());
}

#[test]
fn small_pipeline_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let bands = dir.path().join("bands.json");
    specgt::resolution::BandSpec::venus_like().write(&bands).unwrap();
    let mut cubes = Vec::new();
    let mut gts = Vec::new();
    for seed in 0..2 {
        let (scene, em) = gen_scene(dir.path(), 60, 60, 100 + seed);
        let (un, ad, gt) = (
            dir.path().join(format!("un{seed}")),
            dir.path().join(format!("ad{seed}")),
            dir.path().join(format!("gt{seed}")),
        );
        ok(&["unmix", "--cube", s(&scene), "--endmembers", s(&em), "--out", s(&un)]);
        ok(&["adapt", "--cube", s(&scene), "--bands", s(&bands), "--factor", "3", "--out", s(&ad)]);
        ok(&["synth-gt", "--fractions", s(&un), "--factor", "3", "--out", s(&gt)]);
        cubes.push(ad);
        gts.push(gt);
    }
    let ds = dir.path().join("ds");
    #[rustfmt::skip]
    ok(&[
        "build-dataset", "--cube", s(&cubes[0]), "--labels", s(&gts[0]),
        "--cube", s(&cubes[1]), "--labels", s(&gts[1]),
        "--test-image", "1", "--patch-size", "3", "--out", s(&ds),
    ]);
    for part in [".train", ".val", ".test"] {
        assert!(with_suffix(&with_suffix(&ds, part), ".json").exists(), "{part}");
    }
    let model = dir.path().join("model");
    #[rustfmt::skip]
    ok(&["train", "--dataset", s(&ds), "--out", s(&model), "--epochs", "2", "--per-label", "20", "--batch-size", "16"]);
    let (pred, probs) = (dir.path().join("pred"), dir.path().join("probs"));
    #[rustfmt::skip]
    ok(&["classify", "--model", s(&model), "--cube", s(&cubes[1]), "--out", s(&pred), "--probabilities", s(&probs)]);
    let labels = read_label_map(&pred).unwrap();
    assert_eq!((labels.rows(), labels.cols()), (20, 20));
    let (p, _) = read_fraction_map(&probs).unwrap();
    assert_eq!(p.d(), 7);
    ok(&["eval", "--pred", s(&pred), "--gt", s(&gts[1]), "--out", s(&dir.path().join("m.json"))]);

    // A model trained on 11 bands cannot classify the 41-band source scene.
    let source = dir.path().join("scene100");
    fails_with(&["classify", "--model", s(&model), "--cube", s(&source), "--out", s(&pred)], 3);
}

#[test]
fn corrupted_inputs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, _) = gen_scene(dir.path(), 10, 10, 12);
    let bin = with_suffix(&scene, ".bin");
    let bytes = std::fs::read(&bin).unwrap();
    std::fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
    let msg = fails_with(&["adapt", "--cube", s(&scene), "--factor", "1", "--out", s(&dir.path().join("a"))], 3);
    assert!(msg.contains(".bin"), "{msg}");

    let labels_json = with_suffix(&scene, ".labels.json");
    std::fs::write(&labels_json, "{\"version\": 1").unwrap();
    fails_with(&["render", "--labels", s(&scene), "--out", s(&dir.path().join("x.png"))], 3);

    let model = dir.path().join("nomodel");
    fails_with(&["classify", "--model", s(&model), "--cube", s(&scene), "--out", s(&model)], 3);
}
