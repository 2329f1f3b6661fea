//! End-to-end checks of the `lrf` binary: subcommand plumbing, report
//! formats, artifact files, and the exit-code contract (2 usage, 3 data,
//! 4 numeric, 5 io).

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lrf::{ImageBuffer, ImagePair, RfGeometry, SparseRowModel, Topology};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn lrf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lrf"))
        .args(args)
        .output()
        .expect("spawn lrf binary")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

fn random_pair(rng: &mut ChaCha8Rng, side: usize) -> ImagePair {
    let plane = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..side * side).map(|_| rng.gen_range(0.0..1.0)).collect()
    };
    ImagePair::new(
        ImageBuffer::new(side, side, 1, plane(rng)).unwrap(),
        ImageBuffer::new(side, side, 1, plane(rng)).unwrap(),
    )
    .unwrap()
}

/// Writes `n` random PNG pairs plus a relative-path manifest, returning
/// the manifest path.
fn fixture(dir: &Path, n: usize, side: usize, seed: u64) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lines = String::new();
    for i in 0..n {
        let pair = random_pair(&mut rng, side);
        pair.input.save(&dir.join(format!("x{i}.png"))).unwrap();
        pair.target.save(&dir.join(format!("y{i}.png"))).unwrap();
        lines.push_str(&format!("x{i}.png,y{i}.png\n"));
    }
    let manifest = dir.join("pairs.csv");
    std::fs::write(&manifest, lines).unwrap();
    manifest
}

fn train_model(dir: &Path, manifest: &Path) -> PathBuf {
    let model = dir.join("model.lrm");
    let out = lrf(&[
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--rf",
        "3",
        "--lambda",
        "0.5",
        "--out",
        model.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "train failed: {}", stderr(&out));
    model
}

#[test]
fn train_synth_eval_round_trip_with_timing() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixture(dir.path(), 10, 8, 1);

    let model = dir.path().join("model.lrm");
    let trained = lrf(&[
        "--time",
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--rf",
        "3",
        "--lambda",
        "0.5",
        "--out",
        model.to_str().unwrap(),
    ]);
    assert!(trained.status.success(), "{}", stderr(&trained));
    assert!(
        stdout(&trained).lines().any(|l| l.starts_with("timing: train ") && l.ends_with(" s")),
        "missing train timing line: {:?}",
        stdout(&trained)
    );

    let synth_out = dir.path().join("synth.png");
    let synthed = lrf(&[
        "--time",
        "synth",
        "--model",
        model.to_str().unwrap(),
        "--in",
        dir.path().join("x0.png").to_str().unwrap(),
        "--out",
        synth_out.to_str().unwrap(),
    ]);
    assert!(synthed.status.success(), "{}", stderr(&synthed));
    assert!(
        stdout(&synthed).lines().any(|l| l.starts_with("timing: synth ") && l.ends_with(" ms")),
        "missing synth timing line: {:?}",
        stdout(&synthed)
    );
    let produced = ImageBuffer::load(&synth_out).unwrap();
    assert_eq!((produced.height(), produced.width()), (8, 8));

    let evaled = lrf(&[
        "eval",
        "--model",
        model.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
    ]);
    assert!(evaled.status.success(), "{}", stderr(&evaled));
    let line = stdout(&evaled);
    let score: f64 = line
        .trim()
        .strip_prefix("mse_x100 ")
        .unwrap_or_else(|| panic!("unexpected eval output {line:?}"))
        .parse()
        .unwrap();
    assert!(score.is_finite() && score >= 0.0);
}

#[test]
fn refine_writes_blend_and_optional_alpha_map() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixture(dir.path(), 10, 8, 2);
    let model = train_model(dir.path(), &manifest);

    let synth_out = dir.path().join("synth.png");
    let synthed = lrf(&[
        "synth",
        "--model",
        model.to_str().unwrap(),
        "--in",
        dir.path().join("x0.png").to_str().unwrap(),
        "--out",
        synth_out.to_str().unwrap(),
    ]);
    assert!(synthed.status.success(), "{}", stderr(&synthed));

    let refined_out = dir.path().join("refined.png");
    let alpha_out = dir.path().join("alpha.png");
    let refined = lrf(&[
        "refine",
        "--model",
        model.to_str().unwrap(),
        "--in",
        dir.path().join("x0.png").to_str().unwrap(),
        "--synth",
        synth_out.to_str().unwrap(),
        "--out",
        refined_out.to_str().unwrap(),
        "--alpha-out",
        alpha_out.to_str().unwrap(),
    ]);
    assert!(refined.status.success(), "{}", stderr(&refined));

    let x = ImageBuffer::load(&dir.path().join("x0.png")).unwrap();
    let y = ImageBuffer::load(&synth_out).unwrap();
    let blend = ImageBuffer::load(&refined_out).unwrap();
    let alpha = ImageBuffer::load(&alpha_out).unwrap();
    assert_eq!((alpha.height(), alpha.width(), alpha.channels()), (8, 8, 1));
    // Every refined pixel lies in the convex hull of input and synthesis
    // (up to 8-bit quantization of all three files).
    let quantum = 1.0 / 255.0;
    for k in 0..64 {
        let (lo, hi) = (x.data()[k].min(y.data()[k]), x.data()[k].max(y.data()[k]));
        assert!(
            blend.data()[k] >= lo - quantum && blend.data()[k] <= hi + quantum,
            "pixel {k}: {} outside [{lo}, {hi}]",
            blend.data()[k]
        );
    }
}

#[test]
fn cv_emits_report_table_model_and_split_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixture(dir.path(), 20, 8, 3);
    let model_out = dir.path().join("cv.lrm");
    let report = dir.path().join("report.csv");
    let trainval = dir.path().join("trainval.csv");
    let test = dir.path().join("test.csv");

    let cv = lrf(&[
        "cv",
        "--manifest",
        manifest.to_str().unwrap(),
        "--solver",
        "mr",
        "--rf",
        "3",
        "--split",
        "0.7,0.15,0.15",
        "--seed",
        "9",
        "--out",
        model_out.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
        "--trainval-out",
        trainval.to_str().unwrap(),
        "--test-out",
        test.to_str().unwrap(),
    ]);
    assert!(cv.status.success(), "{}", stderr(&cv));

    let table = stdout(&cv);
    assert!(table.starts_with("lambda,val_mse_x100\n"), "{table:?}");
    let best_line = table.lines().last().unwrap();
    assert!(best_line.starts_with("best,"), "{table:?}");
    // The report file carries the score table; stdout appends the winner.
    let report_text = std::fs::read_to_string(&report).unwrap();
    assert_eq!(format!("{report_text}{best_line}\n"), table);

    // 20 pairs at 0.7/0.15/0.15 split into 14 train, 3 val, 3 test; the
    // emitted manifests carry resolved paths and are disjoint.
    let rows = |p: &Path| -> Vec<String> {
        std::fs::read_to_string(p)
            .unwrap()
            .lines()
            .map(str::to_owned)
            .collect()
    };
    let tv = rows(&trainval);
    let te = rows(&test);
    assert_eq!((tv.len(), te.len()), (17, 3));
    assert!(tv.iter().all(|r| !te.contains(r)));
    assert!(tv
        .iter()
        .chain(&te)
        .all(|r| Path::new(r.split(',').next().unwrap()).is_absolute()));

    let model = SparseRowModel::load(&model_out).unwrap();
    assert_eq!(model.geometry().out_height, 8);
}

#[test]
fn inspect_mask_renders_header_and_tap_grid() {
    let out = lrf(&["inspect", "mask", "--size", "5x5", "--rf", "3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 26, "header plus one line per output pixel");
    // Corner pixel 1 sees taps {1, 2, 6, 7} of the 25 input pixels.
    let row1 = lines[1];
    assert!(row1.starts_with(" 1 |"), "{row1:?}");
    let marked: Vec<usize> = row1[4..]
        .as_bytes()
        .chunks(3)
        .enumerate()
        .filter(|(_, c)| c.ends_with(b"1"))
        .map(|(j, _)| j + 1)
        .collect();
    assert_eq!(marked, vec![1, 2, 6, 7]);
}

#[test]
fn inspect_model_reports_geometry_and_parameter_count() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixture(dir.path(), 10, 8, 4);
    let model = train_model(dir.path(), &manifest);

    let out = lrf(&["inspect", "model", "--model", model.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("geometry: 8x8 -> 8x8, rf 3x3, dilation 1"), "{text:?}");
    assert!(text.contains("strategy: gray"), "{text:?}");
    assert!(text.contains("mappings: 1"), "{text:?}");
    let expected = Topology::build(RfGeometry::square(8, 3, 1))
        .unwrap()
        .total_parameters();
    assert!(text.contains(&format!("parameters: {expected}")), "{text:?}");
}

#[test]
fn exit_codes_distinguish_usage_data_and_io_failures() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixture(dir.path(), 4, 8, 5);
    let model = train_model(dir.path(), &manifest);

    // Usage error: unknown flag (clap's conventional exit code 2).
    let usage = lrf(&["train", "--bogus"]);
    assert_eq!(usage.status.code(), Some(2));

    // Data error: invalid hyperparameter reaches solver validation.
    let data = lrf(&[
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--lambda=-1",
        "--out",
        dir.path().join("m.lrm").to_str().unwrap(),
    ]);
    assert_eq!(data.status.code(), Some(3), "{}", stderr(&data));
    assert!(stderr(&data).starts_with("error (data):"), "{}", stderr(&data));

    // Data error: empty manifest.
    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "").unwrap();
    let no_rows = lrf(&[
        "train",
        "--manifest",
        empty.to_str().unwrap(),
        "--lambda",
        "1",
        "--out",
        dir.path().join("m.lrm").to_str().unwrap(),
    ]);
    assert_eq!(no_rows.status.code(), Some(3), "{}", stderr(&no_rows));

    // I/O error: manifest file does not exist.
    let io = lrf(&[
        "train",
        "--manifest",
        dir.path().join("missing.csv").to_str().unwrap(),
        "--lambda",
        "1",
        "--out",
        dir.path().join("m.lrm").to_str().unwrap(),
    ]);
    assert_eq!(io.status.code(), Some(5), "{}", stderr(&io));
    assert!(stderr(&io).starts_with("error (io):"), "{}", stderr(&io));

    // I/O error: corrupted model file.
    let broken = dir.path().join("broken.lrm");
    let mut bytes = std::fs::read(&model).unwrap();
    bytes[0] = b'X';
    std::fs::write(&broken, bytes).unwrap();
    let corrupt = lrf(&[
        "synth",
        "--model",
        broken.to_str().unwrap(),
        "--in",
        dir.path().join("x0.png").to_str().unwrap(),
        "--out",
        dir.path().join("s.png").to_str().unwrap(),
    ]);
    assert_eq!(corrupt.status.code(), Some(5), "{}", stderr(&corrupt));

    // Data error: image geometry does not match the trained model.
    let wrong = tempfile::tempdir().unwrap();
    let wide_manifest = fixture(wrong.path(), 3, 12, 6);
    let mismatch = lrf(&[
        "eval",
        "--model",
        model.to_str().unwrap(),
        "--manifest",
        wide_manifest.to_str().unwrap(),
    ]);
    assert_eq!(mismatch.status.code(), Some(3), "{}", stderr(&mismatch));
}

#[test]
fn jobs_env_variable_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixture(dir.path(), 6, 8, 7);
    let model = dir.path().join("model.lrm");
    let out = Command::new(env!("CARGO_BIN_EXE_lrf"))
        .env("LRF_JOBS", "2")
        .args([
            "train",
            "--manifest",
            manifest.to_str().unwrap(),
            "--lambda",
            "0.5",
            "--out",
            model.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(model.exists());
}
