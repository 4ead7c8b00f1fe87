use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use capst::checkpoint;
use capst::eval::EvalReport;

fn capst(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capst"))
        .args(args)
        .env("CAPST_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Checkpoints hold the run's output directory in their config snapshot, so
/// runs in different directories are compared on state only.
fn same_state(a: &Path, b: &Path) {
    let (x, y) = (checkpoint::load(a).unwrap(), checkpoint::load(b).unwrap());
    assert_eq!(x.tensors, y.tensors);
    assert_eq!(x.momentum, y.momentum);
    assert_eq!((x.epoch, x.seed, x.dtype), (y.epoch, y.seed, y.dtype));
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    out.sort();
    out
}

/// Small corpus matching the tiny preset's geometry.
fn synth(dir: &Path, classes: usize, videos: usize, frames: usize) {
    let o = capst(&[
        "synth",
        "--classes",
        &classes.to_string(),
        "--videos-per-class",
        &videos.to_string(),
        "--frames",
        &frames.to_string(),
        "--size",
        "16",
        "--seed",
        "3",
        "--amplitude",
        "0.3",
        "--out-dir",
        p(dir),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn synth_writes_every_frame_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, 3, 2, 4);
    synth(&b, 3, 2, 4);
    let fa = files_under(&a);
    let frames = fa.iter().filter(|f| f.extension().is_some_and(|e| e == "ppm")).count();
    assert_eq!(frames, 3 * 2 * 4);
    let fb = files_under(&b);
    assert_eq!(fa.len(), fb.len());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.strip_prefix(&a).unwrap(), y.strip_prefix(&b).unwrap());
        if x.file_name().unwrap() == "manifest.csv" {
            // Frame paths inside the manifest are relative to it.
            assert_eq!(fs::read_to_string(x).unwrap(), fs::read_to_string(y).unwrap());
        } else {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{}", x.display());
        }
    }
}

#[test]
fn synth_rejects_size_not_divisible_by_eight() {
    let tmp = tempfile::tempdir().unwrap();
    let o = capst(&["synth", "--size", "100", "--out-dir", p(tmp.path())]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

fn tiny_train(data: &Path, out: &Path, epochs: usize, extra: &[&str]) -> Output {
    let mut args = vec![
        "train".to_string(),
        "--config".into(),
        "tiny".into(),
        "--manifest".into(),
        p(&data.join("manifest.csv")).into(),
        "--epochs".into(),
        epochs.to_string(),
        "--out-dir".into(),
        p(out).into(),
        "--set".into(),
        "train.batch_size=4".into(),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    capst(&refs)
}

#[test]
fn zero_epochs_writes_only_the_initial_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 3, 4, 2);
    let out = tmp.path().join("run");
    let o = tiny_train(&data, &out, 0, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpts: Vec<_> = files_under(&out)
        .into_iter()
        .filter(|f| f.extension().is_some_and(|e| e == "ckpt"))
        .collect();
    assert_eq!(ckpts, vec![out.join("epoch_0000.ckpt")]);
    let cfg = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(cfg.contains("train.epochs = 0"));
    assert!(cfg.contains("train.batch_size = 4"));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "# comment\ntrain.lr = 0.01\ncapsule.wobble = 3\n").unwrap();
    let o = capst(&["train", "--config", p(&cfg), "--epochs", "0"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("capsule.wobble"), "{err}");
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn missing_manifest_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let o = capst(&[
        "train",
        "--config",
        "tiny",
        "--manifest",
        p(&tmp.path().join("nope.csv")),
        "--out-dir",
        p(&tmp.path().join("run")),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn overfit_train_eval_attribute_gradcam() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 3, 4, 2);
    let out = tmp.path().join("run");
    // Full-batch steps with the small preset's learning rate and routing
    // settings.
    let o = tiny_train(
        &data,
        &out,
        300,
        &[
            "--set",
            "data.train_fraction=0.75",
            "--set",
            "train.checkpoint_every=150",
            "--set",
            "train.batch_size=9",
            "--set",
            "train.lr=0.02",
            "--set",
            "capsule.squash_predictions=false",
            "--set",
            "capsule.routing_init_scale=14",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));

    let log = fs::read_to_string(out.join("log.csv")).unwrap();
    let rows: Vec<&str> = log.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "epoch,loss,acc,seconds");
    assert_eq!(rows.len(), 301);
    let last: Vec<&str> = rows[300].split(',').collect();
    let acc: f64 = last[2].parse().unwrap();
    assert!(acc >= 95.0, "final train accuracy {acc}\n{log}");
    for name in ["epoch_0000.ckpt", "epoch_0150.ckpt", "epoch_0300.ckpt", "final.ckpt", "config.txt"] {
        assert!(out.join(name).exists(), "{name}");
    }

    // Evaluation on the training split is near diagonal.
    let ckpt = out.join("final.ckpt");
    let report_path = tmp.path().join("report.txt");
    let o = capst(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--manifest",
        p(&out.join("train.csv")),
        "--out",
        p(&report_path),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&report_path).unwrap();
    let report = EvalReport::parse_kv(&text).unwrap();
    assert_eq!(report.to_kv(), text);
    let diag: u64 = (0..3).map(|i| report.confusion[i][i]).sum();
    assert!(diag as f64 >= 0.95 * report.total() as f64, "{:?}", report.confusion);

    // Class-count mismatch.
    let other = tmp.path().join("other");
    synth(&other, 4, 2, 2);
    let o = capst(&["eval", "--checkpoint", p(&ckpt), "--manifest", p(&other.join("manifest.csv"))]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    // Attribution of one training video of the second class.
    let train_list = fs::read_to_string(out.join("train.csv")).unwrap();
    let frame = train_list
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(',').collect::<Vec<_>>())
        .find(|f| f[1] == "1")
        .map(|f| PathBuf::from(f[2]))
        .unwrap();
    let video = frame.parent().unwrap().to_path_buf();
    let o = capst(&["attribute", "--checkpoint", p(&ckpt), "--frames", p(&video), "--classes", "a,b,c"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines: Vec<(String, f64)> = stdout(&o)
        .lines()
        .map(|l| {
            let (n, v) = l.split_once('\t').unwrap();
            (n.to_string(), v.parse().unwrap())
        })
        .collect();
    assert_eq!(lines.len(), 3);
    assert!((lines.iter().map(|(_, v)| v).sum::<f64>() - 1.0).abs() < 1e-4);
    assert!(lines.windows(2).all(|w| w[0].1 >= w[1].1));
    assert_eq!(lines[0].0, "b");

    // Fewer frames than the model expects: cyclic sampling with a warning.
    let short = tmp.path().join("short");
    fs::create_dir_all(&short).unwrap();
    fs::copy(video.join("000.ppm"), short.join("000.ppm")).unwrap();
    let o = capst(&["attribute", "--checkpoint", p(&ckpt), "--frames", p(&short)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("warning"));

    let empty = tmp.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let o = capst(&["attribute", "--checkpoint", p(&ckpt), "--frames", p(&empty)]);
    assert_eq!(o.status.code(), Some(3));

    // Grad-CAM for a named layer and for the combined view.
    for layer in ["backbone.stage3.conv1", "combined"] {
        let pgm = tmp.path().join(format!("{layer}.pgm"));
        let o = capst(&[
            "gradcam",
            "--checkpoint",
            p(&ckpt),
            "--frames",
            p(&video),
            "--layer",
            layer,
            "--out",
            p(&pgm),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let bytes = fs::read(&pgm).unwrap();
        assert!(bytes.starts_with(b"P5\n16 16\n255\n"));
        assert_eq!(bytes.len(), b"P5\n16 16\n255\n".len() + 256);
    }
    // Without --layer the map comes from the last backbone conv.
    let pgm = tmp.path().join("default.pgm");
    let o = capst(&["gradcam", "--checkpoint", p(&ckpt), "--frames", p(&video), "--out", p(&pgm)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(&pgm).unwrap(), fs::read(tmp.path().join("backbone.stage3.conv1.pgm")).unwrap());
    let o = capst(&[
        "gradcam",
        "--checkpoint",
        p(&ckpt),
        "--frames",
        p(&video),
        "--layer",
        "backbone.nope",
        "--out",
        p(&tmp.path().join("x.pgm")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn training_is_reproducible_apart_from_timings() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 3, 3, 2);
    let strip = |dir: &Path| -> Vec<String> {
        fs::read_to_string(dir.join("log.csv"))
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with('#'))
            .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string())
            .collect()
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(tiny_train(&data, &a, 3, &[]).status.success());
    assert!(tiny_train(&data, &b, 3, &[]).status.success());
    assert_eq!(strip(&a), strip(&b));
    same_state(&a.join("final.ckpt"), &b.join("final.ckpt"));
}

#[test]
fn resume_continues_where_the_checkpoint_left_off() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 3, 3, 2);
    let full = tmp.path().join("full");
    assert!(tiny_train(&data, &full, 4, &[]).status.success());
    let half = tmp.path().join("half");
    assert!(tiny_train(&data, &half, 2, &[]).status.success());
    let o = tiny_train(&data, &half, 4, &["--resume", p(&half.join("final.ckpt"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    same_state(&full.join("final.ckpt"), &half.join("final.ckpt"));
}

#[test]
fn gradcheck_tiny_passes() {
    let o = capst(&["gradcheck", "--config", "tiny"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let out = stdout(&o);
    assert!(out.starts_with("PASS max_relative_error="), "{out}");
}

#[test]
fn profile_reports_backbone_parameters() {
    let o = capst(&["profile", "--config", "default", "--kv"]);
    assert!(o.status.success());
    assert!(stdout(&o).lines().any(|l| l == "backbone.params=2325568"), "{}", stdout(&o));
    let o = capst(&["profile", "--config", "default", "--set", "backbone.depth=34"]);
    assert!(o.status.success());
    let o = capst(&["profile", "--config", "default", "--set", "backbone.depth=19"]);
    assert_eq!(o.status.code(), Some(2));
}
