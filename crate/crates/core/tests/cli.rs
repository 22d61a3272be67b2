use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dvan_core::canvas::CanvasPlan;
use dvan_core::pnm;
use dvan_core::Tensor;

const TINY: &str = "
data.image_size = 24
data.classes = 2
data.glyph_size = 3
data.clutter = 0.2
data.decoys = 1
data.body_decoys = 1
data.jitter = 1
data.train_per_class = 6
data.test_per_class = 4
canvas.short_edge = 24
canvas.windows = 21,16,10
canvas.strides = 3,4,5
canvas.output_size = 8
canvas.scales = 2
backbone.channels = 3
hidden = 4
sgd.epochs = 1,1,1
sgd.batch_size = 4
sgd.learning_rate = 0.01
ablate.lambdas = 0,1
ablate.scales = 1,2
ablate.seeds = 0
";

fn dvan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dvan")).args(args).output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.cfg");
    fs::write(&path, TINY).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// `(name, content hash)` of every file except the resolved config, which names its own directory.
fn listing(dir: &Path) -> Vec<(String, u64)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file() && !p.ends_with("config.txt"))
        .map(|p| {
            let mut h = DefaultHasher::new();
            fs::read(&p).unwrap().hash(&mut h);
            (p.file_name().unwrap().to_string_lossy().into_owned(), h.finish())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn gen_data_counts_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&dvan(&["gen-data", "-c", s(&cfg), "--out", s(&a)]));
    ok(&dvan(&["gen-data", "-c", s(&cfg), "--out", s(&b)]));
    let train = fs::read_to_string(a.join("train/train.csv")).unwrap();
    let test = fs::read_to_string(a.join("test/test.csv")).unwrap();
    assert_eq!(train.lines().count(), 12);
    assert_eq!(test.lines().count(), 8);
    for split in ["train", "test"] {
        assert_eq!(listing(&a.join(split)), listing(&b.join(split)));
    }
    assert!(a.join("config.txt").exists());
}

#[test]
fn invalid_config_exits_one_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("never");
    for set in ["data.classes=0", "no.such.key=1", "sgd.momentum=2"] {
        let r = dvan(&["gen-data", "--set", set, "--out", s(&out)]);
        assert_eq!(r.status.code(), Some(1), "{set}");
    }
    assert_eq!(dvan(&["frobnicate"]).status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn standard_plan_canvases() {
    let tmp = tempfile::tempdir().unwrap();
    let image = tmp.path().join("img.ppm");
    let data: Vec<f64> = (0..3 * 256 * 256).map(|i| ((i * 37) % 256) as f64 / 255.0).collect();
    pnm::save_image(&image, &Tensor::new(&[3, 256, 256], data).unwrap()).unwrap();
    let standard = CanvasPlan::standard();
    let cfg = tmp.path().join("standard.cfg");
    fs::write(
        &cfg,
        format!(
            "canvas.short_edge = 256\ncanvas.windows = 224,168,112\ncanvas.strides = 32,44,48\n\
             canvas.output_size = {}\ncanvas.scales = 3\n",
            standard.output_size
        ),
    )
    .unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&dvan(&["canvases", "--image", s(&image), "-c", s(&cfg), "--set", "canvas.output_size=16", "--out", s(&a)]));
    ok(&dvan(&["canvases", "--image", s(&image), "-c", s(&cfg), "--set", "canvas.output_size=16", "--out", s(&b)]));
    let ppms = listing(&a).into_iter().filter(|(n, _)| n.ends_with(".ppm")).count();
    assert_eq!(ppms, 32);
    let manifest = fs::read_to_string(a.join("canvases.csv")).unwrap();
    let mut per_scale = [0; 3];
    for line in manifest.lines().skip(1) {
        let f: Vec<f64> = line.split(',').take(6).map(|v| v.parse().unwrap()).collect();
        per_scale[f[1] as usize] += 1;
        assert!(f[2] >= 0.0 && f[3] >= 0.0 && f[4] <= 256.0 && f[5] <= 256.0, "{line}");
    }
    assert_eq!(per_scale, [5, 10, 17]);
    assert_eq!(listing(&a), listing(&b));
}

#[test]
fn train_resume_eval_attmaps() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let full = tmp.path().join("full");
    let text = ok(&dvan(&["train", "-c", s(&cfg), "--out", s(&full)]));
    assert!(text.contains("checkpoint"));
    let log = fs::read_to_string(full.join("train_log.csv")).unwrap();
    let rows: Vec<&str> = log.lines().skip(1).collect();
    assert_eq!(rows.iter().map(|r| &r[..3]).collect::<Vec<_>>(), ["1,1", "2,1", "3,1"]);

    // Same seed, single thread: identical checkpoint bytes.
    let again = tmp.path().join("again");
    ok(&dvan(&["train", "-c", s(&cfg), "--out", s(&again)]));
    assert_eq!(fs::read(full.join("checkpoint.bin")).unwrap(), fs::read(again.join("checkpoint.bin")).unwrap());

    // Stop after stage 2, then resume with the full schedule.
    let part = tmp.path().join("part");
    ok(&dvan(&["train", "-c", s(&cfg), "--set", "sgd.epochs=1,1,0", "--out", s(&part)]));
    let ckpt = part.join("checkpoint.bin");
    let text = ok(&dvan(&["train", "-c", s(&cfg), "--resume", s(&ckpt), "--out", s(&part)]));
    assert!(text.contains("resuming after stage 2 epoch 1"));
    let resumed = fs::read_to_string(part.join("train_log.csv")).unwrap();
    let stages: Vec<&str> = resumed.lines().skip(1).map(|r| &r[..3]).collect();
    assert_eq!(stages, ["1,1", "2,1", "3,1"]);
    let a = listing(&full).into_iter().find(|(n, _)| n == "checkpoint.bin").unwrap();
    let b = listing(&part).into_iter().find(|(n, _)| n == "checkpoint.bin").unwrap();
    assert_eq!(a, b, "resumed training matches the uninterrupted run");

    let report = ok(&dvan(&["eval", "--checkpoint", s(&full.join("checkpoint.bin")), "-c", s(&cfg), "--split", "train", "--out", s(&full)]));
    let field = |name: &str| -> f64 {
        report
            .lines()
            .find_map(|l| l.strip_prefix(&format!("{name} = ")))
            .unwrap_or_else(|| panic!("{name} missing from\n{report}"))
            .parse()
            .unwrap()
    };
    let logged: f64 = rows.last().unwrap().split(',').nth(3).unwrap().parse().unwrap();
    assert!((field("accuracy") - logged).abs() < 1e-6);
    assert!(field("mean_Ldiv").is_finite());
    assert!(field("overlap_violation_rate") >= 0.0);

    let maps = tmp.path().join("maps");
    ok(&dvan(&["attmaps", "--checkpoint", s(&full.join("checkpoint.bin")), "-c", s(&cfg), "--out", s(&maps)]));
    let pgms: Vec<_> = listing(&maps).into_iter().filter(|(n, _)| n.ends_with(".pgm")).collect();
    let steps = fs::read_to_string(maps.join("attmaps.csv")).unwrap().lines().count() - 1;
    assert_eq!(pgms.len(), steps);
    assert_eq!(steps, 15);
    for (name, _) in pgms {
        let t = pnm::load_image(&maps.join(&name)).unwrap();
        let total: f64 = t.data().iter().sum();
        assert!(total > 0.0, "{name}");
        let normalized: f64 = t.data().iter().map(|v| v / total).sum();
        assert!((normalized - 1.0).abs() < 1e-9);
    }
}

#[test]
fn untrained_model_is_at_chance() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let sets = ["data.classes=4", "data.train_per_class=1", "data.test_per_class=250", "sgd.epochs=0,0,0"];
    let with = |head: &[&str]| -> Vec<String> {
        let mut v: Vec<String> = head.iter().map(|a| a.to_string()).collect();
        for set in sets {
            v.push("--set".into());
            v.push(set.into());
        }
        v
    };
    let dir = tmp.path().join("run");
    let args = with(&["train", "-c", s(&cfg), "--out", s(&dir)]);
    ok(&dvan(&args.iter().map(String::as_str).collect::<Vec<_>>()));
    let ckpt = dir.join("checkpoint.bin");
    let args = with(&["eval", "--checkpoint", s(&ckpt), "-c", s(&cfg), "--out", s(&dir)]);
    let report = ok(&dvan(&args.iter().map(String::as_str).collect::<Vec<_>>()));
    let acc: f64 = report.lines().find_map(|l| l.strip_prefix("accuracy = ")).unwrap().parse().unwrap();
    assert!((acc - 0.25).abs() <= 0.05, "{acc}");
    assert!(report.lines().any(|l| l.starts_with("images = 1000")));
}

#[test]
fn ablate_runs_every_row() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let dir = tmp.path().join("ablate");
    ok(&dvan(&["ablate", "-c", s(&cfg), "--set", "sgd.epochs=1,1,0", "--out", s(&dir)]));
    let summary = fs::read_to_string(dir.join("summary.csv")).unwrap();
    let names: Vec<&str> = summary.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(
        names,
        [
            "single-image",
            "multi-canvas",
            "dvan-avg",
            "dvan-max",
            "dvan",
            "dvan-lambda-0",
            "dvan-lambda-1",
            "dvan-scales-1",
            "dvan-scales-2"
        ]
    );
    let rows = fs::read_to_string(dir.join("ablation.csv")).unwrap();
    let acc = |name: &str| rows.lines().find(|l| l.starts_with(&format!("{name},"))).unwrap().split(',').nth(2).unwrap().to_string();
    assert_eq!(acc("dvan"), acc("dvan-lambda-1"));
    assert_eq!(acc("dvan"), acc("dvan-scales-2"));
}

#[test]
fn gradcheck_and_negative_control() {
    let good = dvan(&["gradcheck"]);
    let text = ok(&good);
    assert!(text.contains("max relative error"));
    let bad = dvan(&["gradcheck", "--fault", "softmax"]);
    assert_eq!(bad.status.code(), Some(3));
    assert_eq!(dvan(&["gradcheck", "--fault", "nope"]).status.code(), Some(1));
}
