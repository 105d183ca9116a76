use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use concl::checkpoint::Checkpoint;
use concl::commands::{compute_mask, label_gray, MasksArgs};
use concl::io::read_pgm_labels;

fn concl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_concl"))
        .args(args)
        .env_remove("CONCL_SEED")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = "\
epochs = 3
warmup_epochs = 1
batch_size = 4
generator = \"grid\"
grid_s = 2
k = 4
queue_capacity = 16
widths = [4, 8, 8, 16, 16]
groups = 4
hidden = 16
dim = 8
image_size = 32
synth_images = 8
";

#[test]
fn bad_config_key_exits_1_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "epochs = 2\nlamdba = 0.5\n").unwrap();
    let out = concl(&["pretrain", "--config", p(&cfg), "--data", "synth", "--out", p(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lamdba"));
}

#[test]
fn unknown_flag_exits_1() {
    let out = concl(&["synth", "--nope"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = concl(&["synth", "--seed", "7", "--n", "4", "--size", "32", "--out", p(d)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.iter().any(|n| n == "img_0003.ppm"));
    assert!(names.iter().any(|n| n == "lbl_0003.pgm"));
    assert!(names.iter().any(|n| n == "regions.csv"));
    for n in names {
        if n == "manifest.json" {
            continue;
        }
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
    let read = concl::io::read_image(&a.join("img_0000.ppm")).unwrap();
    assert_eq!((read.height(), read.width()), (32, 32));
}

#[test]
fn pretrain_writes_run_files_and_resume_continues() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let full = dir.path().join("full");
    let out = concl(&["pretrain", "--config", p(&cfg), "--data", "synth", "--out", p(&full)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["ckpt.bin", "metrics.csv", "manifest.json"] {
        assert!(full.join(f).exists(), "{f}");
    }
    let part = dir.path().join("part");
    let out = concl(&["pretrain", "--config", p(&cfg), "--data", "synth", "--out", p(&part), "--stop-after", "1"]);
    assert!(out.status.success());
    let ck = part.join("ckpt.bin");
    assert_eq!(Checkpoint::load(&ck).unwrap().state.epoch, 1);
    let out = concl(&["pretrain", "--resume", p(&ck), "--data", "synth", "--out", p(&part)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(full.join("ckpt.bin")).unwrap(), fs::read(part.join("ckpt.bin")).unwrap());
    assert_eq!(fs::read(full.join("metrics.csv")).unwrap(), fs::read(part.join("metrics.csv")).unwrap());

    // resuming under a different configuration is refused
    let other = dir.path().join("other.toml");
    fs::write(&other, TINY.replace("epochs = 3", "epochs = 4")).unwrap();
    let out = concl(&["pretrain", "--config", p(&other), "--resume", p(&ck), "--out", p(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn pretrain_is_deterministic_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY.replace("\"grid\"", "\"bootstrap\"")).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(concl(&["pretrain", "--config", p(&cfg), "--out", p(&a)]).status.success());
    assert!(concl(&["--workers", "3", "pretrain", "--config", p(&cfg), "--out", p(&b)]).status.success());
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(a.join("ckpt.bin")).unwrap(), fs::read(b.join("ckpt.bin")).unwrap());
}

#[test]
fn masks_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let run = dir.path().join("run");
    assert!(concl(&["pretrain", "--config", p(&cfg), "--out", p(&run), "--stop-after", "1"]).status.success());
    let data = dir.path().join("data");
    assert!(concl(&["synth", "--seed", "3", "--n", "1", "--size", "32", "--out", p(&data)]).status.success());
    let img = data.join("img_0000.ppm");
    let ck = run.join("ckpt.bin");

    let pgm = dir.path().join("m").join("boot.pgm");
    let out = concl(&["masks", "--gen", "bootstrap", "--k", "4", "--in", p(&img), "--ckpt", p(&ck), "--size", "32", "--out", p(&pgm)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let k: usize = stdout.trim().strip_prefix("K_effective ").unwrap().parse().unwrap();
    assert!((1..=4).contains(&k));
    let args = MasksArgs {
        gen: "bootstrap".into(),
        s: 3,
        scale: concl::config::DEFAULT_FH_SCALE,
        min_size: None,
        sigma: 0.8,
        k: 4,
        stage: 4,
        iters: 10,
        input: img.clone(),
        ckpt: Some(ck.clone()),
        out: pgm.clone(),
        size: 32,
        seed: 0,
    };
    let key = Checkpoint::load(&ck).unwrap().state.pair.key;
    let lib = compute_mask(&args, Some(&key)).unwrap();
    assert_eq!(lib.n_concepts, k);
    let written = read_pgm_labels(&pgm).unwrap();
    let gray: Vec<u32> = label_gray(&lib).into_iter().map(u32::from).collect();
    assert_eq!(written.labels, gray);
    assert!(dir.path().join("m").join("manifest.json").exists());

    let grid = dir.path().join("grid.pgm");
    let out = concl(&["masks", "--gen", "grid", "--s", "3", "--in", p(&img), "--size", "32", "--out", p(&grid)]);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "K_effective 9");

    let flat = dir.path().join("flat.ppm");
    concl::io::write_ppm(&flat, &concl_core::image::ImagePatch::filled(32, 32, [0.3, 0.6, 0.2])).unwrap();
    let out = concl(&["masks", "--gen", "fh", "--in", p(&flat), "--size", "32", "--out", p(&dir.path().join("fh.pgm"))]);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "K_effective 1");

    let out = concl(&["masks", "--gen", "bootstrap", "--in", p(&img), "--out", p(&dir.path().join("x.pgm"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_suite_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    let out = concl(&["gradcheck", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("gradcheck.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")), "{csv}");
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn probe_on_random_init_lies_in_null_ranges() {
    let dir = tempfile::tempdir().unwrap();
    let out = concl(&["probe", "--out", p(dir.path()), "--n-train", "64", "--n-eval", "32", "--epochs", "100"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let line = String::from_utf8_lossy(&out.stdout).to_string();
    let vals: Vec<f64> = line.split_whitespace().skip(1).step_by(2).map(|v| v.parse().unwrap()).collect();
    let (miou, knn, purity) = (vals[0], vals[1], vals[2]);
    assert!((0.0..=1.0).contains(&miou) && (0.0..=1.0).contains(&knn));
    // purity can never fall below the share of the largest class
    assert!(purity >= 1.0 / 6.0 && purity <= 1.0, "{purity}");
    assert!(dir.path().join("probe.csv").exists() && dir.path().join("probe.json").exists());
}
