use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gazesteer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gazesteer"))
        .args(args)
        .env_remove("GAZESTEER_CONFIG")
        .output()
        .expect("spawn gazesteer")
}

fn ok(args: &[&str]) -> String {
    let out = gazesteer(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn gen(dir: &Path, seed: &str, videos: &str) {
    ok(&[
        "gen-data",
        "--seed",
        seed,
        "--videos",
        videos,
        "--items-per-video",
        "8",
        "--out",
        dir.to_str().unwrap(),
    ]);
}

#[test]
fn gen_data_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen(&a, "7", "20");
    gen(&b, "7", "20");
    for name in ["items.jsonl", "scenes.jsonl", "scanpaths.tsv", "manifest.json"] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
    let c = tmp.path().join("c");
    gen(&c, "8", "20");
    assert_ne!(
        fs::read(a.join("items.jsonl")).unwrap(),
        fs::read(c.join("items.jsonl")).unwrap()
    );
}

#[test]
fn stage_two_needs_a_checkpoint_or_from_scratch() {
    let out = gazesteer(&["train", "--stage", "2", "--data", "d", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--from-scratch"));
}

#[test]
fn usage_errors() {
    assert_eq!(gazesteer(&["train", "--stage", "3"]).status.code(), Some(2));
    assert_eq!(gazesteer(&["gen-data", "--bogus"]).status.code(), Some(2));
    assert_eq!(gazesteer(&["frobnicate"]).status.code(), Some(2));
    let out = gazesteer(&["eval", "--ckpt", "/nonexistent/x.ckpt", "--data", "/nonexistent"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.conf");
    let data = tmp.path().join("data");
    fs::write(
        &cfg,
        format!(
            "# shared settings\nseed = 3\nvideos = 9\nitems-per-video = 4\nout = {}\n",
            data.display()
        ),
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_gazesteer"))
        .args(["gen-data", "--videos", "10"])
        .env("GAZESTEER_CONFIG", &cfg)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("40 items from 10 videos"), "{stdout}");
    let manifest = fs::read_to_string(data.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 3"));

    fs::write(&cfg, "colour = blue\n").unwrap();
    let out = gazesteer(&["--config", cfg.to_str().unwrap(), "gen-data", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
}

#[test]
fn grad_check_passes_on_tiny_config() {
    let stdout = ok(&["grad-check", "--scheme", "heatmap_tau"]);
    assert!(stdout.contains("all tensors below 1e-4"), "{stdout}");
}

#[test]
fn train_eval_attach_demo_round() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let (d, r) = (data.to_str().unwrap(), run.to_str().unwrap());
    gen(&data, "2", "7");
    ok(&[
        "train", "--stage", "1", "--data", d, "--out", r, "--epochs", "1", "--seed", "4",
    ]);
    let ck1 = run.join("stage1.ckpt");
    let log = fs::read_to_string(run.join("metrics_stage1.jsonl")).unwrap();
    assert!(log.lines().count() >= 3);
    assert!(log.lines().all(|l| l.starts_with('{')));

    let eval = ok(&["eval", "--ckpt", ck1.to_str().unwrap(), "--data", d, "--split", "val"]);
    assert!(eval.contains("mean"), "{eval}");
    let demo = ok(&["attach-demo", "--ckpt", ck1.to_str().unwrap(), "--data", d]);
    assert!(demo.contains("bit-identical"), "{demo}");

    ok(&[
        "train",
        "--stage",
        "2",
        "--from-ckpt",
        ck1.to_str().unwrap(),
        "--data",
        d,
        "--out",
        r,
        "--epochs",
        "1",
    ]);
    assert!(run.join("stage2.ckpt").exists());
    let out = gazesteer(&[
        "train",
        "--stage",
        "2",
        "--from-ckpt",
        run.join("stage2.ckpt").to_str().unwrap(),
        "--data",
        d,
        "--out",
        r,
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn ablate_single_cell_reports_na_spreads() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("abl");
    gen(&data, "5", "7");
    let table = ok(&[
        "ablate",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--schemes",
        "coord_pe",
        "--backbones",
        "static",
        "--sharings",
        "shared",
        "--adaptations",
        "none",
        "--epochs",
        "1",
    ]);
    assert!(table.contains("coord_pe/static/shared/none"), "{table}");
    assert!(table.contains("n/a"));
    let jsonl = fs::read_to_string(out.join("ablation.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 1 + 4);
}
