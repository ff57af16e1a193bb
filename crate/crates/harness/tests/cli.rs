use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

const TINY: &str = include_str!("fixtures/tiny.toml");

fn lfmcw(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lfmcw"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn write_config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, format!("{TINY}\n{extra}")).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_config_is_a_usage_error() {
    let o = lfmcw(&["search", "--config", "/definitely/not/here.toml"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("here.toml"));
    assert_eq!(code(&lfmcw(&["search"])), 2);
    assert_eq!(code(&lfmcw(&["frobnicate"])), 2);
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("typo.toml");
    std::fs::write(&cfg, "[weighting]\nlamda = 1.0\n").unwrap();
    let o = lfmcw(&["search", "--config", s(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("lamda"));
}

#[test]
fn tiny_search_writes_artifacts_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let start = Instant::now();
    let o = lfmcw(&["search", "--config", s(&cfg), "--out", s(&a)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(start.elapsed().as_secs() < 60);
    assert_eq!(
        code(&lfmcw(&["search", "--config", s(&cfg), "--out", s(&b)])),
        0
    );

    for f in ["genotype.txt", "metrics.csv", "checkpoint.json"] {
        let first = std::fs::read(a.join(f)).unwrap();
        assert!(!first.is_empty(), "{f}");
        if f != "checkpoint.json" {
            assert_eq!(
                first,
                std::fs::read(b.join(f)).unwrap(),
                "{f} differs between reruns"
            );
        }
    }
    let genotype = std::fs::read_to_string(a.join("genotype.txt")).unwrap();
    let metrics = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    let checkpoint = std::fs::read_to_string(a.join("checkpoint.json")).unwrap();
    let hash = genotype
        .lines()
        .next()
        .unwrap()
        .strip_prefix("# config_hash ")
        .unwrap()
        .to_string();
    assert_eq!(
        metrics.lines().next().unwrap(),
        format!("# config_hash {hash}")
    );
    assert!(checkpoint.contains(&hash));
    assert_eq!(metrics.lines().count(), 2 + 3);
}

#[test]
fn overrides_change_the_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", "");
    let out = dir.path().join("o");
    let run = |extra: &[&str]| {
        let mut args = vec!["search", "--config", s(&cfg), "--out", s(&out)];
        args.extend_from_slice(extra);
        assert_eq!(code(&lfmcw(&args)), 0);
        std::fs::read_to_string(out.join("genotype.txt"))
            .unwrap()
            .lines()
            .next()
            .unwrap()
            .to_string()
    };
    let base = run(&[]);
    assert_ne!(base, run(&["--lambda", "0.5"]));
    assert_ne!(base, run(&["--mode", "first"]));
    assert_ne!(base, run(&["--seed", "9"]));
    assert_eq!(
        code(&lfmcw(&["search", "--config", s(&cfg), "--lambda", "-1"])),
        2
    );
    assert_eq!(
        code(&lfmcw(&["search", "--config", s(&cfg), "--mode", "third"])),
        2
    );
}

#[test]
fn evaluate_checks_the_op_set() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", "");
    let out = dir.path().join("run");
    assert_eq!(
        code(&lfmcw(&["search", "--config", s(&cfg), "--out", s(&out)])),
        0
    );
    let geno = out.join("genotype.txt");
    let o = lfmcw(&[
        "evaluate",
        "--config",
        s(&cfg),
        "--genotype",
        s(&geno),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("parameters"));
    assert!(out.join("evaluation.json").exists());

    // Same op set, different hash: refused unless forced.
    let text = std::fs::read_to_string(&geno).unwrap();
    let tampered = dir.path().join("tampered.txt");
    let body: Vec<&str> = text
        .lines()
        .filter(|l| !l.starts_with("# op_set_hash"))
        .collect();
    std::fs::write(
        &tampered,
        format!("# op_set_hash 0000000000000000\n{}\n", body.join("\n")),
    )
    .unwrap();
    let o = lfmcw(&[
        "evaluate",
        "--config",
        s(&cfg),
        "--genotype",
        s(&tampered),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 2);
    let o = lfmcw(&[
        "evaluate",
        "--config",
        s(&cfg),
        "--genotype",
        s(&tampered),
        "--out",
        s(&out),
        "--force",
    ]);
    assert_eq!(code(&o), 0);

    // An op outside the configured set is always rejected, by name.
    let foreign = dir.path().join("foreign.txt");
    std::fs::write(
        &foreign,
        "normal 0 0 dil_conv_5x5\nnormal 0 1 identity\nnormal 1 0 identity\nnormal 1 2 identity\n",
    )
    .unwrap();
    let o = lfmcw(&[
        "evaluate",
        "--config",
        s(&cfg),
        "--genotype",
        s(&foreign),
        "--force",
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("dil_conv_5x5"));

    let o = lfmcw(&[
        "evaluate",
        "--config",
        s(&cfg),
        "--genotype",
        "/no/such/genotype.txt",
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn divergent_search_aborts_with_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "boom.toml", "[rates]\nw1 = 1e300\nw2 = 1e300\n");
    let out = dir.path().join("boom");
    let o = lfmcw(&["search", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("non-finite"));
    let ck = lfm_harness::artifacts::Checkpoint::load(&out.join("checkpoint.json")).unwrap();
    assert!(ck.state.is_finite());
    assert!(!out.join("genotype.txt").exists());
}

#[test]
fn verify_passes_and_catches_an_injected_fault() {
    let o = lfmcw(&["verify"]);
    let table = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{table}");
    assert!(!table.contains("FAIL"));

    let o = lfmcw(&["verify", "--inject-fault", "synthetic_mixed"]);
    assert_eq!(code(&o), 1);
    let table = String::from_utf8_lossy(&o.stdout);
    let failing: Vec<&str> = table.lines().filter(|l| l.contains("FAIL")).collect();
    assert!(
        failing.iter().any(|l| l.contains("synthetic_mixed")),
        "{table}"
    );
    assert!(
        table
            .lines()
            .filter(|l| l.starts_with("lambda0/"))
            .all(|l| l.contains("PASS")),
        "{table}"
    );
    assert!(!String::from_utf8_lossy(&lfmcw(&["verify", "--help"]).stdout).contains("inject"));
}

#[test]
fn convert_packs_class_directories() {
    let dir = tempfile::tempdir().unwrap();
    for (class, value) in [("cat", 0u8), ("dog", 255u8)] {
        let d = dir.path().join("raw").join(class);
        std::fs::create_dir_all(&d).unwrap();
        for i in 0..3u8 {
            let img = image::GrayImage::from_fn(4, 2, |x, _| {
                image::Luma([value.saturating_sub(i * (x as u8))])
            });
            let ext = if i % 2 == 0 { "png" } else { "pgm" };
            img.save(d.join(format!("{i}.{ext}"))).unwrap();
        }
        std::fs::write(d.join("notes.txt"), "ignored").unwrap();
    }
    let out = dir.path().join("set.lfmc");
    let o = lfmcw(&[
        "convert",
        "--input",
        s(&dir.path().join("raw")),
        "--output",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let set = lfm_core::data::load_binary(&out).unwrap();
    assert_eq!(set.len(), 6);
    assert_eq!(set.num_classes(), 2);
    assert_eq!(set.image_shape(), (2, 4, 1));
    assert_eq!(set.class_counts(), vec![3, 3]);
    assert_eq!(set.image(0)[0], -1.0);
    assert_eq!(set.image(3)[0], 1.0);

    let o = lfmcw(&["convert", "--input", "/no/such/dir", "--output", s(&out)]);
    assert_eq!(code(&o), 2);
}
