use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use advshield::cli::{cmd_grid, expand_grid, format_gradcheck, ROBUSTNESS_HEADER};
use advshield::gradcheck::check_against;
use advshield::image_io::{load_image, save_image};
use advshield::models::{init_models, ModelBundle};
use advshield::noise::{protect, AttackConfig, StepRecord};
use advshield::synth::synth_face;
use advshield::Tensor;

const SAMPLE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/assets/sample_face.png");
const SAMPLE_PPM: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/assets/sample_face.ppm");

fn advshield(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advshield"))
        .args(args)
        .env_remove("ADVSHIELD_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn weights(dir: &Path, seed: u64) -> PathBuf {
    let p = dir.join(format!("w{seed}.bin"));
    init_models(seed).save(&p).unwrap();
    p
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_weights_digest_is_stable_and_seed_dependent() {
    let dir = tempfile::tempdir().unwrap();
    let run = |seed: &str, name: &str| {
        let out = dir.path().join(name);
        let o = advshield(&["gen-weights", "--seed", seed, "--out", s(&out)]);
        assert_eq!(o.status.code(), Some(0));
        stdout(&o).trim().to_string()
    };
    let a = run("3", "a.bin");
    let b = run("3", "b.bin");
    let c = run("4", "c.bin");
    assert_eq!(a.len(), 64);
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(
        std::fs::read(dir.path().join("a.bin")).unwrap(),
        std::fs::read(dir.path().join("b.bin")).unwrap()
    );
}

#[test]
fn gen_weights_unwritable_path_exits_one() {
    let o = advshield(&[
        "gen-weights",
        "--seed",
        "1",
        "--out",
        "/nonexistent-dir/w.bin",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());
}

#[test]
fn usage_and_config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let w = weights(dir.path(), 1);
    assert_eq!(advshield(&[]).status.code(), Some(1));
    assert_eq!(advshield(&["protect", "--bogus"]).status.code(), Some(1));
    let unreadable = dir.path().join("missing.png");
    let o = advshield(&[
        "protect",
        "--in",
        s(&unreadable),
        "--weights",
        s(&w),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let garbage = dir.path().join("garbage.png");
    std::fs::write(&garbage, b"not an image").unwrap();
    let o = advshield(&[
        "protect",
        "--in",
        s(&garbage),
        "--weights",
        s(&w),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("garbage.png"));
    let cfg = write_config(
        dir.path(),
        "proj = false\nattn = false\nmtcnn = false\nid = false\n",
    );
    let o = advshield(&[
        "protect",
        "--config",
        s(&cfg),
        "--in",
        SAMPLE,
        "--weights",
        s(&w),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("disabled"));
}

#[test]
fn protect_zero_steps_reproduces_input() {
    let dir = tempfile::tempdir().unwrap();
    let w = weights(dir.path(), 2);
    let cfg = write_config(dir.path(), "steps = 0\n");
    let out = dir.path().join("out");
    for input in [SAMPLE, SAMPLE_PPM] {
        let o = advshield(&[
            "protect",
            "--config",
            s(&cfg),
            "--in",
            input,
            "--weights",
            s(&w),
            "--out",
            s(&out),
        ]);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
        let ext = Path::new(input).extension().unwrap().to_str().unwrap();
        let written = out.join(format!("sample_face_protected.{ext}"));
        assert_eq!(
            load_image(&written).unwrap().0,
            load_image(input).unwrap().0
        );
        let trace = std::fs::read_to_string(out.join("sample_face_trace.csv")).unwrap();
        assert_eq!(trace.lines().count(), 1);
    }
}

#[test]
fn protect_default_config_writes_thirty_steps_within_budget() {
    let dir = tempfile::tempdir().unwrap();
    let w = weights(dir.path(), 7);
    let out = dir.path().join("out");
    let o = advshield(&[
        "protect",
        "--in",
        SAMPLE,
        "--weights",
        s(&w),
        "--out",
        s(&out),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let text = stdout(&o);
    assert!(text.contains("steps = 30"), "effective config is echoed");
    assert!(text.contains("eta = 0.047058823529411764"));

    let mut reader = csv::Reader::from_path(out.join("sample_face_trace.csv")).unwrap();
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, StepRecord::CSV_HEADER);
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 30);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r[0].parse::<usize>().unwrap(), i + 1);
        assert!(r[8].parse::<f64>().unwrap() <= 12.0 / 255.0);
    }
    let clean = load_image(SAMPLE).unwrap().0;
    let protected = load_image(out.join("sample_face_protected.png")).unwrap().0;
    assert!(protected.sub(&clean).unwrap().max_abs() <= 12.0 / 255.0 + 1e-12);
}

#[test]
fn protect_directory_with_jobs_writes_per_image_files() {
    let dir = tempfile::tempdir().unwrap();
    let w = weights(dir.path(), 7);
    let input = dir.path().join("in");
    std::fs::create_dir(&input).unwrap();
    for seed in 0..3 {
        save_image(input.join(format!("face{seed}.ppm")), &synth_face(seed, 32)).unwrap();
    }
    std::fs::write(input.join("notes.txt"), "ignored").unwrap();
    let cfg = write_config(dir.path(), "steps = 3\n");
    let run = |out: &Path, jobs: &str| {
        let o = advshield(&[
            "--jobs",
            jobs,
            "protect",
            "--config",
            s(&cfg),
            "--in",
            s(&input),
            "--weights",
            s(&w),
            "--out",
            s(out),
        ]);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run(&a, "1");
    run(&b, "3");
    for seed in 0..3 {
        for name in [
            format!("face{seed}_protected.ppm"),
            format!("face{seed}_trace.csv"),
        ] {
            assert_eq!(
                std::fs::read(a.join(&name)).unwrap(),
                std::fs::read(b.join(&name)).unwrap(),
                "{name}"
            );
        }
    }
}

#[test]
fn seed_override_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let w = weights(dir.path(), 7);
    let cfg = write_config(dir.path(), "steps = 2\nseed = 1\n");
    let run = |seed: Option<&str>, out: &str| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_advshield"));
        cmd.args([
            "protect",
            "--config",
            s(&cfg),
            "--in",
            SAMPLE,
            "--weights",
            s(&w),
            "--out",
        ])
        .arg(dir.path().join(out));
        match seed {
            Some(v) => cmd.env("ADVSHIELD_SEED", v),
            None => cmd.env_remove("ADVSHIELD_SEED"),
        };
        let o = cmd.output().unwrap();
        assert_eq!(o.status.code(), Some(0));
        assert!(stdout(&o).contains(&format!("seed = {}", seed.unwrap_or("1"))));
        std::fs::read(dir.path().join(out).join("sample_face_trace.csv")).unwrap()
    };
    let base = run(None, "a");
    assert_eq!(run(Some("1"), "b"), base);
    assert_ne!(run(Some("2"), "c"), base);
}

#[test]
fn non_finite_loss_exits_two_and_keeps_trace() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = init_models(7).to_bytes();
    let n = bytes.len();
    // the identity head bias is the last tensor in the file
    bytes[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
    let w = dir.path().join("nan.bin");
    std::fs::write(&w, bytes).unwrap();
    assert!(ModelBundle::load(&w).is_ok());
    let out = dir.path().join("out");
    let o = advshield(&[
        "protect",
        "--in",
        SAMPLE,
        "--weights",
        s(&w),
        "--out",
        s(&out),
    ]);
    assert_eq!(
        o.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let trace = std::fs::read_to_string(out.join("sample_face_trace.csv")).unwrap();
    assert_eq!(
        trace.lines().next().unwrap(),
        StepRecord::CSV_HEADER.join(",")
    );
    assert!(!out.join("sample_face_protected.png").exists());
}

fn parse_evaluation(text: &str) -> (Vec<(String, f64)>, Vec<Vec<String>>) {
    let (metrics, records) = text.split_once("\n\n").expect("two blocks");
    let mut m = csv::Reader::from_reader(metrics.as_bytes());
    assert_eq!(m.headers().unwrap(), vec!["metric", "value"]);
    let metrics = m
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].to_string(), r[1].parse().unwrap())
        })
        .collect();
    let mut r = csv::Reader::from_reader(records.as_bytes());
    assert_eq!(r.headers().unwrap(), ROBUSTNESS_HEADER.to_vec());
    let rows = r
        .records()
        .map(|r| r.unwrap().iter().map(String::from).collect())
        .collect();
    (metrics, rows)
}

#[test]
fn evaluate_identical_images() {
    let dir = tempfile::tempdir().unwrap();
    let w = weights(dir.path(), 7);
    let o = advshield(&[
        "evaluate",
        "--clean",
        SAMPLE,
        "--protected",
        SAMPLE,
        "--weights",
        s(&w),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.starts_with("metric,value\nl2,0.000\npsnr,80.000\nssim,1.000000\n"));
    let (metrics, rows) = parse_evaluation(&text);
    let names: Vec<&str> = metrics.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["l2", "psnr", "ssim", "fr", "ism_toy"]);
    assert!((metrics[4].1 - 1.0).abs() <= 1e-6);
    assert_eq!(rows.len(), 9, "default list is the standard grid");
}

#[test]
fn evaluate_schema_for_seven_purifiers() {
    let dir = tempfile::tempdir().unwrap();
    let w = weights(dir.path(), 7);
    let protected = dir.path().join("p.png");
    let x = load_image(SAMPLE).unwrap().0;
    save_image(
        &protected,
        &protect(&x, &init_models(7), &AttackConfig::default())
            .unwrap()
            .image,
    )
    .unwrap();
    let list = "jpeg:90,jpeg:75,jpeg:50,bits:8,bits:3,resize:0.75:bilinear,resize:0.5:area";
    let o = advshield(&[
        "evaluate",
        "--clean",
        SAMPLE,
        "--protected",
        s(&protected),
        "--weights",
        s(&w),
        "--purifiers",
        list,
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let (metrics, rows) = parse_evaluation(&stdout(&o));
    assert!(metrics[0].1 > 0.0 && metrics[1].1 < 80.0);
    assert_eq!(rows.len(), 7);
    let expected = [
        ("jpeg", "90"),
        ("jpeg", "75"),
        ("jpeg", "50"),
        ("bits", "8"),
        ("bits", "3"),
        ("resize", "0.75:bilinear"),
        ("resize", "0.5:area"),
    ];
    for (row, (name, params)) in rows.iter().zip(expected) {
        assert_eq!(row.len(), ROBUSTNESS_HEADER.len());
        assert_eq!((row[0].as_str(), row[1].as_str()), (name, params));
        for v in &row[2..] {
            let v: f64 = v.parse().unwrap();
            assert!(v.is_finite(), "{row:?}");
        }
        let failure: f64 = row[4].parse().unwrap();
        assert!((0.0..=1.0).contains(&failure));
    }
}

#[test]
fn evaluate_rejects_shape_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let w = weights(dir.path(), 7);
    let small = dir.path().join("small.png");
    save_image(&small, &synth_face(0, 32)).unwrap();
    let o = advshield(&[
        "evaluate",
        "--clean",
        SAMPLE,
        "--protected",
        s(&small),
        "--weights",
        s(&w),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("[3, 32, 32]"));
}

#[test]
fn grid_of_one_equals_plain_protect() {
    let bundle = init_models(7);
    let x = synth_face(1, 32);
    let cfg = AttackConfig {
        steps: 4,
        ..AttackConfig::default()
    };
    let combos = expand_grid("", &cfg.loss.weights).unwrap();
    let rows = cmd_grid(&x, &bundle, &cfg, &combos).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(
        rows[0].last,
        protect(&x, &bundle, &cfg).unwrap().report.final_losses()
    );
}

#[test]
fn grid_ranking_is_a_stable_permutation() {
    let dir = tempfile::tempdir().unwrap();
    let w = weights(dir.path(), 7);
    let input = dir.path().join("face.png");
    save_image(&input, &synth_face(2, 32)).unwrap();
    let cfg = write_config(dir.path(), "steps = 3\n");
    let run = |jobs: &str| {
        let o = advshield(&[
            "--jobs",
            jobs,
            "grid",
            "--config",
            s(&cfg),
            "--in",
            s(&input),
            "--weights",
            s(&w),
            "--lambda-grid",
            "proj=-1,0;attn=0,1;id=-1,-0.5",
        ]);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
        stdout(&o)
    };
    let a = run("1");
    assert_eq!(a, run("2"));
    let table = &a[a.find("rank,combo").unwrap()..];
    let mut combos: Vec<usize> = csv::Reader::from_reader(table.as_bytes())
        .records()
        .map(|r| r.unwrap()[1].parse().unwrap())
        .collect();
    assert_eq!(combos.len(), 8);
    combos.sort();
    assert_eq!(combos, (0..8).collect::<Vec<_>>());
}

#[test]
fn grid_rejections() {
    let dir = tempfile::tempdir().unwrap();
    let w = weights(dir.path(), 7);
    let grid = |text: &str| {
        advshield(&[
            "grid",
            "--in",
            SAMPLE,
            "--weights",
            s(&w),
            "--lambda-grid",
            text,
        ])
    };
    let o = grid("proj=-1,-2,-3;attn=1,2,3;mtcnn=1,2,3;id=-1,-2,-3,-4");
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("limit is 81"));
    let o = grid("proj=0;attn=0;mtcnn=0;id=0");
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("rejected"));
}

#[test]
fn gradcheck_negative_control_names_the_item() {
    let x = Tensor::from_fn(&[6], |i| 0.2 + 0.1 * i as f64);
    let f = |t: &Tensor| Ok(t.data().iter().map(|v| v.sin()).sum::<f64>());
    let good: Vec<f64> = x.data().iter().map(|v| v.cos()).collect();
    let mut bad = good.clone();
    bad[3] *= 1.01;
    let items = vec![
        check_against("sin (exact)", &good, f, &x).unwrap(),
        check_against("sin (corrupted)", &bad, f, &x).unwrap(),
    ];
    assert!(items[0].passed());
    assert!(!items[1].passed());
    let table = format_gradcheck(&items);
    let failing: Vec<&str> = table.lines().filter(|l| l.ends_with("FAIL")).collect();
    assert_eq!(failing.len(), 1);
    assert!(failing[0].starts_with("sin (corrupted)"));
    assert!(table.contains("1 of 2 checks passed"));
}
