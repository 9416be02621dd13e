use std::path::Path;
use std::process::{Command, Output};

use mtla_core::{load, Variant};

fn mtla(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtla"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn verify_passes_and_prints_every_property() {
    let o = mtla(&["verify", "--trials", "4"]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 6);
    assert!(lines
        .iter()
        .all(|l| l.starts_with("PASS ") && l.contains(" max_err=")));
}

#[test]
fn verify_outcome_ignores_seed() {
    for seed in ["1", "77"] {
        let o = mtla(&[
            "--seed",
            seed,
            "--precision",
            "single",
            "verify",
            "--trials",
            "3",
        ]);
        assert_eq!(o.status.code(), Some(0));
    }
}

#[test]
fn corrupted_mask_fails_with_exit_one() {
    let o = mtla(&["verify", "--trials", "3", "--corrupt-mask"]);
    assert_eq!(o.status.code(), Some(1));
    let text = stdout(&o);
    let fail = text
        .lines()
        .find(|l| l.starts_with("FAIL "))
        .expect("a failure line");
    assert!(fail.starts_with("FAIL train_infer_equivalence max_err="));
    let value: f64 = fail.rsplit('=').next().unwrap().parse().unwrap();
    assert!(value > 1e-3);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(mtla(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(mtla(&["bench", "--variant", "xqa"]).status.code(), Some(2));
    assert_eq!(mtla(&["verify", "--trials", "0"]).status.code(), Some(2));
    let o = mtla(&["bench", "--d", "30", "--heads", "4", "--out", "-"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unwritable_bench_output_exits_three() {
    let o = mtla(&[
        "bench",
        "--probe-lengths",
        "8",
        "--reps",
        "3",
        "--out",
        "/nonexistent-dir/out.csv",
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn bench_csv_counts_match_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bench.csv");
    let o = mtla(&[
        "bench",
        "--variant",
        "mha,mqa,gqa,mla,mtla",
        "--s",
        "2,3",
        "--d",
        "32",
        "--heads",
        "4",
        "--layers",
        "2",
        "--probe-lengths",
        "8,13",
        "--reps",
        "3",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let csv = std::fs::read_to_string(&path).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("variant,s,T,median_step_ns,cache_elems_measured,cache_elems_analytic,cache_bytes")
    );
    let rows: Vec<Vec<String>> = lines
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect();
    assert_eq!(rows.len(), 6 * 2);
    let mut mla = std::collections::HashMap::new();
    for r in &rows {
        assert_eq!(r[4], r[5], "{r:?}");
        let elems: u64 = r[4].parse().unwrap();
        assert_eq!(r[6].parse::<u64>().unwrap(), elems * 8);
        if r[0] == "mla" {
            mla.insert(r[2].clone(), elems);
        }
    }
    for r in rows.iter().filter(|r| r[0] == "mtla" && r[1] == "2") {
        let t: u64 = r[2].parse().unwrap();
        let per_token = mla[&r[2]] / t;
        assert_eq!(r[4].parse::<u64>().unwrap(), t.div_ceil(2) * per_token);
    }
    assert!(stdout(&o).contains("wrote "));
}

#[test]
fn bench_to_stdout() {
    let o = mtla(&[
        "--precision",
        "single",
        "bench",
        "--d",
        "16",
        "--heads",
        "2",
        "--layers",
        "1",
        "--probe-lengths",
        "4",
        "--reps",
        "3",
        "--out",
        "-",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let row = text.lines().nth(1).unwrap();
    let cols: Vec<&str> = row.split(',').collect();
    assert_eq!(cols[..3], ["mtla", "2", "4"]);
    assert_eq!(cols[4], cols[5]);
    let elems: u64 = cols[4].parse().unwrap();
    assert_eq!(cols[6].parse::<u64>().unwrap(), elems * 4);
}

fn train(dir: &Path, name: &str, extra: &[&str]) -> (Output, std::path::PathBuf) {
    let ckpt = dir.join(name);
    let mut args = vec!["train-toy", "--checkpoint", ckpt.to_str().unwrap()];
    args.extend_from_slice(extra);
    (mtla(&args), ckpt)
}

#[test]
fn zero_steps_saves_initial_model_at_chance() {
    let dir = tempfile::tempdir().unwrap();
    let (o, ckpt) = train(dir.path(), "init.ckpt", &["--steps", "0"]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let text = stdout(&o);
    let acc: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("accuracy="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(acc < 0.15, "{acc}");
    let model = load::<f64>(&ckpt).unwrap();
    assert_eq!(model.config.variant, Variant::Mtla);
    assert_eq!(model.config.attention.s, 2);
}

#[test]
fn identical_seeds_give_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let (o, _) = train(
            dir.path(),
            name,
            &["--seed", seed, "--steps", "100", "--variant", "gqa"],
        );
        assert_eq!(o.status.code(), Some(0));
        stdout(&o)
            .lines()
            .filter(|l| l.contains(','))
            .map(str::to_owned)
            .collect::<Vec<_>>()
    };
    let a = run("a.ckpt", "5");
    assert_eq!(a[0], "step,loss");
    assert_eq!(a.len(), 3);
    assert_eq!(a, run("b.ckpt", "5"));
    assert_ne!(a, run("c.ckpt", "6"));
}

#[test]
fn config_file_overrides_and_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.cfg");
    std::fs::write(&good, "n_layers = 1\nl = 1\nffn_dim = 32\n").unwrap();
    let (o, ckpt) = train(
        dir.path(),
        "m.ckpt",
        &["--steps", "0", "--config", good.to_str().unwrap()],
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let model = load::<f64>(&ckpt).unwrap();
    assert_eq!((model.config.n_layers, model.config.ffn_dim), (1, 32));

    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "wings = 2\n").unwrap();
    let (o, _) = train(
        dir.path(),
        "n.ckpt",
        &["--steps", "0", "--config", bad.to_str().unwrap()],
    );
    assert_eq!(o.status.code(), Some(2));
    let (o, _) = train(
        dir.path(),
        "o.ckpt",
        &["--steps", "0", "--config", "/nonexistent.cfg"],
    );
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn cache_report_defaults() {
    let o = mtla(&["cache-report"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "variant,params,elems_per_token,ratio_vs_mha");
    assert!(lines.contains(&"mha,-,9216,1.00"));
    assert!(lines.contains(&"mtla,s=2,1296,7.11"));
    let mla = lines.iter().find(|l| l.starts_with("mla,")).unwrap();
    let s1 = lines.iter().find(|l| l.starts_with("mtla,s=1,")).unwrap();
    assert_eq!(mla.split(',').nth(2), s1.split(',').nth(2));
}

#[test]
fn cache_report_flags() {
    let o = mtla(&[
        "cache-report",
        "--d_h",
        "32",
        "--n_h",
        "4",
        "--layers",
        "2",
        "--s-list",
        "4",
        "--g-list",
        "1,2",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("mha,-,512,1.00"));
    assert!(text.contains("gqa,g=1,128,4.00"));
    assert!(text.contains("gqa,g=2,256,2.00"));
    assert!(text.contains("mtla,s=4,72,7.11"));
}
