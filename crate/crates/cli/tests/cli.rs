use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ppanns_core::dataset::SyntheticConfig;
use ppanns_core::eval::{ground_truth, mean_recall};
use ppanns_core::search::read_response;

fn ppanns(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ppanns"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("PPANN_THREADS")
        .output()
        .expect("spawn ppanns")
}

fn ok(args: &[&str]) -> String {
    let out = ppanns(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn owner_user_server_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("db");
    let data = [
        "--n",
        "1500",
        "--dim",
        "32",
        "--num-queries",
        "20",
        "--k",
        "10",
        "--seed",
        "4",
    ];
    let with = |cmd: &str, extra: &[&str]| {
        let mut args = vec![cmd, "--dir", p(&dir)];
        args.extend_from_slice(&data);
        args.extend_from_slice(extra);
        args.iter().map(|s| s.to_string()).collect::<Vec<_>>()
    };
    let run = |args: Vec<String>| ok(&args.iter().map(String::as_str).collect::<Vec<_>>());

    assert!(run(with("keygen", &["--beta", "0.3"])).contains("beta=0.3"));
    run(with("encrypt-db", &[]));
    ok(&[
        "build-index",
        "--dir",
        p(&dir),
        "--m",
        "8",
        "--ef-construction",
        "64",
        "--seed",
        "4",
    ]);
    let requests = tmp.path().join("requests");
    run(with(
        "trapgen",
        &["--out", p(&requests), "--k-prime", "80", "--ef-search", "128"],
    ));
    assert_eq!(fs::read_dir(&requests).unwrap().count(), 20);

    // The server host holds no key material.
    fs::remove_file(dir.join("dce.key")).unwrap();
    fs::remove_file(dir.join("sap.key")).unwrap();
    let responses = tmp.path().join("responses");
    let summary = ok(&[
        "search",
        "--dir",
        p(&dir),
        "--requests",
        p(&requests),
        "--out",
        p(&responses),
    ]);
    assert!(summary.contains("answered 20 requests"), "{summary}");

    let ds = SyntheticConfig {
        n: 1500,
        queries: 20,
        d: 32,
        ..Default::default()
    }
    .generate(4)
    .unwrap();
    let truth = ground_truth(&ds.base, &ds.queries, 10).unwrap();
    let results: Vec<Vec<u32>> = (0..20)
        .map(|i| read_response(&fs::read(responses.join(format!("query-{i:06}.ppr"))).unwrap()[..]).unwrap())
        .collect();
    assert!(results.iter().all(|r| r.len() == 10));
    let recall = mean_recall(&results, &truth, 10).unwrap();
    assert!(recall > 0.9, "recall {recall}");
}

#[test]
fn corrupted_artifact_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("db");
    let data = [
        "--dir",
        p(&dir),
        "--n",
        "300",
        "--dim",
        "8",
        "--num-queries",
        "4",
        "--beta",
        "0.5",
    ];
    ok(&[&["keygen"][..], &data].concat());
    ok(&[&["encrypt-db"][..], &data[..8]].concat());
    let store = dir.join("sap.store");
    let mut bytes = fs::read(&store).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&store, bytes).unwrap();
    let out = ppanns(&["build-index", "--dir", p(&dir)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("integrity"));
}

#[test]
fn bench_reads_config_and_writes_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("run.toml");
    fs::write(
        &config,
        "k = 5\nef_grid = [8, 32]\nratio_grid = [1, 4]\nbeta = 0.4\nreps = 1\nm = 8\nef_construction = 48\n\n\
         [synthetic]\nn = 800\nqueries = 10\nd = 16\n",
    )
    .unwrap();
    let csv = tmp.path().join("report.csv");
    let stdout = ok(&["--config", p(&config), "--threads", "1", "bench", "--csv", p(&csv)]);
    assert!(stdout.contains("mode") && stdout.contains("filter"), "{stdout}");
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert!(lines
        .next()
        .unwrap()
        .starts_with("schema_version,mode,ef_search,k_prime,ratio,beta,recall_at_k,qps"));
    // Two filter rows, then two per ratio; at ratio 4 ef 8 is raised to k' = 20.
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 6, "{text}");
    assert!(rows[4].starts_with("1,full,20,20,4,"), "{text}");
    assert!(rows.iter().all(|r| r.starts_with("1,")));
}

#[test]
fn unknown_config_key_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("bad.toml");
    fs::write(&config, "kk = 3\n").unwrap();
    let out = ppanns(&["--config", p(&config), "attack-demo"]);
    assert!(!out.status.success());
}

#[test]
fn attack_demo_prints_table_and_csv() {
    let stdout = ok(&["attack-demo", "--variant", "square", "--dim", "8", "--seed", "3"]);
    assert!(stdout.contains("max query rel. error"));
    let row = stdout.lines().last().unwrap();
    assert!(row.starts_with("square,8,3,"), "{row}");
    let query_error: f64 = row.split(',').nth(4).unwrap().parse().unwrap();
    assert!(query_error < 1e-6);
    assert!(!ppanns(&["attack-demo", "--variant", "cubic"]).status.success());
}

#[test]
fn tune_beta_reports_choice() {
    let stdout = ok(&[
        "tune-beta",
        "--n",
        "1000",
        "--dim",
        "16",
        "--num-queries",
        "20",
        "--seed",
        "2",
    ]);
    let last = stdout.lines().last().unwrap();
    assert!(last.starts_with("beta = "), "{stdout}");
}

#[test]
fn threads_env_must_be_numeric() {
    let out = Command::new(env!("CARGO_BIN_EXE_ppanns"))
        .args(["attack-demo", "--dim", "4"])
        .env("PPANN_THREADS", "many")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("PPANN_THREADS"));
}
