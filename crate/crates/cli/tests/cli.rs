use std::fmt::Write as _;
use std::path::Path;
use std::process::{Command, Output};

fn fmpre(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fmpre")).args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Deterministic pseudo-uniforms so the fixtures need no RNG crate.
struct Lcg(u64);

impl Lcg {
    fn next(&mut self) -> f64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }

    fn poisson(&mut self, mu: f64) -> u64 {
        let limit = (-mu).exp();
        let (mut k, mut p) = (0, 1.0);
        loop {
            p *= self.next();
            if p <= limit {
                return k;
            }
            k += 1;
        }
    }
}

fn poisson_csv(path: &Path, n: usize, beta: [f64; 2]) {
    let mut rng = Lcg(7);
    let mut text = String::from("count,z,w\n");
    for _ in 0..n {
        let z = 2.0 * rng.next() - 1.0;
        let w = rng.next();
        let y = rng.poisson((beta[0] + beta[1] * z).exp());
        writeln!(text, "{y},{z},{w}").unwrap();
    }
    std::fs::write(path, text).unwrap();
}

#[test]
fn single_component_fit_recovers_coefficients() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    let beta = [0.5, 0.8];
    poisson_csv(&data, 400, beta);
    let out = dir.path().join("out");
    let run = fmpre(&[
        "fit", "--data", data.to_str().unwrap(), "--response", "count", "--x", "z", "--omega", "w",
        "--method", "ml", "--components", "1", "--out", out.to_str().unwrap(),
    ]);
    assert!(run.status.success(), "{}", stderr(&run));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("fit.json")).unwrap()).unwrap();
    let est: Vec<f64> = report["coefficients"]["beta"][0]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    // Standard errors from the Fisher information at the estimate.
    let text = std::fs::read_to_string(&data).unwrap();
    let mut info = [[0.0; 2]; 2];
    for line in text.lines().skip(1) {
        let z: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        let mu = (est[0] + est[1] * z).exp();
        let x = [1.0, z];
        for a in 0..2 {
            for b in 0..2 {
                info[a][b] += mu * x[a] * x[b];
            }
        }
    }
    let det = info[0][0] * info[1][1] - info[0][1] * info[1][0];
    let se = [(info[1][1] / det).sqrt(), (info[0][0] / det).sqrt()];
    for k in 0..2 {
        assert!((est[k] - beta[k]).abs() < 3.0 * se[k], "coefficient {k}: {} vs {}", est[k], beta[k]);
    }
    assert!(report["bic"].as_f64().unwrap().is_finite());
}

#[test]
fn bic_scan_writes_one_entry_per_component_count() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    poisson_csv(&data, 200, [1.0, 0.5]);
    let out = dir.path().join("out");
    let run = fmpre(&[
        "fit", "--data", data.to_str().unwrap(), "--response", "count", "--x", "z", "--omega", "w",
        "--method", "ml", "--bic-scan", "2", "--out", out.to_str().unwrap(),
    ]);
    assert!(run.status.success(), "{}", stderr(&run));
    let entries: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("bic.json")).unwrap()).unwrap();
    assert_eq!(entries.as_array().unwrap().len(), 2);
    assert!(stdout(&run).contains("BIC selects J="));
}

#[test]
fn malformed_csv_fails_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bad.csv");
    std::fs::write(&data, "count,z,w\n1,0.5,0.1\n2,oops,0.3\n").unwrap();
    let run = fmpre(&[
        "fit", "--data", data.to_str().unwrap(), "--response", "count", "--x", "z", "--omega", "w",
        "--out", dir.path().join("out").to_str().unwrap(),
    ]);
    assert!(!run.status.success());
    assert!(stderr(&run).contains("line 3"), "{}", stderr(&run));
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let res = fmpre(&["simulate", "--replicates", "2", "--seed", "5", "--no-plots", "--out", out.to_str().unwrap()]);
        assert!(res.status.success(), "{}", stderr(&res));
        std::fs::read_to_string(out.join("summary.csv")).unwrap()
    };
    let a = run("a");
    assert_eq!(a, run("b"));
    assert!(a.starts_with("method,parameter_block,M,L,U,n_replicates,n_failed\n"));
    assert_eq!(a.lines().count(), 10);
}

#[test]
fn replicate_reads_a_toml_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("study.toml");
    std::fs::write(
        &config,
        r#"
[design]
n = 150
rho = 0.9
beta_true = [[1.0, 0.5, -0.5], [-1.0, 1.0, 1.0]]
alpha_true = [[0.3, 1.0, -1.0], [0.0, 0.0, 0.0]]
reference_class = 1
layout = "shared_rho"

[study]
replicates = 2
master_seed = 9
"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let run = fmpre(&["replicate", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(run.status.success(), "{}", stderr(&run));
    for file in ["summary.csv", "replicates.csv", "beta.svg", "alpha.svg", "accuracy.svg"] {
        assert!(out.join(file).exists(), "{file} missing");
    }
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("study.toml");
    std::fs::write(&config, "[design]\nn = 10\nrho = 0.5\nbeta = []\n").unwrap();
    let run = fmpre(&["replicate", "--config", config.to_str().unwrap()]);
    assert!(!run.status.success());
}

#[test]
fn majority_failure_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    // Four observations cannot support two five-coefficient experts.
    let run = fmpre(&[
        "simulate", "--n", "4", "--replicates", "2", "--no-plots", "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(run.status.code(), Some(2), "{}", stderr(&run));
    assert!(stderr(&run).contains("failed"));
}

fn heart_fixture(path: &Path) {
    let mut rng = Lcg(11);
    let mut text = String::new();
    for i in 0..240 {
        let slope = 1 + (rng.next() * 3.0) as u32 % 3;
        let oldpeak = ((slope as f64 - 1.0) * 0.8 + 1.5 * rng.next()).max(0.0);
        let high = rng.next() < 0.3 + 0.2 * (slope as f64 - 1.0);
        let mu = if high { (0.8 + 0.3 * oldpeak).exp() } else { 0.6 };
        let stage = rng.poisson(mu).min(4);
        let ca = if i == 7 { "?".to_string() } else { "0.0".to_string() };
        writeln!(
            text,
            "55.0,1.0,3.0,130.0,240.0,0.0,0.0,150.0,0.0,{oldpeak:.1},{slope}.0,{ca},3.0,{stage}"
        )
        .unwrap();
    }
    std::fs::write(path, text).unwrap();
}

#[test]
fn heart_command_runs_on_uci_layout() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("processed.cleveland.data");
    heart_fixture(&data);
    let out = dir.path().join("out");
    let run = fmpre(&[
        "heart", "--data", data.to_str().unwrap(), "--train-n", "60", "--replicates", "2", "--bic-max", "2",
        "--restarts", "2", "--no-plots", "--out", out.to_str().unwrap(),
    ]);
    let text = stdout(&run);
    assert!(text.contains("239 of 240 rows kept"), "{text}\n{}", stderr(&run));
    assert!(out.join("bic.json").exists());
    assert!(out.join("truth.json").exists(), "{}", stderr(&run));
}

#[test]
fn heart_command_rejects_wrong_column_count() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bad.data");
    std::fs::write(&data, "1,2,3\n").unwrap();
    let run = fmpre(&["heart", "--data", data.to_str().unwrap()]);
    assert!(!run.status.success());
    assert!(stderr(&run).contains("line 1"), "{}", stderr(&run));
}
