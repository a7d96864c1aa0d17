use std::path::Path;
use std::process::{Command, Output};

fn fair(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fair"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const MINIMAL: &str = r#"{
  "dataset": {
    "synth": {"num_users": 12, "num_items": 40, "latent_dim": 4, "density": 0.3, "seed": 1, "kind": "implicit"}
  },
  "model": {"dim": 4, "learning_rate": 0.05},
  "federation": {"mode": "FAIR-HET", "rounds": 10, "devices_per_round": 4, "scheme": "1x-4x", "eval_every": 5},
  "output": {"metrics": "out/metrics.csv"}
}"#;

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    std::fs::write(dir.join(name), body).unwrap();
    name.to_string()
}

#[test]
fn run_writes_metrics_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", MINIMAL);
    let out = fair(&["run", "--config", &cfg], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));

    let csv = std::fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("round,mode,scheme,seed,metric,value"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let loss = rows.iter().filter(|r| r[4] == "loss").count();
    let ndcg = rows.iter().filter(|r| r[4] == "ndcg@20").count();
    assert_eq!(loss, 10, "{csv}");
    assert!(ndcg >= 1, "{csv}");
    assert!(rows
        .iter()
        .all(|r| r[1] == "FAIR-HET" && r[2] == "1x-4x" && r[3] == "0"));
    assert!(!csv.contains('\r'));

    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("out/metrics.manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(manifest["resolved"]["rounds"], 10);
    assert_eq!(manifest["spec"]["dataset"]["synth"]["num_items"], 40);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", MINIMAL);
    let path = dir.path().join("out/metrics.csv");
    assert!(fair(&["run", "--config", &cfg], dir.path())
        .status
        .success());
    let first = std::fs::read(&path).unwrap();
    assert!(fair(&["run", "--config", &cfg], dir.path())
        .status
        .success());
    assert_eq!(first, std::fs::read(&path).unwrap());
}

#[test]
fn unknown_key_is_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let body = MINIMAL.replace(r#""rounds": 10,"#, r#""rounds": 10, "foo": 1,"#);
    let cfg = write_config(dir.path(), "bad.json", &body);
    let out = fair(&["run", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("foo"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(!dir.path().join("out").exists());
}

#[test]
fn invalid_values_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let body = MINIMAL.replace(r#""devices_per_round": 4"#, r#""devices_per_round": 40"#);
    let cfg = write_config(dir.path(), "bad.json", &body);
    let out = fair(&["run", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr(&out).contains("devices_per_round"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn divergence_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let body = MINIMAL.replace(r#""learning_rate": 0.05"#, r#""learning_rate": 1e8"#);
    let cfg = write_config(dir.path(), "wild.json", &body);
    let out = fair(&["run", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn csv_datasets_get_id_maps() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = String::from("user_id,item_id,rating\n");
    for u in 0..6 {
        for i in 0..8 {
            if (u + i) % 2 == 0 {
                data.push_str(&format!("{},{},1\n", 100 + u, 7 * i));
            }
        }
    }
    std::fs::write(dir.path().join("ratings.csv"), data).unwrap();
    let body = r#"{
      "dataset": {"csv": {"path": "ratings.csv", "kind": "implicit"}},
      "federation": {"mode": "FEDAVG", "rounds": 3, "devices_per_round": 2, "eval_every": 3},
      "output": {"metrics": "m.csv"}
    }"#;
    let cfg = write_config(dir.path(), "csv.json", body);
    let out = fair(&["run", "--config", &cfg], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let users = std::fs::read_to_string(dir.path().join("m.users.csv")).unwrap();
    assert!(users.contains("105"), "{users}");
    assert!(dir.path().join("m.items.csv").exists());
}

#[test]
fn verify_passes_and_lists() {
    let dir = tempfile::tempdir().unwrap();
    let out = fair(&["verify"], dir.path());
    assert!(out.status.success(), "{}{}", stdout(&out), stderr(&out));
    let text = stdout(&out);
    assert_eq!(
        text.lines().filter(|l| l.starts_with("PASS")).count(),
        7,
        "{text}"
    );

    let list = fair(&["verify", "--list"], dir.path());
    assert!(list.status.success());
    let names = stdout(&list);
    assert!(names.lines().any(|l| l == "collapsibility"));
    assert!(!names.contains("PASS"));
}

#[test]
fn corrupted_bucket_map_fails_collapsibility() {
    let dir = tempfile::tempdir().unwrap();
    let out = fair(&["verify", "--corrupt-bucket-map"], dir.path());
    assert_ne!(out.status.code(), Some(0));
    assert!(
        stdout(&out)
            .lines()
            .any(|l| l.starts_with("FAIL collapsibility")),
        "{}",
        stdout(&out)
    );
    assert!(stderr(&out).contains("collapsibility"));
}

fn gaps(csv: &str) -> Vec<f64> {
    csv.lines()
        .filter_map(|l| l.strip_prefix("gap,"))
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn quadratic_gap_decreases_and_eigen_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = fair(
        &[
            "quadratic",
            "--n",
            "64",
            "--m",
            "16",
            "--rounds",
            "400",
            "--out",
            "q.csv",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("PASS"));
    let csv = std::fs::read_to_string(dir.path().join("q.csv")).unwrap();
    let g = gaps(&csv);
    assert_eq!(g.len(), 3, "{csv}");
    assert!(g.windows(2).all(|w| w[1] < w[0]), "{g:?}");
    assert!(csv.contains("eigen_check,,1"));
}

#[test]
fn quadratic_full_dimension_reaches_the_optimum() {
    let dir = tempfile::tempdir().unwrap();
    let out = fair(
        &[
            "quadratic",
            "--n",
            "32",
            "--m",
            "32",
            "--rounds",
            "400",
            "--out",
            "q.csv",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let g = gaps(&std::fs::read_to_string(dir.path().join("q.csv")).unwrap());
    assert!(*g.last().unwrap() < 1e-8, "{g:?}");
}

#[test]
fn quadratic_single_round_has_one_gap_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = fair(
        &[
            "quadratic",
            "--n",
            "16",
            "--m",
            "4",
            "--rounds",
            "1",
            "--out",
            "q.csv",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(
        gaps(&std::fs::read_to_string(dir.path().join("q.csv")).unwrap()).len(),
        1
    );
}

#[test]
fn quadratic_rejects_oversized_problems() {
    let dir = tempfile::tempdir().unwrap();
    let out = fair(
        &["quadratic", "--n", "300", "--m", "4", "--rounds", "10"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("quadratic.csv").exists());
}
