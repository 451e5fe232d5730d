use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stlattice::cli::RunReport;
use stlattice::eval::SweepAxes;
use stlattice::synth::preset;

fn stlattice(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stlattice"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn ok(args: &[&str]) -> Output {
    let o = stlattice(args);
    assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `dir` with its bytes, by relative path.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, body).unwrap();
    p
}

#[test]
fn gen_is_byte_identical_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["gen", "--preset", "fastsmall", "--seed", "7", "--out", s(&a)]);
    ok(&["gen", "--preset", "fastsmall", "--seed", "7", "--out", s(&b)]);
    let (sa, sb) = (snapshot(&a), snapshot(&b));
    assert_eq!(sa.len(), 193 + 2);
    assert!(sa == sb, "outputs differ");
    let c = dir.path().join("c");
    ok(&["gen", "--preset", "fastsmall", "--seed", "8", "--out", s(&c)]);
    assert!(snapshot(&c) != sa);
}

#[test]
fn gen_rejects_invalid_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let mut sc = preset("static", 0).unwrap();
    sc.height = 0;
    let path = dir.path().join("bad.toml");
    fs::write(&path, sc.to_toml().unwrap()).unwrap();
    let o = stlattice(&["gen", "--scenario", s(&path), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("zero dimensions"));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&stlattice(&["run", "--no-such-flag"])), 2);
    assert_eq!(code(&stlattice(&["run", "--config", s(&dir.path().join("missing.toml"))])), 2);
    let cfg = write_config(dir.path(), "intervall = 3\n");
    assert_eq!(code(&stlattice(&["run", "--config", s(&cfg)])), 2);
    let cfg = write_config(dir.path(), "[train.scenario]\npath = \"gone.toml\"\n");
    assert_eq!(code(&stlattice(&["train", "--config", s(&cfg)])), 2);
    let cfg = write_config(dir.path(), "[lattice]\ninterval = 0\n");
    assert_eq!(code(&stlattice(&["run", "--config", s(&cfg)])), 2);
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    // the output path is a file, so nothing can be written below it
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let o = stlattice(&["run", "--out", s(&blocker.join("sub"))]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_is_deterministic_and_logs_every_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[train]\nseeds = [100, 101]\nvariants = [\"a\", \"c\", \"d\"]\n[train.config]\nepochs = 25\n",
    );
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["train", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["train", "--config", s(&cfg), "--out", s(&b), "--jobs", "1"]);
    assert!(snapshot(&a) == snapshot(&b), "weights differ between runs");
    for (model, phases) in [("mhi-a", 1), ("mhi-c", 2), ("mhi-d", 1)] {
        let csv = fs::read_to_string(a.join("models").join(model).join("loss.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("phase,epoch,loss"));
        assert_eq!(lines.count(), 25 * phases, "{model}");
    }
    assert!(a.join("models/mhi-a/reg_s.json").is_file());
    assert!(!a.join("models/mhi-d/reg_s.json").exists());
}

#[test]
fn trained_models_drive_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[scenario]\npreset = \"fastsmall\"\n[models]\nkind = \"trained\"\nvariant = \"d\"\n\
         [train]\nseeds = [100]\nvariants = [\"d\"]\n[train.config]\nepochs = 10\n",
    );
    let out = dir.path().join("o");
    // no models yet
    assert_eq!(code(&stlattice(&["run", "--config", s(&cfg), "--out", s(&out)])), 2);
    ok(&["train", "--config", s(&cfg), "--out", s(&out)]);
    ok(&["run", "--config", s(&cfg), "--out", s(&out)]);
    assert!(out.join("run_0.json").is_file());
}

fn report(path: &Path) -> RunReport {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn oracle_run_is_perfect_and_cheaper_at_longer_intervals() {
    let dir = tempfile::tempdir().unwrap();
    let body = "[scenario]\npreset = \"slow\"\n[detector]\nkind = \"noiseless\"\n[models]\nkind = \"oracle\"\n";
    let cfg = write_config(dir.path(), body);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["run", "--config", s(&cfg), "--out", s(&a), "--seed", "2"]);
    let r24 = report(&a.join("run_2.json"));
    assert!((r24.eval.map - 1.0).abs() < 1e-6, "mAP {}", r24.eval.map);
    assert!(r24.per_node.is_none());
    let cfg = write_config(dir.path(), &format!("{body}[lattice]\ninterval = 12\n"));
    ok(&["run", "--config", s(&cfg), "--out", s(&b), "--seed", "2", "--per-node-eval"]);
    let r12 = report(&b.join("run_2.json"));
    assert!(r12.eval.total_cost_ms > r24.eval.total_cost_ms);
    let nodes = r12.per_node.expect("per-node table");
    assert!(!nodes.is_empty());
    assert!(nodes.iter().all(|n| n.map.map_or(true, |m| m > 0.99)));
    let lattice: serde_json::Value = serde_json::from_str(&fs::read_to_string(b.join("lattice_2.json")).unwrap()).unwrap();
    let total: f64 = lattice["edges"].as_array().unwrap().iter().map(|e| e["cost_ms"].as_f64().unwrap()).sum();
    assert_eq!(total, r12.eval.total_cost_ms);
}

#[test]
fn run_json_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[scenario]\npreset = \"noisy\"\n[models]\nkind = \"oracle\"\nsigma = 0.05\n[classifier]\nkind = \"oracle\"\naccuracy = 0.8\n\
         [lattice]\nstrategy = \"adaptive\"\n",
    );
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["run", "--config", s(&cfg), "--out", s(&a), "--seed", "4"]);
    ok(&["run", "--config", s(&cfg), "--out", s(&b), "--seed", "4", "--jobs", "1"]);
    assert!(snapshot(&a) == snapshot(&b));
    assert!(a.join("tubes_4.json").is_file());
    let r = report(&a.join("run_4.json"));
    assert!(r.eval_before_rescore.is_some());
    assert!(r.easiness_thresh.is_some());
    let c = dir.path().join("c");
    ok(&["run", "--config", s(&cfg), "--out", s(&c), "--seed", "4", "--easiness-thresh", "0.0"]);
    assert_eq!(report(&c.join("run_4.json")).easiness_thresh, Some(0.0));
}

#[test]
fn default_sweep_has_one_row_per_cell() {
    let axes = SweepAxes::default();
    assert_eq!(axes.intervals, vec![2, 4, 8, 12, 16, 24]);
    assert_eq!(axes.cells().len(), 6 * 2 * 3);
}

#[test]
fn sweep_writes_and_resumes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[scenario]\npreset = \"fastsmall\"\n[sweep]\nintervals = [12, 24]\nstrategies = [\"uniform\", \"adaptive\"]\n\
         propagators = [\"interp\", \"mhi\"]\nseeds = [0]\n",
    );
    let out = dir.path().join("o");
    ok(&["sweep", "--config", s(&cfg), "--out", s(&out)]);
    let first = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = first.lines().collect();
    assert_eq!(lines[0], stlattice::eval::SWEEP_HEADER);
    assert_eq!(lines.len(), 1 + 2 * 2 * 2);
    ok(&["sweep", "--config", s(&cfg), "--out", s(&out), "--resume"]);
    assert_eq!(fs::read_to_string(out.join("sweep.csv")).unwrap(), first);
    ok(&["sweep", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(fs::read_to_string(out.join("sweep.csv")).unwrap(), first);
}
