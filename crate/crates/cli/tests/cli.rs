use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pose_transfer::autograd::OpKind;
use pose_transfer::mesh::load_mesh;
use tempfile::TempDir;

fn posetx(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_posetx"))
        .current_dir(dir)
        .env_remove("MAPCON_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "stdout:\n{}\nstderr:\n{}", stdout(&o), stderr(&o));
    o
}

/// Relative path -> contents for every file below `root`.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Files added under `root` by `f` must all live under `allowed`.
fn writes_only_under(root: &Path, allowed: &str, f: impl FnOnce()) {
    let before = tree(root);
    f();
    for p in tree(root).keys() {
        if !before.contains_key(p) {
            assert!(p.starts_with(allowed), "{} written outside {allowed}", p.display());
        }
    }
}

fn manifest_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn gen_small(dir: &Path, out: &str) {
    ok(posetx(
        dir,
        &[
            "gen-data",
            "--n-ids",
            "4",
            "--n-poses",
            "4",
            "--seed",
            "3",
            "--out",
            out,
        ],
    ));
}

const TRAIN_FAST: &[&str] = &["--dims-scale", "8", "--sinkhorn-iters", "10", "--checkpoint-every", "1"];

fn train_small(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--manifest", "data/manifest.csv", "--out", out];
    if !extra.contains(&"--epochs") {
        args.extend(["--epochs", "2"]);
    }
    args.extend_from_slice(TRAIN_FAST);
    args.extend_from_slice(extra);
    posetx(dir, &args)
}

fn log_header(dir: &Path, out: &str) -> Vec<String> {
    fs::read_to_string(dir.join(out).join("train_log.csv"))
        .unwrap()
        .lines()
        .filter_map(|l| l.strip_prefix("# ").map(str::to_string))
        .collect()
}

fn log_rows(dir: &Path, out: &str) -> Vec<Vec<String>> {
    let text = fs::read_to_string(dir.join(out).join("train_log.csv")).unwrap();
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    assert_eq!(
        lines.next().unwrap(),
        "epoch,iter,mode,lr,l_rec,l_edge,l_mesh_cc,l_mesh_ss,l_point,total"
    );
    lines.map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn gen_data_counts_and_labels() {
    let t = TempDir::new().unwrap();
    let o = ok(posetx(
        t.path(),
        &[
            "gen-data",
            "--n-ids",
            "4",
            "--n-poses",
            "4",
            "--split",
            "1.0",
            "--out",
            "full",
        ],
    ));
    assert!(stdout(&o).contains("16 meshes"));
    let rows = manifest_rows(&t.path().join("full/manifest.csv"));
    assert_eq!(rows.len(), 16);
    assert!(rows.iter().all(|r| r[2] == "1"));
    for r in &rows {
        assert!(t.path().join("full").join(&r[3]).is_file());
    }

    ok(posetx(
        t.path(),
        &[
            "gen-data",
            "--n-ids",
            "4",
            "--n-poses",
            "4",
            "--split",
            "0.5",
            "--out",
            "half",
        ],
    ));
    let rows = manifest_rows(&t.path().join("half/manifest.csv"));
    assert_eq!(rows.iter().filter(|r| r[2] == "1").count(), 4);
}

#[test]
fn gen_data_is_deterministic() {
    let t = TempDir::new().unwrap();
    for out in ["a", "b"] {
        ok(posetx(
            t.path(),
            &["gen-data", "--seed", "11", "--noise", "0.001", "--out", out],
        ));
    }
    let (a, b) = (tree(&t.path().join("a")), tree(&t.path().join("b")));
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn invalid_flags_exit_2() {
    let t = TempDir::new().unwrap();
    for args in [
        &["gen-data", "--split", "1.5", "--out", "x"][..],
        &["gen-data", "--n-ids", "1", "--out", "x"],
        &["gen-data", "--n-ids", "four", "--out", "x"],
        &["gen-data", "--out", "x", "--bogus"],
        &["gradcheck", "--which", "nothing"],
        &["gradcheck", "--tol", "0"],
        &["gradcheck", "--corrupt", "no_such_item"],
        &["train", "--manifest", "m.csv", "--epochs", "0", "--out", "x"],
        &["train", "--manifest", "m.csv", "--mode", "sideways", "--out", "x"],
        &["train", "--manifest", "m.csv", "--dims-scale", "3", "--out", "x"],
        &["train", "--manifest", "m.csv", "--lambda-rec", "-1", "--out", "x"],
    ] {
        let o = posetx(t.path(), args);
        assert_eq!(code(&o), 2, "{args:?}: {}", stderr(&o));
    }
    assert!(!t.path().join("x").exists());
}

#[test]
fn config_file_errors_exit_2() {
    let t = TempDir::new().unwrap();
    fs::write(t.path().join("bad.cfg"), "lambda_rek=3\n").unwrap();
    let o = posetx(t.path(), &["--config", "bad.cfg", "gen-data", "--out", "x"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("lambda_rek"));
    fs::write(t.path().join("bad.cfg"), "n_ids=lots\n").unwrap();
    assert_eq!(
        code(&posetx(t.path(), &["--config", "bad.cfg", "gen-data", "--out", "x"])),
        2
    );
}

#[test]
fn io_failures_exit_1() {
    let t = TempDir::new().unwrap();
    fs::write(t.path().join("file"), "not a directory").unwrap();
    assert_eq!(code(&posetx(t.path(), &["gen-data", "--out", "file/sub"])), 1);
    let o = posetx(
        t.path(),
        &["train", "--manifest", "missing.csv", "--epochs", "1", "--out", "run"],
    );
    assert_eq!(code(&o), 1);
    assert!(!t.path().join("run").exists());
    fs::write(t.path().join("junk.mapc"), "JUNKJUNKJUNK").unwrap();
    let o = posetx(
        t.path(),
        &[
            "transfer",
            "--checkpoint",
            "junk.mapc",
            "--pose",
            "a.obj",
            "--identity",
            "b.obj",
            "--out",
            "o",
        ],
    );
    assert_eq!(code(&o), 1);
}

#[test]
fn train_smoke_run_and_outputs() {
    let t = TempDir::new().unwrap();
    gen_small(t.path(), "data");
    writes_only_under(t.path(), "run", || {
        ok(train_small(t.path(), "run", &[]));
    });
    let header = log_header(t.path(), "run");
    for want in [
        "lambda_rec=1000",
        "lambda_edge=0.5",
        "margin=1",
        "lr=0.0001",
        "mode=supervised",
    ] {
        assert!(header.iter().any(|h| h == want), "{want} missing from {header:?}");
    }
    let rows = log_rows(t.path(), "run");
    assert!(!rows.is_empty());
    for r in &rows {
        for v in &r[4..] {
            assert!(v.parse::<f64>().unwrap().is_finite(), "{r:?}");
        }
    }
    let mut files: Vec<_> = fs::read_dir(t.path().join("run"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert_eq!(files, ["epoch_0001.mapc", "final.mapc", "train_log.csv"]);
}

#[test]
fn baseline_loss_configuration_zeroes_contrastive_terms() {
    let t = TempDir::new().unwrap();
    gen_small(t.path(), "data");
    ok(train_small(
        t.path(),
        "run",
        &["--lambda-mesh-ss", "0", "--lambda-point", "0", "--epochs", "1"],
    ));
    let header = log_header(t.path(), "run");
    assert!(header.contains(&"lambda_mesh_ss=0".to_string()));
    assert!(header.contains(&"lambda_point=0".to_string()));
    for r in log_rows(t.path(), "run") {
        assert_eq!(r[7].parse::<f64>().unwrap(), 0.0);
        assert_eq!(r[8].parse::<f64>().unwrap(), 0.0);
        assert!(r[4].parse::<f64>().unwrap() > 0.0);
    }
}

#[test]
fn flags_override_config_file_which_overrides_defaults() {
    let t = TempDir::new().unwrap();
    gen_small(t.path(), "data");
    fs::write(
        t.path().join("run.cfg"),
        "# experiment\nepochs=1\nlambda_rec=10\nmargin = 2\n",
    )
    .unwrap();
    ok(posetx(
        t.path(),
        &[
            "--config",
            "run.cfg",
            "train",
            "--manifest",
            "data/manifest.csv",
            "--lambda-rec",
            "20",
            "--out",
            "run",
            "--dims-scale",
            "8",
            "--sinkhorn-iters",
            "10",
        ],
    ));
    let header = log_header(t.path(), "run");
    for want in ["epochs=1", "lambda_rec=20", "margin=2", "lambda_edge=0.5"] {
        assert!(header.iter().any(|h| h == want), "{want} missing from {header:?}");
    }
}

#[test]
fn divergence_exits_3_and_keeps_last_good_checkpoint() {
    let t = TempDir::new().unwrap();
    gen_small(t.path(), "data");
    let o = train_small(t.path(), "run", &["--lr", "1e30"]);
    assert_eq!(code(&o), 3, "stdout:\n{}\nstderr:\n{}", stdout(&o), stderr(&o));
    assert!(stderr(&o).contains("diverged"));
    let kept = t.path().join("run/last_good.mapc");
    assert!(kept.is_file());
    assert!(!t.path().join("run/final.mapc").exists());
    // the kept checkpoint is usable
    let id = t
        .path()
        .join("data/meshes")
        .read_dir()
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let id = id.to_str().unwrap();
    ok(posetx(
        t.path(),
        &[
            "transfer",
            "--checkpoint",
            "run/last_good.mapc",
            "--pose",
            id,
            "--identity",
            id,
            "--out",
            "tr",
        ],
    ));
}

#[test]
fn resume_continues_and_rejects_other_dims() {
    let t = TempDir::new().unwrap();
    gen_small(t.path(), "data");
    ok(train_small(t.path(), "full", &["--epochs", "2"]));
    ok(train_small(
        t.path(),
        "resumed",
        &["--epochs", "2", "--resume", "full/epoch_0001.mapc"],
    ));
    // epoch 1 replayed from the epoch-1 checkpoint gives the same parameters
    assert_eq!(
        fs::read(t.path().join("full/final.mapc")).unwrap(),
        fs::read(t.path().join("resumed/final.mapc")).unwrap()
    );
    let o = posetx(
        t.path(),
        &[
            "train",
            "--manifest",
            "data/manifest.csv",
            "--epochs",
            "2",
            "--dims-scale",
            "4",
            "--resume",
            "full/final.mapc",
            "--out",
            "bad",
        ],
    );
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

struct Trained {
    dir: TempDir,
    meshes: Vec<PathBuf>,
}

fn trained() -> Trained {
    let t = TempDir::new().unwrap();
    gen_small(t.path(), "data");
    ok(train_small(t.path(), "run", &["--epochs", "1"]));
    let mut meshes: Vec<_> = fs::read_dir(t.path().join("data/meshes"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    meshes.sort();
    Trained { dir: t, meshes }
}

#[test]
fn transfer_keeps_identity_topology() {
    let tr = trained();
    let dir = tr.dir.path();
    let (pose, identity) = (tr.meshes[0].to_str().unwrap(), tr.meshes[5].to_str().unwrap());
    writes_only_under(dir, "out", || {
        ok(posetx(
            dir,
            &[
                "transfer",
                "--checkpoint",
                "run/final.mapc",
                "--pose",
                pose,
                "--identity",
                identity,
                "--emit-warped",
                "--format",
                "ply",
                "--out",
                "out",
            ],
        ));
    });
    let id = load_mesh(identity).unwrap();
    let out = load_mesh(dir.join("out/transferred.ply")).unwrap();
    let warped = load_mesh(dir.join("out/warped.ply")).unwrap();
    assert_eq!(out.num_vertices(), id.num_vertices());
    assert_eq!(out.faces(), id.faces());
    assert_eq!(warped.faces(), id.faces());
    assert!(out.vertices().iter().flatten().all(|v| v.is_finite()));

    let o = posetx(
        dir,
        &[
            "transfer",
            "--checkpoint",
            "run/final.mapc",
            "--pose",
            pose,
            "--identity",
            identity,
            "--dims-scale",
            "4",
            "--out",
            "out2",
        ],
    );
    assert_eq!(code(&o), 4);
    assert!(!dir.join("out2").exists());
}

fn eval_csv(dir: &Path, out: &str) -> String {
    fs::read_to_string(dir.join(out).join("eval.csv")).unwrap()
}

#[test]
fn eval_is_deterministic_and_summarises() {
    let tr = trained();
    let dir = tr.dir.path();
    let m = "data/manifest.csv";
    writes_only_under(dir, "e1", || {
        ok(posetx(
            dir,
            &["eval", "--checkpoint", "run/final.mapc", "--manifest", m, "--out", "e1"],
        ));
    });
    ok(posetx(
        dir,
        &["eval", "--checkpoint", "run/final.mapc", "--manifest", m, "--out", "e2"],
    ));
    let csv = eval_csv(dir, "e1");
    assert_eq!(csv, eval_csv(dir, "e2"));

    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "pair_id,pmd,cd,emd,n_points,seconds");
    // 16 pose meshes x 9 identity meshes of another identity and pose
    assert_eq!(lines.len(), 1 + 144 + 1);
    let rows: Vec<Vec<f64>> = lines[1..lines.len() - 1]
        .iter()
        .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
        .collect();
    let mean = lines.last().unwrap();
    assert!(mean.starts_with("mean,"));
    let mean: Vec<f64> = mean.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    for c in 0..3 {
        let avg = rows.iter().map(|r| r[c]).sum::<f64>() / rows.len() as f64;
        // rows are printed with 6 decimals
        assert!(
            (avg - mean[c]).abs() <= 1e-6 + 1e-9 * avg.abs(),
            "column {c}: {avg} vs {}",
            mean[c]
        );
    }
    assert!(rows.iter().all(|r| r[4] == 0.0));
}

#[test]
fn eval_seed_comes_from_flag_then_environment() {
    let tr = trained();
    let dir = tr.dir.path();
    let pairs = format!(
        "pose,identity,target\n{},{},{}\n",
        tr.meshes[0].display(),
        tr.meshes[5].display(),
        tr.meshes[4].display()
    );
    fs::write(dir.join("pairs.csv"), pairs).unwrap();
    let run = |out: &str, env: Option<&str>, flag: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_posetx"));
        cmd.current_dir(dir).env_remove("MAPCON_SEED");
        if let Some(e) = env {
            cmd.env("MAPCON_SEED", e);
        }
        cmd.args([
            "eval",
            "--checkpoint",
            "run/final.mapc",
            "--pairs",
            "pairs.csv",
            "--out",
            out,
        ]);
        if let Some(f) = flag {
            cmd.args(["--seed", f]);
        }
        ok(cmd.output().unwrap());
        eval_csv(dir, out)
    };
    let default = run("d", None, None);
    assert_eq!(default, run("d9001", Some("9001"), None));
    let env = run("e", Some("5"), None);
    assert_ne!(default, env);
    assert_eq!(env, run("f", Some("77"), Some("5")));
    assert_eq!(env, run("f2", None, Some("5")));
}

#[test]
fn missing_ground_truth_is_flagged_or_strict() {
    let tr = trained();
    let dir = tr.dir.path();
    let pairs = format!(
        "{},{},{}\n{},{}\n",
        tr.meshes[0].display(),
        tr.meshes[5].display(),
        tr.meshes[4].display(),
        tr.meshes[1].display(),
        tr.meshes[6].display()
    );
    fs::write(dir.join("pairs.csv"), pairs).unwrap();
    let o = ok(posetx(
        dir,
        &[
            "eval",
            "--checkpoint",
            "run/final.mapc",
            "--pairs",
            "pairs.csv",
            "--out",
            "e",
        ],
    ));
    assert!(stderr(&o).contains("warning"));
    let csv = eval_csv(dir, "e");
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[2].ends_with(",NA,NA,NA,NA,NA"));
    // the mean covers the single scored pair
    assert_eq!(lines[1].split_once(',').unwrap().1, lines[3].split_once(',').unwrap().1);

    let o = posetx(
        dir,
        &[
            "eval",
            "--checkpoint",
            "run/final.mapc",
            "--pairs",
            "pairs.csv",
            "--strict",
            "--out",
            "s",
        ],
    );
    assert_eq!(code(&o), 1);
    assert!(!dir.join("s").exists());
}

#[test]
fn gradcheck_passes_and_names_corrupted_item() {
    let t = TempDir::new().unwrap();
    let o = ok(posetx(t.path(), &["gradcheck", "--which", "losses", "--tol", "1e-4"]));
    assert!(stdout(&o).contains("0 failed"));

    let o = posetx(
        t.path(),
        &[
            "gradcheck",
            "--which",
            "losses",
            "--corrupt",
            "edge_loss",
            "--repeats",
            "1",
        ],
    );
    assert_eq!(code(&o), 5);
    assert!(stderr(&o).contains("edge_loss"));
    let failed: Vec<_> = stdout(&o)
        .lines()
        .filter(|l| l.ends_with("FAIL"))
        .map(str::to_string)
        .collect();
    assert_eq!(failed.len(), 1);
    assert!(failed[0].starts_with("edge_loss "));
}

#[test]
fn gradcheck_ops_covers_every_kernel_once() {
    let t = TempDir::new().unwrap();
    let o = ok(posetx(t.path(), &["gradcheck", "--which", "ops", "--repeats", "1"]));
    let names: Vec<String> = stdout(&o)
        .lines()
        .filter(|l| l.ends_with(" ok"))
        .map(|l| l.split_whitespace().next().unwrap().to_string())
        .collect();
    let want: Vec<String> = OpKind::ALL.iter().map(|k| k.name().to_string()).collect();
    assert_eq!(names, want);
    assert!(tree(t.path()).is_empty());
}
