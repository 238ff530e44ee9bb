use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
data.identities = 40
data.heldout_identities = 8
train.epochs = 20
denoiser.width = 32
finetune.epochs = 2
finetune.per_class = 5
finetune.subsample = 10
finetune.targets = 1,2
ablate.images = 14
ablate.t0 = 50
ablate.gamma = 2
edit.images = 3
";

fn diffedit(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_diffedit"));
    cmd.arg("--workdir")
        .arg(dir)
        .args(args)
        .env_remove("DIFFEDIT_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn diffedit")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = diffedit(dir, args, &[]);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read(dir: &Path, rel: &str) -> Vec<u8> {
    std::fs::read(dir.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

fn text(dir: &Path, rel: &str) -> String {
    String::from_utf8(read(dir, rel)).unwrap()
}

/// `SMALL` with the keys of `extra` replaced.
fn small_with(extra: &str) -> String {
    let key = |l: &str| l.split('=').next().unwrap().trim().to_string();
    let over: Vec<String> = extra.lines().map(key).collect();
    let kept: String = SMALL
        .lines()
        .filter(|l| !over.contains(&key(l)))
        .map(|l| format!("{l}\n"))
        .collect();
    format!("{kept}{extra}")
}

fn trained_workdir(extra: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), small_with(extra)).unwrap();
    for c in ["gen-data", "calibrate", "train-first-stage", "train-ldm"] {
        ok(dir.path(), &["--config", "run.cfg", c]);
    }
    dir
}

fn metrics(csv: &str) -> Vec<Vec<String>> {
    csv.lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn pipeline_is_deterministic_given_config_and_seed() {
    let a = trained_workdir("");
    let b = trained_workdir("");
    for d in [a.path(), b.path()] {
        ok(d, &["--config", "run.cfg", "finetune"]);
        ok(
            d,
            &["--config", "run.cfg", "edit", "--dataset", "--t0", "40,50"],
        );
    }
    for rel in [
        "checkpoints/oracle.ckpt",
        "checkpoints/embedder.ckpt",
        "checkpoints/first_stage.ckpt",
        "checkpoints/denoiser.ckpt",
        "tuned/denoiser_happy_g1.0_l1.0.ckpt",
        "logs/ldm_loss.csv",
        "outputs/edit_t0_40.pgm",
        "outputs/edit_t0_50.pgm",
        "outputs/edit_metrics.csv",
    ] {
        assert_eq!(
            read(a.path(), rel),
            read(b.path(), rel),
            "{rel} differs between identical runs"
        );
    }
    let ldm = text(a.path(), "logs/ldm_loss.csv");
    assert_eq!(ldm.lines().count(), 21);
    assert!(ldm.starts_with("epoch,loss\n"));
}

#[test]
fn every_artifact_has_a_manifest() {
    let d = trained_workdir("");
    ok(d.path(), &["--config", "run.cfg", "edit", "--dataset"]);
    let cfg_hash = text(d.path(), "checkpoints/denoiser.ckpt.manifest");
    for rel in [
        "checkpoints/denoiser.ckpt",
        "logs/ldm_loss.csv",
        "outputs/edit_t0_50.pgm",
        "outputs/edit_metrics.csv",
    ] {
        let m = text(d.path(), &format!("{rel}.manifest"));
        assert!(m.contains("config_hash = "), "{rel}");
        assert!(m.contains("seed = 7\n"), "{rel}");
        assert!(m.contains("code_version = "), "{rel}");
    }
    assert!(text(d.path(), "outputs/edit_metrics.csv.manifest").contains("input.oracle = "));
    assert!(cfg_hash.contains("input.first_stage = "));
    let echo = text(d.path(), "logs/edit.config");
    assert!(echo.contains("data.identities = 40  #"));
    assert!(echo.contains("schedule.T = 100  # default"));
}

#[test]
fn eta_zero_edits_are_byte_identical_and_eta_positive_is_seeded() {
    let d = trained_workdir("");
    ok(d.path(), &["--config", "run.cfg", "edit", "--dataset"]);
    let first = read(d.path(), "outputs/edit_t0_50.pgm");
    ok(d.path(), &["--config", "run.cfg", "edit", "--dataset"]);
    assert_eq!(first, read(d.path(), "outputs/edit_t0_50.pgm"));

    ok(
        d.path(),
        &["--config", "run.cfg", "edit", "--dataset", "--eta", "1"],
    );
    let s1 = read(d.path(), "outputs/edit_t0_50.pgm");
    ok(
        d.path(),
        &["--config", "run.cfg", "edit", "--dataset", "--eta", "1"],
    );
    assert_eq!(s1, read(d.path(), "outputs/edit_t0_50.pgm"));
    assert_ne!(s1, first);
}

#[test]
fn grid_layout_and_identity_column() {
    let d = trained_workdir("");
    ok(
        d.path(),
        &[
            "--config",
            "run.cfg",
            "edit",
            "--dataset",
            "--t0",
            "40,50,60",
        ],
    );
    for t0 in [40, 50, 60] {
        let pgm = read(d.path(), &format!("outputs/edit_t0_{t0}.pgm"));
        let header = String::from_utf8_lossy(&pgm[..20]).to_string();
        // 3 sources x (source + 7 targets) tiles of 16 px with 1 px borders
        assert!(header.starts_with("P5\n137 52\n255\n"), "{header:?}");
    }
    let rows = metrics(&text(d.path(), "outputs/edit_metrics.csv"));
    assert_eq!(rows.len(), 3 * 3 * 7);
    let psnr = |same: bool| {
        let v: Vec<f64> = rows
            .iter()
            .filter(|r| (r[3] == r[4]) == same)
            .map(|r| r[6].parse().unwrap())
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(
        psnr(true) > psnr(false) + 3.0,
        "identity edits {} vs others {}",
        psnr(true),
        psnr(false)
    );

    ok(
        d.path(),
        &[
            "--config",
            "run.cfg",
            "edit",
            "--dataset",
            "--src",
            "happy",
            "--trg",
            "happy",
        ],
    );
    let rows = metrics(&text(d.path(), "outputs/edit_metrics.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(
        (rows[0][3].as_str(), rows[0][4].as_str()),
        ("happy", "happy")
    );
}

#[test]
fn single_cell_ablation_matches_edit_metrics() {
    let d = trained_workdir("");
    ok(d.path(), &["--config", "run.cfg", "ablate"]);
    let ablation = metrics(&text(d.path(), "outputs/ablation_metrics.csv"));
    std::fs::write(d.path().join("edit.cfg"), small_with("edit.images = 14\n")).unwrap();
    ok(
        d.path(),
        &[
            "--config",
            "edit.cfg",
            "edit",
            "--dataset",
            "--t0",
            "50",
            "--gamma",
            "2",
        ],
    );
    let edits: Vec<Vec<String>> = metrics(&text(d.path(), "outputs/edit_metrics.csv"))
        .into_iter()
        .filter(|r| r[3] != r[4])
        .collect();
    assert_eq!(ablation.len(), edits.len());
    for (a, e) in ablation.iter().zip(&edits) {
        assert_eq!(a[..5], e[..5]);
        for k in 5..9 {
            let (x, y): (f64, f64) = (a[k].parse().unwrap(), e[k].parse().unwrap());
            assert!((x - y).abs() < 1e-5, "{a:?} vs {e:?}");
        }
    }
    let table = text(d.path(), "outputs/ablation.csv");
    assert!(table.starts_with("target,t0,gamma,T_ddim,p_neutral,"));
    let targets: Vec<String> = metrics(&table).iter().map(|r| r[0].clone()).collect();
    assert_eq!(
        targets,
        [
            "neutral",
            "happy",
            "sad",
            "surprised",
            "fearful",
            "disgusted",
            "angry"
        ]
    );
}

#[test]
fn ablation_rows_sorted_by_target_t0_gamma() {
    let d = trained_workdir("ablate.t0 = 60,40\nablate.gamma = 3,1\nablate.images = 7\n");
    ok(d.path(), &["--config", "run.cfg", "ablate"]);
    let rows = metrics(&text(d.path(), "outputs/ablation.csv"));
    assert_eq!(rows.len(), 7 * 4);
    let keys: Vec<(usize, usize, String)> = rows
        .iter()
        .map(|r| {
            let t = [
                "neutral",
                "happy",
                "sad",
                "surprised",
                "fearful",
                "disgusted",
                "angry",
            ]
            .iter()
            .position(|e| *e == r[0])
            .unwrap();
            (t, r[1].parse().unwrap(), r[2].clone())
        })
        .collect();
    let mut sorted = keys.clone();
    sorted.sort_by(|a, b| {
        (a.0, a.1, a.2.parse::<f64>().unwrap())
            .partial_cmp(&(b.0, b.1, b.2.parse::<f64>().unwrap()))
            .unwrap()
    });
    assert_eq!(keys, sorted);
}

#[test]
fn edit_accepts_a_graymap_file() {
    let d = trained_workdir("");
    ok(
        d.path(),
        &[
            "--config",
            "run.cfg",
            "edit",
            "--image",
            "data/heldout/00001.pgm",
            "--src",
            "happy",
            "--trg",
            "sad",
        ],
    );
    let rows = metrics(&text(d.path(), "outputs/edit_metrics.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][3..5], ["happy".to_string(), "sad".to_string()]);
    let out = diffedit(
        d.path(),
        &[
            "--config",
            "run.cfg",
            "edit",
            "--image",
            "data/heldout/00001.pgm",
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--src"));
}

#[test]
fn out_of_range_flags_exit_two() {
    let d = trained_workdir("");
    for args in [
        &["edit", "--dataset", "--t0", "101"][..],
        &["edit", "--dataset", "--t0", "0"],
        &["edit", "--dataset", "--steps", "80"],
        &["edit", "--dataset", "--steps", "1"],
        &["edit", "--dataset", "--eta", "1.5"],
        &["edit", "--dataset", "--gamma", "-1"],
        &["edit", "--dataset", "--trg", "bored"],
        &["edit", "--dataset", "--src", "7"],
        &["edit"],
        &["fly"],
    ] {
        let mut full = vec!["--config", "run.cfg"];
        full.extend_from_slice(args);
        let out = diffedit(d.path(), &full, &[]);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", stderr(&out));
    }
}

#[test]
fn missing_base_checkpoint_exits_two_with_message() {
    let d = tempfile::tempdir().unwrap();
    let out = diffedit(d.path(), &["finetune"], &[]);
    assert_eq!(out.status.code(), Some(2));
    let msg = stderr(&out);
    assert!(
        msg.contains("missing denoiser checkpoint") && msg.contains("train-ldm"),
        "{msg}"
    );
    let out = diffedit(d.path(), &["train-ldm"], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("train-first-stage"));
}

#[test]
fn config_errors_exit_two() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("bad.cfg"), "edit.zeta = 1\n").unwrap();
    let out = diffedit(d.path(), &["--config", "bad.cfg", "gen-data"], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("unknown key 'edit.zeta'"));
    let out = diffedit(d.path(), &["--config", "absent.cfg", "gen-data"], &[]);
    assert_eq!(out.status.code(), Some(2));
    let out = diffedit(d.path(), &["gen-data"], &[("DIFFEDIT_SEED", "abc")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn failed_calibration_exits_three_with_diagnostics() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(
        d.path().join("weak.cfg"),
        "data.identities = 2\ndata.heldout_identities = 2\noracle.epochs = 1\n",
    )
    .unwrap();
    ok(d.path(), &["--config", "weak.cfg", "gen-data"]);
    let out = diffedit(d.path(), &["--config", "weak.cfg", "calibrate"], &[]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    let diag = text(d.path(), "diagnostics.txt");
    assert!(
        diag.contains("command = calibrate") && diag.contains("calibration failed"),
        "{diag}"
    );
    assert!(!d.path().join("checkpoints/oracle.ckpt").exists());
}

#[test]
fn seed_env_overrides_config_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    std::fs::write(a.path().join("s.cfg"), "data.identities = 2\nseed = 11\n").unwrap();
    std::fs::write(b.path().join("s.cfg"), "data.identities = 2\n").unwrap();
    ok(a.path(), &["--config", "s.cfg", "gen-data"]);
    let out = diffedit(
        b.path(),
        &["--config", "s.cfg", "gen-data"],
        &[("DIFFEDIT_SEED", "11")],
    );
    assert!(out.status.success());
    assert_eq!(
        read(a.path(), "data/train.csv"),
        read(b.path(), "data/train.csv")
    );
    assert!(text(b.path(), "data/train.csv.manifest").contains("seed = 11\n"));
}

#[test]
fn config_hash_ignores_key_order() {
    let a = tempfile::tempdir().unwrap();
    std::fs::write(
        a.path().join("x.cfg"),
        "data.identities = 2\n# note\ndata.heldout_identities = 1\n",
    )
    .unwrap();
    std::fs::write(
        a.path().join("y.cfg"),
        "data.heldout_identities=1\ndata.identities = 2\n",
    )
    .unwrap();
    ok(a.path(), &["--config", "x.cfg", "gen-data"]);
    let first = text(a.path(), "data/train.csv.manifest");
    ok(a.path(), &["--config", "y.cfg", "gen-data"]);
    assert_eq!(first, text(a.path(), "data/train.csv.manifest"));
}
