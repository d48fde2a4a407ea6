use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
data = \"synthetic\"
synthetic_train = 240
synthetic_test = 60
synthetic_dim = 6
synthetic_classes = 3
model = \"mlp2\"
hidden = 8
clients = 4
participants = 2
batch_size = 20
rounds = 4
";

fn fedmvr(args: &[&str], out_env: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fedmvr"));
    cmd.args(args).env_remove("FEDMVR_OUT_DIR");
    if let Some(dir) = out_env {
        cmd.env("FEDMVR_OUT_DIR", dir);
    }
    cmd.output().unwrap()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path.to_string_lossy().into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_writes_identical_csv_for_any_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for (out, threads) in [(&a, "1"), (&b, "3")] {
        let o = fedmvr(
            &["run", "-c", &cfg, "-o", out.to_str().unwrap(), "--threads", threads],
            None,
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let first = std::fs::read_to_string(a.join("proposed-seed1.csv")).unwrap();
    let second = std::fs::read_to_string(b.join("proposed-seed1.csv")).unwrap();
    assert_eq!(first, second);
    assert!(first.starts_with(
        "round,train_loss,train_acc,test_loss,test_acc,grad_norm_sq,mean_lr,participating,floats_sent\n"
    ));
    assert_eq!(first.lines().count(), 5);
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().to_str().unwrap();
    assert!(fedmvr(&["run", "-c", &cfg, "-o", out], None).status.success());
    assert!(fedmvr(&["run", "-c", &cfg, "-o", out, "--seed", "9"], None)
        .status
        .success());
    let one = std::fs::read(dir.path().join("proposed-seed1.csv")).unwrap();
    let nine = std::fs::read(dir.path().join("proposed-seed9.csv")).unwrap();
    assert_ne!(one, nine);
}

#[test]
fn output_directory_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "algorithm = \"fedavg\"\n");
    let env_out = dir.path().join("from-env");
    let o = fedmvr(&["run", "-c", &cfg], Some(&env_out));
    assert!(o.status.success());
    assert!(env_out.join("fedavg-seed1.csv").exists());
}

#[test]
fn ablate_and_compare_cover_every_method() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().to_str().unwrap();
    let o = fedmvr(&["ablate", "-c", &cfg, "-o", out], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for row in 1..=7 {
        assert!(dir.path().join(format!("ablation-row{row}-seed1.csv")).exists());
    }
    let o = fedmvr(&["compare", "-c", &cfg, "-o", out, "--seeds", "1,2"], None);
    assert!(o.status.success());
    let text = stdout(&o);
    for name in ["proposed", "fedavg", "fedprox"] {
        assert!(text.contains(&format!("{name:<10} median rounds to 0.85")), "{text}");
        assert!(dir.path().join(format!("{name}-seed2.csv")).exists());
    }
}

#[test]
fn probe_and_partition_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = fedmvr(&["probe", "-c", &cfg, "--pairs", "2"], None);
    assert!(o.status.success());
    let text = stdout(&o);
    for key in ["L_hat", "sigma_hat", "G_hat", "global_var_hat"] {
        assert!(text.contains(key));
    }
    let o = fedmvr(&["partition-stats", "-c", &cfg], None);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("mean TV distance"));
    assert!(text.contains("   all      240"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let typo = dir.path().join("typo.toml");
    std::fs::write(&typo, "batchsize = 10\n").unwrap();
    let o = fedmvr(&["run", "-c", typo.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("batch_size"));

    let o = fedmvr(&["run", "-c", "/definitely/missing.toml"], None);
    assert_eq!(o.status.code(), Some(3));

    assert_eq!(fedmvr(&["frobnicate"], None).status.code(), Some(2));
    assert_eq!(
        fedmvr(&["ablate", "--rows", "0"], None).status.code(),
        Some(2)
    );
    assert_eq!(
        fedmvr(&["run", "--preset-row", "8"], None).status.code(),
        Some(2)
    );

    let nodata = dir.path().join("nodata.toml");
    std::fs::write(&nodata, "mnist_dir = \"/no/such/mnist\"\n").unwrap();
    let o = fedmvr(
        &["run", "-c", nodata.to_str().unwrap(), "-o", dir.path().to_str().unwrap()],
        None,
    );
    assert_eq!(o.status.code(), Some(4));
}
