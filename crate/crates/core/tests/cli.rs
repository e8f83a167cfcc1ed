use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dcpde::trainer::model_from_str;

const SMALL: &str = r#"
problem = "heat"
method = "dcpinn"
seed = 1
training.epochs = 120
training.p_m = 10
training.p_lambda = 50
training.record_stride = 40
grid.n_interior = 7
grid.n_line = 21
grid.n_validation = 11
profiles.derivs = ["u", "u_t"]
profiles.t = [0.5]
profiles.n = 5
ablate.methods = ["pinn", "dcpinn"]
ablate.seeds = [0]
"#;

fn dcpde(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcpde")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn run_writes_all_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.toml", SMALL);
    let out = tmp.path().join("run");
    let res = dcpde(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));

    assert_eq!(
        header(&out.join("trajectory.csv")),
        "epoch,wall_time_s,loss_0,loss_b,loss_f,loss_h1,loss_h2,lambda_0,lambda_b,lambda_f,lambda_h1,lambda_h2,total"
    );
    assert!(header(&out.join("validation_trajectory.csv")).starts_with("epoch,wall_time_s,E_u,E_0,E_b,E_f,E_h_xx,E_h_t"));
    assert_eq!(header(&out.join("metrics.csv")), "metric,value");
    assert_eq!(header(&out.join("profile_u_t.csv")), "x,t,value,oracle");
    let traj = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    let epochs: Vec<&str> = traj.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(epochs, ["40", "80", "120"]);

    let model_text = fs::read_to_string(out.join("model.dcpde")).unwrap();
    assert!(model_text.starts_with("DCPDE1\n"));
    let model = model_from_str(&model_text).unwrap();
    assert_eq!(model.params.layer_sizes(), [2, 100, 100, 1]);

    let saved = fs::read_to_string(out.join("config.toml")).unwrap();
    let again = tmp.path().join("again");
    let cfg2 = write_config(tmp.path(), "saved.toml", &saved);
    assert!(dcpde(&["run", "--config", &cfg2, "--out", again.to_str().unwrap()]).status.success());
    assert_eq!(fs::read(out.join("model.dcpde")).unwrap(), fs::read(again.join("model.dcpde")).unwrap());
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.toml", SMALL);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(dcpde(&["run", "--config", &cfg, "--out", a.to_str().unwrap()]).status.success());
    assert!(dcpde(&["run", "--config", &cfg, "--seed", "2", "--out", b.to_str().unwrap()]).status.success());
    assert_ne!(fs::read(a.join("model.dcpde")).unwrap(), fs::read(b.join("model.dcpde")).unwrap());
}

#[test]
fn ablate_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.toml", SMALL);
    let out = tmp.path().join("abl");
    let res = dcpde(&["ablate", "--config", &cfg, "--seeds", "0,1", "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(header(&out.join("ablation_summary.csv")), "method,metric,mean,std,n");
    let summary = fs::read_to_string(out.join("ablation_summary.csv")).unwrap();
    assert!(summary.lines().any(|l| l.starts_with("dcpinn,E_u,") && l.ends_with(",2")));

    let dirs: Vec<String> = ["pinn/seed0", "pinn/seed1", "dcpinn/seed0", "dcpinn/seed1"]
        .iter()
        .map(|d| out.join(d).to_string_lossy().into_owned())
        .collect();
    let mut args = vec!["report", "--group-by-method"];
    args.extend(dirs.iter().map(String::as_str));
    let res = dcpde(&args);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let text = String::from_utf8(res.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("method,metric,value,improvement_pct,rank,log10_value"));
    assert!(text.lines().any(|l| l.starts_with("pinn,E_u,") && l.contains(",0,")));
    assert!(text.lines().any(|l| l.starts_with("dcpinn,borda,")));
    assert!(text.lines().any(|l| l.starts_with("dcpinn,nauc_E_u,")));
}

#[test]
fn sweep_writes_long_table() {
    let tmp = tempfile::tempdir().unwrap();
    let text = format!("{SMALL}\nsweep.eta_m = [1e-3, 1e-2]\nsweep.p_m = [10]\nsweep.p_lambda = [50]\nsweep.epochs = 60\n");
    let cfg = write_config(tmp.path(), "sweep.toml", &text);
    let out = tmp.path().join("sweep");
    let res = dcpde(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let table = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(table.lines().next(), Some("eta_m,p_m,p_lambda,metric,value,log10_value,status"));
    assert_eq!(table.lines().count(), 1 + 2 * 4);
    assert_eq!(header(&out.join("sweep_best.csv")), "rank,eta_m,p_m,p_lambda,log10_sum");
}

#[test]
fn usage_and_config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(dcpde(&["bogus"]).status.code(), Some(2));
    assert_eq!(dcpde(&["run"]).status.code(), Some(2));
    let cfg = write_config(tmp.path(), "bad.toml", "method = \"nope\"\n");
    assert_eq!(dcpde(&["run", "--config", &cfg]).status.code(), Some(2));
    let cfg = write_config(tmp.path(), "unknown.toml", "colour = 3\n");
    let res = dcpde(&["run", "--config", &cfg]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("colour"));
    let cfg = write_config(tmp.path(), "zero.toml", "training.record_stride = 0\n");
    assert_eq!(dcpde(&["run", "--config", &cfg]).status.code(), Some(2));
}

#[test]
fn divergence_exits_3_and_keeps_partial_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let text = SMALL.replace("training.epochs = 120", "training.epochs = 200\ntraining.lr_init = 1e9");
    let cfg = write_config(tmp.path(), "wild.toml", &text);
    let out = tmp.path().join("wild");
    let res = dcpde(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(out.join("trajectory.csv").exists());
    assert!(out.join("metrics.csv").exists());
}
