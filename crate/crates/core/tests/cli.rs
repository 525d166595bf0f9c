use std::path::Path;
use std::process::{Command, Output};

fn kolmo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kolmo")).args(args).output().expect("spawn kolmo")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = "model.kind = cubic_bounded\nmodel.d = 4\nrun.samples = 400\nrun.seed = 9\nrun.max_iter = 3\n\
                     grid.T = 0.5\nreference.samples = 800\nobservable.kind = indicator_norm_ball\n";

#[test]
fn solve_writes_outputs_and_compare_reads_them() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "small.cfg", SMALL);
    let out = tmp.path().join("out");
    let out = out.to_str().unwrap();
    let r = kolmo(&["reference", "--config", &cfg, "--out", out]);
    assert!(r.status.success(), "{}", stderr(&r));
    let reference = format!("{out}/reference.csv");
    let s = kolmo(&["solve", "--config", &cfg, "--out", out, "--ref", &reference]);
    assert_eq!(s.status.code(), Some(0), "{}", stderr(&s));

    let series = std::fs::read_to_string(format!("{out}/series.csv")).unwrap();
    let header = series.lines().next().unwrap();
    assert!(header.starts_with("j,t,u0,u1"), "{header}");
    assert!(header.ends_with("ref,ref_stderr"), "{header}");
    assert_eq!(series.lines().count(), 52);
    let err = std::fs::read_to_string(format!("{out}/err.csv")).unwrap();
    assert!(err.starts_with("n,err\n1,"));

    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(format!("{out}/run.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 9);
    assert!(meta["config_hash"].as_str().unwrap().len() == 64);
    assert!(meta["absolute_error"].as_array().unwrap().len() >= 2);

    let sm = kolmo(&["solve", "--config", &cfg, "--out", out, "--smooth", "5"]);
    assert!(sm.status.success(), "{}", stderr(&sm));
    let smoothed = std::fs::read_to_string(format!("{out}/smoothed.csv")).unwrap();
    assert!(smoothed.starts_with("j,t,u0,u1"));
    assert_eq!(smoothed.lines().count(), 52);
    assert_eq!(kolmo(&["solve", "--config", &cfg, "--smooth", "0"]).status.code(), Some(2));

    let c = kolmo(&["compare", "--run", &format!("{out}/series.csv"), "--ref", &reference]);
    assert!(c.status.success(), "{}", stderr(&c));
    let table = String::from_utf8(c.stdout).unwrap();
    assert!(table.starts_with("n,sup_abs_err,abs_err_T,"));
    assert!(table.lines().count() >= 3);
}

#[test]
fn config_errors_exit_2_and_name_every_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bad.cfg", "model.kind = cubic_bounded\nmodel.d = 0\nrun.colour = blue\ngrid.dt_coarse = 0.0015\n");
    let o = kolmo(&["solve", "--config", &cfg, "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    for key in ["model.d", "run.colour", "grid.dt_coarse"] {
        assert!(msg.contains(key), "missing {key} in: {msg}");
    }
    let usage = kolmo(&["solve"]);
    assert_eq!(usage.status.code(), Some(2));
}

#[test]
fn missing_files_exit_4() {
    let tmp = tempfile::tempdir().unwrap();
    let o = kolmo(&["solve", "--config", tmp.path().join("nope.cfg").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    let cfg = write(tmp.path(), "small.cfg", SMALL);
    let b = kolmo(&["solve", "--config", &cfg, "--bank", tmp.path().join("missing.kipb").to_str().unwrap()]);
    assert_eq!(b.status.code(), Some(4), "{}", stderr(&b));
    let garbage = write(tmp.path(), "garbage.kipb", "not a bank");
    let g = kolmo(&["bank", "inspect", &garbage]);
    assert_eq!(g.status.code(), Some(4), "{}", stderr(&g));
}

#[test]
fn divergence_exits_3_and_keeps_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "quad.cfg",
        "model.kind = quadratic_simple\nmodel.d = 6\nrun.samples = 500\nrun.seed = 2\nrun.divergence_threshold = 0.5\n\
         observable.kind = indicator_norm_ball\n",
    );
    let out = tmp.path().join("out");
    let o = kolmo(&["solve", "--config", &cfg, "--no-shift", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("weights diverged"));
    assert!(out.join("series.csv").exists());
    let meta = std::fs::read_to_string(out.join("run.json")).unwrap();
    assert!(meta.contains("diverged"));
}

#[test]
fn bank_generate_inspect_and_reuse() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "small.cfg", SMALL);
    let bank = tmp.path().join("paths.kipb");
    let bank = bank.to_str().unwrap();
    let g = kolmo(&["bank", "generate", "--config", &cfg, "--out", bank]);
    assert!(g.status.success(), "{}", stderr(&g));
    let i = kolmo(&["bank", "inspect", bank]);
    let text = String::from_utf8(i.stdout).unwrap();
    assert!(text.contains("dimension: 4") && text.contains("samples: 400") && text.contains("seed: 9"), "{text}");

    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(kolmo(&["solve", "--config", &cfg, "--out", a.to_str().unwrap()]).status.success());
    assert!(kolmo(&["solve", "--config", &cfg, "--out", b.to_str().unwrap(), "--bank", bank]).status.success());
    assert_eq!(std::fs::read(a.join("series.csv")).unwrap(), std::fs::read(b.join("series.csv")).unwrap());

    let other = write(tmp.path(), "other.cfg", &SMALL.replace("model.d = 4", "model.d = 5"));
    let m = kolmo(&["solve", "--config", &other, "--bank", bank, "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(m.status.code(), Some(2), "{}", stderr(&m));
}

#[test]
fn distribution_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "small.cfg", SMALL);
    let out = tmp.path().join("dist");
    let out_s = out.to_str().unwrap();

    let p = kolmo(&["probmap", "--config", &cfg, "--out", out_s, "--grid", "8,5", "--axes", "0,1"]);
    assert!(p.status.success(), "{}", stderr(&p));
    let map = std::fs::read_to_string(out.join("probmap.csv")).unwrap();
    assert!(map.starts_with("cell,x_lo,x_hi,y_lo,y_hi,mass"));
    assert_eq!(map.lines().count(), 1 + 40 + 1);
    assert!(map.lines().last().unwrap().starts_with("overflow,"));

    let h = kolmo(&["histogram", "--config", &cfg, "--out", out_s, "--component", "1", "--bins", "12", "--at-time", "0.25"]);
    assert!(h.status.success(), "{}", stderr(&h));
    let hist = std::fs::read_to_string(out.join("histogram.csv")).unwrap();
    assert_eq!(hist.lines().count(), 1 + 12 + 2);

    let c = kolmo(&["pca", "--config", &cfg, "--out", out_s]);
    assert!(c.status.success(), "{}", stderr(&c));
    let pca = std::fs::read_to_string(out.join("pca.csv")).unwrap();
    assert!(pca.starts_with("pc1,pc2,source,weight"));

    let bad = kolmo(&["histogram", "--config", &cfg, "--out", out_s, "--component", "7"]);
    assert_eq!(bad.status.code(), Some(2));
}
