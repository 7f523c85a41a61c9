use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_renormlab"))
}

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("renormlab-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn run(args: &[&str], out: &Path) -> Output {
    bin().args(args).arg("--out").arg(out).arg("--workers").arg("1").output().unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn rotnum_of_the_zero_parameter_is_zero() {
    let d = scratch("rotnum");
    let o = run(&["rotnum", "--theta", "0"], &d);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&d.join("rotnum.json"));
    assert_eq!(r["rho"], 0.0);
    assert_eq!(r["rational"], true);
    let m = json(&d.join("manifest.json"));
    assert_eq!(m["config"]["command"], "rotnum");
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    let art = &m["artifacts"][0];
    assert_eq!(art["file"], "rotnum.json");
    assert_eq!(art["bytes"].as_u64().unwrap() as usize, std::fs::read(d.join("rotnum.json")).unwrap().len());
}

#[test]
fn schema_errors_name_the_field() {
    let d = scratch("schema");
    let cfg = d.join("bad.json");
    std::fs::write(&cfg, r#"{"theta": "abc"}"#).unwrap();
    let o = run(&["rotnum", "--config", cfg.to_str().unwrap()], &d);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("`theta`"));

    std::fs::write(&cfg, r#"{"thetta": 0.1}"#).unwrap();
    let o = run(&["rotnum", "--config", cfg.to_str().unwrap()], &d);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("thetta"));

    let o = run(&["julia", "--resolution", "100"], &d);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("`resolution`"));
}

#[test]
fn echo_config_round_trips() {
    let d = scratch("echo");
    let cfg = d.join("cfg.json");
    std::fs::write(&cfg, r#"{"command": "partition", "cf": "3,(1,2)"}"#).unwrap();
    let first = bin().args(["echo-config", "--config", cfg.to_str().unwrap(), "--level", "7"]).output().unwrap();
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let filled = d.join("filled.json");
    std::fs::write(&filled, &first.stdout).unwrap();
    let second = bin().args(["echo-config", "--config", filled.to_str().unwrap()]).output().unwrap();
    assert_eq!(first.stdout, second.stdout);
    let v: serde_json::Value = serde_json::from_slice(&first.stdout).unwrap();
    assert_eq!(v["level"], 7);
    assert_eq!(v["tune_depth"], 30);
    // Without a subcommand in the config there is nothing to fill in.
    let bare = bin().args(["echo-config", "--level", "7"]).output().unwrap();
    assert_eq!(bare.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bare.stderr).contains("`command`"));
}

#[test]
fn identical_maps_converge_trivially() {
    let d = scratch("converge");
    let o = run(&["converge", "--family2", "arnold-cubic", "--n", "6", "--fit-from", "2"], &d);
    assert!(o.status.code().is_some_and(|c| c != 2 && c != 1), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(d.join("converge.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("n,height,d_n"));
    for l in lines {
        let d_n: f64 = l.rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(d_n, 0.0, "{l}");
    }
}

#[test]
fn scaling_csv_has_the_documented_header() {
    let d = scratch("scaling");
    let o = run(&["scaling", "--n", "10"], &d);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(d.join("scaling.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("m,len_Im,ratio,aitken"));
    // Rows m = 0..=n.
    assert_eq!(csv.lines().count(), 1 + 11);
}

#[test]
fn julia_writes_a_binary_pgm() {
    let d = scratch("julia");
    let o = run(&["julia", "--resolution", "64", "--max-iter", "96", "--level", "1"], &d);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let pgm = std::fs::read(d.join("julia.pgm")).unwrap();
    let header = b"P5\n64 64\n255\n";
    assert!(pgm.starts_with(header));
    assert_eq!(pgm.len(), header.len() + 64 * 64);
    assert!(pgm[header.len()..].iter().all(|&b| b == 0 || b == 255));
    assert_eq!(json(&d.join("julia.json"))["symmetric"], true);
}

#[test]
fn reruns_are_byte_identical() {
    let d = scratch("rerun");
    let read = |f: &str| std::fs::read(d.join(f)).unwrap();
    let mut runs = Vec::new();
    for _ in 0..2 {
        assert_eq!(run(&["partition", "--level", "9"], &d).status.code(), Some(0));
        runs.push((read("partition.csv"), json(&d.join("manifest.json"))["config_hash"].clone()));
    }
    assert_eq!(runs[0], runs[1]);
    let rows = String::from_utf8(runs[0].0.clone()).unwrap().lines().count() - 1;
    // q_9 + q_10 for the golden mean.
    assert_eq!(rows, 55 + 89);
}
