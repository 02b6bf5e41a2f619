use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tabs_cli::config::KEYS;
use tabs_cli::parse_config;

const SMALL: &str = "[system]\nn_servers = 40\nbuffer = 4\n[arrivals]\nrate = 0.5\n[timers]\nmu = 0.5\nnu = 0.5\n\
                     [run]\nhorizon = 30\nreplications = 3\nseed = 11\ntasks = true\n";

fn tabs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tabs")).args(args).output().expect("binary runs")
}

fn scenario(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(format!("{name}.toml"));
    std::fs::write(&path, text).unwrap();
    path
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

fn column(csv: &str, name: &str) -> Vec<f64> {
    let mut lines = csv.lines();
    let idx = lines.next().unwrap().split(',').position(|h| h == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().parse().unwrap()).collect()
}

#[test]
fn bundled_scenarios_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        parse_config(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert!(n >= 7);
}

#[test]
fn reruns_are_byte_identical_whatever_the_job_count() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = scenario(tmp.path(), "small", SMALL);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for (out, jobs) in [(&a, "1"), (&b, "3")] {
        let o = tabs(&["both", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--jobs", jobs, "--dt", "0.01"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let files = ["config_echo", "metrics.csv", "fluid.csv", "gap.csv", "trace_rep0.csv", "trace_rep2.csv", "tasks_rep1.csv"];
    for f in files {
        assert_eq!(read(a.join("small").join(f)), read(b.join("small").join(f)), "{f}");
    }
    let metrics = read(a.join("small/metrics.csv"));
    let runs: Vec<&str> = metrics.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(runs, ["rep0", "rep1", "rep2", "mean", "fluid"]);
    assert!(metrics.lines().skip(1).all(|l| l.starts_with("small,tabs,") && l.contains(",40,0.5,0.5,0.5,")));
}

#[test]
fn seed_flag_changes_the_traces() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = scenario(tmp.path(), "small", SMALL);
    let run = |seed: &str, out: &str| {
        let out = tmp.path().join(out);
        let o = tabs(&["simulate", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", seed]);
        assert!(o.status.success());
        read(out.join("small/trace_rep0.csv"))
    };
    assert_ne!(run("1", "x"), run("2", "y"));
    assert!(read(tmp.path().join("y/small/config_echo")).contains("seed = 2"));
}

#[test]
fn invalid_configuration_exits_with_one_and_lists_every_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = scenario(tmp.path(), "bad", &SMALL.replace("mu = 0.5", "mu = 0").replace("buffer = 4", "bufer = 4"));
    let o = tabs(&["simulate", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains(":3: [system] bufer: unknown key"), "{err}");
    assert!(err.contains(":7: [timers] mu: standby rate must be positive, got 0"), "{err}");
    assert!(!tmp.path().join("bad").exists());

    let o = tabs(&["simulate", "/nonexistent/scenario.toml"]);
    assert_eq!(o.status.code(), Some(1));
    let o = tabs(&["simulate", cfg.to_str().unwrap(), "--frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unwritable_output_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = scenario(tmp.path(), "small", SMALL);
    let blocker = tmp.path().join("file");
    std::fs::write(&blocker, "").unwrap();
    let o = tabs(&["simulate", cfg.to_str().unwrap(), "--out", blocker.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn help_lists_every_config_key_with_units() {
    for args in [&["--help"][..], &["simulate", "--help"]] {
        let o = tabs(args);
        assert!(o.status.success());
        let help = String::from_utf8_lossy(&o.stdout);
        for k in KEYS {
            assert!(help.contains(&format!("    {}", k.key)) && help.contains(k.unit), "{}", k.key);
        }
    }
}

#[test]
fn sweep_writes_one_row_per_value_and_policy() {
    let tmp = tempfile::tempdir().unwrap();
    let text = format!(
        "{}[policy]\ncompare = [\"tabs\", \"delayedoff\"]\n[sweep]\nparameter = \"nu_inverse\"\nvalues = [2, 20]\n",
        SMALL.replace("replications = 3", "replications = 2")
    );
    let cfg = scenario(tmp.path(), "sw", &text);
    let o = tabs(&["sweep", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = read(tmp.path().join("sw/metrics.csv"));
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert!(csv.starts_with("scenario,policy,run,N,lambda,mu,nu,") && csv.lines().next().unwrap().ends_with(",status"));
    let keys: Vec<(&str, &str)> = rows.iter().map(|r| (r[1], r[6])).collect();
    assert_eq!(keys, [("tabs", "0.5"), ("delayedoff", "0.5"), ("tabs", "0.05"), ("delayedoff", "0.05")]);
    assert!(rows.iter().all(|r| r[r.len() - 1] == "ok"));

    let empty = scenario(tmp.path(), "empty", &format!("{SMALL}[sweep]\nparameter = \"lambda\"\nvalues = []\n"));
    let o = tabs(&["sweep", empty.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sweep list is empty"));
}

#[test]
fn compare_uses_common_seeds_and_accepts_one_policy() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = scenario(tmp.path(), "one", &format!("{SMALL}[policy]\ncompare = [\"jiq\"]\n"));
    let o = tabs(&["compare", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert!(o.status.success());
    let csv = read(tmp.path().join("one/metrics.csv"));
    assert_eq!(csv.lines().count(), 1 + 3 + 1);
    assert!(csv.lines().skip(1).all(|l| l.starts_with("one,jiq,")));

    let phase = format!(
        "{SMALL}[service]\nkind = \"phase_type\"\nr = [0.75, 0.25]\ngamma = [2, 0.4]\n[policy]\ncompare = [\"tabs\", \"delayedoff\"]\n"
    );
    let cfg = scenario(tmp.path(), "phase", &phase);
    let o = tabs(&["compare", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn fluid_trace_follows_the_sinusoid() {
    let tmp = tempfile::tempdir().unwrap();
    let text = "[system]\nn_servers = 1\n[arrivals]\nkind = \"sinusoid\"\nbase = 0.3\namplitude = 0.2\nperiod = 10\n\
                [timers]\nmu_inverse = 10\nnu_inverse = 10\n[run]\nhorizon = 100\ndt = 0.01\n";
    let cfg = scenario(tmp.path(), "sin", text);
    let o = tabs(&["fluid", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = read(tmp.path().join("sin/fluid.csv"));
    let (t, lambda) = (column(&csv, "t"), column(&csv, "lambda"));
    assert_eq!(t.len(), 101);
    for (t, l) in t.iter().zip(&lambda) {
        assert!((l - (0.3 + 0.2 * (t / 10.0).sin())).abs() < 1e-11);
    }
    assert!(!tmp.path().join("sin/trace_rep0.csv").exists());
}

#[test]
fn hyper_exponential_fluid_settles_like_the_exponential_case() {
    let tmp = tempfile::tempdir().unwrap();
    let text = "[system]\nn_servers = 1\n[arrivals]\nrate = 0.3\n[timers]\nmu = 0.1\nnu = 0.1\n\
                [service]\nkind = \"phase_type\"\nr = [0.75, 0.25]\ngamma = [2, 0.4]\n[run]\nhorizon = 400\ndt = 0.01\n";
    let cfg = scenario(tmp.path(), "hyper", text);
    let o = tabs(&["fluid", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = read(tmp.path().join("hyper/fluid.csv"));
    let last = |c: &str| *column(&csv, c).last().unwrap();
    assert!((last("q1") - 0.3).abs() < 1e-3);
    assert!((last("delta0") - 0.7).abs() < 1e-3);
    assert!((last("q1_1") - 0.1125).abs() < 1e-3 && (last("q1_2") - 0.1875).abs() < 1e-3);
}

#[test]
fn fluid_refuses_other_policies() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = scenario(tmp.path(), "j", &format!("{SMALL}[policy]\nname = \"jiq\"\n"));
    let o = tabs(&["fluid", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn stability_reports_every_initial_state() {
    let tmp = tempfile::tempdir().unwrap();
    let text = "[system]\nn_servers = 1\n[arrivals]\nrate = 0.3\n[timers]\nmu = 0.1\nnu = 0.1\n[run]\nhorizon = 1500\ndt = 0.01\n";
    let cfg = scenario(tmp.path(), "st", text);
    let o = tabs(&["stability", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap(), "--initials", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("4 of 4 initial states"));
    let csv = read(tmp.path().join("st/stability.csv"));
    assert_eq!(csv.lines().count(), 5);
    assert!(column(&csv, "distance").iter().all(|&d| d <= 1e-3));
}

#[test]
fn all_off_start_wakes_servers_in_both_models() {
    let tmp = tempfile::tempdir().unwrap();
    let text = SMALL.replace("n_servers = 40", "n_servers = 2000").replace("tasks = true", "initial = \"all_idle_off\"");
    let cfg = scenario(tmp.path(), "cold", &text);
    let o = tabs(&["both", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap(), "--dt", "0.01"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let fluid = read(tmp.path().join("cold/fluid.csv"));
    assert_eq!(column(&fluid, "delta0")[0], 1.0);
    assert!(column(&fluid, "q1").last().unwrap() > &0.4);
    let gaps = column(&read(tmp.path().join("cold/gap.csv")), "gap");
    assert!(gaps.iter().all(|&g| g < 0.2), "{gaps:?}");
}
