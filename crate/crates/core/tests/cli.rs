use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CIRCLE: &str = "[complex]\nbase = circle\np = 3\n[group]\nkind = lattice\nrank = 1\n";

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str], config: Option<&Path>, out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_l2morse"));
    cmd.args(args);
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    if let Some(o) = out {
        cmd.arg("--out").arg(o);
    }
    cmd.output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn zigzag_morse_verify_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "z.conf", &format!("{CIRCLE}[run]\nt_list = 1\nwindow_radius = 30\nfolner_kmax = 8\n"));
    let o = run(&["morse-verify"], Some(&cfg), Some(dir.path()));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let ledger = std::fs::read_to_string(dir.path().join("ledger.csv")).unwrap();
    let mut lines = ledger.lines();
    assert_eq!(lines.next(), Some("k,lhs_avg,rhs,verdict,folner_k,defect"));
    assert!(lines.all(|l| l.contains(":pass")));
}

#[test]
fn quasiperiodic_with_zero_tolerance_fails_verdict() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "q.conf",
        &format!("{CIRCLE}[morse]\npattern = quasiperiodic\namplitude = 0.3\n[run]\nt_list = 1\nwindow_radius = 60\nfolner_kmax = 30\ntol = 0\n"),
    );
    let o = run(&["morse-verify"], Some(&cfg), Some(dir.path()));
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(std::fs::read_to_string(dir.path().join("ledger.csv")).unwrap().contains(":fail"));
}

#[test]
fn malformed_configs_exit_one_with_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("dup.conf", format!("{CIRCLE}[run]\ns = 1\ns = 2\n"), ":9:"),
        ("unknown.conf", format!("{CIRCLE}[run]\nspeed = 1\n"), ":8:"),
        ("type.conf", format!("{CIRCLE}[run]\nseed = -3\n"), ":8:"),
        ("cross.conf", "[complex]\nbase = circle\np = 3\n[group]\nkind = cyclic\norder = 4\nrank = 2\n".into(), ":7:"),
        ("syntax.conf", "[complex]\nbase circle\n".into(), ":2:"),
    ];
    for (name, text, marker) in cases {
        let cfg = write(dir.path(), name, &text);
        let o = run(&["oracle-betti"], Some(&cfg), Some(dir.path()));
        assert_eq!(o.status.code(), Some(1), "{name}");
        assert!(stderr(&o).contains(marker), "{name}: {}", stderr(&o));
    }
    let o = run(&["oracle-betti"], Some(&dir.path().join("missing.conf")), None);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["no-such-command"], Some(&dir.path().join("dup.conf")), None);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn window_shortfall_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "w.conf", &format!("{CIRCLE}[run]\nwindow_radius = 4\nfolner_kmax = 8\n"));
    let o = run(&["morse-verify"], Some(&cfg), Some(dir.path()));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("window radius >="), "{}", stderr(&o));
}

#[test]
fn every_csv_has_a_header_and_full_precision() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.conf",
        "[complex]\nbase = circle\np = 3\n[group]\nkind = cyclic\norder = 4\n[run]\nt_list = 0.5, 1\nfolner_kmax = 2\npairs = 5\n",
    );
    let headers = [
        ("oracle-betti", "betti.csv", "degree,value,method,tolerance,samples"),
        ("heat-trace", "traces.csv", "g,degree,s,t,trace"),
        ("morse-verify", "ledger.csv", "k,lhs_avg,rhs,verdict,folner_k,defect"),
        ("trace-props", "defects.csv", "pair,folner_k,defect,bound,norm_product"),
        ("decay-fit", "decay.csv", "degree,t,distance,max_entry,log_c1,c2,r2,gaussian"),
    ];
    for (cmd, file, header) in headers {
        let o = run(&[cmd], Some(&cfg), Some(dir.path()));
        assert_eq!(o.status.code(), Some(0), "{cmd}: {}", stderr(&o));
        let text = std::fs::read_to_string(dir.path().join(file)).unwrap();
        assert_eq!(text.lines().next(), Some(header));
        let row = text.lines().nth(1).expect("data row");
        let real = row.split(',').find(|f| f.contains('e')).expect("a real field");
        let mantissa = real.trim_start_matches('-').split('e').next().unwrap();
        assert_eq!(mantissa.replace('.', "").len(), 17, "{cmd}: {real}");
    }
    let betti = std::fs::read_to_string(dir.path().join("betti.csv")).unwrap();
    assert!(betti.contains("0,2.5000000000000000e-1,finite_cover,"));
}

#[test]
fn thread_cap_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "z.conf", &format!("{CIRCLE}[run]\nt_list = 0.5, 1\nwindow_radius = 30\nfolner_kmax = 6\n"));
    let mut outputs = Vec::new();
    for threads in ["1", "3", "0"] {
        let out = dir.path().join(format!("t{threads}"));
        let o = Command::new(env!("CARGO_BIN_EXE_l2morse"))
            .args(["heat-trace", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .env("L2MORSE_THREADS", threads)
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(0));
        outputs.push(std::fs::read(out.join("traces.csv")).unwrap());
    }
    assert!(outputs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn help_lists_commands() {
    let o = run(&["--help"], None, None);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    for cmd in ["oracle-betti", "heat-trace", "morse-verify", "trace-props", "decay-fit"] {
        assert!(text.contains(cmd), "{text}");
    }
}
