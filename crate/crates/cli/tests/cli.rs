use std::process::Command;

fn icl_lab(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_icl-lab")).args(args).output().expect("binary runs")
}

#[test]
fn theory_curve_to_stdout() {
    let out = icl_lab(&["theory-curve", "--beta", "0.5,2"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("experiment,d,m,n,"));
    assert!(lines[2].ends_with(",4.871461157024793"), "{}", lines[2]);
}

#[test]
fn config_file_and_out_path() {
    let dir = std::env::temp_dir().join(format!("icl-lab-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let config = dir.join("sweep.toml");
    let csv = dir.join("out.csv");
    std::fs::write(&config, "d = 8\nm = 3\nn = 20\nB = \"4:12:4\"\ntrials = 2\n").unwrap();
    let out = icl_lab(&["sft-sweep-B", "--config", config.to_str().unwrap(), "--trials", "3", "--out", csv.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().skip(1).all(|l| l.split(',').nth(10) == Some("3")));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn config_errors_exit_2() {
    let out = icl_lab(&["sft-sweep-B", "--d", "10", "--m", "10", "--B", "5,3"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("m must be < d") && err.contains("strictly increasing"), "{err}");
    assert_eq!(icl_lab(&["no-such-experiment"]).status.code(), Some(2));
    assert_eq!(icl_lab(&["theory-curve", "--beta", "0.5,1"]).status.code(), Some(2));
}

#[test]
fn divergence_exits_3() {
    let out = icl_lab(&["gd-rate-demo", "--gamma-step", "1e6", "--sft-steps", "40"]);
    assert_eq!(out.status.code(), Some(3));
}
