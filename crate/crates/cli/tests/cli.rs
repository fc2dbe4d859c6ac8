use std::fs;
use std::process::{Command, Output};

fn fidel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fidel"))
        .args(args)
        .env_remove("FIDEL_DATA")
        .env("RUST_LOG", "off")
        .output()
        .unwrap()
}

#[test]
fn missing_dataset_exits_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("nothing");
    let out = tmp.path().join("out");
    let o = fidel(&["--data-root", empty.to_str().unwrap(), "--out", out.to_str().unwrap(), "demo-single"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("FIDEL_DATA"), "{err}");
}

#[test]
fn bad_config_key_exits_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let o = fidel(&["--out", tmp.path().to_str().unwrap(), "--set", "no_such_key=1", "sweep"]);
    assert_eq!(o.status.code(), Some(2));
    let o = fidel(&["--set", "rounds=0", "sweep"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_file_is_read_and_overridable() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("x.conf");
    fs::write(&conf, "# comment\nrounds = nope\n").unwrap();
    let o = fidel(&["--config", conf.to_str().unwrap(), "sweep"]);
    assert_eq!(o.status.code(), Some(2));
    let missing = tmp.path().join("absent.conf");
    let o = fidel(&["--config", missing.to_str().unwrap(), "sweep"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn shipped_configs_parse() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = fidel::config::ExperimentConfig::from_file(&path).unwrap();
        cfg.validate().unwrap();
        seen += 1;
    }
    assert!(seen >= 3);
}

#[test]
fn help_lists_every_subcommand() {
    let o = fidel(&["--help"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for cmd in ["demo-single", "demo-batch", "sweep", "pretrain", "train-generator"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}
