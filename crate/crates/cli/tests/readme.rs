//! Runs the README quickstart block verbatim.

use std::fs;
use std::path::Path;
use std::process::Command;

fn quickstart() -> Vec<Vec<String>> {
    let readme = fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md"))
        .expect("README.md at the workspace root");
    let section = readme
        .split("## Quickstart")
        .nth(1)
        .expect("Quickstart section");
    let block = section
        .split("```sh")
        .nth(1)
        .and_then(|b| b.split("```").next())
        .expect("sh block in Quickstart");
    block
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| l.split_whitespace().map(String::from).collect())
        .collect()
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for e in fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        fs::copy(e.path(), to.join(e.file_name())).unwrap();
    }
}

#[test]
fn quickstart_commands_succeed() {
    let cmds = quickstart();
    assert!(cmds.len() >= 5);
    let tmp = tempfile::tempdir().unwrap();
    copy_dir(
        Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs")),
        &tmp.path().join("configs"),
    );
    for argv in &cmds {
        assert_eq!(argv[0], "wiflow", "{argv:?}");
        let out = Command::new(env!("CARGO_BIN_EXE_wiflow"))
            .args(&argv[1..])
            .arg("-q")
            .current_dir(tmp.path())
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{}\nstdout:\n{}\nstderr:\n{}",
            argv.join(" "),
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let run = |d: &str| fs::read(tmp.path().join("runs").join(d).join("metrics.csv")).unwrap();
    assert_eq!(run("loso-s01"), run("loso-s01-again"));
}
