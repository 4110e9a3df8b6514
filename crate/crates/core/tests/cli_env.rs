//! Default output directory from the environment. Kept in its own test
//! binary because it mutates the process environment.

use gwpark::cli::{run_with, OUT_DIR_ENV};

#[test]
fn reports_land_in_the_env_directory() {
    let dir = tempfile::tempdir().unwrap();
    std::env::set_var(OUT_DIR_ENV, dir.path());
    let mut out = Vec::new();
    let mut err = Vec::new();
    let args = [
        "gwpark",
        "sweep",
        "--offspring",
        "poisson:1",
        "--format",
        "json",
    ];
    assert_eq!(run_with(args, &mut out, &mut err), 0);
    assert!(out.is_empty());
    assert_eq!(
        std::fs::read_to_string(dir.path().join("sweep.json")).unwrap(),
        "[]\n"
    );
    std::env::remove_var(OUT_DIR_ENV);
}
