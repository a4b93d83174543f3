use cdsopt::config::Config;
use cdsopt::experiments::{
    run_complete_example, run_incomplete_example, run_nocds, run_oracle_suite, RunManifest, MANIFEST_FILE,
};
use cdsopt::Error;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

fn shipped(name: &str) -> Config {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    Config::load(&path).unwrap()
}

fn coarse(mut c: Config) -> Config {
    c.grid.nt = 20;
    c.grid.nx = 100;
    c.monte_carlo.paths = 1_000;
    c.monte_carlo.dt = 0.02;
    c
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (PathBuf::from(p.file_name().unwrap()), std::fs::read(&p).unwrap())
        })
        .collect()
}

fn assert_outputs_listed(m: &RunManifest, dir: &Path) {
    let on_disk = files(dir);
    for o in &m.outputs {
        assert!(on_disk.contains_key(Path::new(&o.file)), "missing {}", o.file);
    }
    assert_eq!(on_disk.len(), m.outputs.len() + 1, "{:?}", on_disk.keys().collect::<Vec<_>>());
    assert!(on_disk.contains_key(Path::new(MANIFEST_FILE)));
}

#[test]
fn shipped_configs_equal_builtin_examples() {
    assert_eq!(shipped("complete.toml"), Config::complete_example());
    assert_eq!(shipped("incomplete.toml"), Config::incomplete_example());
}

#[test]
fn config_round_trips_through_toml() {
    for c in [Config::complete_example(), Config::incomplete_example()] {
        assert_eq!(Config::from_toml_str(&c.to_toml()).unwrap(), c);
    }
}

#[test]
fn unknown_field_reports_its_path() {
    let text = Config::complete_example().to_toml().replace("[grid]\n", "[grid]\nbogus = 1\n");
    match Config::from_toml_str(&text) {
        Err(Error::Config { path, .. }) => assert!(path.starts_with("grid"), "{path}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn reruns_are_byte_identical() {
    let c = coarse(Config::complete_example());
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_complete_example(&c, a.path()).unwrap();
    run_complete_example(&c, b.path()).unwrap();
    assert_eq!(files(a.path()), files(b.path()));
}

#[test]
fn manifests_list_every_output() {
    let dir = tempfile::tempdir().unwrap();
    let c = coarse(Config::complete_example());
    let m = run_complete_example(&c, &dir.path().join("complete")).unwrap();
    assert_outputs_listed(&m, &dir.path().join("complete"));
    assert!(m.outputs.iter().all(|o| o.rows > 0));

    let c = coarse(Config::incomplete_example());
    let m = run_incomplete_example(&c, &dir.path().join("incomplete")).unwrap();
    assert_outputs_listed(&m, &dir.path().join("incomplete"));

    let m = run_nocds(&c, &dir.path().join("nocds")).unwrap();
    assert_outputs_listed(&m, &dir.path().join("nocds"));
}

#[test]
fn manifest_records_config_hash_and_checks() {
    let dir = tempfile::tempdir().unwrap();
    let c = coarse(Config::complete_example());
    let m = run_complete_example(&c, dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
    let parsed: toml::Value = toml::from_str(&text).unwrap();
    assert_eq!(parsed["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(parsed["checks"].as_array().unwrap().len(), m.checks.len());
    assert_ne!(m.config_hash, cdsopt::experiments::config_hash(&Config::complete_example()));
}

#[test]
fn empty_notionals_write_only_the_manifest() {
    let mut c = coarse(Config::complete_example());
    c.experiment.notionals.clear();
    c.regression = None;
    let dir = tempfile::tempdir().unwrap();
    let m = run_complete_example(&c, dir.path()).unwrap();
    assert!(m.outputs.is_empty());
    assert!(m.passed(), "{:?}", m.failures());
    assert_outputs_listed(&m, dir.path());
}

#[test]
fn mode_mismatch_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let r = run_complete_example(&Config::incomplete_example(), dir.path());
    assert!(matches!(r, Err(Error::Config { ref path, .. }) if path == "model.mode"), "{r:?}");
    let r = run_incomplete_example(&Config::complete_example(), dir.path());
    assert!(matches!(r, Err(Error::Config { ref path, .. }) if path == "model.mode"), "{r:?}");
}

#[test]
fn oracle_manifest_is_deterministic() {
    let c = coarse(Config::complete_example());
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = run_oracle_suite(&c, a.path()).unwrap();
    let mb = run_oracle_suite(&c, b.path()).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(files(a.path()), files(b.path()));
    assert_eq!(ma.seeds, vec![c.monte_carlo.seed]);
}
