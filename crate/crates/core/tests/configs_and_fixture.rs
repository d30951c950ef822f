use std::path::{Path, PathBuf};

use attribpaint_core::data::fixture::write_fixture;
use attribpaint_core::{load_config, RunConfig};

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for sub in ["", "style", "content"] {
        let mut names: Vec<PathBuf> = std::fs::read_dir(root.join(sub))
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.is_file())
            .map(|p| p.strip_prefix(root).unwrap().to_path_buf())
            .collect();
        names.sort();
        out.extend(names);
    }
    out
}

#[test]
fn shipped_fixture_matches_generator() {
    let shipped = repo().join("fixtures/synthetic");
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), 0).unwrap();
    let expected = files(dir.path());
    assert_eq!(files(&shipped), expected);
    for rel in &expected {
        assert_eq!(
            std::fs::read(shipped.join(rel)).unwrap(),
            std::fs::read(dir.path().join(rel)).unwrap(),
            "{}",
            rel.display()
        );
    }
}

#[test]
fn shipped_configs_load() {
    let desk = load_config(&repo().join("configs/desk.toml")).unwrap();
    assert_eq!(desk, RunConfig::default());
    let full = load_config(&repo().join("configs/full.toml")).unwrap();
    assert_eq!(full, RunConfig::full_scale());
    let fixture = load_config(&repo().join("configs/fixture.toml")).unwrap();
    assert_eq!((fixture.image_size, fixture.total_steps), (64, 500));
}
