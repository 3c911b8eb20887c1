//! Fixtures shared by the acceptance criteria.
#![allow(dead_code)]

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use medkg::config::RunConfig;
use medkg_cli::pipeline::{cmd_generate, prepare, Prepared};
use medkg_cli::Dirs;

/// Prints the criterion line and fails the test on FAIL.
pub fn verdict(criterion: u32, ok: bool, detail: impl Display) {
    let line = format!("{} criterion {criterion}: {detail}", if ok { "PASS" } else { "FAIL" });
    println!("{line}");
    assert!(ok, "{line}");
}

/// Empty scratch directory under the target tree.
pub fn scratch(name: &str) -> PathBuf {
    let p = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = std::fs::remove_dir_all(&p);
    std::fs::create_dir_all(&p).expect("scratch directory");
    p
}

/// Defaults shrunk to widths and epoch counts that train in seconds on one
/// core.
pub fn desk_config(seed: u64, n_patients: usize) -> RunConfig {
    let mut c = RunConfig { seed, ..RunConfig::default() };
    c.data.synthetic.n_patients = n_patients;
    c.model.k = 16;
    c.pretrain.lr = 2e-3;
    c.pretrain.max_epochs = 30;
    c.pretrain.patience = 5;
    c.resolve()
}

/// Writes a corpus once per process; the generator seed is always 0.
fn generated(cell: &'static OnceLock<PathBuf>, name: &str, n_patients: usize) -> &'static Path {
    cell.get_or_init(|| {
        let dir = scratch(name);
        cmd_generate(&desk_config(0, n_patients), &Dirs::new(&dir, &dir)).expect("generate corpus");
        dir
    })
}

pub fn corpus_1000() -> &'static Path {
    static CELL: OnceLock<PathBuf> = OnceLock::new();
    generated(&CELL, "corpus-1000", 1000)
}

pub fn corpus_200() -> &'static Path {
    static CELL: OnceLock<PathBuf> = OnceLock::new();
    generated(&CELL, "corpus-200", 200)
}

/// Loads a generated corpus under `cfg`'s model settings.
pub fn prepared(cfg: &RunConfig, data: &Path) -> Prepared {
    prepare(cfg, &Dirs::new(data, data), None).expect("prepare corpus")
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}
