#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use promptseg::fusion::{init_fusion, save_checkpoint, FusionCheckpoint};
use promptseg::grid::DEFAULT_CLASSES;

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_promptseg"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn promptseg")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Two canonical cases with stored oracle logits under `<root>/data`.
pub fn gen_data(root: &Path) -> PathBuf {
    let data = root.join("data");
    let o = run(&["gen-data", "--out", p(&data), "--count", "2", "--seed", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    data
}

/// A fusion checkpoint with the given scalars, written to `path`.
pub fn fusion_ckpt(path: &Path, alpha: f64, beta: f64) -> FusionCheckpoint {
    let mut params = init_fusion(DEFAULT_CLASSES, 3).unwrap();
    params.alpha = alpha;
    params.beta = beta;
    let ck = FusionCheckpoint::fresh(params, 0);
    save_checkpoint(&ck, path).unwrap();
    ck
}
