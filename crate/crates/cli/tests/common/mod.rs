#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// Small world, narrow network, coarse grid and one epoch per stage: every
/// command finishes in seconds.
pub const TINY_CONFIG: &str = r#"
[world]
num_instances = 600

[arch]
extractor = [{ width = 4, stride = 1 }, { width = 8, stride = 2 }]
shared_width = 8
head_width = 8

[base]
epochs = 1
grid = { x_range = [-10.0, 10.0], y_range = [-10.0, 10.0], cell_size = 1.0, feature_channels = 5 }

[finetune]
epochs = 1
grid = { x_range = [-10.0, 10.0], y_range = [-10.0, 10.0], cell_size = 1.0, feature_channels = 5 }

[episode]
k = 2

[sweep]
thetas = [0.1, 0.3]
matrix_settings = [2, 7]
"#;

pub fn write_tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY_CONFIG).unwrap();
    p
}

pub fn lfsl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lfsl"))
        .args(args)
        .env_remove("LFSL_THREADS")
        .output()
        .expect("binary runs")
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}
