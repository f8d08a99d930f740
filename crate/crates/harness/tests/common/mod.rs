#![allow(dead_code)]

use std::path::Path;

use ctxsteer_harness::ExperimentConfig;

/// A configuration small enough for a full pipeline run in a few seconds.
pub const SMALL: &str = r#"
seed = 5

[corpus]
counts = { cf = 30, a = 12, b = 12 }
probe_counts = { cf = 6, a = 4, b = 4 }

[images]
calibration = 12
evaluation = 10

[calibration]
max_new = 32

[eval]
max_new = 24
align_limit = 16

[injection]
layers = [11, 12]

[sweep]
alphas = [-1.0, 0.0, 1.0]
windows = [[1, 2], [11, 12]]
"#;

pub fn small_config(out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::from_toml(SMALL).unwrap();
    c.output_dir = Some(out.to_path_buf());
    c
}

pub fn write_small_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("small.toml");
    std::fs::write(&path, SMALL).unwrap();
    path
}
