#![allow(dead_code)]

pub mod gradients;

use cmgen::harness::RunConfig;

/// A model and run small enough for a test to train in well under a second.
pub const TINY: &str = r#"
seed = 11

[data]
kind = "gaussian_mixture"
count = 256

[curriculum]
s0 = 2
s1 = 20
mu0 = 0.9
total_steps = 1000

[model]
width = 8
blocks = 1
time_dim = 4

[train]
batch_size = 8
lr0 = 1e-3

[run]
checkpoint_every = 250

[inference]
samples = 64
sweep = [1, 2, 4]

[metrics]
recall_rows = 64
"#;

pub fn tiny() -> RunConfig {
    RunConfig::from_toml(TINY).unwrap()
}

pub fn tiny_with(overrides: &[&str]) -> RunConfig {
    let owned: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    RunConfig::with_overrides(TINY, &owned).unwrap()
}

/// A config shipped in the repository's `configs/` directory.
pub fn shipped(name: &str, overrides: &[&str]) -> RunConfig {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    let owned: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    RunConfig::load(&path, &owned).unwrap()
}

// Values computed with 50-digit arithmetic for eps = 0.002, T = 80, p = 7.
pub const GRID_10: [f64; 10] = [
    0.002,
    0.020435334553438713501,
    0.11663856352517845867,
    0.46997905799774678669,
    1.5017419790680077656,
    4.0661236029537578412,
    9.723201355260126535,
    21.108676736193749041,
    42.415189318512677783,
    80.0,
];

/// `(index, value)` pairs of the 151-point grid, 0-based.
pub const GRID_151: [(usize, f64); 4] = [
    (1, 0.0023551625650554562028),
    (2, 0.0027630692961883057498),
    (75, 2.5152189761471585788),
    (149, 77.133292518285411244),
];
