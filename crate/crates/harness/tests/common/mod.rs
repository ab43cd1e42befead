#![allow(dead_code)]

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mammo_core::imaging::RasterImage;
use mammo_harness::ExperimentConfig;

pub const FIXTURE_PATIENTS: usize = 50;
pub const FIXTURE_SEED: u64 = 20240611;

/// splitmix64; keeps fixtures independent of any RNG crate version.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const FINDINGS: [&str; 6] = [
    "No Finding",
    "No Finding",
    "Mass",
    "Suspicious Calcification",
    "Focal Asymmetry",
    "Mass;Architectural Distortion",
];

fn view_image(seed: u64) -> RasterImage {
    let (w, h) = (40u32, 56u32);
    let cx = (mix(seed) % w as u64) as i64;
    let cy = (mix(seed ^ 1) % h as u64) as i64;
    let base = (mix(seed ^ 2) % 120) as i64;
    let mut px = Vec::with_capacity((w * h) as usize);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
            px.push((base + 255 * 40 / (40 + d2)).clamp(0, 255) as u8);
        }
    }
    RasterImage::new(w, h, 1, px).expect("fixture image")
}

/// Four-view study per patient: metadata.csv plus images/ under `dir`.
pub fn write_vindr_fixture(dir: &Path, patients: usize, seed: u64) -> PathBuf {
    let images = dir.join("images");
    fs::create_dir_all(&images).unwrap();
    let mut csv = String::from("patient_id,laterality,view,image_path,density,birads,findings\n");
    for p in 0..patients {
        let ps = mix(seed ^ (p as u64) << 8);
        for (v, (lat, view)) in [("R", "CC"), ("R", "MLO"), ("L", "CC"), ("L", "MLO")].into_iter().enumerate() {
            let vs = mix(ps.wrapping_add(v as u64));
            let density = ["A", "B", "C", "D"][(vs % 4) as usize];
            let birads = 1 + (vs >> 8) % 5;
            let finding = if birads == 1 { "No Finding" } else { FINDINGS[((vs >> 16) % 6) as usize] };
            let name = format!("P{p:03}_{lat}_{view}.png");
            view_image(vs).save_png(&images.join(&name)).unwrap();
            writeln!(csv, "P{p:03},{lat},{view},images/{name},DENSITY {density},BI-RADS {birads},\"{finding}\"").unwrap();
        }
    }
    let path = dir.join("metadata.csv");
    fs::write(&path, csv).unwrap();
    path
}

pub fn config_toml(run_id: &str, mode: &str, endpoint: &str) -> String {
    format!(
        r#"run_id = "{run_id}"
output_dir = "out"
model_name = "mock-vlm"
prompt_mode = "{mode}"
frozen_time = true

[dataset]
kind = "vindr"
metadata = "data/metadata.csv"
image_side = 64
cache_dir = "cache"

[endpoint]
generate = "{endpoint}"
timeout_ms = 10000
max_attempts = 2
backoff_ms = 10

[split]
ratio = "4/5"
seed = 7

[prompt]
seed = 1234
"#
    )
}

pub fn rag_section(provider: &str) -> String {
    format!(
        r#"
[rag]
enabled = true
k = 3
index_path = "index/train.mwix"
provider = "{provider}"
provider_id = "mock-pool8"
dimension = 64
"#
    )
}

/// A fixture directory with `data/` and an experiment config.
pub struct Fixture {
    pub dir: tempfile::TempDir,
}

impl Fixture {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        write_vindr_fixture(&dir.path().join("data"), FIXTURE_PATIENTS, FIXTURE_SEED);
        Self { dir }
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn write_config(&self, name: &str, body: &str) -> PathBuf {
        let p = self.path().join(name);
        fs::write(&p, body).unwrap();
        p
    }

    pub fn config(&self, name: &str, body: &str) -> ExperimentConfig {
        ExperimentConfig::load(&self.write_config(name, body)).unwrap()
    }
}

/// Results file content without the provenance header line.
pub fn records_only(text: &str) -> String {
    text.split_inclusive('\n').skip(1).collect()
}
