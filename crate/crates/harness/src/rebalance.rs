//! Class-rebalanced composites of the train split, for downstream fine-tuning.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use mammo_core::dataset::SplitSide;
use mammo_core::dataset::ReportJson;
use mammo_core::imaging::{apply_rebalance, build_rebalance_plan, ImagingConfig, LabeledImage, Provenance, RasterImage, RebalancePlan};
use serde::{Deserialize, Serialize};

use crate::cases::{composite_png, load_for};
use crate::config::ExperimentConfig;
use crate::error::HarnessError;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// One line of the manifest consumed by the fine-tuning side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub image_path: String,
    pub class: u8,
    pub report: ReportJson,
    pub provenance: Provenance,
}

#[derive(Debug, Clone)]
pub struct RebalanceOutput {
    pub plan: RebalancePlan,
    pub manifest_path: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

/// Parse `1=500,2=500,...` into per-class targets.
pub fn parse_targets(spec: &str) -> Result<BTreeMap<u8, usize>, HarnessError> {
    let bad = || HarnessError::Config(format!("targets must look like 1=500,2=500: {spec:?}"));
    let mut out = BTreeMap::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part.split_once('=').ok_or_else(bad)?;
        let k: u8 = k.trim().parse().map_err(|_| bad())?;
        let v: usize = v.trim().parse().map_err(|_| bad())?;
        if out.insert(k, v).is_some() {
            return Err(bad());
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

/// Rebalance train-split composites by gold BI-RADS class and write PNGs plus
/// `manifest.jsonl` under `out_dir`.
pub fn rebalance(
    cfg: &ExperimentConfig,
    targets: &BTreeMap<u8, usize>,
    translate_classes: &[u8],
    seed: u64,
    out_dir: &Path,
) -> Result<RebalanceOutput, HarnessError> {
    let data = load_for(cfg)?;
    let imaging = ImagingConfig::new(cfg.dataset.image_side)?;
    let cache = cfg.cache_dir();
    let mut by_class: BTreeMap<u8, Vec<LabeledImage>> = BTreeMap::new();
    for case in data.side(SplitSide::Train) {
        let class = case.gold.birads_class.get();
        if !targets.contains_key(&class) {
            continue;
        }
        let (_, png) = composite_png(case, &imaging, &cache)?;
        by_class.entry(class).or_default().push(LabeledImage {
            id: case.case_id.clone(),
            image: RasterImage::from_png_bytes(&png)?,
            report: case.gold.clone(),
        });
    }
    let counts: BTreeMap<u8, usize> = by_class.iter().map(|(k, v)| (*k, v.len())).collect();
    let plan = build_rebalance_plan(&counts, targets, translate_classes, seed)?;
    let items = apply_rebalance(&plan, by_class)?;

    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| HarnessError::io(&images_dir, e))?;
    let mut entries = Vec::with_capacity(items.len());
    for item in items {
        let p = &item.provenance;
        let name = format!("c{}_{}_{:03}.png", p.class, p.original_id, p.copy_index);
        let rel = format!("images/{name}");
        let path = images_dir.join(&name);
        item.image.save_png(&path)?;
        let mut provenance = item.provenance.clone();
        provenance.output_path = Some(rel.clone());
        entries.push(ManifestEntry {
            image_path: rel,
            class: provenance.class,
            report: item.report.to_report_json(name.trim_end_matches(".png")),
            provenance,
        });
    }
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let mut f = fs::File::create(&manifest_path).map_err(|e| HarnessError::io(&manifest_path, e))?;
    for e in &entries {
        let line = serde_json::to_string(e).expect("manifest entry serializes");
        writeln!(f, "{line}").map_err(|err| HarnessError::io(&manifest_path, err))?;
    }
    Ok(RebalanceOutput {
        plan,
        manifest_path,
        entries,
    })
}
