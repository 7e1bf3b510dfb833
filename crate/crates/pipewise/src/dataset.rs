//! Labeled training sets from the simulator, and model training and
//! cross-validation over them.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context};
use pipewise_core::clean::{clean, CleanParams};
use pipewise_core::features::{catalog, extract_features, CycleSignals, FeatureVector};
use pipewise_core::ml::cv::{cross_validate, CvReport};
use pipewise_core::ml::{train, ModelParams, TrainedModel};
use pipewise_core::sim::{generate_cycle, plan_dataset, ApplianceProfile, DatasetEntry, SimConfig};
use rayon::prelude::*;

use crate::storage::{write_atomic, WriteMode};

/// Phase durations shrink so a healthy cycle lasts 60 s.
pub const DATASET_DURATION_SCALE: f64 = 60.0 / 2820.0;
pub const DATASET_DEVICE: &str = "sim-00";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub cycle_ids: Vec<String>,
    pub labels: Vec<String>,
    pub feature_names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

pub fn default_sim_config() -> SimConfig {
    SimConfig { duration_scale: DATASET_DURATION_SCALE, ..SimConfig::default() }
}

/// Generates, cleans and featurizes one planned cycle.
pub fn featurize_entry(entry: &DatasetEntry, base: &SimConfig) -> anyhow::Result<FeatureVector> {
    let config = SimConfig { seed: entry.seed, ..base.clone() };
    let cycle = generate_cycle(&ApplianceProfile::washing_machine(), &entry.fault, &config, DATASET_DEVICE, 0)?;
    let params = CleanParams::default();
    let (power, rp) = clean(&cycle.power, &params);
    let (current, rc) = clean(&cycle.current, &params);
    let (vibration, rv) = clean(&cycle.vibration, &params);
    let (rp, rc, rv) = (rp.for_cycle(&entry.cycle_id), rc.for_cycle(&entry.cycle_id), rv.for_cycle(&entry.cycle_id));
    let signals = CycleSignals {
        cycle_id: &entry.cycle_id,
        start_us: cycle.start_us,
        end_us: cycle.end_us,
        power: &power,
        current: &current,
        vibration: &vibration,
        reports: [&rp, &rc, &rv],
    };
    Ok(extract_features(&signals)?)
}

/// `n_per_class` cycles of each class, featurized in parallel. Row order
/// follows the plan, so the result does not depend on thread count.
pub fn make_dataset(n_per_class: usize, seed: u64, base: &SimConfig) -> anyhow::Result<Dataset> {
    if n_per_class == 0 {
        bail!("n_per_class must be at least 1");
    }
    base.validate()?;
    let plan = plan_dataset(n_per_class, seed);
    let vectors: Vec<FeatureVector> = plan.par_iter().map(|e| featurize_entry(e, base)).collect::<anyhow::Result<_>>()?;
    Ok(Dataset {
        cycle_ids: plan.iter().map(|e| e.cycle_id.clone()).collect(),
        labels: plan.iter().map(|e| e.label.clone()).collect(),
        feature_names: catalog(),
        rows: vectors.into_iter().map(|v| v.values).collect(),
    })
}

/// Writes `manifest.csv` (`cycle_id,label`) and `features.csv`
/// (`cycle_id,label,<feature names>`).
pub fn write_dataset(ds: &Dataset, dir: &Path) -> anyhow::Result<()> {
    let mut manifest = String::from("cycle_id,label\n");
    let mut features = format!("cycle_id,label,{}\n", ds.feature_names.join(","));
    for i in 0..ds.len() {
        manifest.push_str(&format!("{},{}\n", ds.cycle_ids[i], ds.labels[i]));
        let row: Vec<String> = ds.rows[i].iter().map(|v| v.to_string()).collect();
        features.push_str(&format!("{},{},{}\n", ds.cycle_ids[i], ds.labels[i], row.join(",")));
    }
    write_atomic(&dir.join("manifest.csv"), WriteMode::Replace, |w| w.write_all(manifest.as_bytes()))?;
    write_atomic(&dir.join("features.csv"), WriteMode::Replace, |w| w.write_all(features.as_bytes()))?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> anyhow::Result<Dataset> {
    let path = dir.join("features.csv");
    let text = fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().context("features.csv is empty")?.split(',').collect();
    if header.len() < 3 || header[0] != "cycle_id" || header[1] != "label" {
        bail!("{}: header must start with cycle_id,label", path.display());
    }
    let mut ds = Dataset {
        cycle_ids: Vec::new(),
        labels: Vec::new(),
        feature_names: header[2..].iter().map(|s| s.to_string()).collect(),
        rows: Vec::new(),
    };
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != header.len() {
            bail!("{}:{}: expected {} fields, got {}", path.display(), i + 2, header.len(), f.len());
        }
        let row = f[2..]
            .iter()
            .map(|v| v.parse::<f64>().with_context(|| format!("{}:{}: bad value `{v}`", path.display(), i + 2)))
            .collect::<anyhow::Result<Vec<f64>>>()?;
        ds.cycle_ids.push(f[0].into());
        ds.labels.push(f[1].into());
        ds.rows.push(row);
    }
    Ok(ds)
}

pub fn train_on(ds: &Dataset, params: &ModelParams) -> anyhow::Result<TrainedModel> {
    Ok(train(params, &ds.rows, &ds.labels, &ds.feature_names)?)
}

pub fn cross_validate_on(ds: &Dataset, params: &ModelParams, k_folds: usize, seed: u64) -> anyhow::Result<CvReport> {
    Ok(cross_validate(params, &ds.rows, &ds.labels, &ds.feature_names, k_folds, seed)?)
}

pub fn save_model(model: &TrainedModel, path: &Path) -> anyhow::Result<()> {
    let body = serde_json::to_vec_pretty(model)?;
    write_atomic(path, WriteMode::Replace, |w| w.write_all(&body))?;
    Ok(())
}
