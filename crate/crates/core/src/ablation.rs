//! Four-variant comparison on one dataset, reported as test AUC and AUC gain
//! over the id-only baseline.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cache::FeatureMapCache;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{HccmModel, ModelConfig, Variant, VisualInput};
use crate::train::{train, MetricsReport, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    /// Test AUC per training seed, in seed order.
    pub aucs: Vec<f64>,
    pub median_auc: f64,
    /// `median_auc - median_auc(DIN)`.
    pub gain: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl AblationReport {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Strict ordering DIN < DIN+FixedCNN < HCM <= HCCM on median AUC, and a
    /// full-model gain of at least `min_gain`.
    pub fn ordering_holds(&self, min_gain: f64) -> bool {
        let m = |v| self.row(v).map(|r| r.median_auc);
        match (m(Variant::Din), m(Variant::DinFixedCnn), m(Variant::Hcm), m(Variant::Hccm)) {
            (Some(din), Some(fixed), Some(hcm), Some(hccm)) => {
                din < fixed && fixed < hcm && hcm <= hccm && hccm - din >= min_gain
            }
            _ => false,
        }
    }

    /// Aligned text: variant, median AUC and gain in AUC percentage points.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<14} {:>8} {:>9}", "Model", "AUC", "AUC gain");
        for r in &self.rows {
            let gain = if r.variant == Variant::Din {
                "-".to_string()
            } else {
                format!("{:.2}%", r.gain * 100.0)
            };
            let _ = writeln!(s, "{:<14} {:>8.4} {:>9}", r.variant.to_string(), r.median_auc, gain);
        }
        if self.seeds.len() > 1 {
            let _ = writeln!(s, "(median over seeds {:?})", self.seeds);
        }
        s
    }
}

/// Trains every variant once per seed on `data` and scores the test split.
/// `on_run` sees each finished run, e.g. for progress logging.
pub fn run_ablation(
    data: &Dataset,
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    seeds: &[u64],
    mut on_run: impl FnMut(&MetricsReport),
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    // Frozen weights depend on the model config only, so one cache serves all runs.
    let cache = FeatureMapCache::precompute(&HccmModel::new(model.clone(), Variant::DinFixedCnn, 0)?, &data.catalog)?;
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let mut aucs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut m = HccmModel::new(model.clone(), variant, seed)?;
            let cfg = TrainConfig {
                variant,
                seed,
                ..train_cfg.clone()
            };
            let visual = variant.has_visual().then_some(VisualInput::Maps(&cache));
            let report = train(&mut m, &data.train, Some(&data.test), &cfg, visual)?;
            on_run(&report);
            aucs.push(
                report
                    .test_auc
                    .ok_or_else(|| Error::UndefinedMetric("test split has a single class".into()))?,
            );
        }
        rows.push(AblationRow {
            variant,
            median_auc: median(&aucs),
            aucs,
            gain: 0.0,
        });
    }
    let base = rows[0].median_auc;
    for r in &mut rows {
        r.gain = r.median_auc - base;
    }
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        rows,
    })
}
