//! Ablation runs: the full model and four variants, each trained under the
//! same seed set, plus a random-code baseline on the same splits.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Result, WchError};
use crate::retrieval::{evaluate_codes, CodeSet, Metrics};
use crate::rng::rng_for;
use crate::tensor::{Real, Tensor};
use crate::trainer::{fit, TrainConfig};

const BASELINE_SALT: u64 = 0xba5e;

/// One training configuration of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoReg,
    MaMean,
    HardLabels,
    NoScale,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoReg,
        Variant::MaMean,
        Variant::HardLabels,
        Variant::NoScale,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoReg => "no_reg",
            Variant::MaMean => "ma_mean",
            Variant::HardLabels => "hard_labels",
            Variant::NoScale => "no_scale",
        }
    }

    /// `base` with this variant's switch set and every other switch cleared.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            no_reg: self == Variant::NoReg,
            ma_mean: self == Variant::MaMean,
            hard_labels: self == Variant::HardLabels,
            no_scale: self == Variant::NoScale,
            ..base.clone()
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = WchError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
            WchError::Config(format!(
                "unknown ablation flag {s:?}; expected one of {}",
                names.join(", ")
            ))
        })
    }
}

/// Scores of one variant, per seed and averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seeds: Vec<u64>,
    pub map: Vec<f64>,
    pub map_at_k: BTreeMap<usize, Vec<f64>>,
    pub mean_map: f64,
    pub mean_map_at_k: BTreeMap<usize, f64>,
}

impl AblationRow {
    fn from_metrics(variant: &str, seeds: &[u64], metrics: &[Metrics]) -> Self {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        let map: Vec<f64> = metrics.iter().map(|m| m.map).collect();
        let mut map_at_k: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for m in metrics {
            for (&k, &v) in &m.map_at_k {
                map_at_k.entry(k).or_default().push(v);
            }
        }
        AblationRow {
            variant: variant.to_string(),
            seeds: seeds.to_vec(),
            mean_map: mean(&map),
            mean_map_at_k: map_at_k.iter().map(|(&k, v)| (k, mean(v))).collect(),
            map,
            map_at_k,
        }
    }
}

/// `ablation.json`: one row per variant and the random-code baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub random_baseline: AblationRow,
}

impl AblationReport {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant.name())
    }

    /// Tab-separated table with mean mAP and mean mAP@K columns.
    pub fn to_tsv(&self) -> String {
        let ks: Vec<usize> = self.random_baseline.mean_map_at_k.keys().copied().collect();
        let mut s = String::from("variant\tmap");
        for k in &ks {
            s += &format!("\tmap@{k}");
        }
        s.push('\n');
        for r in self.rows.iter().chain([&self.random_baseline]) {
            s += &format!("{}\t{:.6}", r.variant, r.mean_map);
            for k in &ks {
                s += &format!("\t{:.6}", r.mean_map_at_k.get(k).copied().unwrap_or(f64::NAN));
            }
            s.push('\n');
        }
        s
    }
}

/// Metrics of uniformly random codes for both splits of `dataset`.
pub fn random_baseline(dataset: &Dataset, code_length: usize, ks: &[usize], seed: u64) -> Result<Metrics> {
    let mut rng = rng_for(seed, &[BASELINE_SALT]);
    let mut codes = |n: usize| -> Result<CodeSet> {
        let data: Vec<Real> = (0..n * code_length)
            .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
            .collect();
        CodeSet::pack(&Tensor::new(&[n, code_length], data)?)
    };
    let queries = codes(dataset.query.len())?;
    let database = codes(dataset.train.len())?;
    let ql: Vec<_> = dataset.query.iter().map(|s| s.labels.clone()).collect();
    let dl: Vec<_> = dataset.train.iter().map(|s| s.labels.clone()).collect();
    evaluate_codes(&queries, &ql, &database, &dl, ks)
}

/// Train every variant under every seed into `out/<variant>/seed-<s>/`, then
/// write `ablation.json` and `ablation.tsv` to `out`.
pub fn run_ablation(
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    out: impl AsRef<Path>,
) -> Result<AblationReport> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(WchError::Config(
            "ablation needs at least one variant and one seed".into(),
        ));
    }
    let out = out.as_ref();
    let mut rows = Vec::with_capacity(variants.len());
    for &v in variants {
        let mut metrics = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = v.apply(&base.clone().with_seed(seed));
            let dataset = Dataset::synthesize(&cfg.data)?;
            let dir = out.join(v.name()).join(format!("seed-{seed}"));
            metrics.push(fit(&cfg, &dataset, dir)?.final_metrics);
        }
        rows.push(AblationRow::from_metrics(v.name(), seeds, &metrics));
    }
    let mut baseline = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let cfg = base.clone().with_seed(seed);
        let dataset = Dataset::synthesize(&cfg.data)?;
        baseline.push(random_baseline(&dataset, cfg.encoder.code_length, &cfg.eval_k, seed)?);
    }
    let report = AblationReport {
        rows,
        random_baseline: AblationRow::from_metrics("random", seeds, &baseline),
    };
    fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    fs::write(out.join("ablation.tsv"), report.to_tsv())?;
    Ok(report)
}
