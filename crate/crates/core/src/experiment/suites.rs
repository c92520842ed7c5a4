//! Multi-seed comparison suites. Cells of a suite share data, splits and
//! seeds, so differences come from the toggled factor alone.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Variant};
use super::run::{
    load_datasets, load_encoders, run_experiment, Encoders, RunManifest, StageSelect, ADAPT_CHECKPOINT,
    CLASSIFY_CHECKPOINT,
};
use crate::clip::ClipModel;
use crate::error::{FateError, Result};
use crate::tensor::{load_checkpoint, ParamStore, Tensor};
use crate::vision::{extract_features, VisionModel};

/// Seeds used by the suites: three consecutive seeds from the config's.
pub fn suite_seeds(cfg: &ExperimentConfig) -> Vec<u64> {
    (0..3).map(|i| cfg.seed + i).collect()
}

/// Per-seed values of one metric with their mean and sample standard
/// deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn new(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n.max(1.0);
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Stat { values, mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub label: String,
    pub columns: Vec<(String, Stat)>,
    pub notes: Vec<String>,
}

impl SuiteRow {
    pub fn column(&self, name: &str) -> Option<&Stat> {
        self.columns.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }
}

/// A directional comparison between two cells, reported rather than asserted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub description: String,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<SuiteRow>,
    pub checks: Vec<Check>,
    /// Manifests of every run behind the table.
    pub runs: Vec<PathBuf>,
}

impl SuiteReport {
    pub fn row(&self, label: &str) -> Option<&SuiteRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// `label,<col>_mean,<col>_std,<col>_seed<s>...` per row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label");
        if let Some(first) = self.rows.first() {
            for (name, _) in &first.columns {
                let _ = write!(out, ",{name}_mean,{name}_std");
                for s in &self.seeds {
                    let _ = write!(out, ",{name}_seed{s}");
                }
            }
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.label);
            for (_, st) in &row.columns {
                let _ = write!(out, ",{},{}", st.mean, st.std);
                for v in &st.values {
                    let _ = write!(out, ",{v}");
                }
            }
            out.push('\n');
        }
        out
    }

    /// Writes `results.csv` and `suite.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| FateError::io(dir, e))?;
        let csv = dir.join("results.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| FateError::io(&csv, e))?;
        let json = dir.join("suite.json");
        fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| FateError::io(&json, e))
    }
}

fn cell(base: &ExperimentConfig, dir: PathBuf, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        output_dir: dir,
        seed,
        ..base.clone()
    }
}

/// Runs the adaptation stage for one seed and returns its checkpoint.
fn adapt_once(cfg: &ExperimentConfig, seed: u64) -> Result<(PathBuf, RunManifest)> {
    let c = ExperimentConfig {
        use_dp: true,
        noisy_dp: false,
        dp_checkpoint: None,
        ..cell(cfg, cfg.output_dir.join(format!("seed{seed}")).join("adapt"), seed)
    };
    let m = run_experiment(&c, StageSelect::Adapt)?;
    Ok((c.output_dir.join(ADAPT_CHECKPOINT), m))
}

fn require(cfg: &ExperimentConfig, variant: Variant, suite: &str) -> Result<()> {
    if cfg.variant != variant {
        return Err(FateError::Config(format!("{suite} needs variant = {variant:?}").to_lowercase()));
    }
    Ok(())
}

fn accuracy_of(m: &RunManifest) -> Result<f64> {
    m.test_accuracy
        .ok_or_else(|| FateError::Invalid("run finished without a test accuracy".into()))
}

/// `{DP on/off} x {CP on/off}` with the classification stage of every cell
/// run on the same seeds; the two DP cells share one adaptation checkpoint
/// per seed.
pub fn run_ablation_suite(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<SuiteReport> {
    require(cfg, Variant::Vision, "ablation")?;
    let grid = [(false, false), (false, true), (true, false), (true, true)];
    let mut acc = vec![Vec::new(); grid.len()];
    let mut notes = vec![Vec::new(); grid.len()];
    let mut runs = Vec::new();
    for &seed in seeds {
        let (ckpt, adapt) = adapt_once(cfg, seed)?;
        runs.push(RunManifest::path(&adapt.config.output_dir));
        for (i, &(dp, cp)) in grid.iter().enumerate() {
            let c = ExperimentConfig {
                use_dp: dp,
                use_cp: cp,
                noisy_dp: false,
                dp_checkpoint: dp.then(|| ckpt.clone()),
                ..cell(cfg, cfg.output_dir.join(format!("seed{seed}")).join(ablation_label(dp, cp).replace([' ', ','], "_")), seed)
            };
            let m = run_experiment(&c, StageSelect::Classify)?;
            acc[i].push(accuracy_of(&m)?);
            if seed == seeds[0] {
                notes[i].push(format!(
                    "weak/labeled tokens {}, strong tokens {}",
                    m.weak_seq_len.unwrap_or(0),
                    m.strong_seq_len.unwrap_or(0)
                ));
            }
            runs.push(RunManifest::path(&c.output_dir));
        }
    }
    let rows: Vec<SuiteRow> = grid
        .iter()
        .zip(acc)
        .zip(notes)
        .map(|((&(dp, cp), a), n)| SuiteRow {
            label: ablation_label(dp, cp),
            columns: vec![("accuracy".into(), Stat::new(a))],
            notes: n,
        })
        .collect();
    let stat = |i: usize| &rows[i].columns[0].1;
    let beats = |i: usize| stat(3).mean - stat(i).mean > stat(3).std.max(stat(i).std);
    let checks = vec![
        Check {
            description: "DP+CP exceeds no DP, CP by more than 1 std".into(),
            holds: beats(1),
        },
        Check {
            description: "DP+CP exceeds no DP, no CP by more than 1 std".into(),
            holds: beats(0),
        },
    ];
    let report = SuiteReport {
        suite: "ablation".into(),
        seeds: seeds.to_vec(),
        rows,
        checks,
        runs,
    };
    report.save(&cfg.output_dir)?;
    Ok(report)
}

pub fn ablation_label(dp: bool, cp: bool) -> String {
    match (dp, cp) {
        (false, false) => "no DP, no CP",
        (false, true) => "no DP, CP",
        (true, false) => "DP, no CP",
        (true, true) => "DP, CP",
    }
    .to_string()
}

/// For each `k`: zero-shot, DP-only and DP+CP accuracy, with `P_d` retrained
/// from scratch on the top-`k` set.
pub fn run_k_sweep(cfg: &ExperimentConfig, ks: &[usize], seeds: &[u64]) -> Result<SuiteReport> {
    require(cfg, Variant::Vl, "k-sweep")?;
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for &k in ks {
        let mut cols = [Vec::new(), Vec::new(), Vec::new()];
        let mut notes = Vec::new();
        for &seed in seeds {
            let c = ExperimentConfig {
                k,
                use_dp: true,
                noisy_dp: false,
                dp_checkpoint: None,
                ..cell(cfg, cfg.output_dir.join(format!("k{k}")).join(format!("seed{seed}")), seed)
            };
            let m = run_experiment(&c, StageSelect::All)?;
            let missing = || FateError::Invalid("k-sweep run is missing an accuracy".into());
            cols[0].push(m.zero_shot_accuracy.ok_or_else(missing)?);
            cols[1].push(m.dp_only_accuracy.ok_or_else(missing)?);
            cols[2].push(accuracy_of(&m)?);
            if seed == seeds[0] {
                notes.extend(m.pseudo_label_warnings.iter().cloned());
                if let Some(a) = m.pseudo_label_accuracy {
                    notes.push(format!("top-k pseudo-label accuracy {a:.4}"));
                }
            }
            runs.push(RunManifest::path(&c.output_dir));
        }
        let [zs, dp, dpcp] = cols;
        rows.push(SuiteRow {
            label: format!("k={k}"),
            columns: vec![
                ("zero_shot".into(), Stat::new(zs)),
                ("dp_only".into(), Stat::new(dp)),
                ("dp_cp".into(), Stat::new(dpcp)),
            ],
            notes,
        });
    }
    let mut checks = Vec::new();
    for row in &rows {
        let m = |n: &str| row.column(n).map(|s| s.mean).unwrap_or(f64::NAN);
        checks.push(Check {
            description: format!("{}: DP-only >= zero-shot", row.label),
            holds: m("dp_only") >= m("zero_shot"),
        });
        checks.push(Check {
            description: format!("{}: DP+CP >= DP-only", row.label),
            holds: m("dp_cp") >= m("dp_only"),
        });
    }
    let report = SuiteReport {
        suite: "k-sweep".into(),
        seeds: seeds.to_vec(),
        rows,
        checks,
        runs,
    };
    report.save(&cfg.output_dir)?;
    Ok(report)
}

/// The classification stage with and without `P_d` on the strong branch,
/// from one adaptation checkpoint per seed.
pub fn run_dp_placement(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<SuiteReport> {
    require(cfg, Variant::Vision, "placement")?;
    let modes = [(false, "DP not on strong branch"), (true, "DP on strong branch")];
    let mut acc = [Vec::new(), Vec::new()];
    let mut notes = [Vec::new(), Vec::new()];
    let mut runs = Vec::new();
    for &seed in seeds {
        let (ckpt, adapt) = adapt_once(cfg, seed)?;
        runs.push(RunManifest::path(&adapt.config.output_dir));
        for (i, &(on_strong, _)) in modes.iter().enumerate() {
            let c = ExperimentConfig {
                use_dp: true,
                noisy_dp: false,
                dp_on_strong_branch: on_strong,
                dp_checkpoint: Some(ckpt.clone()),
                ..cell(cfg, cfg.output_dir.join(format!("seed{seed}")).join(format!("strong_{on_strong}")), seed)
            };
            let m = run_experiment(&c, StageSelect::Classify)?;
            acc[i].push(accuracy_of(&m)?);
            notes[i].push(format!(
                "seed {seed}: dp hash {}, strong tokens {}",
                m.dp_hash.clone().unwrap_or_default(),
                m.strong_seq_len.unwrap_or(0)
            ));
            runs.push(RunManifest::path(&c.output_dir));
        }
    }
    let rows: Vec<SuiteRow> = modes
        .iter()
        .zip(acc)
        .zip(notes)
        .map(|((&(_, label), a), n)| SuiteRow {
            label: label.into(),
            columns: vec![("accuracy".into(), Stat::new(a))],
            notes: n,
        })
        .collect();
    let checks = vec![Check {
        description: "DP off the strong branch >= DP on it".into(),
        holds: rows[0].columns[0].1.mean >= rows[1].columns[0].1.mean,
    }];
    let report = SuiteReport {
        suite: "placement".into(),
        seeds: seeds.to_vec(),
        rows,
        checks,
        runs,
    };
    report.save(&cfg.output_dir)?;
    Ok(report)
}

/// Classifier fine-tuning on the labeled samples alone (`lambda = 0`, no
/// `P_c`) with a trained `P_d`, a random frozen `P_d`, and no `P_d`.
pub fn run_noisy_dp_control(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<SuiteReport> {
    require(cfg, Variant::Vision, "noisy-DP control")?;
    let labels = ["w. DP", "w. noisy DP", "w.o. DP"];
    let mut acc = [Vec::new(), Vec::new(), Vec::new()];
    let mut runs = Vec::new();
    for &seed in seeds {
        let (ckpt, adapt) = adapt_once(cfg, seed)?;
        runs.push(RunManifest::path(&adapt.config.output_dir));
        for (i, label) in labels.iter().enumerate() {
            let (use_dp, noisy_dp) = [(true, false), (true, true), (false, false)][i];
            let c = ExperimentConfig {
                use_dp,
                noisy_dp,
                use_cp: false,
                lambda: 0.0,
                dp_checkpoint: Some(ckpt.clone()),
                ..cell(cfg, cfg.output_dir.join(format!("seed{seed}")).join(label.replace([' ', '.'], "_")), seed)
            };
            let m = run_experiment(&c, StageSelect::Classify)?;
            acc[i].push(accuracy_of(&m)?);
            runs.push(RunManifest::path(&c.output_dir));
        }
    }
    let rows: Vec<SuiteRow> = labels
        .iter()
        .zip(acc)
        .map(|(label, a)| SuiteRow {
            label: label.to_string(),
            columns: vec![("accuracy".into(), Stat::new(a))],
            notes: Vec::new(),
        })
        .collect();
    let checks = vec![Check {
        description: "trained DP >= noisy DP".into(),
        holds: rows[0].columns[0].1.mean >= rows[1].columns[0].1.mean,
    }];
    let report = SuiteReport {
        suite: "noisy-dp".into(),
        seeds: seeds.to_vec(),
        rows,
        checks,
        runs,
    };
    report.save(&cfg.output_dir)?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSplit {
    Train,
    Test,
}

impl std::str::FromStr for FeatureSplit {
    type Err = FateError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(FeatureSplit::Train),
            "test" => Ok(FeatureSplit::Test),
            other => Err(FateError::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Classification features of a finished run: mean output `P_c` tokens (or
/// `x_cls` without `P_c`) for the vision variant, the image feature for the
/// vision-language variant.
pub fn run_features(run_dir: &Path, split: FeatureSplit) -> Result<(Tensor<f32>, Vec<usize>)> {
    let manifest = RunManifest::load(run_dir)?;
    let cfg = &manifest.config;
    let ckpt = run_dir.join(CLASSIFY_CHECKPOINT);
    if !ckpt.exists() {
        return Err(FateError::Missing(format!("classification checkpoint {}", ckpt.display())));
    }
    let (enc, mut store) = load_encoders(cfg)?;
    let trained: ParamStore<f32> = load_checkpoint(&ckpt)?;
    store.merge(trained);
    let (train, test) = load_datasets(cfg)?;
    let ds = match split {
        FeatureSplit::Train => train,
        FeatureSplit::Test => test,
    };
    let dp_len = if cfg.use_dp { cfg.dp_len } else { 0 };
    let features = match enc {
        Encoders::Vision(vb) => {
            let cp_len = if cfg.use_cp { cfg.cp_len } else { 0 };
            let model = VisionModel::new(vb, dp_len, cp_len, ds.num_classes())?;
            extract_features(&store, &model, &ds.images)?
        }
        Encoders::Vl(de) => {
            let model = ClipModel::new(de, dp_len, 0, ds.class_names.clone())?;
            model
                .encoder
                .image_features_value(&store, &model.visual_prompts(), &ds.images)?
        }
    };
    Ok((features, ds.labels))
}

/// Writes `features_<split>.csv` (`sample_index,label,f0..f{d-1}`) into the
/// run directory and returns its path.
pub fn export_features(run_dir: &Path, split: FeatureSplit) -> Result<PathBuf> {
    let (features, labels) = run_features(run_dir, split)?;
    let d = features.cols();
    let mut out = String::from("sample_index,label");
    for j in 0..d {
        let _ = write!(out, ",f{j}");
    }
    out.push('\n');
    for (i, &l) in labels.iter().enumerate() {
        let _ = write!(out, "{i},{l}");
        for v in features.row(i) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    let name = match split {
        FeatureSplit::Train => "features_train.csv",
        FeatureSplit::Test => "features_test.csv",
    };
    let path = run_dir.join(name);
    fs::write(&path, out).map_err(|e| FateError::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stat_uses_sample_std() {
        let s = Stat::new(vec![1.0, 2.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.std - 1.0).abs() < 1e-12);
        assert_eq!(Stat::new(vec![0.5]).std, 0.0);
    }

    #[test]
    fn csv_layout() {
        let r = SuiteReport {
            suite: "t".into(),
            seeds: vec![0, 1],
            rows: vec![SuiteRow {
                label: "a".into(),
                columns: vec![("acc".into(), Stat::new(vec![0.5, 1.0]))],
                notes: vec![],
            }],
            checks: vec![],
            runs: vec![],
        };
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "label,acc_mean,acc_std,acc_seed0,acc_seed1");
        assert!(lines[1].starts_with("a,0.75,"));
    }
}
