//! Multi-seed comparisons over one configuration axis.

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::train::Trainer;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Pooling,
    Loss,
    Length,
    Strategy,
    Embedding,
}

impl std::str::FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooling" => Ok(Axis::Pooling),
            "loss" => Ok(Axis::Loss),
            "length" => Ok(Axis::Length),
            "strategy" => Ok(Axis::Strategy),
            "embedding" => Ok(Axis::Embedding),
            other => Err(Error::Config(format!(
                "unknown axis `{other}` (pooling|loss|length|strategy|embedding)"
            ))),
        }
    }
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Axis::Pooling => "pooling",
            Axis::Loss => "loss",
            Axis::Length => "length",
            Axis::Strategy => "strategy",
            Axis::Embedding => "embedding",
        })
    }
}

/// A named setting and the config overrides that realize it.
#[derive(Clone, Debug, PartialEq)]
pub struct Setting {
    pub name: String,
    pub overrides: Vec<(&'static str, String)>,
}

fn setting(name: impl Into<String>, overrides: &[(&'static str, &str)]) -> Setting {
    Setting {
        name: name.into(),
        overrides: overrides.iter().map(|&(k, v)| (k, v.to_owned())).collect(),
    }
}

impl Axis {
    pub fn settings(self) -> Vec<Setting> {
        match self {
            Axis::Pooling => ["gap", "gmp", "both"]
                .into_iter()
                .flat_map(|p| {
                    [
                        setting(p, &[("model.pool", p), ("model.gb", "off")]),
                        setting(format!("{p}+gb"), &[("model.pool", p), ("model.gb", "on")]),
                    ]
                })
                .collect(),
            Axis::Loss => vec![
                setting("cmpm", &[("loss.cmpm", "on"), ("loss.cmpc", "off")]),
                setting("cmpc", &[("loss.cmpm", "off"), ("loss.cmpc", "on")]),
                setting("both", &[("loss.cmpm", "on"), ("loss.cmpc", "on")]),
            ],
            Axis::Length => [40, 60, 80, 100, 120]
                .into_iter()
                .map(|l| setting(l.to_string(), &[("text.len", &l.to_string())]))
                .collect(),
            Axis::Strategy => (1..=4)
                .map(|s| setting(s.to_string(), &[("train.strategy", &s.to_string())]))
                .collect(),
            Axis::Embedding => [50, 100, 200, 300, 768]
                .into_iter()
                .map(|d| setting(d.to_string(), &[("text.embed_dim", &d.to_string())]))
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunResult {
    pub seed: u64,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub axis: Axis,
    pub setting: String,
    pub runs: Vec<RunResult>,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl AblationRow {
    fn column(&self, f: impl Fn(&RunResult) -> f64) -> Vec<f64> {
        self.runs.iter().map(f).collect()
    }

    pub fn median_rank1(&self) -> f64 {
        median(&self.column(|r| r.rank1))
    }

    pub fn median_rank5(&self) -> f64 {
        median(&self.column(|r| r.rank5))
    }

    pub fn median_rank10(&self) -> f64 {
        median(&self.column(|r| r.rank10))
    }

    pub fn mean_rank1(&self) -> f64 {
        let v = self.column(|r| r.rank1);
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }
}

pub const ABLATION_HEADER: &str =
    "axis,setting,seeds,median_rank1,median_rank5,median_rank10,mean_rank1,per_seed_rank1,per_seed_rank5";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let join = |f: &dyn Fn(&RunResult) -> f64| {
            r.runs.iter().map(|x| f(x).to_string()).collect::<Vec<_>>().join(";")
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.axis,
            r.setting,
            r.runs.len(),
            r.median_rank1(),
            r.median_rank5(),
            r.median_rank10(),
            r.mean_rank1(),
            join(&|x| x.rank1),
            join(&|x| x.rank5),
        ));
    }
    out
}

/// Trains `base` with `overrides` and the given seed, then scores the test split.
pub fn train_and_score(base: &RunConfig, overrides: &[(&str, String)], seed: u64, data: &Dataset) -> Result<RunResult> {
    let mut cfg = base.clone();
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.set("seed", &seed.to_string())?;
    cfg.validate()?;
    let mut trainer = Trainer::new(cfg, data)?;
    trainer.run()?;
    let eval = trainer.evaluate(&data.test)?;
    Ok(RunResult {
        seed,
        rank1: eval.rank(1),
        rank5: eval.rank(5),
        rank10: eval.rank(10),
    })
}

/// Runs every setting of `axis` for seeds `first_seed..first_seed + seeds`.
/// `progress` sees each finished run.
pub fn run_axis(
    axis: Axis,
    base: &RunConfig,
    data: &Dataset,
    first_seed: u64,
    seeds: usize,
    mut progress: impl FnMut(&str, &RunResult),
) -> Result<Vec<AblationRow>> {
    if seeds == 0 {
        return Err(Error::Config("need at least one seed".into()));
    }
    let mut rows = Vec::new();
    for s in axis.settings() {
        let mut runs = Vec::new();
        for k in 0..seeds as u64 {
            let r = train_and_score(base, &s.overrides, first_seed + k, data)?;
            progress(&s.name, &r);
            runs.push(r);
        }
        rows.push(AblationRow {
            axis,
            setting: s.name,
            runs,
        });
    }
    Ok(rows)
}
