use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::train::{read_record, run, RunRecord, RECORD_FILE};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    Imbalance,
    Temperature,
    BatchSize,
    SupervisionFraction,
    LossKind,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Imbalance => "imbalance",
            SweepAxis::Temperature => "temperature",
            SweepAxis::BatchSize => "batch-size",
            SweepAxis::SupervisionFraction => "supervision-fraction",
            SweepAxis::LossKind => "loss-kind",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [
            SweepAxis::Imbalance,
            SweepAxis::Temperature,
            SweepAxis::BatchSize,
            SweepAxis::SupervisionFraction,
            SweepAxis::LossKind,
        ]
        .into_iter()
        .find(|a| a.name() == s)
        .ok_or_else(|| Error::config(format!("unknown sweep axis {s:?}")))
    }

    /// Sets this axis on `cfg`. The supervision fraction is `θ_maj`.
    pub fn apply(self, cfg: &mut RunConfig, value: &str) -> Result<()> {
        let num = || {
            value
                .parse::<f64>()
                .map_err(|_| Error::config(format!("{}: {value:?} is not a number", self.name())))
        };
        match self {
            SweepAxis::Imbalance => cfg.data.rho = num()?,
            SweepAxis::Temperature => cfg.loss.tau = num()?,
            SweepAxis::BatchSize => {
                cfg.optim.batch_size = value
                    .parse()
                    .map_err(|_| Error::config(format!("batch-size: {value:?} is not an integer")))?
            }
            SweepAxis::SupervisionFraction => cfg.loss.theta_maj = num()?,
            SweepAxis::LossKind => cfg.loss.kind = LossKind::parse(value)?,
        }
        cfg.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub axes: Vec<(SweepAxis, Vec<String>)>,
    pub seeds: Vec<u64>,
}

impl SweepGrid {
    pub fn single(axis: SweepAxis, values: &[&str], seeds: &[u64]) -> Self {
        Self {
            axes: vec![(axis, values.iter().map(|v| v.to_string()).collect())],
            seeds: seeds.to_vec(),
        }
    }

    /// Three losses by four imbalance levels by three seeds.
    pub fn default_sweep() -> Self {
        Self {
            axes: vec![
                (
                    SweepAxis::LossKind,
                    vec!["supcon".into(), "sup-minority".into(), "sup-prototypes".into()],
                ),
                (
                    SweepAxis::Imbalance,
                    vec!["0.5".into(), "0.1".into(), "0.05".into(), "0.01".into()],
                ),
            ],
            seeds: vec![0, 1, 2],
        }
    }

    /// Every value combination in row-major order, each with every seed.
    pub fn points(&self) -> Vec<(Vec<(SweepAxis, String)>, u64)> {
        let mut combos: Vec<Vec<(SweepAxis, String)>> = vec![Vec::new()];
        for (axis, values) in &self.axes {
            combos = combos
                .into_iter()
                .flat_map(|c| {
                    values.iter().map(move |v| {
                        let mut c = c.clone();
                        c.push((*axis, v.clone()));
                        c
                    })
                })
                .collect();
        }
        combos
            .into_iter()
            .flat_map(|c| self.seeds.iter().map(move |&s| (c.clone(), s)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub run_id: String,
    pub loss: String,
    pub imbalance: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub theta_maj: f64,
    pub seed: u64,
    pub sad: f64,
    pub saa: f64,
    pub cad: f64,
    pub cac: f64,
    pub gpu: f64,
    pub probe_metric: f64,
}

impl SweepRow {
    pub fn from_record(r: &RunRecord) -> Self {
        let c = &r.config;
        Self {
            run_id: r.run_id.clone(),
            loss: c.loss.kind.name().to_string(),
            imbalance: c.data.rho,
            tau: c.loss.tau,
            batch_size: c.optim.batch_size,
            theta_maj: c.loss.theta_maj,
            seed: c.seeds.data,
            sad: r.metrics.sad,
            saa: r.metrics.saa,
            cad: r.metrics.cad,
            cac: r.metrics.cac,
            gpu: r.metrics.gpu,
            probe_metric: r.probe.balanced_accuracy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepFailure {
    pub run_id: String,
    pub point: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub point: String,
    pub runs: usize,
    pub mean: BTreeMap<String, f64>,
    pub std: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub groups: Vec<GroupSummary>,
    pub failures: Vec<SweepFailure>,
    pub resumed: usize,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub records: Vec<RunRecord>,
    pub summary: SweepSummary,
}

fn point_label(point: &[(SweepAxis, String)]) -> String {
    point
        .iter()
        .map(|(a, v)| format!("{}={v}", a.name()))
        .collect::<Vec<_>>()
        .join(",")
}

/// A named numeric column of a sweep row.
pub(crate) type Column = (&'static str, fn(&SweepRow) -> f64);

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Runs every grid point in parallel, reusing runs whose `record.json`
/// already exists under `out_dir`. Failed runs are reported, not fatal.
/// Writes `sweep.csv` and `summary.json` to `out_dir`.
pub fn sweep(base: &RunConfig, grid: &SweepGrid, out_dir: &Path) -> Result<SweepOutcome> {
    fs::create_dir_all(out_dir)?;
    let points = grid.points();
    let configs: Vec<(String, u64, Result<RunConfig>)> = points
        .iter()
        .map(|(point, seed)| {
            let mut cfg = base.clone().with_seed(*seed);
            let applied = point
                .iter()
                .try_for_each(|(axis, v)| axis.apply(&mut cfg, v))
                .map(|_| cfg);
            (point_label(point), *seed, applied)
        })
        .collect();

    let results = par::map_slice(&configs, |(label, seed, cfg)| {
        let cfg = match cfg {
            Ok(c) => c,
            Err(e) => return (label.clone(), *seed, String::new(), Err(e.to_string()), false),
        };
        let id = cfg.run_id();
        let existing = out_dir.join(&id).join(RECORD_FILE);
        if existing.exists() {
            if let Ok(r) = read_record(&existing) {
                return (label.clone(), *seed, id, Ok(r), true);
            }
        }
        let result = run(cfg, out_dir).map_err(|e| e.to_string());
        (label.clone(), *seed, id, result, false)
    });

    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut groups: BTreeMap<String, Vec<SweepRow>> = BTreeMap::new();
    let mut order = Vec::new();
    let mut resumed = 0;
    for (label, seed, id, result, reused) in results {
        resumed += usize::from(reused);
        match result {
            Ok(r) => {
                if !groups.contains_key(&label) {
                    order.push(label.clone());
                }
                groups.entry(label).or_default().push(SweepRow::from_record(&r));
                records.push(r);
            }
            Err(error) => failures.push(SweepFailure {
                run_id: id,
                point: label,
                seed,
                error,
            }),
        }
    }
    let rows: Vec<SweepRow> = records.iter().map(SweepRow::from_record).collect();
    write_sweep_csv(&rows, &out_dir.join("sweep.csv"))?;

    let summary = SweepSummary {
        groups: order
            .iter()
            .map(|label| {
                let rows = &groups[label];
                let mut mean = BTreeMap::new();
                let mut std = BTreeMap::new();
                let columns: [Column; 6] = [
                    ("sad", |r| r.sad),
                    ("saa", |r| r.saa),
                    ("cad", |r| r.cad),
                    ("cac", |r| r.cac),
                    ("gpu", |r| r.gpu),
                    ("probe_metric", |r| r.probe_metric),
                ];
                for (name, get) in columns {
                    let (m, s) = mean_std(&rows.iter().map(get).collect::<Vec<_>>());
                    mean.insert(name.to_string(), m);
                    std.insert(name.to_string(), s);
                }
                GroupSummary {
                    point: label.clone(),
                    runs: rows.len(),
                    mean,
                    std,
                }
            })
            .collect(),
        failures,
        resumed,
    };
    fs::write(out_dir.join("summary.json"), serde_json::to_vec_pretty(&summary)?)?;
    Ok(SweepOutcome {
        rows,
        records,
        summary,
    })
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(BufWriter::new(File::create(path)?));
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record([
            "run_id", "loss", "imbalance", "tau", "batch_size", "theta_maj", "seed", "sad", "saa", "cad",
            "cac", "gpu", "probe_metric",
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<SweepRow>, _>>()?)
}
