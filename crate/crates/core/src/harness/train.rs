use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{BackendKind, InitMode, Reduction, RunConfig, Schedule};
use crate::data::{build_views, sample_batch, BlobGeometry, LabeledDataset, ViewBatch};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::losses::{place_prototypes, LossContext, LossPlan, PrototypePair};
use crate::metrics::{full_report, MetricReport};
use crate::probe::{probe_protocol, ProbeResult};
use crate::sphere::{norm, streams, Mat, RngStream};
use crate::theory::{detect_collapse, measure_epsilon, verify_bound, BoundEvaluation, CollapseVerdict};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Loss per anchor, averaged over the epoch's steps.
    pub loss: f64,
    /// Mean `||∂L/∂w||` over every view seen in the epoch.
    pub grad_norm: f64,
    pub grad_norm_minority: Option<f64>,
    pub grad_norm_majority: Option<f64>,
    /// Largest pairwise distance within the epoch's last batch.
    pub epsilon: f64,
    /// Steps whose batch held no minority view.
    pub empty_minority_batches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSummary {
    pub epsilon: f64,
    pub premise_violated: bool,
    pub anchors: usize,
    pub all_satisfied_proof: bool,
    pub all_satisfied_theorem: bool,
    pub min_slack_proof: f64,
    pub mean_grad_norm_minority: Option<f64>,
    pub mean_grad_norm_majority: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config: RunConfig,
    pub epochs: Vec<EpochLog>,
    pub metrics: MetricReport,
    pub probe: ProbeResult,
    pub collapse: CollapseVerdict,
    pub bound: Option<BoundSummary>,
    pub prototypes: Option<PrototypePair>,
}

/// Embeddings of the evaluation views, two per training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalViews {
    pub view_ids: Vec<usize>,
    pub sample_ids: Vec<usize>,
    pub labels: Vec<u8>,
    pub z: Mat,
}

impl EvalViews {
    /// Pairs the two views sharing a sample id.
    pub fn partner(&self) -> Result<Vec<usize>> {
        let mut by_sample: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (i, &s) in self.sample_ids.iter().enumerate() {
            by_sample.entry(s).or_default().push(i);
        }
        let mut partner = vec![usize::MAX; self.sample_ids.len()];
        for (s, views) in by_sample {
            if views.len() != 2 {
                return Err(Error::batch(format!(
                    "sample {s} has {} views, expected 2",
                    views.len()
                )));
            }
            partner[views[0]] = views[1];
            partner[views[1]] = views[0];
        }
        Ok(partner)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        let mut header = vec!["view_id".to_string(), "sample_id".into(), "label".into()];
        header.extend((0..self.z.cols()).map(|k| format!("z{k}")));
        w.write_record(&header)?;
        for i in 0..self.z.rows() {
            let mut rec = vec![
                self.view_ids[i].to_string(),
                self.sample_ids[i].to_string(),
                self.labels[i].to_string(),
            ];
            rec.extend(self.z.row(i).iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads an embeddings CSV; rows are normalized on load.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut out = EvalViews {
            view_ids: Vec::new(),
            sample_ids: Vec::new(),
            labels: Vec::new(),
            z: Mat::zeros(0, 0),
        };
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() < 5 {
                return Err(Error::batch("embeddings rows need view_id, sample_id, label and >= 2 coordinates"));
            }
            let parse = |k: usize| -> Result<f64> {
                rec[k]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::batch(format!("column {k}: {e}")))
            };
            out.view_ids.push(parse(0)? as usize);
            out.sample_ids.push(parse(1)? as usize);
            out.labels.push(parse(2)? as u8);
            rows.push((3..rec.len()).map(parse).collect::<Result<Vec<_>>>()?);
        }
        let w = Mat::from_rows(&rows)?;
        out.z = crate::sphere::normalize_rows(&w)?.0;
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub record: RunRecord,
    pub params: EncoderParams,
    pub eval: EvalViews,
    pub wall_seconds: f64,
}

#[derive(Serialize)]
struct DivergenceDump<'a> {
    epoch: usize,
    step: usize,
    loss: f64,
    sample_ids: &'a [usize],
    labels: &'a [u8],
    views: &'a Mat,
}

fn lr_at(cfg: &RunConfig, epoch: usize, step: usize, steps: usize) -> f64 {
    let o = &cfg.optim;
    match o.schedule {
        Schedule::Constant => o.lr,
        Schedule::Cosine { warmup_epochs } => {
            let t = (epoch - 1) as f64 + step as f64 / steps as f64;
            let warm = warmup_epochs as f64;
            if t < warm {
                o.lr * (0.1 + 0.9 * t / warm)
            } else {
                let span = (o.epochs as f64 - warm).max(1.0);
                0.5 * o.lr * (1.0 + (std::f64::consts::PI * (t - warm) / span).cos())
            }
        }
    }
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn prototypes_for(
    cfg: &RunConfig,
    params: &EncoderParams,
    ds: &LabeledDataset,
) -> Result<Option<PrototypePair>> {
    if !cfg.loss.kind.uses_prototypes() {
        return Ok(None);
    }
    let enc = params.encode_inputs(ds.inputs())?;
    place_prototypes(enc.z(), ds.labels(), ds.majority(), &cfg.prototypes.placement).map(Some)
}

/// The training set and the geometry it was drawn from.
pub fn dataset(cfg: &RunConfig) -> Result<(BlobGeometry, LabeledDataset)> {
    let mut rng = RngStream::new(cfg.seeds.data, streams::DATA);
    let d = &cfg.data;
    let geometry = BlobGeometry::new(d.m, d.separation, d.spread, &mut rng)?;
    let ds = geometry.sample(d.n, d.rho, &mut rng)?;
    Ok((geometry, ds))
}

pub fn initial_params(cfg: &RunConfig, ds: &LabeledDataset) -> Result<EncoderParams> {
    let backend = cfg.backend();
    let mut rng = RngStream::new(cfg.seeds.init, streams::INIT);
    match cfg.encoder.init {
        InitMode::NearCollapsed => {
            EncoderParams::init_near_collapsed(&backend, cfg.encoder.eta, Some(ds.inputs()), &mut rng)
        }
        InitMode::Standard => EncoderParams::standard(&backend, &mut rng),
    }
}

/// Evaluates the SupCon gradient bound on `batches` batches drawn at
/// initialization.
pub fn check_bound(config: &RunConfig, batches: usize) -> Result<Vec<BoundEvaluation>> {
    config.validate()?;
    let cfg = config.resolved();
    let (_, ds) = dataset(&cfg)?;
    let params = initial_params(&cfg, &ds)?;
    let mut batch_rng = RngStream::new(cfg.seeds.batch, streams::BATCH);
    let mut aug_rng = RngStream::new(cfg.seeds.augment, streams::AUGMENT);
    (0..batches)
        .map(|_| {
            let batch = sample_batch(
                &ds,
                cfg.optim.batch_size,
                cfg.optim.sampler,
                cfg.sigma_aug(),
                &mut batch_rng,
                &mut aug_rng,
            )?;
            verify_bound(&params.forward(&batch)?, batch.labels(), cfg.loss.tau, cfg.eval.eps_max)
        })
        .collect()
}

/// Trains one configuration end to end. A non-finite loss aborts the run;
/// if `dump_dir` is given the offending batch is written there first.
pub fn train(config: &RunConfig, dump_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let cfg = config.resolved();
    let started = Instant::now();
    let seeds = cfg.seeds;

    let (geometry, ds) = dataset(&cfg)?;
    let minority = ds.minority();
    let mut params = initial_params(&cfg, &ds)?;

    let mut ctx = LossContext::new(minority);
    let mut prototypes = prototypes_for(&cfg, &params, &ds)?;
    ctx.prototypes = prototypes.clone();

    let mut batch_rng = RngStream::new(seeds.batch, streams::BATCH);
    let mut aug_rng = RngStream::new(seeds.augment, streams::AUGMENT);
    let mut loss_rng = RngStream::new(seeds.batch, streams::LOSS);
    let sigma = cfg.sigma_aug();
    let b = cfg.optim.batch_size;
    let steps = cfg.data.n.div_ceil(b);

    let mut flat = params.to_flat();
    let mut velocity = vec![0.0; flat.len()];
    let mut epochs = Vec::with_capacity(cfg.optim.epochs);
    let mut bound = None;

    for epoch in 1..=cfg.optim.epochs {
        if epoch > 1 {
            if let Some(every) = cfg.prototypes.refresh_every {
                if (epoch - 1) % every == 0 {
                    prototypes = prototypes_for(&cfg, &params, &ds)?;
                    ctx.prototypes = prototypes.clone();
                }
            }
        }
        let mut loss_sum = 0.0;
        let mut norms_all = Vec::new();
        let mut norms_min = Vec::new();
        let mut norms_maj = Vec::new();
        let mut empty_minority = 0;
        let mut epsilon = 0.0;
        let mut lr = cfg.optim.lr;

        for step in 0..steps {
            let batch = sample_batch(&ds, b, cfg.optim.sampler, sigma, &mut batch_rng, &mut aug_rng)?;
            let emb = params.forward(&batch)?;
            if epoch == 1 && step == 0 && cfg.eval.verify_bound {
                let eval = verify_bound(&emb, batch.labels(), cfg.loss.tau, cfg.eval.eps_max)?;
                bound = Some(BoundSummary {
                    epsilon: eval.epsilon,
                    premise_violated: eval.premise_violated,
                    anchors: eval.anchors.len(),
                    all_satisfied_proof: eval.all_satisfied_proof,
                    all_satisfied_theorem: eval.all_satisfied_theorem,
                    min_slack_proof: eval.min_slack_proof,
                    mean_grad_norm_minority: eval.mean_grad_norm(minority),
                    mean_grad_norm_majority: eval.mean_grad_norm(1 - minority),
                });
            }
            let plan = LossPlan::build(&cfg.loss, batch.labels(), batch.partner(), &ctx, &mut loss_rng)?;
            let out = plan.evaluate(&emb)?;
            if !out.value.is_finite() || out.grad_w.as_slice().iter().any(|g| !g.is_finite()) {
                let dump = match dump_dir {
                    Some(dir) => Some(write_dump(dir, epoch, step, out.value, &batch)?),
                    None => None,
                };
                return Err(Error::NumericalDivergence { epoch, step, dump });
            }
            let anchors = plan.num_anchors().max(1) as f64;
            loss_sum += out.value / anchors;
            for (i, g) in out.grad_w.iter_rows().enumerate() {
                let gn = norm(g);
                norms_all.push(gn);
                if batch.labels()[i] == minority {
                    norms_min.push(gn);
                } else {
                    norms_maj.push(gn);
                }
            }
            if !batch.labels().contains(&minority) {
                empty_minority += 1;
            }
            if step + 1 == steps {
                epsilon = measure_epsilon(emb.z());
            }

            let scale = match cfg.optim.reduction {
                Reduction::Mean => 1.0 / anchors,
                Reduction::Sum => 1.0,
            };
            let grad = params.backward(&batch, &out.grad_w)?;
            lr = lr_at(&cfg, epoch, step, steps);
            let (mu, wd) = (cfg.optim.momentum, cfg.optim.weight_decay);
            for ((p, v), g) in flat.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                let g = scale * g + wd * *p;
                *v = mu * *v + g;
                *p -= lr * *v;
            }
            params.set_flat(&flat)?;
        }

        epochs.push(EpochLog {
            epoch,
            lr,
            loss: loss_sum / steps as f64,
            grad_norm: mean(&norms_all).unwrap_or(0.0),
            grad_norm_minority: mean(&norms_min),
            grad_norm_majority: mean(&norms_maj),
            epsilon,
            empty_minority_batches: empty_minority,
        });
    }

    let eval = eval_views(&cfg, &params, &ds)?;
    let partner = eval.partner()?;
    let metrics = full_report(&eval.z, &eval.labels, &partner, cfg.eval.r_fraction, cfg.eval.tie_break)?;
    let probe = run_probe(&cfg, &params, &ds, &geometry)?;
    let trajectory: Vec<f64> = epochs.iter().map(|e| e.grad_norm).collect();
    let collapse = detect_collapse(&metrics, &trajectory, cfg.eval.collapse)?;

    let record = RunRecord {
        run_id: cfg.run_id(),
        config: cfg,
        epochs,
        metrics,
        probe,
        collapse,
        bound,
        prototypes,
    };
    Ok(TrainOutcome {
        record,
        params,
        eval,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

fn write_dump(dir: &Path, epoch: usize, step: usize, loss: f64, batch: &ViewBatch) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join("divergence.json");
    let dump = DivergenceDump {
        epoch,
        step,
        loss,
        sample_ids: batch.view_sample_ids(),
        labels: batch.labels(),
        views: batch.views(),
    };
    serde_json::to_writer_pretty(BufWriter::new(File::create(&path)?), &dump)?;
    Ok(path)
}

/// Two views per training sample: the table rows for the free table, fresh
/// augmentations for the MLP.
pub fn eval_views(cfg: &RunConfig, params: &EncoderParams, ds: &LabeledDataset) -> Result<EvalViews> {
    let n = ds.len();
    let sample_ids: Vec<usize> = (0..2 * n).map(|v| v / 2).collect();
    let labels: Vec<u8> = sample_ids.iter().map(|&s| ds.labels()[s]).collect();
    let z = match params {
        EncoderParams::FreeTable { table } => crate::sphere::normalize_rows(table)?.0,
        EncoderParams::Mlp { .. } => {
            let ids: Vec<usize> = (0..n).collect();
            let mut rng = RngStream::new(cfg.seeds.data, streams::EVAL);
            let batch = build_views(ds, &ids, cfg.sigma_aug(), &mut rng)?;
            params.forward(&batch)?.z().clone()
        }
    };
    Ok(EvalViews {
        view_ids: (0..2 * n).collect(),
        sample_ids,
        labels,
        z,
    })
}

fn run_probe(
    cfg: &RunConfig,
    params: &EncoderParams,
    ds: &LabeledDataset,
    geometry: &BlobGeometry,
) -> Result<ProbeResult> {
    let mut rng = RngStream::new(cfg.seeds.probe, streams::PROBE);
    let train_emb = params.encode_inputs(ds.inputs())?;
    match cfg.encoder.backend {
        BackendKind::Mlp => {
            let mut test_rng = RngStream::new(cfg.seeds.data, streams::TEST_DATA);
            let test = geometry.sample(cfg.data.test_n, 0.5, &mut test_rng)?;
            let test_emb = params.encode_inputs(test.inputs())?;
            probe_protocol(
                (train_emb.z(), ds.labels()),
                (test_emb.z(), test.labels()),
                cfg.eval.probe_fraction,
                &cfg.eval.probe,
                &mut rng,
            )
        }
        BackendKind::FreeTable => {
            // Hold out a balanced test split from the training samples.
            let minority = ds.indices_of(ds.minority());
            let majority = ds.indices_of(ds.majority());
            if minority.len() < 4 {
                return Err(Error::InsufficientData {
                    rows: minority.len(),
                    needed: 4,
                });
            }
            let k = ((cfg.data.split_fraction * minority.len() as f64).round() as usize)
                .clamp(2, minority.len() - 2);
            let mut test: Vec<usize> = rng
                .choose_distinct(minority.len(), k)
                .into_iter()
                .map(|i| minority[i])
                .chain(rng.choose_distinct(majority.len(), k).into_iter().map(|i| majority[i]))
                .collect();
            test.sort_unstable();
            let mut held = vec![false; ds.len()];
            test.iter().for_each(|&i| held[i] = true);
            let train: Vec<usize> = (0..ds.len()).filter(|&i| !held[i]).collect();
            let pick = |idx: &[usize]| {
                (
                    train_emb.z().select_rows(idx),
                    idx.iter().map(|&i| ds.labels()[i]).collect::<Vec<u8>>(),
                )
            };
            let (xtr, ytr) = pick(&train);
            let (xte, yte) = pick(&test);
            probe_protocol((&xtr, &ytr), (&xte, &yte), cfg.eval.probe_fraction, &cfg.eval.probe, &mut rng)
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Timing {
    wall_seconds: f64,
}

pub const RECORD_FILE: &str = "record.json";

pub const PARAMS_FILE: &str = "params.json";

/// Writes `record.json`, `metrics.json`, `embeddings.csv`, `params.json` and
/// `timing.json`.
pub fn write_outputs(outcome: &TrainOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    outcome.params.save_json(&dir.join(PARAMS_FILE))?;
    fs::write(dir.join("metrics.json"), serde_json::to_vec_pretty(&outcome.record.metrics)?)?;
    outcome
        .eval
        .write_csv(BufWriter::new(File::create(dir.join("embeddings.csv"))?))?;
    fs::write(
        dir.join("timing.json"),
        serde_json::to_vec_pretty(&Timing {
            wall_seconds: outcome.wall_seconds,
        })?,
    )?;
    // Written last and renamed into place so its presence marks a finished run.
    let tmp = dir.join("record.json.tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(&outcome.record)?)?;
    fs::rename(tmp, dir.join(RECORD_FILE))?;
    Ok(())
}

/// Trains and writes artifacts to `out_root/<run_id>/`.
pub fn run(cfg: &RunConfig, out_root: &Path) -> Result<RunRecord> {
    let dir = out_root.join(cfg.run_id());
    let outcome = train(cfg, Some(&dir))?;
    write_outputs(&outcome, &dir)?;
    Ok(outcome.record)
}

pub fn read_record(path: &Path) -> Result<RunRecord> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}
