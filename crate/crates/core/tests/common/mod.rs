#![allow(dead_code)]

use imbacon::data::{build_views, generate_blobs, LabeledDataset, ViewBatch};
use imbacon::encoder::{Backend, EncoderParams};
use imbacon::losses::{LossConfig, LossContext, LossKind, LossPlan, PrototypePair};
use imbacon::sphere::{Mat, RngStream};

pub const INPUT_DIM: usize = 6;
pub const OUTPUT_DIM: usize = 8;

pub struct Case {
    pub data: LabeledDataset,
    pub batch: ViewBatch,
    pub params: EncoderParams,
    pub prototypes: PrototypePair,
}

/// A random batch of `b` samples (both classes present) with randomly
/// initialized encoder parameters.
pub fn case(mlp: bool, b: usize, seed: u64) -> Case {
    let mut rng = RngStream::new(seed, 100);
    let data = generate_blobs(4 * b.max(4), 0.25, INPUT_DIM, 3.0, 1.0, &mut rng).unwrap();
    let minority = data.indices_of(data.minority());
    let majority = data.indices_of(data.majority());
    let k_min = (b / 4).max(1);
    let mut ids: Vec<usize> = rng.choose_distinct(minority.len(), k_min).into_iter().map(|i| minority[i]).collect();
    ids.extend(rng.choose_distinct(majority.len(), b - k_min).into_iter().map(|i| majority[i]));
    rng.shuffle(&mut ids);
    let batch = build_views(&data, &ids, 0.1, &mut rng).unwrap();
    let backend = if mlp {
        Backend::Mlp {
            input: INPUT_DIM,
            hidden: vec![7, 6],
            output: OUTPUT_DIM,
        }
    } else {
        Backend::FreeTable {
            views: 2 * data.len(),
            dim: OUTPUT_DIM,
        }
    };
    let params = EncoderParams::standard(&backend, &mut rng).unwrap();
    let prototypes = PrototypePair::from_majority(rng.unit_vec(OUTPUT_DIM)).unwrap();
    Case {
        data,
        batch,
        params,
        prototypes,
    }
}

pub fn loss_config(kind: LossKind, tau: f64) -> LossConfig {
    LossConfig {
        theta_min: 0.5,
        theta_maj: 0.5,
        k: 2,
        lambda: 0.7,
        gate: 0.2,
        ..LossConfig::new(kind, tau)
    }
}

pub fn context(kind: LossKind, case: &Case) -> LossContext {
    let ctx = LossContext::new(case.data.minority());
    if kind.uses_prototypes() {
        ctx.with_prototypes(case.prototypes.clone())
    } else {
        ctx
    }
}

pub fn plan(kind: LossKind, tau: f64, case: &Case, seed: u64) -> LossPlan {
    let mut rng = RngStream::new(seed, 5);
    LossPlan::build(
        &loss_config(kind, tau),
        case.batch.labels(),
        case.batch.partner(),
        &context(kind, case),
        &mut rng,
    )
    .unwrap()
}

/// `n` random points on the unit sphere in `d` dimensions.
pub fn random_unit(n: usize, d: usize, rng: &mut RngStream) -> Mat {
    let rows: Vec<Vec<f64>> = (0..n).map(|_| rng.unit_vec(d)).collect();
    Mat::from_rows(&rows).unwrap()
}

/// Labels and interleaved partners for `n` views with roughly `frac` minority.
pub fn labels_and_partners(n: usize, frac: f64, rng: &mut RngStream) -> (Vec<u8>, Vec<usize>) {
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n / 2 {
        let l = u8::from(rng.uniform() < frac);
        labels.extend([l, l]);
    }
    (labels, (0..n).map(|i| i ^ 1).collect())
}
