use cso_autodiff::{adam_update, AdamConfig, AdamState, Graph, Tensor};
use rand::seq::SliceRandom;

use super::checkpoint::{Checkpoint, EpochRecord};
use super::network::{build_network, param_name, LossNodes, ModelConfig, StageParams, STAGE_PARAM_NAMES};
use crate::error::{Error, Result};
use crate::imaging::SteeringMatrix;
use crate::linalg::DenseMatrix;
use crate::rng::{derive_seed, rng_from_seed};
use crate::scenegen::{Dataset, Record, Split};
use crate::solvers::{estimate_step_size, fit_linear_init, Ridge};

#[derive(Clone, Debug, PartialEq)]
pub enum TrainStatus {
    Completed,
    /// Training stopped on a non-finite loss or gradient; the checkpoint holds
    /// the parameters from before the failing batch.
    Aborted { epoch: usize, batch: usize, reason: String },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub status: TrainStatus,
}

/// Least-squares initializer from the training split, measurements and truths
/// stacked as columns.
pub fn fit_dataset_init(records: &[Record]) -> Result<DenseMatrix> {
    let Some(first) = records.first() else {
        return Err(Error::Config("no training records".into()));
    };
    let (uv, l, m) = (first.observed.pixels.len(), first.truth.values.len(), records.len());
    let z = DenseMatrix::from_fn(uv, m, |r, c| records[c].observed.pixels[r]);
    let s = DenseMatrix::from_fn(l, m, |r, c| records[c].truth.values[r]);
    Ok(fit_linear_init(&z, &s, Ridge::Auto)?.q)
}

struct Sample {
    z: Tensor,
    s: Tensor,
}

fn to_samples(records: &[Record], scale: f64) -> Result<Vec<Sample>> {
    records
        .iter()
        .map(|r| {
            let z = Tensor::new(
                &[r.observed.pixels.len(), 1],
                r.observed.pixels.iter().map(|v| v / scale).collect(),
            )?;
            let s = Tensor::new(
                &[r.truth.values.len(), 1],
                r.truth.values.iter().map(|v| v / scale).collect(),
            )?;
            Ok(Sample { z, s })
        })
        .collect()
}

fn sample_loss(graph: &mut Graph, nodes: &LossNodes, sample: &Sample) -> Result<(f64, f64)> {
    graph.bind("z", &sample.z)?;
    graph.bind("truth", &sample.s)?;
    graph.run()?;
    let loss = graph.value(nodes.total).item();
    let constraint = nodes.constraint.map(|id| graph.value(id).item()).unwrap_or(0.0);
    Ok((loss, constraint))
}

fn evaluate(graph: &mut Graph, nodes: &LossNodes, samples: &[Sample]) -> Result<(f64, f64)> {
    let (mut loss, mut cons) = (0.0, 0.0);
    for s in samples {
        let (l, c) = sample_loss(graph, nodes, s)?;
        loss += l;
        cons += c;
    }
    let n = samples.len().max(1) as f64;
    Ok((loss / n, cons / n))
}

/// Trains from the dataset's train split and reports per-epoch validation loss.
/// Single-threaded and deterministic for a fixed seed.
pub fn train(dataset: &Dataset, config: &ModelConfig, steering: &SteeringMatrix) -> Result<TrainOutcome> {
    config.validate()?;
    if config.grid_factor != dataset.grid_factor() || steering.factor != config.grid_factor {
        return Err(Error::Config(format!(
            "model grid factor {}, dataset {}, steering matrix {}",
            config.grid_factor,
            dataset.grid_factor(),
            steering.factor
        )));
    }
    let train_records = dataset.load(Split::Train)?;
    let val_records = dataset.load(Split::Val)?;
    let sensor = dataset.sensor();
    let grid = (sensor.width_px * config.grid_factor, sensor.height_px * config.grid_factor);

    let q_init = fit_dataset_init(&train_records)?;
    let rho = estimate_step_size(&steering.matrix)?;
    let mut rng = rng_from_seed(config.rng_seed);
    let stages: Vec<StageParams> = (0..config.num_stages)
        .map(|_| StageParams::init(config, rho, &mut rng))
        .collect();

    let scale = config.intensity_scale;
    let train_set = to_samples(&train_records, scale)?;
    let val_set = to_samples(&val_records, scale)?;
    drop((train_records, val_records));

    let mut net = build_network(config, &steering.matrix, &q_init, grid.0, grid.1, &stages, true)?;
    let nodes = net.loss.clone().expect("training graph has a loss");
    let graph = &mut net.graph;
    let mut params: Vec<(String, Tensor)> = graph
        .params()
        .map(|(_, n, t)| (n.to_string(), t.clone()))
        .collect();
    let adam_cfg = AdamConfig {
        lr: config.learning_rate,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new();
    let mut trace = Vec::new();
    let mut status = TrainStatus::Completed;

    let snapshot = |params: &[(String, Tensor)], trace: &[EpochRecord]| -> Result<Checkpoint> {
        let mut stages = Vec::with_capacity(config.num_stages);
        let mut it = params.iter();
        for k in 0..config.num_stages {
            let mut list = Vec::with_capacity(STAGE_PARAM_NAMES.len());
            for field in STAGE_PARAM_NAMES {
                let (name, t) = it.next().expect("parameter count");
                debug_assert_eq!(*name, param_name(k, field));
                list.push(t.clone());
            }
            stages.push(StageParams::from_tensors(list)?);
        }
        Ok(Checkpoint {
            config: config.clone(),
            fingerprint: steering.fingerprint(),
            grid,
            q_init: q_init.clone(),
            stages,
            trace: trace.to_vec(),
        })
    };

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    'epochs: for epoch in 1..=config.epochs {
        let mut shuffle_rng = rng_from_seed(derive_seed(config.rng_seed, epoch as u64));
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let mut sums: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
            for &i in batch {
                let (loss, _) = sample_loss(graph, &nodes, &train_set[i])?;
                if !loss.is_finite() {
                    status = TrainStatus::Aborted {
                        epoch,
                        batch: b,
                        reason: format!("non-finite loss on training sample {i}"),
                    };
                    break 'epochs;
                }
                epoch_loss += loss;
                graph.backward(nodes.total)?;
                for (acc, (_, g)) in sums.iter_mut().zip(graph.param_grads()) {
                    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += v;
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            let grads: Vec<(String, Tensor)> = params
                .iter()
                .zip(sums)
                .map(|((n, _), mut t)| {
                    t.data_mut().iter_mut().for_each(|v| *v *= inv);
                    (n.clone(), t)
                })
                .collect();
            if let Err(e) = adam_update(&mut params, &grads, &mut adam, &adam_cfg) {
                status = TrainStatus::Aborted {
                    epoch,
                    batch: b,
                    reason: e.to_string(),
                };
                break 'epochs;
            }
            for (name, t) in &params {
                graph.set_value(name, t)?;
            }
        }
        let (val_loss, val_constraint) = evaluate(graph, &nodes, &val_set)?;
        let record = EpochRecord {
            epoch,
            train_loss: epoch_loss / train_set.len().max(1) as f64,
            val_loss,
            val_constraint,
        };
        log::info!(
            "epoch {epoch}: train loss {:.6e}, val loss {:.6e}",
            record.train_loss,
            record.val_loss
        );
        trace.push(record);
        if !val_loss.is_finite() {
            status = TrainStatus::Aborted {
                epoch,
                batch: 0,
                reason: "non-finite validation loss".into(),
            };
            break;
        }
    }
    Ok(TrainOutcome {
        checkpoint: snapshot(&params, &trace)?,
        status,
    })
}
