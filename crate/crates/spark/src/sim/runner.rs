//! Round-loop orchestration: local Jacobians, message exchange, kernel
//! evolution, back-projection, momentum, metrics.

use std::time::Instant;

use ndarray::{s, Array1};

use crate::data::{self, Dataset, Partition};
use crate::distill::{build_target, DistillSchedule};
use crate::error::{Result, SparkError};
use crate::kernel::{aggregate, build_kernel, compressed_update, evolve, ClientPayload};
use crate::model::{
    cross_entropy, forward, jacobian, one_hot, softmax_rows, MlpArchitecture, WeightVector,
};
use crate::optim::MomentumState;
use crate::projection::{sample_rows, Codec, ProjectionSpec, ProjectionTable};
use crate::rng::{derive_seed, Xoshiro256pp};
use crate::sim::checkpoint::Checkpoint;
use crate::sim::config::RunConfig;
use crate::sim::metrics::RoundMetrics;
use crate::topology::{self, RoundGraph};
use crate::wire;

/// A full run's output.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub metrics: Vec<RoundMetrics>,
    pub final_weights: Vec<Array1<f64>>,
}

/// One client's mutable training state.
#[derive(Clone, Debug)]
struct ClientState {
    weights: Array1<f64>,
    momentum: MomentumState,
}

/// An in-flight simulation; rounds advance one at a time so callers can
/// checkpoint at any boundary.
pub struct Simulation {
    cfg: RunConfig,
    arch: MlpArchitecture,
    schedule: DistillSchedule,
    table: ProjectionTable,
    codec: Codec,
    train_set: Dataset,
    holdout: Dataset,
    partition: Partition,
    clients: Vec<ClientState>,
    seed: u64,
    /// Rounds completed.
    round: usize,
    frozen_graph: Option<RoundGraph>,
}

fn build_datasets(cfg: &RunConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    match cfg.data.source.as_str() {
        "synth" => {
            let c = cfg.model.num_classes;
            let dim = cfg.model.input_dim;
            let train = data::synth_gaussians(
                c,
                cfg.data.synth_samples_per_class,
                dim,
                cfg.data.synth_spread,
                derive_seed(seed, "data", 0, 0),
            )?;
            let holdout = data::synth_gaussians(
                c,
                cfg.data.synth_holdout_per_class,
                dim,
                cfg.data.synth_spread,
                derive_seed(seed, "data", 1, 0),
            )?;
            Ok((train, holdout))
        }
        "idx" => {
            let mut train = data::load_idx(
                cfg.data.train_images.as_ref().expect("validated"),
                cfg.data.train_labels.as_ref().expect("validated"),
            )?;
            let holdout = data::load_idx(
                cfg.data.test_images.as_ref().expect("validated"),
                cfg.data.test_labels.as_ref().expect("validated"),
            )?;
            if cfg.data.train_limit > 0 && cfg.data.train_limit < train.len() {
                let n = cfg.data.train_limit;
                train.images = train.images.slice(s![..n, ..]).to_owned();
                train.labels.truncate(n);
            }
            if train.input_dim() != cfg.model.input_dim {
                return Err(SparkError::config(format!(
                    "dataset dimension {} but model.input_dim {}",
                    train.input_dim(),
                    cfg.model.input_dim
                )));
            }
            Ok((train, holdout))
        }
        other => Err(SparkError::config(format!("unknown data source {other:?}"))),
    }
}

/// Positions within a shard for the given round: a fresh without-replacement
/// pass per epoch, derived statelessly so resumption needs no RNG state.
fn minibatch_positions(
    shard_len: usize,
    batch: usize,
    round: usize,
    seed: u64,
    client: usize,
) -> Vec<usize> {
    let b = batch.min(shard_len);
    let perm = |epoch: usize| {
        let mut p: Vec<usize> = (0..shard_len).collect();
        let mut rng = Xoshiro256pp::from_seed_u64(derive_seed(
            seed,
            "batch",
            client as u64,
            epoch as u64,
        ));
        rng.shuffle(&mut p);
        p
    };
    let start = (round - 1) * b;
    let epoch = start / shard_len;
    let offset = start % shard_len;
    let mut out = Vec::with_capacity(b);
    let first = perm(epoch);
    out.extend_from_slice(&first[offset..shard_len.min(offset + b)]);
    if out.len() < b {
        let second = perm(epoch + 1);
        out.extend_from_slice(&second[..b - out.len()]);
    }
    out
}

impl Simulation {
    pub fn new(cfg: &RunConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let arch = cfg.model.architecture();
        let schedule = cfg.effective_schedule()?;
        let spec = ProjectionSpec::new(
            derive_seed(seed, "projection", 0, 0),
            cfg.projection.k,
            cfg.effective_mode()?,
            &arch.layer_table(),
        )?;
        let table = ProjectionTable::new(spec)?;
        let codec = cfg.projection.parsed_codec()?;
        let (train_set, holdout) = build_datasets(cfg, seed)?;
        let partition_seed = cfg
            .data
            .partition_seed
            .unwrap_or_else(|| derive_seed(seed, "partition", 0, 0));
        let partition =
            data::dirichlet_partition(&train_set, cfg.train.clients, cfg.data.alpha, partition_seed)?;
        let mu = cfg.effective_mu();
        let d = arch.param_count();
        let clients = (0..cfg.train.clients)
            .map(|i| {
                let init_seed = if cfg.train.shared_init {
                    derive_seed(seed, "init", 0, 0)
                } else {
                    derive_seed(seed, "init", i as u64, 0)
                };
                let mut rng = Xoshiro256pp::from_seed_u64(init_seed);
                Ok(ClientState {
                    weights: WeightVector::glorot_init(&arch, &mut rng).flatten(),
                    momentum: MomentumState::new(d, mu)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            arch,
            schedule,
            table,
            codec,
            train_set,
            holdout,
            partition,
            clients,
            seed,
            round: 0,
            frozen_graph: None,
        })
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn weights(&self) -> Vec<Array1<f64>> {
        self.clients.iter().map(|c| c.weights.clone()).collect()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            round: self.round,
            seed: self.seed,
            weights: self.clients.iter().map(|c| c.weights.clone()).collect(),
            velocities: self.clients.iter().map(|c| c.momentum.velocity.clone()).collect(),
        }
    }

    /// Rebuilds a simulation from a checkpoint taken under the same config.
    pub fn restore(cfg: &RunConfig, cp: &Checkpoint) -> Result<Self> {
        let mut sim = Self::new(cfg, cp.seed)?;
        if cp.weights.len() != sim.clients.len() {
            return Err(SparkError::Checkpoint(format!(
                "checkpoint has {} clients, config {}",
                cp.weights.len(),
                sim.clients.len()
            )));
        }
        let d = sim.arch.param_count();
        for (i, (w, v)) in cp.weights.iter().zip(&cp.velocities).enumerate() {
            if w.len() != d {
                return Err(SparkError::Checkpoint(format!(
                    "client {i} weights have dim {}, model has {d}",
                    w.len()
                )));
            }
            sim.clients[i].weights = w.clone();
            sim.clients[i].momentum.velocity = v.clone();
        }
        sim.round = cp.round;
        Ok(sim)
    }

    fn graph_for_round(&mut self, round: usize) -> Result<RoundGraph> {
        let topo_seed = derive_seed(self.seed, "topology-base", 0, 0);
        if self.cfg.train.static_topology {
            if self.frozen_graph.is_none() {
                self.frozen_graph = Some(topology::generate(
                    self.cfg.train.clients,
                    self.cfg.train.degree,
                    0,
                    topo_seed,
                )?);
            }
            let mut g = self.frozen_graph.clone().expect("frozen graph built");
            g.round = round;
            return Ok(g);
        }
        topology::generate(self.cfg.train.clients, self.cfg.train.degree, round, topo_seed)
    }

    /// Executes the next round and returns its metrics.
    pub fn step_round(&mut self) -> Result<RoundMetrics> {
        let started = Instant::now();
        let round = self.round + 1;
        let m = self.cfg.train.clients;
        let c = self.arch.num_classes;
        let graph = self.graph_for_round(round)?;

        // --- local phase: Jacobian, logits, compression, encoding ---
        let mut own_payloads: Vec<ClientPayload> = Vec::with_capacity(m);
        let mut sent_payloads: Vec<ClientPayload> = Vec::with_capacity(m);
        let mut per_client_bytes: Vec<u64> = vec![0; m];
        let mut train_losses = Vec::with_capacity(m);
        for i in 0..m {
            let shard = &self.partition.client_indices[i];
            let positions =
                minibatch_positions(shard.len(), self.cfg.train.batch_size, round, self.seed, i);
            let batch_idx: Vec<usize> = positions.iter().map(|&p| shard[p]).collect();
            let x = self.train_set.images.select(ndarray::Axis(0), &batch_idx);
            let labels: Vec<u8> = batch_idx.iter().map(|&s| self.train_set.labels[s]).collect();
            let w = WeightVector::from_flat(&self.arch, self.clients[i].weights.view())?;
            let logits = forward(&self.arch, &w, &x.view())
                .map_err(|e| with_context(e, i, round))?;
            train_losses.push(cross_entropy(&logits.view(), &one_hot(&labels, c).view())?);
            let jac = jacobian(&self.arch, &w, &x.view(), i)
                .map_err(|e| with_context(e, i, round))?;
            let (jac, logits, indices) = sample_rows(
                &jac,
                &logits,
                self.cfg.projection.sample_fraction,
                derive_seed(self.seed, "row-sample", i as u64, round as u64),
            )?;
            let labels: Vec<u8> = indices.iter().map(|&p| labels[p as usize]).collect();
            let mut cj = self.table.compress(&jac).map_err(|e| with_context(e, i, round))?;
            cj.sample_indices = indices;

            let bytes = wire::comm_bytes(&cj, logits.nrows(), c, self.codec) as u64;
            per_client_bytes[i] = bytes * graph.adjacency[i].len() as u64;

            // what the neighbors see: a wire round-trip through the codec
            let (encoded, _) = wire::encode_wire(&cj, self.codec)?;
            debug_assert_eq!(
                encoded.len(),
                wire::jacobian_message_bytes(&cj, self.codec),
                "encoded length disagrees with the closed form"
            );
            let logits_msg = wire::encode_logits(&logits, &labels)?;
            debug_assert_eq!(
                encoded.len() + logits_msg.len(),
                bytes as usize,
                "byte accounting disagrees with the encoded messages"
            );
            let decoded = wire::decode_wire(&encoded)?;
            let (decoded_logits, decoded_labels) = wire::decode_logits(&logits_msg)?;
            sent_payloads.push(ClientPayload {
                sketch: decoded,
                logits: decoded_logits,
                labels: decoded_labels,
            });
            own_payloads.push(ClientPayload { sketch: cj, logits, labels });
        }

        // --- aggregation + evolution + update phase ---
        let mut new_states = Vec::with_capacity(m);
        let mut t_star_sum = 0.0;
        let mut update_norm_sum = 0.0;
        for i in 0..m {
            let neighbor_payloads: Vec<&ClientPayload> =
                graph.adjacency[i].iter().map(|&j| &sent_payloads[j]).collect();
            let agg = aggregate(&own_payloads[i], &neighbor_payloads, self.cfg.train.val_fraction)
                .map_err(|e| with_context(e, i, round))?;
            let (train_logits, train_labels) = agg.train_logits_labels();
            let (val_logits, val_labels) = agg.val_logits_labels();
            let hard = one_hot(&train_labels, c);
            let target = build_target(&hard.view(), &train_logits.view(), &self.schedule, round)
                .map_err(|e| with_context(e, i, round))?;
            let kernel = build_kernel(&agg, self.cfg.train.kernel_mem_cap_bytes)
                .map_err(|e| with_context(e, i, round))?;
            let evo = evolve(
                &kernel,
                &train_logits,
                &val_logits,
                &target,
                &val_labels,
                self.cfg.train.eta,
                self.cfg.train.t_evolve,
            )
            .map_err(|e| with_context(e, i, round))?;
            let sketch_delta = compressed_update(&agg, &evo, &target, self.cfg.train.eta)?;
            let param_delta = self.table.back_project(&sketch_delta)?;
            let mut flat = Array1::zeros(self.arch.param_count());
            let mut off = 0;
            for (_, seg) in &param_delta {
                flat.slice_mut(s![off..off + seg.len()]).assign(seg);
                off += seg.len();
            }
            t_star_sum += evo.t_star as f64;
            update_norm_sum += flat.dot(&flat).sqrt();
            let mut state = self.clients[i].clone();
            state.momentum.step(&mut state.weights, &flat)?;
            new_states.push(state);
        }
        self.clients = new_states;
        self.round = round;

        // --- evaluation ---
        let (agg_acc, _) = self.evaluate_average()?;
        let mut client_acc_sum = 0.0;
        for i in 0..m {
            let w = WeightVector::from_flat(&self.arch, self.clients[i].weights.view())?;
            let (acc, _) = evaluate(&self.arch, &w, &self.holdout)?;
            client_acc_sum += acc;
        }
        let grad_norm_sq = if self.cfg.train.diagnostics {
            Some(self.probe_grad_norm_sq()?)
        } else {
            None
        };

        Ok(RoundMetrics {
            round,
            aggregated_model_accuracy: agg_acc,
            mean_client_accuracy: client_acc_sum / m as f64,
            mean_train_loss: train_losses.iter().sum::<f64>() / m as f64,
            total_bytes_sent: per_client_bytes.iter().sum(),
            per_client_bytes,
            wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
            graph_connected: topology::is_connected(&graph),
            mean_t_star: t_star_sum / m as f64,
            mean_update_norm: update_norm_sum / m as f64,
            grad_norm_sq,
        })
    }

    fn averaged_weights(&self) -> Array1<f64> {
        let mut avg = Array1::zeros(self.arch.param_count());
        for cstate in &self.clients {
            avg += &cstate.weights;
        }
        avg / self.clients.len() as f64
    }

    /// Holdout accuracy and loss of the uniform weight average.
    pub fn evaluate_average(&self) -> Result<(f64, f64)> {
        let w = WeightVector::from_flat(&self.arch, self.averaged_weights().view())?;
        evaluate(&self.arch, &w, &self.holdout)
    }

    /// `||grad L(w_bar)||^2` on a fixed probe batch (first rows of the
    /// training set), for the optional convergence diagnostic.
    fn probe_grad_norm_sq(&self) -> Result<f64> {
        let n = self.train_set.len().min(32);
        let idx: Vec<usize> = (0..n).collect();
        let x = self.train_set.images.select(ndarray::Axis(0), &idx);
        let labels: Vec<u8> = idx.iter().map(|&s| self.train_set.labels[s]).collect();
        let w = WeightVector::from_flat(&self.arch, self.averaged_weights().view())?;
        let logits = forward(&self.arch, &w, &x.view())?;
        let jac = jacobian(&self.arch, &w, &x.view(), 0)?;
        let residual = softmax_rows(&logits.view()) - one_hot(&labels, self.arch.num_classes);
        let c = self.arch.num_classes;
        let mut grad = Array1::<f64>::zeros(self.arch.param_count());
        let mut off = 0;
        for (_, tensor) in &jac.layers {
            let d_l = tensor.shape()[2];
            let flat = tensor
                .view()
                .into_shape_with_order((n * c, d_l))
                .expect("contiguous jacobian");
            let r = residual
                .view()
                .into_shape_with_order(n * c)
                .expect("contiguous residual");
            grad.slice_mut(s![off..off + d_l]).assign(&(flat.t().dot(&r) / n as f64));
            off += d_l;
        }
        Ok(grad.dot(&grad))
    }
}

fn with_context(e: SparkError, client: usize, round: usize) -> SparkError {
    match e {
        SparkError::Resource(msg) => {
            SparkError::Resource(format!("client {client}, round {round}: {msg}"))
        }
        SparkError::Contract(msg) => {
            SparkError::Contract(format!("client {client}, round {round}: {msg}"))
        }
        SparkError::Protocol(msg) => {
            SparkError::Protocol(format!("client {client}, round {round}: {msg}"))
        }
        other => other,
    }
}

/// Holdout accuracy and mean cross-entropy of a single weight vector.
pub fn evaluate(arch: &MlpArchitecture, w: &WeightVector, holdout: &Dataset) -> Result<(f64, f64)> {
    if holdout.is_empty() {
        return Err(SparkError::contract("empty holdout".to_string()));
    }
    let logits = forward(arch, w, &holdout.images.view())?;
    let mut correct = 0usize;
    for (row, &label) in logits.rows().into_iter().zip(&holdout.labels) {
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (j, &v) in row.iter().enumerate() {
            if v > best.0 {
                best = (v, j);
            }
        }
        if best.1 == label as usize {
            correct += 1;
        }
    }
    let loss = cross_entropy(&logits.view(), &one_hot(&holdout.labels, holdout.num_classes).view())?;
    Ok((correct as f64 / holdout.len() as f64, loss))
}

/// Runs the configured number of rounds for one seed.
pub fn run(cfg: &RunConfig, seed: u64) -> Result<RunResult> {
    let mut sim = Simulation::new(cfg, seed)?;
    let mut metrics = Vec::with_capacity(cfg.train.rounds);
    for _ in 0..cfg.train.rounds {
        metrics.push(sim.step_round()?);
    }
    Ok(RunResult { metrics, final_weights: sim.weights() })
}
