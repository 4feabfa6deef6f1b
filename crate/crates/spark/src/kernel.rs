//! Empirical NTK construction and kernel-based prediction evolution.
//!
//! A client stacks its own sketch with its neighbors' (self first, then
//! neighbors ascending by client id), builds the Gram matrix of the
//! flattened sketch rows (sample-major, class-minor), evolves predictions
//! under cross-entropy with an incremental recurrence, picks the timestep
//! with the lowest validation loss, and maps the accumulated residual back
//! to a sketch-space weight update.

use ndarray::{Array1, Array2, Array3, Axis};

use crate::distill::TargetMatrix;
use crate::error::{Result, SparkError};
use crate::model::{cross_entropy, one_hot, softmax_rows};
use crate::projection::CompressedJacobian;

/// Everything one client contributes to a round: sketch, logits, labels,
/// all row-aligned with `sketch.sample_indices`.
#[derive(Clone, Debug)]
pub struct ClientPayload {
    pub sketch: CompressedJacobian,
    pub logits: Array2<f64>,
    pub labels: Vec<u8>,
}

impl ClientPayload {
    fn check_aligned(&self) -> Result<()> {
        let n = self.sketch.sample_count();
        if self.logits.nrows() != n || self.labels.len() != n {
            return Err(SparkError::protocol(format!(
                "client {}: sketch has {n} rows, logits {}, labels {}",
                self.sketch.owner_client,
                self.logits.nrows(),
                self.labels.len()
            )));
        }
        Ok(())
    }
}

/// Row-stacked sketches with aligned logits and labels.
#[derive(Clone, Debug)]
pub struct AggregatedSketch {
    /// Per layer `N_agg x C x k_l`, same layer order as the inputs.
    pub layers: Vec<(String, Array3<f64>)>,
    /// `(client id, original sample index)` per aggregated row.
    pub row_provenance: Vec<(usize, u32)>,
    /// Sample positions used for fitting (indices into `0..N_agg`).
    pub train_rows: Vec<usize>,
    /// Held-out positions, drawn only from the evolving client's own block.
    pub val_rows: Vec<usize>,
    pub logits: Array2<f64>,
    pub labels: Vec<u8>,
}

impl AggregatedSketch {
    pub fn sample_count(&self) -> usize {
        self.row_provenance.len()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.first().map_or(0, |(_, t)| t.shape()[1])
    }

    pub fn total_width(&self) -> usize {
        self.layers.iter().map(|(_, t)| t.shape()[2]).sum()
    }

    fn select(&self, rows: &[usize]) -> (Array2<f64>, Vec<u8>) {
        let logits = self.logits.select(Axis(0), rows);
        let labels = rows.iter().map(|&r| self.labels[r]).collect();
        (logits, labels)
    }

    pub fn train_logits_labels(&self) -> (Array2<f64>, Vec<u8>) {
        self.select(&self.train_rows)
    }

    pub fn val_logits_labels(&self) -> (Array2<f64>, Vec<u8>) {
        self.select(&self.val_rows)
    }

    /// Flattens the selected sample rows into a `(len(rows) * C) x K_total`
    /// matrix, sample-major and class-minor, layers concatenated along the
    /// column axis in layer order.
    fn flatten_rows(&self, rows: &[usize]) -> Array2<f64> {
        let c = self.num_classes();
        let width = self.total_width();
        let mut out = Array2::zeros((rows.len() * c, width));
        let mut col_off = 0;
        for (_, tensor) in &self.layers {
            let k = tensor.shape()[2];
            for (ri, &s) in rows.iter().enumerate() {
                for cls in 0..c {
                    let src = tensor.slice(ndarray::s![s, cls, ..]);
                    out.slice_mut(ndarray::s![ri * c + cls, col_off..col_off + k])
                        .assign(&src);
                }
            }
            col_off += k;
        }
        out
    }
}

/// Stacks a client's own payload with its neighbors'.
///
/// Neighbors are ordered ascending by client id regardless of arrival
/// order. The validation split takes the trailing `ceil(val_fraction * N)`
/// rows of the client's own block.
pub fn aggregate(
    own: &ClientPayload,
    neighbors: &[&ClientPayload],
    val_fraction: f64,
) -> Result<AggregatedSketch> {
    own.check_aligned()?;
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(SparkError::config(format!(
            "val_fraction {val_fraction} outside [0, 1)"
        )));
    }
    let mut ordered: Vec<&ClientPayload> = neighbors.to_vec();
    ordered.sort_by_key(|p| p.sketch.owner_client);
    let reference: Vec<(String, usize, usize)> = own
        .sketch
        .layers
        .iter()
        .map(|(n, t)| (n.clone(), t.shape()[1], t.shape()[2]))
        .collect();
    for p in &ordered {
        p.check_aligned()?;
        let theirs: Vec<(String, usize, usize)> = p
            .sketch
            .layers
            .iter()
            .map(|(n, t)| (n.clone(), t.shape()[1], t.shape()[2]))
            .collect();
        if theirs != reference {
            return Err(SparkError::protocol(format!(
                "client {} layer table {:?} does not match own {:?}",
                p.sketch.owner_client, theirs, reference
            )));
        }
    }

    let all: Vec<&ClientPayload> = std::iter::once(own).chain(ordered).collect();
    let mut layers = Vec::with_capacity(reference.len());
    for (li, (name, _, _)) in reference.iter().enumerate() {
        let views: Vec<_> = all.iter().map(|p| p.sketch.layers[li].1.view()).collect();
        let stacked = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| SparkError::protocol(format!("stacking {name}: {e}")))?;
        layers.push((name.clone(), stacked));
    }
    let logit_views: Vec<_> = all.iter().map(|p| p.logits.view()).collect();
    let logits = ndarray::concatenate(Axis(0), &logit_views)
        .map_err(|e| SparkError::protocol(format!("stacking logits: {e}")))?;
    let mut row_provenance = Vec::new();
    let mut labels = Vec::new();
    for p in &all {
        for (&idx, &label) in p.sketch.sample_indices.iter().zip(&p.labels) {
            row_provenance.push((p.sketch.owner_client, idx));
            labels.push(label);
        }
    }

    let n_own = own.sketch.sample_count();
    let n_val = ((val_fraction * n_own as f64).ceil() as usize).min(n_own.saturating_sub(1));
    let val_rows: Vec<usize> = (n_own - n_val..n_own).collect();
    let train_rows: Vec<usize> = (0..n_own - n_val)
        .chain(n_own..row_provenance.len())
        .collect();
    if train_rows.is_empty() {
        return Err(SparkError::contract("no training rows after validation split".to_string()));
    }

    Ok(AggregatedSketch { layers, row_provenance, train_rows, val_rows, logits, labels })
}

/// Dense train kernel and validation cross-kernel.
#[derive(Clone, Debug)]
pub struct KernelMatrix {
    /// `(N_train * C) x (N_train * C)` Gram matrix, symmetric.
    pub train: Array2<f64>,
    /// `(N_val * C) x (N_train * C)` cross-kernel.
    pub cross: Array2<f64>,
}

pub const DEFAULT_KERNEL_MEM_CAP: usize = 2 * 1024 * 1024 * 1024;

/// Builds the empirical NTK over the aggregated sketch rows.
pub fn build_kernel(agg: &AggregatedSketch, mem_cap_bytes: usize) -> Result<KernelMatrix> {
    let c = agg.num_classes();
    let t = agg.train_rows.len() * c;
    let v = agg.val_rows.len() * c;
    let needed = (t * t + v * t) * std::mem::size_of::<f64>();
    if needed > mem_cap_bytes {
        return Err(SparkError::Resource(format!(
            "kernel would need {needed} bytes for {t} train rows (cap {mem_cap_bytes}); \
             lower the batch size or sample fraction"
        )));
    }
    let m_train = agg.flatten_rows(&agg.train_rows);
    let mut train = m_train.dot(&m_train.t());
    // enforce exact symmetry against blocked-gemm roundoff
    for i in 0..t {
        for j in 0..i {
            let avg = 0.5 * (train[[i, j]] + train[[j, i]]);
            train[[i, j]] = avg;
            train[[j, i]] = avg;
        }
    }
    let cross = if v == 0 {
        Array2::zeros((0, t))
    } else {
        agg.flatten_rows(&agg.val_rows).dot(&m_train.t())
    };
    Ok(KernelMatrix { train, cross })
}

/// Prediction trajectory with the validation-selected stopping step.
#[derive(Clone, Debug)]
pub struct EvolutionResult {
    /// `f_0 .. f_T` on training rows (`N_train x C` each).
    pub train_trajectory: Vec<Array2<f64>>,
    /// `f_0 .. f_T` on validation rows.
    pub val_trajectory: Vec<Array2<f64>>,
    /// Selected step, in `[1, steps_taken]`.
    pub t_star: usize,
    /// `sum_{s < t_star} softmax(f_s)` on training rows.
    pub residual_sum: Array2<f64>,
    /// Validation cross-entropy at each step `t = 1..=steps_taken`.
    pub val_losses: Vec<f64>,
    /// Steps actually taken (shorter than requested if the guard fired).
    pub steps_taken: usize,
}

const DIVERGENCE_LIMIT: f64 = 1e6;

/// Evolves predictions by `f_{t+1} = f_t + eta * K (Y - softmax(f_t))`,
/// advancing validation predictions with the cross-kernel and the same
/// train-row residuals. `t_star` minimizes validation cross-entropy
/// against hard validation labels (ties to the smallest step); without
/// validation rows the full horizon is used.
pub fn evolve(
    kernel: &KernelMatrix,
    f0_train: &Array2<f64>,
    f0_val: &Array2<f64>,
    y_target: &TargetMatrix,
    val_labels: &[u8],
    eta: f64,
    t_evolve: usize,
) -> Result<EvolutionResult> {
    if eta <= 0.0 {
        return Err(SparkError::config(format!("eta {eta} must be positive")));
    }
    if t_evolve == 0 {
        return Err(SparkError::config("t_evolve must be at least 1".to_string()));
    }
    let (n_train, c) = f0_train.dim();
    if y_target.rows.dim() != (n_train, c) {
        return Err(SparkError::contract(format!(
            "target shape {:?} does not match train predictions {:?}",
            y_target.rows.dim(),
            f0_train.dim()
        )));
    }
    if kernel.train.nrows() != n_train * c {
        return Err(SparkError::contract(format!(
            "kernel size {} does not match {} train entries",
            kernel.train.nrows(),
            n_train * c
        )));
    }
    let n_val = f0_val.nrows();
    let val_hard = one_hot(val_labels, c);

    let mut train_trajectory = vec![f0_train.clone()];
    let mut val_trajectory = vec![f0_val.clone()];
    let mut softmax_snapshots: Vec<Array2<f64>> = Vec::with_capacity(t_evolve);
    let mut val_losses = Vec::with_capacity(t_evolve);

    let mut f_train = f0_train.clone();
    let mut f_val = f0_val.clone();
    let mut steps_taken = 0;
    for _ in 0..t_evolve {
        let s = softmax_rows(&f_train.view());
        let residual_flat = (&y_target.rows - &s)
            .into_shape_with_order(n_train * c)
            .expect("contiguous residual");
        let delta = kernel.train.dot(&residual_flat) * eta;
        let next_train = &f_train
            + &delta
                .into_shape_with_order((n_train, c))
                .expect("delta shape");
        let next_val = if n_val > 0 {
            let delta_val = kernel.cross.dot(
                &(&y_target.rows - &s)
                    .into_shape_with_order(n_train * c)
                    .expect("contiguous residual"),
            ) * eta;
            &f_val
                + &delta_val
                    .into_shape_with_order((n_val, c))
                    .expect("val delta shape")
        } else {
            f_val.clone()
        };
        let finite = next_train.iter().chain(next_val.iter()).all(|&x| x.abs() <= DIVERGENCE_LIMIT);
        if !finite {
            break; // truncate at the last finite step
        }
        softmax_snapshots.push(s);
        f_train = next_train;
        f_val = next_val;
        steps_taken += 1;
        train_trajectory.push(f_train.clone());
        val_trajectory.push(f_val.clone());
        let loss = if n_val > 0 {
            cross_entropy(&f_val.view(), &val_hard.view())?
        } else {
            f64::NAN
        };
        val_losses.push(loss);
    }
    if steps_taken == 0 {
        return Err(SparkError::contract(
            "prediction evolution diverged at the first step".to_string(),
        ));
    }

    let t_star = if n_val > 0 {
        let mut best = 0;
        for (i, &l) in val_losses.iter().enumerate() {
            if l < val_losses[best] {
                best = i;
            }
        }
        best + 1
    } else {
        steps_taken
    };

    let mut residual_sum = Array2::zeros((n_train, c));
    for s in softmax_snapshots.iter().take(t_star) {
        residual_sum += s;
    }

    Ok(EvolutionResult {
        train_trajectory,
        val_trajectory,
        t_star,
        residual_sum,
        val_losses,
        steps_taken,
    })
}

/// Sketch-space weight update
/// `-(eta / N_agg) * J~^T (sum_{s<t*} softmax(f_s) - t* Y)`,
/// contracted over training rows and classes, one segment per layer.
pub fn compressed_update(
    agg: &AggregatedSketch,
    evo: &EvolutionResult,
    y_target: &TargetMatrix,
    eta: f64,
) -> Result<Vec<(String, Array1<f64>)>> {
    let c = agg.num_classes();
    let n_train = agg.train_rows.len();
    if evo.residual_sum.dim() != (n_train, c) {
        return Err(SparkError::contract(format!(
            "residual sum shape {:?} does not match {n_train} train rows",
            evo.residual_sum.dim()
        )));
    }
    let n_agg = agg.sample_count() as f64;
    let g = (&evo.residual_sum - &(&y_target.rows * evo.t_star as f64))
        .into_shape_with_order(n_train * c)
        .expect("contiguous update residual");
    let scale = -eta / n_agg;
    let mut out = Vec::with_capacity(agg.layers.len());
    let mut col_off = 0;
    let flat = agg.flatten_rows(&agg.train_rows);
    for (name, tensor) in &agg.layers {
        let k = tensor.shape()[2];
        let cols = flat.slice(ndarray::s![.., col_off..col_off + k]);
        let delta = cols.t().dot(&g) * scale;
        out.push((name.clone(), delta));
        col_off += k;
    }
    Ok(out)
}
