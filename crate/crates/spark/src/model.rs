//! Two-layer MLP: forward pass, cross-entropy, and closed-form per-sample
//! per-class parameter Jacobians.
//!
//! Weight layout is fixed as `w1, b1, w2, b2` with row-major matrices:
//! `w1` is `(hidden, input)`, `w2` is `(classes, hidden)`. Flattened
//! parameter index `p` within a layer follows that row-major order, so
//! Jacobian entry `(n, c, p)` is `d f_c(x_n) / d w_p`.
//!
//! The relu subgradient at zero is taken to be 0.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SparkError};
use crate::rng::Xoshiro256pp;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArchitecture {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub activation: Activation,
}

impl MlpArchitecture {
    pub fn new(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        Self { input_dim, hidden_dim, num_classes, activation: Activation::Relu }
    }

    /// Fashion-MNIST scale network: 784-100-10, d = 79,510.
    pub fn paper_scale() -> Self {
        Self::new(784, 100, 10)
    }

    pub fn param_count(&self) -> usize {
        self.input_dim * self.hidden_dim
            + self.hidden_dim
            + self.hidden_dim * self.num_classes
            + self.num_classes
    }

    /// Fixed layer order and shapes shared by all clients.
    pub fn layer_dims(&self) -> Vec<(&'static str, Vec<usize>)> {
        vec![
            ("w1", vec![self.hidden_dim, self.input_dim]),
            ("b1", vec![self.hidden_dim]),
            ("w2", vec![self.num_classes, self.hidden_dim]),
            ("b2", vec![self.num_classes]),
        ]
    }

    /// `(name, flattened length)` per layer.
    pub fn layer_table(&self) -> Vec<(String, usize)> {
        self.layer_dims()
            .into_iter()
            .map(|(n, shape)| (n.to_string(), shape.iter().product()))
            .collect()
    }
}

/// Flattened per-layer model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector {
    pub layers: Vec<WeightLayer>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightLayer {
    pub name: String,
    pub values: Array1<f64>,
    pub shape: Vec<usize>,
}

impl WeightVector {
    pub fn zeros(arch: &MlpArchitecture) -> Self {
        let layers = arch
            .layer_dims()
            .into_iter()
            .map(|(name, shape)| WeightLayer {
                name: name.to_string(),
                values: Array1::zeros(shape.iter().product::<usize>()),
                shape,
            })
            .collect();
        Self { layers }
    }

    /// Per-layer uniform init in `±sqrt(6 / (fan_in + fan_out))`; biases zero.
    pub fn glorot_init(arch: &MlpArchitecture, rng: &mut Xoshiro256pp) -> Self {
        let mut w = Self::zeros(arch);
        for layer in &mut w.layers {
            if layer.shape.len() != 2 {
                continue;
            }
            let (fan_out, fan_in) = (layer.shape[0], layer.shape[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in layer.values.iter_mut() {
                *v = (rng.next_f64() * 2.0 - 1.0) * bound;
            }
        }
        w
    }

    pub fn total_dim(&self) -> usize {
        self.layers.iter().map(|l| l.values.len()).sum()
    }

    pub fn flatten(&self) -> Array1<f64> {
        let mut out = Array1::zeros(self.total_dim());
        let mut off = 0;
        for l in &self.layers {
            out.slice_mut(ndarray::s![off..off + l.values.len()])
                .assign(&l.values);
            off += l.values.len();
        }
        out
    }

    pub fn from_flat(arch: &MlpArchitecture, flat: ArrayView1<f64>) -> Result<Self> {
        if flat.len() != arch.param_count() {
            return Err(SparkError::config(format!(
                "flat weight length {} does not match parameter count {}",
                flat.len(),
                arch.param_count()
            )));
        }
        let mut w = Self::zeros(arch);
        let mut off = 0;
        for l in &mut w.layers {
            let n = l.values.len();
            l.values.assign(&flat.slice(ndarray::s![off..off + n]));
            off += n;
        }
        Ok(w)
    }

    fn matrix(&self, idx: usize) -> Array2<f64> {
        let l = &self.layers[idx];
        Array2::from_shape_vec((l.shape[0], l.shape[1]), l.values.to_vec())
            .expect("layer shape consistent with value length")
    }

    fn w1(&self) -> Array2<f64> {
        self.matrix(0)
    }
    fn b1(&self) -> ArrayView1<'_, f64> {
        self.layers[1].values.view()
    }
    fn w2(&self) -> Array2<f64> {
        self.matrix(2)
    }
    fn b2(&self) -> ArrayView1<'_, f64> {
        self.layers[3].values.view()
    }
}

/// Per-sample, per-class parameter derivatives, one `N x C x d_l` tensor
/// per layer in the fixed layer order.
#[derive(Clone, Debug)]
pub struct JacobianBlock {
    pub layers: Vec<(String, Array3<f64>)>,
    pub owner_client: usize,
}

impl JacobianBlock {
    pub fn sample_count(&self) -> usize {
        self.layers.first().map_or(0, |(_, t)| t.shape()[0])
    }
}

fn check_shapes(arch: &MlpArchitecture, w: &WeightVector, x: &ArrayView2<f64>) -> Result<()> {
    if x.ncols() != arch.input_dim {
        return Err(SparkError::config(format!(
            "input has {} columns, architecture expects {}",
            x.ncols(),
            arch.input_dim
        )));
    }
    if w.total_dim() != arch.param_count() {
        return Err(SparkError::config(format!(
            "weights have {} parameters, architecture expects {}",
            w.total_dim(),
            arch.param_count()
        )));
    }
    for (layer, (name, shape)) in w.layers.iter().zip(arch.layer_dims()) {
        if layer.name != name || layer.shape != shape {
            return Err(SparkError::config(format!(
                "layer {} has shape {:?}, expected {} {:?}",
                layer.name, layer.shape, name, shape
            )));
        }
    }
    Ok(())
}

/// Hidden pre-activations `a = x W1^T + b1`, shape `(N, hidden)`.
fn preactivations(w: &WeightVector, x: &ArrayView2<f64>) -> Array2<f64> {
    let mut a = x.dot(&w.w1().t());
    a += &w.b1();
    a
}

/// Logits `z = relu(a) W2^T + b2`, shape `(N, C)`.
pub fn forward(
    arch: &MlpArchitecture,
    w: &WeightVector,
    x: &ArrayView2<f64>,
) -> Result<Array2<f64>> {
    check_shapes(arch, w, x)?;
    let h = preactivations(w, x).mapv(|v| v.max(0.0));
    let mut z = h.dot(&w.w2().t());
    z += &w.b2();
    Ok(z)
}

/// Closed-form Jacobian of every logit with respect to every parameter.
pub fn jacobian(
    arch: &MlpArchitecture,
    w: &WeightVector,
    x: &ArrayView2<f64>,
    owner_client: usize,
) -> Result<JacobianBlock> {
    check_shapes(arch, w, x)?;
    let n = x.nrows();
    let (hd, id, nc) = (arch.hidden_dim, arch.input_dim, arch.num_classes);
    let a = preactivations(w, x);
    let h = a.mapv(|v| v.max(0.0));
    // relu subgradient convention: derivative 0 at the kink
    let gate = a.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let w2 = w.w2();

    let mut j_w1 = Array3::zeros((n, nc, hd * id));
    let mut j_b1 = Array3::zeros((n, nc, hd));
    let mut j_w2 = Array3::zeros((n, nc, nc * hd));
    let mut j_b2 = Array3::zeros((n, nc, nc));

    for s in 0..n {
        let xs = x.row(s);
        for c in 0..nc {
            // dz_c/dW1[j,i] = W2[c,j] * gate[s,j] * x[s,i]
            // dz_c/db1[j]   = W2[c,j] * gate[s,j]
            {
                let mut row_w1 = j_w1.index_axis_mut(Axis(0), s);
                let mut row_w1 = row_w1.index_axis_mut(Axis(0), c);
                let mut row_b1 = j_b1.index_axis_mut(Axis(0), s);
                let mut row_b1 = row_b1.index_axis_mut(Axis(0), c);
                for j in 0..hd {
                    let g = w2[[c, j]] * gate[[s, j]];
                    row_b1[j] = g;
                    if g != 0.0 {
                        for i in 0..id {
                            row_w1[j * id + i] = g * xs[i];
                        }
                    }
                }
            }
            // dz_c/dW2[c',j] = delta(c,c') * h[s,j];  dz_c/db2[c'] = delta(c,c')
            {
                let mut row_w2 = j_w2.index_axis_mut(Axis(0), s);
                let mut row_w2 = row_w2.index_axis_mut(Axis(0), c);
                for j in 0..hd {
                    row_w2[c * hd + j] = h[[s, j]];
                }
                j_b2[[s, c, c]] = 1.0;
            }
        }
    }

    Ok(JacobianBlock {
        layers: vec![
            ("w1".to_string(), j_w1),
            ("b1".to_string(), j_b1),
            ("w2".to_string(), j_w2),
            ("b2".to_string(), j_b2),
        ],
        owner_client,
    })
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s: f64 = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Mean cross-entropy against row-stochastic targets.
pub fn cross_entropy(logits: &ArrayView2<f64>, targets: &ArrayView2<f64>) -> Result<f64> {
    if logits.dim() != targets.dim() {
        return Err(SparkError::contract(format!(
            "logits {:?} and targets {:?} have different shapes",
            logits.dim(),
            targets.dim()
        )));
    }
    for (i, row) in targets.rows().into_iter().enumerate() {
        let s: f64 = row.sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(SparkError::contract(format!(
                "target row {i} sums to {s}, expected 1"
            )));
        }
    }
    let n = logits.nrows();
    let mut total = 0.0;
    for (lrow, trow) in logits.rows().into_iter().zip(targets.rows()) {
        let m = lrow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let logsum: f64 = lrow.iter().map(|&v| (v - m).exp()).sum::<f64>().ln() + m;
        for (&l, &t) in lrow.iter().zip(trow.iter()) {
            if t != 0.0 {
                total -= t * (l - logsum);
            }
        }
    }
    Ok(total / n as f64)
}

/// One-hot encode labels into an `N x C` row-stochastic matrix.
pub fn one_hot(labels: &[u8], num_classes: usize) -> Array2<f64> {
    let mut y = Array2::zeros((labels.len(), num_classes));
    for (i, &l) in labels.iter().enumerate() {
        y[[i, l as usize]] = 1.0;
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny_arch() -> MlpArchitecture {
        MlpArchitecture::new(1, 1, 1)
    }

    #[test]
    fn param_count_paper_scale() {
        assert_eq!(MlpArchitecture::paper_scale().param_count(), 79_510);
    }

    #[test]
    fn param_count_formula_randomized() {
        let mut rng = Xoshiro256pp::from_seed_u64(5);
        for _ in 0..50 {
            let arch = MlpArchitecture::new(
                1 + rng.next_below(50),
                1 + rng.next_below(50),
                2 + rng.next_below(10),
            );
            let total: usize = arch.layer_table().iter().map(|(_, d)| d).sum();
            assert_eq!(total, arch.param_count());
            assert_eq!(WeightVector::zeros(&arch).total_dim(), arch.param_count());
        }
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let arch = MlpArchitecture::new(3, 4, 2);
        let w = WeightVector::zeros(&arch);
        let x = array![[0.2, -1.0, 3.0], [1.0, 1.0, 1.0]];
        let z = forward(&arch, &w, &x.view()).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn toy_net_hand_arithmetic() {
        // W1=1, b1=0, W2=2, b2=3, x=2 -> relu(2)=2, z = 2*2+3 = 7
        let arch = tiny_arch();
        let mut w = WeightVector::zeros(&arch);
        w.layers[0].values[0] = 1.0;
        w.layers[2].values[0] = 2.0;
        w.layers[3].values[0] = 3.0;
        let z = forward(&arch, &w, &array![[2.0]].view()).unwrap();
        assert_eq!(z[[0, 0]], 7.0);
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let arch = MlpArchitecture::new(3, 4, 2);
        let w = WeightVector::zeros(&arch);
        let x = array![[1.0, 2.0]];
        assert!(matches!(
            forward(&arch, &w, &x.view()),
            Err(SparkError::Config(_))
        ));
    }

    #[test]
    fn jacobian_bias_and_output_layer_structure() {
        let arch = MlpArchitecture::new(2, 3, 4);
        let mut rng = Xoshiro256pp::from_seed_u64(9);
        let w = WeightVector::glorot_init(&arch, &mut rng);
        let x = array![[0.3, 0.9], [0.1, 0.5]];
        let jac = jacobian(&arch, &w, &x.view(), 0).unwrap();
        let h = preactivations(&w, &x.view()).mapv(|v| v.max(0.0));
        let (_, j_w2) = &jac.layers[2];
        let (_, j_b2) = &jac.layers[3];
        for s in 0..2 {
            for c in 0..4 {
                for c2 in 0..4 {
                    let expect = if c == c2 { 1.0 } else { 0.0 };
                    assert_eq!(j_b2[[s, c, c2]], expect);
                    for j in 0..3 {
                        let expect = if c == c2 { h[[s, j]] } else { 0.0 };
                        assert_eq!(j_w2[[s, c, c2 * 3 + j]], expect);
                    }
                }
            }
        }
    }

    /// Straight-line reference forward, independent of `forward`.
    fn reference_forward(arch: &MlpArchitecture, w: &WeightVector, x: &Array2<f64>) -> Array2<f64> {
        let mut z = Array2::zeros((x.nrows(), arch.num_classes));
        for s in 0..x.nrows() {
            let mut h = vec![0.0; arch.hidden_dim];
            for j in 0..arch.hidden_dim {
                let mut acc = w.layers[1].values[j];
                for i in 0..arch.input_dim {
                    acc += w.layers[0].values[j * arch.input_dim + i] * x[[s, i]];
                }
                h[j] = acc.max(0.0);
            }
            for c in 0..arch.num_classes {
                let mut acc = w.layers[3].values[c];
                for j in 0..arch.hidden_dim {
                    acc += w.layers[2].values[c * arch.hidden_dim + j] * h[j];
                }
                z[[s, c]] = acc;
            }
        }
        z
    }

    #[test]
    fn forward_matches_reference_at_paper_scale() {
        let arch = MlpArchitecture::paper_scale();
        let mut rng = Xoshiro256pp::from_seed_u64(21);
        let w = WeightVector::glorot_init(&arch, &mut rng);
        let x = Array2::from_shape_fn((3, arch.input_dim), |_| rng.next_f64());
        let z = forward(&arch, &w, &x.view()).unwrap();
        let z_ref = reference_forward(&arch, &w, &x);
        let max_dev = (&z - &z_ref).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_dev <= 1e-12, "max deviation {max_dev}");
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let arch = MlpArchitecture::new(4, 5, 3);
        let mut rng = Xoshiro256pp::from_seed_u64(33);
        let w = WeightVector::glorot_init(&arch, &mut rng);
        let x = Array2::from_shape_fn((5, 4), |_| rng.next_f64());
        let jac = jacobian(&arch, &w, &x.view(), 0).unwrap();
        let eps = 1e-5;
        let flat = w.flatten();
        let d = flat.len();
        let mut max_dev = 0.0f64;
        // skip kink-adjacent perturbations
        let a = preactivations(&w, &x.view());
        let near_kink = a.iter().any(|&v| v.abs() < 10.0 * eps);
        assert!(!near_kink, "fixture landed on a relu kink; change the seed");
        for p in 0..d {
            let mut plus = flat.clone();
            plus[p] += eps;
            let mut minus = flat.clone();
            minus[p] -= eps;
            let zp = forward(&arch, &WeightVector::from_flat(&arch, plus.view()).unwrap(), &x.view()).unwrap();
            let zm = forward(&arch, &WeightVector::from_flat(&arch, minus.view()).unwrap(), &x.view()).unwrap();
            let fd = (&zp - &zm) / (2.0 * eps);
            // locate layer and offset for p
            let mut off = 0;
            for (_, tensor) in &jac.layers {
                let dl = tensor.shape()[2];
                if p < off + dl {
                    for s in 0..5 {
                        for c in 0..3 {
                            max_dev = max_dev.max((tensor[[s, c, p - off]] - fd[[s, c]]).abs());
                        }
                    }
                    break;
                }
                off += dl;
            }
        }
        assert!(max_dev <= 1e-6, "max deviation {max_dev}");
    }

    #[test]
    fn jacobian_row_locality() {
        // Jacobian rows for sample n depend only on x_n.
        let arch = MlpArchitecture::new(3, 4, 2);
        let mut rng = Xoshiro256pp::from_seed_u64(17);
        let w = WeightVector::glorot_init(&arch, &mut rng);
        let xa = Array2::from_shape_fn((3, 3), |_| rng.next_f64());
        let mut xb = xa.clone();
        xb[[2, 0]] = 0.99; // perturb a different sample
        let ja = jacobian(&arch, &w, &xa.view(), 0).unwrap();
        let jb = jacobian(&arch, &w, &xb.view(), 0).unwrap();
        for ((_, ta), (_, tb)) in ja.layers.iter().zip(&jb.layers) {
            assert_eq!(
                ta.index_axis(Axis(0), 0),
                tb.index_axis(Axis(0), 0)
            );
            assert_eq!(
                ta.index_axis(Axis(0), 1),
                tb.index_axis(Axis(0), 1)
            );
        }
    }

    #[test]
    fn cross_entropy_uniform_logits_one_hot() {
        let logits = Array2::zeros((4, 10));
        let targets = one_hot(&[0, 3, 7, 9], 10);
        let loss = cross_entropy(&logits.view(), &targets.view()).unwrap();
        assert!((loss - 10.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_identity_at_softmax_target() {
        let mut rng = Xoshiro256pp::from_seed_u64(2);
        let logits = Array2::from_shape_fn((3, 5), |_| rng.next_gaussian());
        let p = softmax_rows(&logits.view());
        let loss = cross_entropy(&logits.view(), &p.view()).unwrap();
        let entropy: f64 = p
            .rows()
            .into_iter()
            .map(|row| -row.iter().map(|&q| if q > 0.0 { q * q.ln() } else { 0.0 }).sum::<f64>())
            .sum::<f64>()
            / 3.0;
        assert!((loss - entropy).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_extended_precision_oracle() {
        // direct summation oracle with Kahan compensation
        let mut rng = Xoshiro256pp::from_seed_u64(14);
        let logits = Array2::from_shape_fn((4, 10), |_| 3.0 * rng.next_gaussian());
        let mut targets = Array2::from_shape_fn((4, 10), |_| rng.next_open_f64());
        for mut row in targets.rows_mut() {
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let mut acc = 0.0f64;
        let mut comp = 0.0f64;
        for s in 0..4 {
            let row: Vec<f64> = logits.row(s).to_vec();
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let logsum = row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln() + m;
            for c in 0..10 {
                let term = -targets[[s, c]] * (row[c] - logsum);
                let y = term - comp;
                let t = acc + y;
                comp = (t - acc) - y;
                acc = t;
            }
        }
        let oracle = acc / 4.0;
        let loss = cross_entropy(&logits.view(), &targets.view()).unwrap();
        assert!((loss - oracle).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_non_stochastic_targets() {
        let logits = Array2::zeros((1, 3));
        let targets = array![[0.5, 0.2, 0.2]];
        assert!(matches!(
            cross_entropy(&logits.view(), &targets.view()),
            Err(SparkError::Contract(_))
        ));
    }

    #[test]
    fn directional_derivative_consistency() {
        // (f(w+eps v) - f(w-eps v)) / 2eps agrees with J v
        let arch = MlpArchitecture::new(3, 4, 2);
        let mut rng = Xoshiro256pp::from_seed_u64(8);
        let w = WeightVector::glorot_init(&arch, &mut rng);
        let x = Array2::from_shape_fn((4, 3), |_| rng.next_f64());
        let jac = jacobian(&arch, &w, &x.view(), 0).unwrap();
        let d = arch.param_count();
        let v = Array1::from_shape_fn(d, |_| rng.next_gaussian());
        let eps = 1e-6;
        let flat = w.flatten();
        let zp = forward(&arch, &WeightVector::from_flat(&arch, (&flat + &(&v * eps)).view()).unwrap(), &x.view()).unwrap();
        let zm = forward(&arch, &WeightVector::from_flat(&arch, (&flat - &(&v * eps)).view()).unwrap(), &x.view()).unwrap();
        let fd = (&zp - &zm) / (2.0 * eps);
        let mut jv = Array2::<f64>::zeros((4, 2));
        let mut off = 0;
        for (_, tensor) in &jac.layers {
            let dl = tensor.shape()[2];
            for s in 0..4 {
                for c in 0..2 {
                    let mut acc = 0.0;
                    for p in 0..dl {
                        acc += tensor[[s, c, p]] * v[off + p];
                    }
                    jv[[s, c]] += acc;
                }
            }
            off += dl;
        }
        let max_dev = (&fd - &jv).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(max_dev < 1e-7, "max deviation {max_dev}");
    }
}
