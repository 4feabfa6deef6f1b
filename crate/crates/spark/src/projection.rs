//! Layer-seeded Gaussian random projections and Jacobian compression.
//!
//! All clients derive identical projection matrices from a shared global
//! seed: the seed for layer `name` is the first 8 little-endian bytes of
//! `SHA-256(le64(global_seed) || utf8(name))`, expanded by splitmix64 into
//! a xoshiro256++ state, with Gaussian entries drawn by Box–Muller. No
//! projection state is ever transmitted.
//!
//! Every layer uses the same sketch width `k`: `P_l` is `d_l x k` (k may
//! exceed `d_l`), and the transmitted sketch is the single `N x C x k`
//! tensor `sum_l J_l P_l` — equivalent to projecting the flattened
//! parameter vector through the stacked `d x k` matrix. The payload is
//! therefore exactly `N * C * k` entries and the communication ratio is
//! `k / d` on the nose. Back-projection maps the one length-`k` update
//! through each `P_l` to recover per-layer parameter deltas. Identity
//! mode forces every layer's sketch to be its own parameter space
//! (`P = I`), which recovers the uncompressed full-rank baseline.

use ndarray::{Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SparkError};
use crate::model::JacobianBlock;
use crate::rng::Xoshiro256pp;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMode {
    Gaussian,
    Identity,
}

/// Wire precision for the Jacobian payload.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Codec {
    F64,
    F32,
    F16,
    I8,
}

impl Codec {
    pub fn bytes_per_entry(self) -> usize {
        match self {
            Codec::F64 => 8,
            Codec::F32 => 4,
            Codec::F16 => 2,
            Codec::I8 => 1,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Codec::F64 => 0,
            Codec::F32 => 1,
            Codec::F16 => 2,
            Codec::I8 => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Codec::F64),
            1 => Some(Codec::F32),
            2 => Some(Codec::F16),
            3 => Some(Codec::I8),
            _ => None,
        }
    }
}

/// Per-layer projection parameters derived from the global spec.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerProjection {
    pub name: String,
    /// Parameter dimension of the layer (`d_l`).
    pub dim: usize,
    /// Sketch width of this layer's projection matrix (`k` in gaussian
    /// mode, `d_l` in identity mode).
    pub width: usize,
    /// Layer-specific PRNG seed.
    pub seed: u64,
}

/// Name of the single pseudo-layer carrying the shared gaussian sketch.
pub const SKETCH_LAYER: &str = "sketch";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProjectionSpec {
    pub global_seed: u64,
    /// Total sketch budget across layers (ignored in identity mode).
    pub proj_dim: usize,
    pub mode: ProjectionMode,
    pub layers: Vec<LayerProjection>,
}

/// First 8 bytes (little-endian) of `SHA-256(le64(global_seed) || name)`.
pub fn layer_seed(global_seed: u64, layer_name: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(global_seed.to_le_bytes());
    hasher.update(layer_name.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

impl ProjectionSpec {
    /// Builds the spec for a model described by `(layer name, d_l)` pairs.
    pub fn new(
        global_seed: u64,
        proj_dim: usize,
        mode: ProjectionMode,
        layer_table: &[(String, usize)],
    ) -> Result<Self> {
        if layer_table.is_empty() {
            return Err(SparkError::config("empty layer table".to_string()));
        }
        if mode == ProjectionMode::Gaussian && proj_dim == 0 {
            return Err(SparkError::config("projection dimension k = 0".to_string()));
        }
        let layers = layer_table
            .iter()
            .map(|&(ref name, dim)| LayerProjection {
                name: name.clone(),
                dim,
                width: match mode {
                    ProjectionMode::Identity => dim,
                    ProjectionMode::Gaussian => proj_dim,
                },
                seed: layer_seed(global_seed, name),
            })
            .collect();
        Ok(Self { global_seed, proj_dim, mode, layers })
    }

    /// Convenience constructor for single-layer specs in tests and tools.
    pub fn single_layer(global_seed: u64, k: usize, mode: ProjectionMode, dim: usize) -> Result<Self> {
        Self::new(global_seed, k, mode, &[("layer".to_string(), dim)])
    }

    pub fn layer(&self, name: &str) -> Option<&LayerProjection> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Width of the transmitted sketch: `k` in gaussian mode (one shared
    /// tensor), `sum_l d_l` in identity mode (per-layer full Jacobians).
    pub fn total_width(&self) -> usize {
        match self.mode {
            ProjectionMode::Gaussian => self.proj_dim,
            ProjectionMode::Identity => self.layers.iter().map(|l| l.dim).sum(),
        }
    }

    pub fn total_dim(&self) -> usize {
        self.layers.iter().map(|l| l.dim).sum()
    }

    /// Layer table of the transmitted sketch (what appears in wire headers).
    pub fn sketch_table(&self) -> Vec<(String, usize)> {
        match self.mode {
            ProjectionMode::Gaussian => vec![(SKETCH_LAYER.to_string(), self.proj_dim)],
            ProjectionMode::Identity => {
                self.layers.iter().map(|l| (l.name.clone(), l.dim)).collect()
            }
        }
    }
}

/// Generates the `d_l x k_l` projection matrix for one layer.
///
/// Entries are i.i.d. `N(0, 1/k_l)`, drawn row-major from xoshiro256++
/// seeded with the layer seed; identity mode yields the identity matrix.
pub fn generate_projection(spec: &ProjectionSpec, layer_name: &str) -> Result<Array2<f64>> {
    let layer = spec.layer(layer_name).ok_or_else(|| {
        SparkError::config(format!("unknown layer {layer_name} in projection spec"))
    })?;
    match spec.mode {
        ProjectionMode::Identity => Ok(Array2::eye(layer.dim)),
        ProjectionMode::Gaussian => {
            let mut rng = Xoshiro256pp::from_seed_u64(layer.seed);
            let scale = 1.0 / (layer.width as f64).sqrt();
            Ok(Array2::from_shape_fn((layer.dim, layer.width), |_| {
                rng.next_gaussian() * scale
            }))
        }
    }
}

/// Sketched Jacobian: in gaussian mode a single `N x C x k` tensor under
/// [`SKETCH_LAYER`]; in identity mode one `N x C x d_l` tensor per layer.
#[derive(Clone, Debug)]
pub struct CompressedJacobian {
    pub layers: Vec<(String, Array3<f64>)>,
    pub owner_client: usize,
    /// Original row ids within the owner's batch, strictly increasing.
    pub sample_indices: Vec<u32>,
    pub codec: Codec,
}

impl CompressedJacobian {
    pub fn sample_count(&self) -> usize {
        self.layers.first().map_or(0, |(_, t)| t.shape()[0])
    }

    pub fn num_classes(&self) -> usize {
        self.layers.first().map_or(0, |(_, t)| t.shape()[1])
    }

    pub fn total_width(&self) -> usize {
        self.layers.iter().map(|(_, t)| t.shape()[2]).sum()
    }

    /// `(name, n, c, k)` per layer.
    pub fn layer_shapes(&self) -> Vec<(String, usize, usize, usize)> {
        self.layers
            .iter()
            .map(|(n, t)| (n.clone(), t.shape()[0], t.shape()[1], t.shape()[2]))
            .collect()
    }
}

/// Cached projection matrices for repeated compression within a run.
pub struct ProjectionTable {
    spec: ProjectionSpec,
    /// `None` in identity mode (no matrix materialized).
    matrices: Vec<Option<Array2<f64>>>,
}

impl ProjectionTable {
    pub fn new(spec: ProjectionSpec) -> Result<Self> {
        let matrices = match spec.mode {
            ProjectionMode::Identity => vec![None; spec.layers.len()],
            ProjectionMode::Gaussian => spec
                .layers
                .iter()
                .map(|l| generate_projection(&spec, &l.name).map(Some))
                .collect::<Result<Vec<_>>>()?,
        };
        Ok(Self { spec, matrices })
    }

    pub fn spec(&self) -> &ProjectionSpec {
        &self.spec
    }

    /// Validates that the Jacobian's layer table matches the spec.
    fn check_layers(&self, jac: &JacobianBlock) -> Result<()> {
        if jac.layers.len() != self.spec.layers.len() {
            return Err(SparkError::config(format!(
                "jacobian has {} layers, projection spec has {}",
                jac.layers.len(),
                self.spec.layers.len()
            )));
        }
        for ((name, tensor), layer) in jac.layers.iter().zip(&self.spec.layers) {
            if *name != layer.name || tensor.shape()[2] != layer.dim {
                return Err(SparkError::config(format!(
                    "layer {name} (d={}) does not match spec layer {} (d={})",
                    tensor.shape()[2],
                    layer.name,
                    layer.dim
                )));
            }
        }
        Ok(())
    }

    /// Sketches a Jacobian: `sum_l J_l P_l` into one tensor in gaussian
    /// mode, a per-layer copy in identity mode.
    pub fn compress(&self, jac: &JacobianBlock) -> Result<CompressedJacobian> {
        self.check_layers(jac)?;
        let n = jac.sample_count();
        let layers = match self.spec.mode {
            ProjectionMode::Identity => jac.layers.clone(),
            ProjectionMode::Gaussian => {
                let k = self.spec.proj_dim;
                let c = jac.layers.first().map_or(0, |(_, t)| t.shape()[1]);
                let mut acc = Array2::<f64>::zeros((n * c, k));
                for (i, (_, tensor)) in jac.layers.iter().enumerate() {
                    let p = self.matrices[i].as_ref().expect("gaussian matrices cached");
                    let flat = tensor
                        .view()
                        .into_shape_with_order((n * c, self.spec.layers[i].dim))
                        .expect("contiguous jacobian tensor");
                    acc += &flat.dot(p);
                }
                let sketch = acc
                    .into_shape_with_order((n, c, k))
                    .expect("sketch shape");
                vec![(SKETCH_LAYER.to_string(), sketch)]
            }
        };
        Ok(CompressedJacobian {
            layers,
            owner_client: jac.owner_client,
            sample_indices: (0..n as u32).collect(),
            codec: Codec::F64,
        })
    }

    /// Maps a sketch-space update back to parameter space (plain
    /// projection, not a pseudo-inverse): in gaussian mode the single
    /// length-`k` delta goes through every `P_l`; identity mode passes
    /// per-layer deltas straight through.
    pub fn back_project(&self, deltas: &[(String, Array1<f64>)]) -> Result<Vec<(String, Array1<f64>)>> {
        let table = self.spec.sketch_table();
        if deltas.len() != table.len() {
            return Err(SparkError::config(format!(
                "{} delta segments for a {}-segment sketch",
                deltas.len(),
                table.len()
            )));
        }
        for ((name, delta), (want_name, want_width)) in deltas.iter().zip(&table) {
            if name != want_name || delta.len() != *want_width {
                return Err(SparkError::config(format!(
                    "delta segment {name} (len {}) does not match sketch segment {want_name} (width {want_width})",
                    delta.len()
                )));
            }
        }
        match self.spec.mode {
            ProjectionMode::Identity => Ok(deltas.to_vec()),
            ProjectionMode::Gaussian => {
                let delta = &deltas[0].1;
                Ok(self
                    .spec
                    .layers
                    .iter()
                    .zip(&self.matrices)
                    .map(|(layer, p)| {
                        let p = p.as_ref().expect("gaussian matrices cached");
                        (layer.name.clone(), p.dot(delta))
                    })
                    .collect())
            }
        }
    }
}

/// One-shot compression without a cached table.
pub fn compress(jac: &JacobianBlock, spec: &ProjectionSpec) -> Result<CompressedJacobian> {
    ProjectionTable::new(spec.clone())?.compress(jac)
}

/// One-shot back-projection without a cached table.
pub fn back_project(
    deltas: &[(String, Array1<f64>)],
    spec: &ProjectionSpec,
) -> Result<Vec<(String, Array1<f64>)>> {
    ProjectionTable::new(spec.clone())?.back_project(deltas)
}

/// Uniform without-replacement row subsample of a Jacobian and its logits.
///
/// Keeps `ceil(fraction * N)` rows; the same sorted subset is applied to
/// both tensors and reported so callers can align labels.
pub fn sample_rows(
    jac: &JacobianBlock,
    logits: &Array2<f64>,
    fraction: f64,
    rng_seed: u64,
) -> Result<(JacobianBlock, Array2<f64>, Vec<u32>)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(SparkError::contract(format!(
            "sample fraction {fraction} outside (0, 1]"
        )));
    }
    let n = jac.sample_count();
    if n == 0 || logits.nrows() != n {
        return Err(SparkError::contract(format!(
            "jacobian has {n} rows, logits {}",
            logits.nrows()
        )));
    }
    let m = ((fraction * n as f64).ceil() as usize).clamp(1, n);
    let picked: Vec<usize> = if m == n {
        (0..n).collect()
    } else {
        Xoshiro256pp::from_seed_u64(rng_seed).sample_indices(n, m)
    };
    let layers = jac
        .layers
        .iter()
        .map(|(name, t)| (name.clone(), t.select(Axis(0), &picked)))
        .collect();
    let sub_logits = logits.select(Axis(0), &picked);
    let indices = picked.iter().map(|&i| i as u32).collect();
    Ok((
        JacobianBlock { layers, owner_client: jac.owner_client },
        sub_logits,
        indices,
    ))
}

/// Orthogonal projector `P (P^T P)^{-1} P^T` onto the range of `P`.
///
/// Diagnostic utility: the production back-projection uses plain `P`,
/// this projector is the idealized counterpart for comparisons.
pub fn orthogonal_projector(p: &Array2<f64>) -> Result<Array2<f64>> {
    let gram = p.t().dot(p);
    let k = gram.nrows();
    // Cholesky factorization of the (SPD for full column rank) Gram matrix.
    let mut l = Array2::<f64>::zeros((k, k));
    for i in 0..k {
        for j in 0..=i {
            let mut s = gram[[i, j]];
            for m in 0..j {
                s -= l[[i, m]] * l[[j, m]];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(SparkError::config(
                        "projection matrix is rank deficient".to_string(),
                    ));
                }
                l[[i, j]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    // Solve (P^T P) X = P^T by forward/back substitution, column by column.
    let pt = p.t().to_owned();
    let d = pt.ncols();
    let mut x = Array2::<f64>::zeros((k, d));
    for col in 0..d {
        let mut y = Array1::<f64>::zeros(k);
        for i in 0..k {
            let mut s = pt[[i, col]];
            for m in 0..i {
                s -= l[[i, m]] * y[m];
            }
            y[i] = s / l[[i, i]];
        }
        for i in (0..k).rev() {
            let mut s = y[i];
            for m in i + 1..k {
                s -= l[[m, i]] * x[[m, col]];
            }
            x[[i, col]] = s / l[[i, i]];
        }
    }
    Ok(p.dot(&x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{jacobian, MlpArchitecture, WeightVector};
    use ndarray::array;

    #[test]
    fn identity_mode_gives_identity_matrix() {
        let spec = ProjectionSpec::single_layer(0, 3, ProjectionMode::Identity, 5).unwrap();
        let p = generate_projection(&spec, "layer").unwrap();
        assert_eq!(p, Array2::eye(5));
        assert_eq!(spec.total_width(), 5);
    }

    #[test]
    fn zero_k_is_config_error() {
        assert!(matches!(
            ProjectionSpec::single_layer(0, 0, ProjectionMode::Gaussian, 5),
            Err(SparkError::Config(_))
        ));
    }

    #[test]
    fn entry_variance_near_one_over_k() {
        let spec = ProjectionSpec::single_layer(12345, 200, ProjectionMode::Gaussian, 1000).unwrap();
        let p = generate_projection(&spec, "layer").unwrap();
        let n = p.len() as f64;
        let mean: f64 = p.iter().sum::<f64>() / n;
        let var: f64 = p.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let k = 200.0;
        assert!(var >= 0.8 / k && var <= 1.2 / k, "variance {var}");
    }

    #[test]
    fn generation_is_bit_reproducible() {
        let spec = ProjectionSpec::single_layer(99, 16, ProjectionMode::Gaussian, 40).unwrap();
        let a = generate_projection(&spec, "layer").unwrap();
        let b = generate_projection(&spec, "layer").unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn layer_seed_matches_sha256_definition() {
        let mut hasher = Sha256::new();
        hasher.update(7u64.to_le_bytes());
        hasher.update(b"w1");
        let digest = hasher.finalize();
        let expect = u64::from_le_bytes(digest[..8].try_into().unwrap());
        assert_eq!(layer_seed(7, "w1"), expect);
        assert_ne!(layer_seed(7, "w1"), layer_seed(7, "w2"));
        assert_ne!(layer_seed(7, "w1"), layer_seed(8, "w1"));
    }

    #[test]
    fn sketch_width_is_shared_across_layers() {
        let table = MlpArchitecture::paper_scale().layer_table();
        let spec = ProjectionSpec::new(0, 1000, ProjectionMode::Gaussian, &table).unwrap();
        assert_eq!(spec.total_width(), 1000);
        // every layer projects into the same k columns, even thin ones
        assert!(spec.layers.iter().all(|l| l.width == 1000));
        assert_eq!(spec.sketch_table(), vec![(SKETCH_LAYER.to_string(), 1000)]);
        let half = ProjectionSpec::new(0, 500, ProjectionMode::Gaussian, &table).unwrap();
        assert_eq!(half.total_width(), 500);
    }

    fn toy_jacobian(values: Array3<f64>) -> JacobianBlock {
        JacobianBlock { layers: vec![("layer".to_string(), values)], owner_client: 0 }
    }

    #[test]
    fn compress_identity_is_exact() {
        let t = Array3::from_shape_fn((2, 3, 4), |(a, b, c)| (a + 2 * b + 3 * c) as f64);
        let jac = toy_jacobian(t.clone());
        let spec = ProjectionSpec::single_layer(0, 4, ProjectionMode::Identity, 4).unwrap();
        let cj = compress(&jac, &spec).unwrap();
        assert_eq!(cj.layers[0].1, t);
    }

    #[test]
    fn compress_zero_is_zero() {
        let jac = toy_jacobian(Array3::zeros((2, 2, 6)));
        let spec = ProjectionSpec::single_layer(3, 2, ProjectionMode::Gaussian, 6).unwrap();
        let cj = compress(&jac, &spec).unwrap();
        assert!(cj.layers[0].1.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn compress_matches_naive_triple_loop() {
        let t = Array3::from_shape_vec((2, 1, 3), vec![1.0, 0.0, 2.0, 0.0, 1.0, 0.0]).unwrap();
        let jac = toy_jacobian(t.clone());
        let spec = ProjectionSpec::single_layer(42, 2, ProjectionMode::Gaussian, 3).unwrap();
        let p = generate_projection(&spec, "layer").unwrap();
        let cj = compress(&jac, &spec).unwrap();
        for n in 0..2 {
            for c in 0..1 {
                for k in 0..2 {
                    let mut acc = 0.0;
                    for d in 0..3 {
                        acc += t[[n, c, d]] * p[[d, k]];
                    }
                    assert!((cj.layers[0].1[[n, c, k]] - acc).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn compress_layer_mismatch_is_config_error() {
        let jac = toy_jacobian(Array3::zeros((1, 1, 5)));
        let spec = ProjectionSpec::single_layer(0, 2, ProjectionMode::Gaussian, 6).unwrap();
        assert!(matches!(compress(&jac, &spec), Err(SparkError::Config(_))));
    }

    #[test]
    fn compression_is_linear() {
        let mut rng = Xoshiro256pp::from_seed_u64(4);
        let j1 = Array3::from_shape_fn((3, 2, 8), |_| rng.next_gaussian());
        let j2 = Array3::from_shape_fn((3, 2, 8), |_| rng.next_gaussian());
        let (a, b) = (0.7, -1.3);
        let spec = ProjectionSpec::single_layer(5, 4, ProjectionMode::Gaussian, 8).unwrap();
        let mixed = compress(&toy_jacobian(&j1 * a + &j2 * b), &spec).unwrap();
        let c1 = compress(&toy_jacobian(j1), &spec).unwrap();
        let c2 = compress(&toy_jacobian(j2), &spec).unwrap();
        let expect = &c1.layers[0].1 * a + &c2.layers[0].1 * b;
        let max_dev = (&mixed.layers[0].1 - &expect)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_dev <= 1e-12, "max deviation {max_dev}");
    }

    #[test]
    fn back_project_identity_and_zero() {
        let spec = ProjectionSpec::single_layer(0, 3, ProjectionMode::Identity, 3).unwrap();
        let delta = vec![("layer".to_string(), array![1.0, -2.0, 3.0])];
        let out = back_project(&delta, &spec).unwrap();
        assert_eq!(out[0].1, array![1.0, -2.0, 3.0]);

        let spec = ProjectionSpec::single_layer(0, 2, ProjectionMode::Gaussian, 5).unwrap();
        let out = back_project(&[(SKETCH_LAYER.to_string(), Array1::zeros(2))], &spec).unwrap();
        assert!(out[0].1.iter().all(|&v| v == 0.0));
        assert_eq!(out[0].1.len(), 5);
    }

    #[test]
    fn back_project_matches_matrix_vector_oracle() {
        let spec = ProjectionSpec::single_layer(7, 2, ProjectionMode::Gaussian, 3).unwrap();
        let p = generate_projection(&spec, "layer").unwrap();
        let delta = array![1.0, -1.0];
        let out = back_project(&[(SKETCH_LAYER.to_string(), delta.clone())], &spec).unwrap();
        assert_eq!(out[0].0, "layer");
        for i in 0..3 {
            let acc = p[[i, 0]] * delta[0] + p[[i, 1]] * delta[1];
            assert!((out[0].1[i] - acc).abs() < 1e-15);
        }
    }

    #[test]
    fn multi_layer_sketch_matches_stacked_projection() {
        // Two layers (d = 4 and 3): the shared sketch must equal the
        // projection of the flattened row through the stacked 7 x k matrix.
        let table = vec![("a".to_string(), 4usize), ("b".to_string(), 3usize)];
        let spec = ProjectionSpec::new(21, 5, ProjectionMode::Gaussian, &table).unwrap();
        let pa = generate_projection(&spec, "a").unwrap();
        let pb = generate_projection(&spec, "b").unwrap();
        let mut rng = Xoshiro256pp::from_seed_u64(8);
        let ja = Array3::from_shape_fn((2, 3, 4), |_| rng.next_gaussian());
        let jb = Array3::from_shape_fn((2, 3, 3), |_| rng.next_gaussian());
        let jac = JacobianBlock {
            layers: vec![("a".to_string(), ja.clone()), ("b".to_string(), jb.clone())],
            owner_client: 0,
        };
        let cj = compress(&jac, &spec).unwrap();
        assert_eq!(cj.layers.len(), 1);
        assert_eq!(cj.layers[0].0, SKETCH_LAYER);
        assert_eq!(cj.layers[0].1.shape(), &[2, 3, 5]);
        for n in 0..2 {
            for c in 0..3 {
                for k in 0..5 {
                    let mut acc = 0.0;
                    for d in 0..4 {
                        acc += ja[[n, c, d]] * pa[[d, k]];
                    }
                    for d in 0..3 {
                        acc += jb[[n, c, d]] * pb[[d, k]];
                    }
                    let got = cj.layers[0].1[[n, c, k]];
                    assert!((got - acc).abs() < 1e-12, "({n},{c},{k}): {got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn sample_rows_fraction_one_is_identity() {
        let mut rng = Xoshiro256pp::from_seed_u64(1);
        let t = Array3::from_shape_fn((4, 2, 3), |_| rng.next_gaussian());
        let logits = Array2::from_shape_fn((4, 2), |_| rng.next_gaussian());
        let jac = toy_jacobian(t.clone());
        let (sub, sub_logits, idx) = sample_rows(&jac, &logits, 1.0, 0).unwrap();
        assert_eq!(sub.layers[0].1, t);
        assert_eq!(sub_logits, logits);
        assert_eq!(idx, vec![0, 1, 2, 3]);
    }

    #[test]
    fn sample_rows_paper_fraction() {
        let jac = toy_jacobian(Array3::zeros((100, 2, 3)));
        let logits = Array2::zeros((100, 2));
        let (sub, _, idx) = sample_rows(&jac, &logits, 0.45, 9).unwrap();
        assert_eq!(sub.sample_count(), 45);
        assert_eq!(idx.len(), 45);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn sample_rows_deterministic_and_aligned() {
        let mut rng = Xoshiro256pp::from_seed_u64(6);
        let t = Array3::from_shape_fn((10, 2, 3), |_| rng.next_gaussian());
        let logits = Array2::from_shape_fn((10, 2), |(i, j)| (i * 2 + j) as f64);
        let jac = toy_jacobian(t.clone());
        let (s1, l1, i1) = sample_rows(&jac, &logits, 0.5, 77).unwrap();
        let (s2, l2, i2) = sample_rows(&jac, &logits, 0.5, 77).unwrap();
        assert_eq!(i1, i2);
        assert_eq!(l1, l2);
        assert_eq!(s1.layers[0].1, s2.layers[0].1);
        // subset alignment: logits row r corresponds to original row i1[r]
        for (r, &orig) in i1.iter().enumerate() {
            assert_eq!(l1[[r, 0]], logits[[orig as usize, 0]]);
        }
    }

    #[test]
    fn sample_rows_bad_fraction_is_contract_violation() {
        let jac = toy_jacobian(Array3::zeros((4, 2, 3)));
        let logits = Array2::zeros((4, 2));
        assert!(matches!(
            sample_rows(&jac, &logits, 0.0, 0),
            Err(SparkError::Contract(_))
        ));
        assert!(matches!(
            sample_rows(&jac, &logits, 1.5, 0),
            Err(SparkError::Contract(_))
        ));
    }

    #[test]
    fn jl_inner_product_distortion() {
        // 500 random unit-vector pairs in d=2000, k=400; frozen seed.
        let d = 2000;
        let spec = ProjectionSpec::single_layer(2024, 400, ProjectionMode::Gaussian, d).unwrap();
        let p = generate_projection(&spec, "layer").unwrap();
        let mut rng = Xoshiro256pp::from_seed_u64(555);
        let mut total = 0.0;
        for _ in 0..500 {
            let mut u = Array1::from_shape_fn(d, |_| rng.next_gaussian());
            let mut v = Array1::from_shape_fn(d, |_| rng.next_gaussian());
            u /= u.dot(&u).sqrt();
            v /= v.dot(&v).sqrt();
            let pu = u.dot(&p);
            let pv = v.dot(&p);
            total += (pu.dot(&pv) - u.dot(&v)).abs();
        }
        let mean = total / 500.0;
        assert!(mean <= 0.12, "mean distortion {mean}");
    }

    #[test]
    fn orthogonal_projector_is_idempotent_and_fixes_range() {
        let spec = ProjectionSpec::single_layer(3, 4, ProjectionMode::Gaussian, 12).unwrap();
        let p = generate_projection(&spec, "layer").unwrap();
        let pi = orthogonal_projector(&p).unwrap();
        let pi2 = pi.dot(&pi);
        let max_dev = (&pi2 - &pi).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_dev < 1e-10, "idempotency deviation {max_dev}");
        // Pi fixes columns of P
        let fixed = pi.dot(&p);
        let max_dev = (&fixed - &p).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_dev < 1e-10, "range deviation {max_dev}");
    }

    #[test]
    fn shared_seed_means_shared_matrices_for_real_model() {
        let table = MlpArchitecture::new(6, 4, 3).layer_table();
        let spec_a = ProjectionSpec::new(11, 8, ProjectionMode::Gaussian, &table).unwrap();
        let spec_b = ProjectionSpec::new(11, 8, ProjectionMode::Gaussian, &table).unwrap();
        for l in &spec_a.layers {
            let pa = generate_projection(&spec_a, &l.name).unwrap();
            let pb = generate_projection(&spec_b, &l.name).unwrap();
            assert!(pa.iter().zip(pb.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn full_model_identity_roundtrip() {
        let arch = MlpArchitecture::new(3, 4, 2);
        let mut rng = Xoshiro256pp::from_seed_u64(13);
        let w = WeightVector::glorot_init(&arch, &mut rng);
        let x = Array2::from_shape_fn((2, 3), |_| rng.next_f64());
        let jac = jacobian(&arch, &w, &x.view(), 5).unwrap();
        let spec =
            ProjectionSpec::new(1, 0, ProjectionMode::Identity, &arch.layer_table()).unwrap();
        let cj = compress(&jac, &spec).unwrap();
        for ((_, a), (_, b)) in jac.layers.iter().zip(&cj.layers) {
            assert_eq!(a, b);
        }
        assert_eq!(cj.owner_client, 5);
    }
}
