//! Dataset ingestion, Dirichlet non-IID partitioning, and synthetic data.
//!
//! IDX files (the MNIST container format) are parsed bit-exactly, with
//! gzip accepted by extension sniffing. Partitioning follows the common
//! Dirichlet recipe: per client draw label probabilities `q_i ~ Dir(alpha)`,
//! then split each class's sample pool across clients proportionally to
//! `q_i[c]` with largest-remainder rounding.

use std::io::Read as _;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Result, SparkError};
use crate::rng::{derive_seed, Xoshiro256pp};

/// An in-memory labeled dataset with features in `[0, 1]` ranges for image
/// data (synthetic features are unbounded).
#[derive(Clone, Debug)]
pub struct Dataset {
    /// `N x input_dim`.
    pub images: Array2<f64>,
    /// `N` labels in `[0, num_classes)`.
    pub labels: Vec<u8>,
    pub num_classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.images.ncols()
    }

    fn validate(&self) -> Result<()> {
        if self.images.nrows() != self.labels.len() {
            return Err(SparkError::contract(format!(
                "{} images but {} labels",
                self.images.nrows(),
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| (l as usize) >= self.num_classes) {
            return Err(SparkError::contract(format!(
                "label {bad} outside [0, {})",
                self.num_classes
            )));
        }
        Ok(())
    }
}

fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| SparkError::parse(0, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| SparkError::parse(offset, "truncated while reading u32".to_string()))
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Loads an IDX image/label file pair. Pixels are scaled by 1/255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = read_maybe_gzip(images_path)?;
    let magic = be_u32(&img, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(SparkError::parse(
            0,
            format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let n = be_u32(&img, 4)? as usize;
    let rows = be_u32(&img, 8)? as usize;
    let cols = be_u32(&img, 12)? as usize;
    let dim = rows * cols;
    let pixels = img
        .get(16..16 + n * dim)
        .ok_or_else(|| SparkError::parse(16, format!("expected {} pixel bytes", n * dim)))?;
    if img.len() > 16 + n * dim {
        return Err(SparkError::parse(
            16 + n * dim,
            format!("{} trailing bytes", img.len() - 16 - n * dim),
        ));
    }
    let images = Array2::from_shape_vec(
        (n, dim),
        pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
    )
    .expect("pixel buffer shape");

    let lab = read_maybe_gzip(labels_path)?;
    let magic = be_u32(&lab, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(SparkError::parse(
            0,
            format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let n_lab = be_u32(&lab, 4)? as usize;
    if n_lab != n {
        return Err(SparkError::parse(
            4,
            format!("{n_lab} labels for {n} images"),
        ));
    }
    let labels = lab
        .get(8..8 + n)
        .ok_or_else(|| SparkError::parse(8, format!("expected {n} label bytes")))?
        .to_vec();
    if lab.len() > 8 + n {
        return Err(SparkError::parse(
            8 + n,
            format!("{} trailing bytes", lab.len() - 8 - n),
        ));
    }

    let num_classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    let ds = Dataset {
        images,
        labels,
        num_classes: num_classes.max(10), // MNIST-family files always carry 10 classes
        name: images_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "idx".to_string()),
    };
    ds.validate()?;
    Ok(ds)
}

/// Per-client shard of sample indices.
#[derive(Clone, Debug)]
pub struct Partition {
    pub client_indices: Vec<Vec<usize>>,
    pub alpha: f64,
    pub seed: u64,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.client_indices.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.client_indices.iter().map(Vec::len).collect()
    }
}

/// Splits `ds` across `m` clients with Dirichlet(alpha) label skew.
///
/// Deterministic in `seed`. Clients left empty by the proportional
/// allocation are repaired by stealing one sample from the largest client.
pub fn dirichlet_partition(ds: &Dataset, m: usize, alpha: f64, seed: u64) -> Result<Partition> {
    if m == 0 {
        return Err(SparkError::config("need at least one client".to_string()));
    }
    if alpha <= 0.0 {
        return Err(SparkError::config(format!("alpha {alpha} must be positive")));
    }
    if m > ds.len() {
        return Err(SparkError::config(format!(
            "{m} clients cannot share {} samples",
            ds.len()
        )));
    }
    ds.validate()?;
    let c = ds.num_classes;

    // per-client label probabilities q_i ~ Dir(alpha * 1)
    let mut q = Array2::<f64>::zeros((m, c));
    for i in 0..m {
        let mut rng = Xoshiro256pp::from_seed_u64(derive_seed(seed, "dirichlet", i as u64, 0));
        let mut row: Vec<f64> = (0..c).map(|_| rng.next_gamma(alpha)).collect();
        let sum: f64 = row.iter().sum();
        if sum <= 0.0 {
            // extreme alpha underflow: fall back to a single random class
            let cls = rng.next_below(c);
            row = (0..c).map(|j| if j == cls { 1.0 } else { 0.0 }).collect();
        } else {
            for v in &mut row {
                *v /= sum;
            }
        }
        for (j, v) in row.iter().enumerate() {
            q[[i, j]] = *v;
        }
    }

    // shuffle each class pool, then allocate proportionally to q[:, c]
    let mut client_indices = vec![Vec::new(); m];
    for cls in 0..c {
        let mut pool: Vec<usize> = (0..ds.len())
            .filter(|&s| ds.labels[s] as usize == cls)
            .collect();
        let mut rng =
            Xoshiro256pp::from_seed_u64(derive_seed(seed, "class-pool", cls as u64, 0));
        rng.shuffle(&mut pool);
        let weights: Vec<f64> = (0..m).map(|i| q[[i, cls]]).collect();
        let counts = largest_remainder(&weights, pool.len());
        let mut cursor = 0;
        for (i, &count) in counts.iter().enumerate() {
            client_indices[i].extend_from_slice(&pool[cursor..cursor + count]);
            cursor += count;
        }
    }

    // repair empty clients
    loop {
        let Some(empty) = client_indices.iter().position(Vec::is_empty) else {
            break;
        };
        let donor = (0..m)
            .max_by_key(|&i| client_indices[i].len())
            .expect("nonempty client set");
        if client_indices[donor].len() <= 1 {
            return Err(SparkError::config(format!(
                "cannot give every one of {m} clients a sample"
            )));
        }
        let moved = client_indices[donor].pop().expect("donor nonempty");
        client_indices[empty].push(moved);
    }
    for list in &mut client_indices {
        list.sort_unstable();
    }

    Ok(Partition { client_indices, alpha, seed })
}

/// Integer allocation of `total` items proportional to `weights`
/// (largest-remainder / Hamilton rounding).
fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 || total == 0 {
        let mut out = vec![0; weights.len()];
        if total > 0 && !weights.is_empty() {
            out[0] = total;
        }
        return out;
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|&e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Synthetic Gaussian-blob dataset: class `c` is drawn from
/// `Normal(mu_c, spread^2 I)` with means on a scaled standard basis, so the
/// classes are linearly separable at small spread.
pub fn synth_gaussians(
    num_classes: usize,
    n_per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(SparkError::config("need at least two classes".to_string()));
    }
    if dim < num_classes {
        return Err(SparkError::config(format!(
            "dim {dim} must be at least the class count {num_classes}"
        )));
    }
    if spread < 0.0 {
        return Err(SparkError::config(format!("spread {spread} must be nonnegative")));
    }
    let n = num_classes * n_per_class;
    let mut images = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    let mut rng = Xoshiro256pp::from_seed_u64(derive_seed(seed, "synth", 0, 0));
    let mut row = 0;
    for cls in 0..num_classes {
        for _ in 0..n_per_class {
            for j in 0..dim {
                let mean = if j == cls { 1.0 } else { 0.0 };
                images[[row, j]] = mean + spread * rng.next_gaussian();
            }
            labels.push(cls as u8);
            row += 1;
        }
    }
    Ok(Dataset {
        images,
        labels,
        num_classes,
        name: format!("synth-{num_classes}x{n_per_class}-d{dim}"),
    })
}
