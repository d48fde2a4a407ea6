//! Datasets, non-IID client partitioning and minibatch sampling.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::nummath::Batch;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const MNIST_CLASSES: usize = 10;

/// Labeled samples plus the size of the label space.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Batch,
    num_classes: usize,
}

impl Dataset {
    pub fn new(samples: Batch, num_classes: usize) -> Result<Self> {
        if let Some(&label) = samples.labels().iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        Ok(Dataset {
            samples,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn n_features(&self) -> usize {
        self.samples.n_features()
    }

    pub fn labels(&self) -> &[usize] {
        self.samples.labels()
    }

    /// The whole dataset as one batch.
    pub fn as_batch(&self) -> &Batch {
        &self.samples
    }

    pub fn gather(&self, rows: &[usize]) -> Result<Batch> {
        self.samples.gather(rows)
    }

    /// The first `n` samples (all of them if `n >= len`).
    pub fn take_first(&self, n: usize) -> Result<Dataset> {
        let rows: Vec<usize> = (0..n.min(self.len())).collect();
        Dataset::new(self.samples.gather(&rows)?, self.num_classes)
    }

    /// Splits into the first `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> Result<(Dataset, Dataset)> {
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        Ok((
            Dataset::new(self.samples.gather(&head)?, self.num_classes)?,
            Dataset::new(self.samples.gather(&tail)?, self.num_classes)?,
        ))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in self.labels() {
            counts[l] += 1;
        }
        counts
    }
}

/// One client's slice of a dataset, by row index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientShard {
    pub client_id: usize,
    indices: Vec<usize>,
}

impl ClientShard {
    /// `indices` must be strictly increasing and nonempty.
    pub fn new(client_id: usize, indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Empty("client shard"));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "shard indices must be strictly increasing".into(),
            ));
        }
        Ok(ClientShard { client_id, indices })
    }

    /// A shard holding every row of a dataset of `n` samples.
    pub fn whole(client_id: usize, n: usize) -> Result<Self> {
        ClientShard::new(client_id, (0..n).collect())
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// N_i.
    pub fn sample_count(&self) -> usize {
        self.indices.len()
    }

    /// All of the shard's rows, in index order.
    pub fn full_batch(&self, ds: &Dataset) -> Result<Batch> {
        ds.gather(&self.indices)
    }

    pub fn class_counts(&self, ds: &Dataset) -> Vec<usize> {
        let mut counts = vec![0; ds.num_classes()];
        for &i in &self.indices {
            counts[ds.labels()[i]] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionConfig {
    pub n_clients: usize,
    /// Dirichlet concentration; smaller is more heterogeneous.
    pub alpha: f64,
    pub seed: u64,
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::InvalidArgument("n_clients must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "dirichlet alpha must be > 0 (got {})",
                self.alpha
            )));
        }
        Ok(())
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Validates the magic number and length of an IDX file and returns
/// `(item count, payload)`.
fn parse_idx<'a>(
    path: &Path,
    bytes: &'a [u8],
    magic: u32,
    header_len: usize,
    item_len: impl Fn(&[u8]) -> usize,
) -> Result<(usize, &'a [u8])> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: header_len,
            actual: bytes.len(),
        });
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    if bytes.len() < header_len {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: header_len,
            actual: bytes.len(),
        });
    }
    let count = be_u32(bytes, 4) as usize;
    let expected = header_len + count * item_len(bytes);
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    Ok((count, &bytes[header_len..expected]))
}

/// Reads an IDX image file and its label file (raw or gzip-compressed).
/// Pixels are scaled by 1/255.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = read_maybe_gz(images_path)?;
    let lbl_bytes = read_maybe_gz(labels_path)?;
    let (n_images, pixels) = parse_idx(images_path, &img_bytes, IDX_IMAGES_MAGIC, 16, |b| {
        be_u32(b, 8) as usize * be_u32(b, 12) as usize
    })?;
    let (n_labels, labels) = parse_idx(labels_path, &lbl_bytes, IDX_LABELS_MAGIC, 8, |_| 1)?;
    if n_images != n_labels {
        return Err(Error::CountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }
    if n_images == 0 {
        return Err(Error::Empty("IDX dataset"));
    }
    let n_features = pixels.len() / n_images;
    let inputs = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels = labels.iter().map(|&l| usize::from(l)).collect();
    Dataset::new(Batch::new(inputs, n_features, labels)?, MNIST_CLASSES)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MnistSplit {
    Train,
    Test,
}

/// Locates `train-*` / `t10k-*` IDX files in `dir`, accepting either the raw
/// or the `.gz` file names.
pub fn mnist_paths(dir: &Path, split: MnistSplit) -> Result<(PathBuf, PathBuf)> {
    let prefix = match split {
        MnistSplit::Train => "train",
        MnistSplit::Test => "t10k",
    };
    let find = |kind: &str| -> Result<PathBuf> {
        let base = format!("{prefix}-{kind}-ubyte");
        for name in [base.clone(), format!("{base}.gz")] {
            let p = dir.join(&name);
            if p.is_file() {
                return Ok(p);
            }
        }
        Err(Error::io(
            dir.join(base),
            std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST IDX file not found"),
        ))
    };
    Ok((find("images-idx3")?, find("labels-idx1")?))
}

pub fn load_mnist_dir(dir: &Path, split: MnistSplit) -> Result<Dataset> {
    let (images, labels) = mnist_paths(dir, split)?;
    load_mnist_idx(&images, &labels)
}

/// Gaussian blobs: one standard-normal centroid per class, samples are the
/// centroid plus `noise`-scaled Gaussian jitter. Labels cycle `0, 1, ...`, so
/// class counts differ by at most one.
pub fn gen_synthetic(
    seed: u64,
    n_samples: usize,
    input_dim: usize,
    num_classes: usize,
    noise: f64,
) -> Result<Dataset> {
    if num_classes < 2 || input_dim == 0 || n_samples < num_classes {
        return Err(Error::InvalidArgument(format!(
            "synthetic data needs num_classes >= 2, input_dim >= 1, n_samples >= num_classes \
             (got classes={num_classes}, dim={input_dim}, n={n_samples})"
        )));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise must be >= 0 (got {noise})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centroids: Vec<f64> = (0..num_classes * input_dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut inputs = Vec::with_capacity(n_samples * input_dim);
    let mut labels = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let c = i % num_classes;
        let centre = &centroids[c * input_dim..(c + 1) * input_dim];
        for &m in centre {
            let jitter: f64 = rng.sample(StandardNormal);
            inputs.push(m + noise * jitter);
        }
        labels.push(c);
    }
    Dataset::new(Batch::new(inputs, input_dim, labels)?, num_classes)
}

const PARTITION_ATTEMPTS: u32 = 8;

/// Per-class Dirichlet label skew: for every class, draw client proportions
/// from `Dirichlet(alpha)`, shuffle that class's rows and hand them out in
/// contiguous blocks sized by the proportions. Redraws (with a derived seed)
/// when some client ends up empty.
pub fn dirichlet_partition(ds: &Dataset, cfg: &PartitionConfig) -> Result<Vec<ClientShard>> {
    cfg.validate()?;
    if cfg.n_clients > ds.len() {
        return Err(Error::InvalidArgument(format!(
            "{} clients cannot each get a sample from {} rows",
            cfg.n_clients,
            ds.len()
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes()];
    for (i, &l) in ds.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let gamma = Gamma::new(cfg.alpha, 1.0)
        .map_err(|e| Error::InvalidArgument(format!("dirichlet alpha: {e}")))?;

    for attempt in 0..PARTITION_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(u64::from(attempt));
        let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_clients];
        for rows in &by_class {
            if rows.is_empty() {
                continue;
            }
            let draws: Vec<f64> = (0..cfg.n_clients).map(|_| gamma.sample(&mut rng)).collect();
            let mut rows = rows.clone();
            rows.shuffle(&mut rng);
            let total: f64 = draws.iter().sum();
            let n = rows.len();
            if total <= 0.0 {
                // every draw underflowed; give the class to one client
                let who = rng.random_range(0..cfg.n_clients);
                assigned[who].extend_from_slice(&rows);
                continue;
            }
            let mut start = 0;
            let mut cum = 0.0;
            for (client, d) in draws.iter().enumerate() {
                cum += d;
                let end = if client + 1 == cfg.n_clients {
                    n
                } else {
                    ((cum / total) * n as f64).round().min(n as f64) as usize
                }
                .max(start);
                assigned[client].extend_from_slice(&rows[start..end]);
                start = end;
            }
        }
        if assigned.iter().all(|a| !a.is_empty()) {
            return assigned
                .into_iter()
                .enumerate()
                .map(|(id, mut rows)| {
                    rows.sort_unstable();
                    ClientShard::new(id, rows)
                })
                .collect();
        }
    }
    Err(Error::PartitionRetriesExhausted {
        attempts: PARTITION_ATTEMPTS,
    })
}

/// Mean over shards of the total-variation distance between the shard's
/// label distribution and the whole dataset's.
pub fn mean_tv_distance(ds: &Dataset, shards: &[ClientShard]) -> f64 {
    let global = ds.class_counts();
    let n = ds.len() as f64;
    let total: f64 = shards
        .iter()
        .map(|s| {
            let counts = s.class_counts(ds);
            let ni = s.sample_count() as f64;
            0.5 * counts
                .iter()
                .zip(&global)
                .map(|(&c, &g)| (c as f64 / ni - g as f64 / n).abs())
                .sum::<f64>()
        })
        .sum();
    total / shards.len() as f64
}

/// Uniformly samples `batch_size` distinct rows of the shard, returned in
/// ascending row order.
pub fn sample_batch<R: Rng + ?Sized>(
    ds: &Dataset,
    shard: &ClientShard,
    batch_size: usize,
    rng: &mut R,
) -> Result<Batch> {
    let n = shard.sample_count();
    if batch_size == 0 || batch_size > n {
        return Err(Error::InvalidArgument(format!(
            "batch size {batch_size} outside 1..={n} for client {}",
            shard.client_id
        )));
    }
    let mut picks = index::sample(rng, n, batch_size).into_vec();
    picks.sort_unstable();
    let rows: Vec<usize> = picks.into_iter().map(|p| shard.indices[p]).collect();
    ds.gather(&rows)
}

/// kappa_i = floor(E * N_i / B), clamped to at least one step.
pub fn local_step_count(epochs: usize, n_samples: usize, batch_size: usize) -> usize {
    (epochs * n_samples / batch_size.max(1)).max(1)
}
