//! Synthetic datasets, CSV ingestion, IID client shards and batch sampling.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::models::{Batch, Matrix, Targets};
use crate::rng::{self, Rng, Stream};
use crate::state::ClientId;

/// Half-width of the box the blob centres are drawn from.
const CENTRE_RANGE: f64 = 2.0;

/// Immutable pool of labelled rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    rows: Batch,
    num_classes: Option<usize>,
}

impl Dataset {
    pub fn new(features: Matrix, targets: Targets, num_classes: Option<usize>) -> Result<Self> {
        if let (Targets::Classes(labels), Some(c)) = (&targets, num_classes) {
            if let Some(&label) = labels.iter().find(|&&l| l >= c) {
                return Err(Error::LabelOutOfRange {
                    label,
                    num_classes: c,
                });
            }
        }
        Ok(Dataset {
            rows: Batch::new(features, targets)?,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.features().cols()
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.num_classes
    }

    /// Every row as one batch; used for full-objective evaluation.
    pub fn as_batch(&self) -> &Batch {
        &self.rows
    }

    pub fn features(&self) -> &Matrix {
        self.rows.features()
    }

    pub fn targets(&self) -> &Targets {
        self.rows.targets()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            rows: self.rows.select(indices),
            num_classes: self.num_classes,
        }
    }

    /// Random holdout split into `(train, eval)` with `eval_rows` rows held
    /// out.
    pub fn split_holdout(&self, eval_rows: usize, seed: u64) -> Result<(Dataset, Dataset)> {
        if eval_rows >= self.len() {
            return Err(Error::invalid(format!(
                "holdout of {eval_rows} rows leaves no training data out of {}",
                self.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng::stream(seed, Stream::Holdout));
        let (eval, train) = order.split_at(eval_rows);
        let mut train = train.to_vec();
        let mut eval = eval.to_vec();
        train.sort_unstable();
        eval.sort_unstable();
        Ok((self.subset(&train), self.subset(&eval)))
    }
}

/// A client's view of the global pool: row indices into a parent dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Shard {
    pub owner: ClientId,
    indices: Vec<usize>,
}

impl Shard {
    pub fn new(owner: ClientId, indices: Vec<usize>, parent_len: usize) -> Result<Self> {
        let mut seen = vec![false; parent_len];
        for &i in &indices {
            if i >= parent_len {
                return Err(Error::invalid(format!(
                    "shard index {i} out of range {parent_len}"
                )));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::invalid(format!("duplicate shard index {i}")));
            }
        }
        Ok(Shard { owner, indices })
    }

    /// A shard holding every row of `parent` in order.
    pub fn whole(owner: ClientId, parent: &Dataset) -> Self {
        Shard {
            owner,
            indices: (0..parent.len()).collect(),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Gaussian clusters around class centres drawn uniformly from
/// `[-2, 2]^dim`. Rows are grouped by class.
pub fn generate_blobs(
    num_classes: usize,
    dim: usize,
    samples_per_class: usize,
    cluster_spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 1 || dim < 1 || samples_per_class < 1 {
        return Err(Error::invalid("blob counts must all be >= 1"));
    }
    if !(cluster_spread.is_finite() && cluster_spread > 0.0) {
        return Err(Error::invalid("cluster_spread must be finite and > 0"));
    }
    let mut rng = rng::stream(seed, Stream::Init);
    let centres: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            (0..dim)
                .map(|_| rng.random_range(-CENTRE_RANGE..=CENTRE_RANGE))
                .collect()
        })
        .collect();
    let n = num_classes * samples_per_class;
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (class, centre) in centres.iter().enumerate() {
        for _ in 0..samples_per_class {
            for &c in centre {
                let noise: f64 = rng.sample(StandardNormal);
                features.push(c + cluster_spread * noise);
            }
            labels.push(class);
        }
    }
    Dataset::new(
        Matrix::new(features, n, dim)?,
        Targets::Classes(labels),
        Some(num_classes),
    )
}

/// Noisy linear regression data `y = w*.x + b* + noise`, with `x ~ N(0, I)`
/// and the true coefficients drawn from the seed.
pub fn generate_linear(dim: usize, rows: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if dim < 1 || rows < 1 {
        return Err(Error::invalid("dim and rows must be >= 1"));
    }
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(Error::invalid("noise must be finite and >= 0"));
    }
    let mut rng = rng::stream(seed, Stream::Init);
    let coef: Vec<f64> = (0..=dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let mut features = Vec::with_capacity(rows * dim);
    let mut targets = Vec::with_capacity(rows);
    for _ in 0..rows {
        let mut y = coef[dim];
        for &c in &coef[..dim] {
            let x: f64 = rng.sample(StandardNormal);
            features.push(x);
            y += c * x;
        }
        let eps: f64 = rng.sample(StandardNormal);
        targets.push(y + noise * eps);
    }
    Dataset::new(
        Matrix::new(features, rows, dim)?,
        Targets::Values(targets),
        None,
    )
}

/// Random permutation split into `n_clients` shards whose sizes differ by at
/// most one; the larger shards come first. A single client gets every row in
/// order.
pub fn partition_iid(dataset: &Dataset, n_clients: usize, seed: u64) -> Result<Vec<Shard>> {
    if n_clients < 1 {
        return Err(Error::invalid("n_clients must be >= 1"));
    }
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if n_clients > dataset.len() {
        return Err(Error::invalid(format!(
            "{n_clients} clients but only {} rows",
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if n_clients > 1 {
        order.shuffle(&mut rng::stream(seed, Stream::Partition));
    }
    let base = order.len() / n_clients;
    let extra = order.len() % n_clients;
    let mut shards = Vec::with_capacity(n_clients);
    let mut rest = order.as_slice();
    for k in 0..n_clients {
        let size = base + usize::from(k < extra);
        let (mine, tail) = rest.split_at(size);
        rest = tail;
        shards.push(Shard {
            owner: ClientId::indexed(k),
            indices: mine.to_vec(),
        });
    }
    Ok(shards)
}

/// `batch_size` rows drawn uniformly with replacement from the shard.
pub fn sample_batch(
    shard: &Shard,
    parent: &Dataset,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Batch> {
    if shard.is_empty() {
        return Err(Error::Empty("shard"));
    }
    if batch_size < 1 {
        return Err(Error::invalid("batch_size must be >= 1"));
    }
    let rows: Vec<usize> = (0..batch_size)
        .map(|_| shard.indices[rng.random_range(0..shard.len())])
        .collect();
    Ok(parent.as_batch().select(&rows))
}

/// Reads a numeric CSV whose last column is the label. Lines starting with
/// `#` are skipped. Integral labels become classes with
/// `num_classes = max + 1`; anything else is a regression target.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path.as_ref())
        .map_err(csv_error)?;

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() < 2 {
            return Err(Error::Parse {
                line,
                msg: "need at least one feature and a label".into(),
            });
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected {w} fields, found {}", record.len()),
                })
            }
            _ => {}
        }
        for (col, field) in record.iter().enumerate() {
            let value: f64 = field.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("field {} is not a number: {field:?}", col + 1),
            })?;
            if !value.is_finite() {
                return Err(Error::Parse {
                    line,
                    msg: format!("field {} is not finite", col + 1),
                });
            }
            if col + 1 == record.len() {
                labels.push(value);
            } else {
                features.push(value);
            }
        }
    }
    let Some(width) = width else {
        return Err(Error::Parse {
            line: 1,
            msg: "no data rows".into(),
        });
    };
    let rows = labels.len();
    let features = Matrix::new(features, rows, width - 1)?;
    if labels
        .iter()
        .all(|l| *l >= 0.0 && l.fract() == 0.0 && *l < u32::MAX as f64)
    {
        let classes: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        let num_classes = classes.iter().max().map(|m| m + 1);
        Dataset::new(features, Targets::Classes(classes), num_classes)
    } else {
        Dataset::new(features, Targets::Values(labels), None)
    }
}

/// Writes the dataset in the format [`load_csv`] reads. Floats use the
/// shortest representation that parses back to the same value.
pub fn save_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "# {} features, label last", dataset.dim())?;
    for (i, row) in dataset.features().iter_rows().enumerate() {
        for v in row {
            write!(out, "{v:?},")?;
        }
        match dataset.targets() {
            Targets::Classes(c) => writeln!(out, "{}", c[i])?,
            Targets::Values(v) => writeln!(out, "{:?}", v[i])?,
        }
    }
    out.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        csv::ErrorKind::UnequalLengths {
            expected_len, len, ..
        } => Error::Parse {
            line,
            msg: format!("expected {expected_len} fields, found {len}"),
        },
        other => Error::Parse {
            line,
            msg: format!("{other:?}"),
        },
    }
}
