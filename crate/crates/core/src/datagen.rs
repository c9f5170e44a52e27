//! Datasets: MNIST IDX ingestion, synthetic Gaussian blobs, the stratified
//! global test split and the per-node partition schemes.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LabelBatch, Tensor};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Mnist,
    Synthetic,
}

/// Row-major feature vectors with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    width: usize,
    classes: usize,
    inputs: Vec<f32>,
    labels: Vec<usize>,
    provenance: Provenance,
}

impl LabeledDataset {
    pub fn new(width: usize, classes: usize, inputs: Vec<f32>, labels: Vec<usize>, provenance: Provenance) -> Result<Self> {
        if width == 0 || classes == 0 {
            return Err(Error::Data("dataset width and class count must be positive".into()));
        }
        if inputs.len() != labels.len() * width {
            return Err(Error::dim("LabeledDataset", labels.len() * width, inputs.len()));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {l} out of range for {classes} classes")));
        }
        Ok(LabeledDataset {
            width,
            classes,
            inputs,
            labels,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn input(&self, i: usize) -> &[f32] {
        &self.inputs[i * self.width..(i + 1) * self.width]
    }

    /// `(rows, width)` tensor of the selected samples.
    pub fn batch(&self, idx: &[usize]) -> Result<Tensor> {
        let mut v = Vec::with_capacity(idx.len() * self.width);
        for &i in idx {
            v.extend_from_slice(self.input(i));
        }
        Tensor::new(vec![idx.len(), self.width], v)
    }

    pub fn label_batch(&self, idx: &[usize]) -> Result<LabelBatch> {
        LabelBatch::new(idx.iter().map(|&i| self.labels[i]).collect(), self.classes)
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledDataset {
        let mut inputs = Vec::with_capacity(idx.len() * self.width);
        for &i in idx {
            inputs.extend_from_slice(self.input(i));
        }
        LabeledDataset {
            width: self.width,
            classes: self.classes,
            inputs,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            provenance: self.provenance,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Indices of each class, in dataset order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut by = vec![Vec::new(); self.classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by[l].push(i);
        }
        by
    }
}

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;
const MNIST_CLASSES: usize = 10;

fn format_err(file: &Path, offset: u64, reason: impl Into<String>) -> Error {
    Error::Format {
        file: file.display().to_string(),
        offset,
        reason: reason.into(),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn be_u32(bytes: &[u8], offset: usize, file: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| format_err(file, offset as u64, "truncated header"))
}

/// Parses an IDX3 image file into `(count, rows·cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], file: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, file)?;
    if magic != IMAGE_MAGIC {
        return Err(format_err(file, 0, format!("expected image magic 0x{IMAGE_MAGIC:08x}, found 0x{magic:08x}")));
    }
    let count = be_u32(bytes, 4, file)? as usize;
    let rows = be_u32(bytes, 8, file)? as usize;
    let cols = be_u32(bytes, 12, file)? as usize;
    let pixels = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| format_err(file, 4, "image dimensions overflow"))?;
    let body = &bytes[16..];
    if body.len() < pixels {
        return Err(format_err(
            file,
            (16 + body.len()) as u64,
            format!("truncated pixel data: expected {pixels} bytes, found {}", body.len()),
        ));
    }
    Ok((count, rows * cols, body[..pixels].to_vec()))
}

/// Parses an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8], file: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, file)?;
    if magic != LABEL_MAGIC {
        return Err(format_err(file, 0, format!("expected label magic 0x{LABEL_MAGIC:08x}, found 0x{magic:08x}")));
    }
    let count = be_u32(bytes, 4, file)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(format_err(
            file,
            (8 + body.len()) as u64,
            format!("truncated label data: expected {count} bytes, found {}", body.len()),
        ));
    }
    Ok(body[..count].to_vec())
}

fn find_file(dir: &Path, stems: &[&str]) -> Result<PathBuf> {
    for s in stems {
        let p = dir.join(s);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Io {
        path: dir.join(stems[0]),
        source: std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST file not found"),
    })
}

/// Loads `train-images-idx3-ubyte` / `train-labels-idx1-ubyte` from `dir`,
/// flattening images and scaling pixels to `[0, 1]`.
pub fn load_mnist(dir: &Path) -> Result<LabeledDataset> {
    let img_path = find_file(dir, &["train-images-idx3-ubyte", "train-images.idx3-ubyte"])?;
    let lbl_path = find_file(dir, &["train-labels-idx1-ubyte", "train-labels.idx1-ubyte"])?;
    load_idx_pair(&img_path, &lbl_path)
}

pub fn load_idx_pair(images: &Path, labels: &Path) -> Result<LabeledDataset> {
    let (count, width, pixels) = parse_idx_images(&read_file(images)?, images)?;
    let raw_labels = parse_idx_labels(&read_file(labels)?, labels)?;
    if raw_labels.len() != count {
        return Err(format_err(
            labels,
            4,
            format!("label count {} does not match image count {count}", raw_labels.len()),
        ));
    }
    if let Some(i) = raw_labels.iter().position(|&l| l as usize >= MNIST_CLASSES) {
        return Err(format_err(labels, 8 + i as u64, format!("label {} out of range", raw_labels[i])));
    }
    LabeledDataset::new(
        width,
        MNIST_CLASSES,
        pixels.iter().map(|&p| p as f32 / 255.0).collect(),
        raw_labels.iter().map(|&l| l as usize).collect(),
        Provenance::Mnist,
    )
}

/// Gaussian clusters around seeded centers in `[0.2, 0.8]^dim`, clamped to
/// `[0, 1]`. Samples are interleaved by class.
pub fn gen_blobs(n_classes: usize, per_class: usize, dim: usize, spread: f32, seed: u64) -> Result<LabeledDataset> {
    if n_classes == 0 || per_class == 0 || dim == 0 {
        return Err(Error::Parameter {
            name: "blobs",
            reason: "class count, samples per class and dimension must be positive".into(),
        });
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::Parameter {
            name: "spread",
            reason: format!("must be non-negative, got {spread}"),
        });
    }
    let mut rng = seed::stream(seed, "blobs", 0);
    let centers: Vec<Vec<f32>> = (0..n_classes)
        .map(|_| (0..dim).map(|_| rng.random_range(0.2..0.8)).collect())
        .collect();
    let noise = Normal::new(0.0f32, 1.0).expect("unit normal");
    let mut inputs = Vec::with_capacity(n_classes * per_class * dim);
    let mut labels = Vec::with_capacity(n_classes * per_class);
    for _ in 0..per_class {
        for (c, center) in centers.iter().enumerate() {
            for &m in center {
                let v = if spread == 0.0 {
                    m
                } else {
                    (m + spread * noise.sample(&mut rng)).clamp(0.0, 1.0)
                };
                inputs.push(v);
            }
            labels.push(c);
        }
    }
    LabeledDataset::new(dim, n_classes, inputs, labels, Provenance::Synthetic)
}

/// Stratified split returning `(pool, test)`; each class contributes
/// `round(fraction · count)` samples to the test side.
pub fn split_global_test(ds: &LabeledDataset, fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Parameter {
            name: "fraction",
            reason: format!("must lie in (0, 1), got {fraction}"),
        });
    }
    let mut rng = seed::stream(seed, "global-test", 0);
    let mut pool = Vec::new();
    let mut test = Vec::new();
    for (class, mut idx) in ds.class_indices().into_iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(Error::Data(format!(
                "class {class} has {} sample(s); stratification needs at least 2",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let n_test = (fraction * idx.len() as f64).round() as usize;
        test.extend_from_slice(&idx[..n_test]);
        pool.extend_from_slice(&idx[n_test..]);
    }
    pool.sort_unstable();
    test.sort_unstable();
    Ok((ds.subset(&pool), ds.subset(&test)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PartitionScheme {
    Iid,
    /// Each node holds `⌈p·n⌉` classes.
    ClassFraction(f64),
    Dirichlet(f64),
}

impl fmt::Display for PartitionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PartitionScheme::Iid => write!(f, "iid"),
            PartitionScheme::ClassFraction(p) => write!(f, "classes:{p}"),
            PartitionScheme::Dirichlet(a) => write!(f, "dirichlet:{a}"),
        }
    }
}

impl FromStr for PartitionScheme {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parse = |v: &str| v.parse::<f64>().map_err(|e| format!("bad number `{v}` in partition `{s}`: {e}"));
        match s.split_once(':') {
            None if s == "iid" => Ok(PartitionScheme::Iid),
            Some(("classes", v)) => {
                let p = parse(v)?;
                if p > 0.0 && p <= 1.0 {
                    Ok(PartitionScheme::ClassFraction(p))
                } else {
                    Err(format!("class fraction must lie in (0, 1], got {p}"))
                }
            }
            Some(("dirichlet", v)) => {
                let a = parse(v)?;
                if a > 0.0 && a.is_finite() {
                    Ok(PartitionScheme::Dirichlet(a))
                } else {
                    Err(format!("dirichlet alpha must be positive, got {a}"))
                }
            }
            _ => Err(format!("unknown partition `{s}`; expected iid, classes:P or dirichlet:A")),
        }
    }
}

impl Serialize for PartitionScheme {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PartitionScheme {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartitionSpec {
    pub scheme: PartitionScheme,
    pub nodes: usize,
    pub seed: u64,
}

/// Number of classes per node under a class-fraction scheme.
pub fn classes_per_node(p: f64, classes: usize) -> usize {
    // tolerate float noise such as 0.6·10 = 6.000000000000001
    ((p * classes as f64) - 1e-9).ceil().max(1.0) as usize
}

/// Class sets under the rotation schedule `{(i·stride + m) mod n : m < k}`.
pub fn class_assignment(nodes: usize, classes: usize, k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > classes {
        return Err(Error::Partition(format!("cannot hold {k} of {classes} classes per node")));
    }
    if nodes * k < classes {
        return Err(Error::Partition(format!(
            "{nodes} nodes holding {k} classes each cannot cover {classes} classes"
        )));
    }
    let assign = |stride: usize| -> Vec<Vec<usize>> {
        (0..nodes)
            .map(|i| (0..k).map(|m| (i * stride + m) % classes).collect())
            .collect()
    };
    let covers = |sets: &[Vec<usize>]| {
        let mut seen = vec![false; classes];
        sets.iter().flatten().for_each(|&c| seen[c] = true);
        seen.into_iter().all(|s| s)
    };
    let preferred = [(classes / nodes).max(1), classes.div_ceil(nodes)];
    for stride in preferred.into_iter().chain(1..=classes) {
        let sets = assign(stride);
        if covers(&sets) {
            return Ok(sets);
        }
    }
    Err(Error::Partition(format!(
        "no rotation stride covers all {classes} classes with {nodes} nodes × {k}"
    )))
}

/// Dirichlet(α) class proportions over nodes, one row per class, drawn from
/// normalized Gamma(α, 1) variates on the `"dirichlet"` stream.
pub fn dirichlet_proportions(alpha: f64, nodes: usize, classes: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Parameter {
        name: "dirichlet alpha",
        reason: e.to_string(),
    })?;
    let mut rng = seed::stream(seed, "dirichlet", 0);
    Ok((0..classes)
        .map(|_| {
            let g: Vec<f64> = (0..nodes).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = g.iter().sum();
            if total > 0.0 {
                g.iter().map(|v| v / total).collect()
            } else {
                vec![1.0 / nodes as f64; nodes]
            }
        })
        .collect())
}

/// Largest-remainder apportionment of `total` items by `props`.
fn apportion(total: usize, props: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = props.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Splits `pool` into one dataset per node.
pub fn partition(pool: &LabeledDataset, spec: &PartitionSpec) -> Result<Vec<LabeledDataset>> {
    let n = pool.classes();
    let nodes = spec.nodes;
    if nodes == 0 {
        return Err(Error::Partition("node count must be positive".into()));
    }
    let by_class = pool.class_indices();
    if let Some(c) = by_class.iter().position(|v| v.is_empty()) {
        return Err(Error::Partition(format!("class {c} is absent from the pool")));
    }
    let mut rng = seed::stream(spec.seed, "partition", 0);
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); nodes];

    match spec.scheme {
        PartitionScheme::Iid => {
            let mut next = 0usize;
            for mut idx in by_class {
                idx.shuffle(&mut rng);
                for i in idx {
                    shards[next % nodes].push(i);
                    next += 1;
                }
            }
        }
        PartitionScheme::ClassFraction(p) => {
            let k = classes_per_node(p, n);
            let sets = class_assignment(nodes, n, k)?;
            let mut holders: Vec<Vec<usize>> = vec![Vec::new(); n];
            for (node, set) in sets.iter().enumerate() {
                for &c in set {
                    holders[c].push(node);
                }
            }
            for (c, mut idx) in by_class.into_iter().enumerate() {
                let h = &holders[c];
                if h.is_empty() {
                    return Err(Error::Partition(format!("class {c} is assigned to no node")));
                }
                idx.shuffle(&mut rng);
                for (j, i) in idx.into_iter().enumerate() {
                    shards[h[(j + c) % h.len()]].push(i);
                }
            }
        }
        PartitionScheme::Dirichlet(alpha) => {
            let props = dirichlet_proportions(alpha, nodes, n, spec.seed)?;
            for (c, mut idx) in by_class.into_iter().enumerate() {
                idx.shuffle(&mut rng);
                let counts = apportion(idx.len(), &props[c]);
                let mut start = 0;
                for (node, &cnt) in counts.iter().enumerate() {
                    shards[node].extend_from_slice(&idx[start..start + cnt]);
                    start += cnt;
                }
            }
        }
    }

    Ok(shards
        .into_iter()
        .map(|mut s| {
            s.sort_unstable();
            pool.subset(&s)
        })
        .collect())
}

/// Shuffled `(train, test)` split with `round(train_fraction · len)` training samples.
pub fn split_local(ds: &LabeledDataset, train_fraction: f64, seed: u64) -> (LabeledDataset, LabeledDataset) {
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut seed::stream(seed, "local-split", 0));
    let n_train = ((train_fraction * ds.len() as f64).round() as usize).min(ds.len());
    let (train, test) = idx.split_at(n_train);
    let (mut train, mut test) = (train.to_vec(), test.to_vec());
    train.sort_unstable();
    test.sort_unstable();
    (ds.subset(&train), ds.subset(&test))
}
