//! Datasets and continual-learning task streams.
//!
//! MNIST is read from the IDX files (`train-images-idx3-ubyte`, …) in a
//! directory; nothing is downloaded. Task streams are built from a
//! train/test pair:
//!
//! * split: each task keeps two classes, relabelled `{0, 1}`;
//! * permuted: every task keeps all ten classes under a fixed pixel
//!   permutation (identity for the first task);
//! * synthetic: two 2-D Gaussian blobs per task, rotated around the origin
//!   so tasks occupy disjoint regions.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const MNIST_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

pub const DEFAULT_SPLIT_PAIRS: [(usize, usize); 5] = [(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)];

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    inputs: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let (n, _) = inputs.dims2("labeled_dataset")?;
        if n != labels.len() {
            return Err(Error::CountMismatch {
                images: n,
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Invalid(format!("label {bad} outside {num_classes} classes")));
        }
        Ok(LabeledDataset {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn input(&self, i: usize) -> &[f64] {
        self.inputs.row(i)
    }

    /// Rows `indices` as an `n×d` batch plus their labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.inputs.row(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::matrix(indices.len(), d, data).expect("sized above"), labels)
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let (inputs, labels) = self.batch(indices);
        LabeledDataset {
            inputs,
            labels,
            num_classes: self.num_classes,
        }
    }

    /// First `n` samples (all of them when `n` is 0 or too large).
    pub fn truncated(&self, n: usize) -> LabeledDataset {
        if n == 0 || n >= self.len() {
            return self.clone();
        }
        self.subset(&(0..n).collect::<Vec<_>>())
    }

    /// Concatenation of datasets with equal width and class count.
    pub fn concat(parts: &[&LabeledDataset]) -> Result<LabeledDataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of nothing".into()))?;
        let (d, c) = (first.dim(), first.num_classes);
        if parts.iter().any(|p| p.dim() != d || p.num_classes != c) {
            return Err(Error::shape("concat", "datasets differ in width or classes"));
        }
        let n: usize = parts.iter().map(|p| p.len()).sum();
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for p in parts {
            data.extend_from_slice(p.inputs.data());
            labels.extend_from_slice(&p.labels);
        }
        LabeledDataset::new(Tensor::matrix(n, d, data)?, labels, c)
    }

    fn map_inputs(&self, f: impl Fn(&[f64], &mut Vec<f64>)) -> LabeledDataset {
        let d = self.dim();
        let mut data = Vec::with_capacity(self.inputs.len());
        for i in 0..self.len() {
            f(self.inputs.row(i), &mut data);
        }
        LabeledDataset {
            inputs: Tensor::matrix(self.len(), d, data).expect("same size"),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
        }
    }
}

/// Train and held-out partitions of one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplits {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn idx_header(bytes: &[u8], path: &Path, magic: u32, dims: usize) -> Result<Vec<usize>> {
    let header_len = 4 + 4 * dims;
    if bytes.len() < header_len {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: header_len as u64,
            actual: bytes.len() as u64,
        });
    }
    let found = BigEndian::read_u32(&bytes[0..4]);
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    let sizes: Vec<usize> = (0..dims)
        .map(|i| BigEndian::read_u32(&bytes[4 + 4 * i..8 + 4 * i]) as usize)
        .collect();
    let expected = header_len as u64 + sizes.iter().map(|&s| s as u64).product::<u64>();
    if (bytes.len() as u64) < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    Ok(sizes)
}

/// Reads an IDX image file and its label file. Pixels are scaled by 1/255.
pub fn parse_idx(image_file: &Path, label_file: &Path) -> Result<LabeledDataset> {
    let img = read_file(image_file)?;
    let dims = idx_header(&img, image_file, IDX_IMAGES_MAGIC, 3)?;
    let lab = read_file(label_file)?;
    let ldims = idx_header(&lab, label_file, IDX_LABELS_MAGIC, 1)?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    if ldims[0] != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: ldims[0],
        });
    }
    let d = rows * cols;
    let pixels: Vec<f64> = img[16..16 + n * d].iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels: Vec<usize> = lab[8..8 + n].iter().map(|&b| usize::from(b)).collect();
    let classes = labels.iter().max().map_or(0, |&m| m + 1).max(10);
    LabeledDataset::new(Tensor::matrix(n, d, pixels)?, labels, classes)
}

/// Writes `dataset` as an IDX image/label pair with `rows×cols` images.
/// Pixels are quantized back to bytes as `round(255·x)`.
pub fn write_idx(
    dataset: &LabeledDataset,
    rows: usize,
    cols: usize,
    image_file: &Path,
    label_file: &Path,
) -> Result<()> {
    if rows * cols != dataset.dim() {
        return Err(Error::shape(
            "write_idx",
            format!("{rows}x{cols} images for width {}", dataset.dim()),
        ));
    }
    if dataset.num_classes() > 256 {
        return Err(Error::Invalid("write_idx: labels must fit in a byte".into()));
    }
    let n = dataset.len();
    let mut img = vec![0u8; 16];
    BigEndian::write_u32(&mut img[0..4], IDX_IMAGES_MAGIC);
    BigEndian::write_u32(&mut img[4..8], n as u32);
    BigEndian::write_u32(&mut img[8..12], rows as u32);
    BigEndian::write_u32(&mut img[12..16], cols as u32);
    img.extend(
        dataset
            .inputs
            .data()
            .iter()
            .map(|&x| (x * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    let mut lab = vec![0u8; 8];
    BigEndian::write_u32(&mut lab[0..4], IDX_LABELS_MAGIC);
    BigEndian::write_u32(&mut lab[4..8], n as u32);
    lab.extend(dataset.labels.iter().map(|&l| l as u8));
    fs::write(image_file, img).map_err(|e| Error::io(image_file, e))?;
    fs::write(label_file, lab).map_err(|e| Error::io(label_file, e))
}

/// Loads the four standard MNIST files from `dir`.
pub fn load_mnist(dir: &Path) -> Result<DatasetSplits> {
    Ok(DatasetSplits {
        train: parse_idx(&dir.join(MNIST_TRAIN_IMAGES), &dir.join(MNIST_TRAIN_LABELS))?,
        test: parse_idx(&dir.join(MNIST_TEST_IMAGES), &dir.join(MNIST_TEST_LABELS))?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scenario {
    Split,
    Permuted,
    Synthetic,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Split => "split",
            Scenario::Permuted => "permuted",
            Scenario::Synthetic => "synthetic",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "split" => Ok(Scenario::Split),
            "permuted" => Ok(Scenario::Permuted),
            "synthetic" => Ok(Scenario::Synthetic),
            other => Err(Error::Config(format!("unknown scenario '{other}'"))),
        }
    }
}

/// Human-readable task identity. Used for logging only.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDescriptor {
    pub name: String,
    pub classes: Vec<usize>,
    pub permutation: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub descriptor: TaskDescriptor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub scenario: Scenario,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Width of the shared output head.
    pub fn num_classes(&self) -> usize {
        self.tasks.first().map_or(0, |t| t.train.num_classes())
    }

    pub fn input_dim(&self) -> usize {
        self.tasks.first().map_or(0, |t| t.train.dim())
    }

    /// Keeps at most `n` training samples per task (0 keeps all).
    pub fn limit_train(mut self, n: usize) -> Self {
        for t in &mut self.tasks {
            t.train = t.train.truncated(n);
        }
        self
    }
}

fn select_pair(ds: &LabeledDataset, pair: (usize, usize)) -> LabeledDataset {
    let idx: Vec<usize> = (0..ds.len())
        .filter(|&i| ds.labels[i] == pair.0 || ds.labels[i] == pair.1)
        .collect();
    let (inputs, labels) = ds.batch(&idx);
    let labels = labels.into_iter().map(|l| usize::from(l == pair.1)).collect();
    LabeledDataset {
        inputs,
        labels,
        num_classes: 2,
    }
}

/// One binary task per class pair, labels remapped to `{0, 1}`.
pub fn make_split_tasks(splits: &DatasetSplits, pairs: &[(usize, usize)]) -> Result<TaskStream> {
    if pairs.is_empty() {
        return Err(Error::Invalid("split tasks: no class pairs".into()));
    }
    let classes = splits.train.num_classes();
    let mut seen = vec![false; classes];
    for &(a, b) in pairs {
        for c in [a, b] {
            if c >= classes {
                return Err(Error::Invalid(format!("split tasks: class {c} not in dataset")));
            }
            if seen[c] || a == b {
                return Err(Error::Invalid(format!("split tasks: class {c} used twice")));
            }
            seen[c] = true;
        }
    }
    let tasks = pairs
        .iter()
        .map(|&pair| {
            let train = select_pair(&splits.train, pair);
            if train.is_empty() {
                return Err(Error::Invalid(format!("split tasks: no samples for classes {pair:?}")));
            }
            Ok(Task {
                train,
                test: select_pair(&splits.test, pair),
                descriptor: TaskDescriptor {
                    name: format!("{}/{}", pair.0, pair.1),
                    classes: vec![pair.0, pair.1],
                    permutation: None,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskStream {
        tasks,
        scenario: Scenario::Split,
    })
}

/// Seeded Fisher–Yates permutation of `0..n`.
pub fn random_permutation(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        p.swap(i, j);
    }
    p
}

/// `out[k] = x[perm[k]]`.
pub fn permute_pixels(dataset: &LabeledDataset, perm: &[usize]) -> LabeledDataset {
    dataset.map_inputs(|row, out| out.extend(perm.iter().map(|&k| row[k])))
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// `n_tasks` ten-class tasks; task 1 is unpermuted.
pub fn make_permuted_tasks(splits: &DatasetSplits, n_tasks: usize, seed: u64) -> Result<TaskStream> {
    if n_tasks == 0 {
        return Err(Error::Invalid("permuted tasks: need at least one task".into()));
    }
    let d = splits.train.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tasks = (0..n_tasks)
        .map(|t| {
            let perm = if t == 0 {
                (0..d).collect()
            } else {
                random_permutation(d, &mut rng)
            };
            Task {
                train: permute_pixels(&splits.train, &perm),
                test: permute_pixels(&splits.test, &perm),
                descriptor: TaskDescriptor {
                    name: format!("perm-{}", t + 1),
                    classes: (0..splits.train.num_classes()).collect(),
                    permutation: Some(perm),
                },
            }
        })
        .collect();
    Ok(TaskStream {
        tasks,
        scenario: Scenario::Permuted,
    })
}

fn blob_task(center: (f64, f64), axis: (f64, f64), separation: f64, n: usize, rng: &mut impl Rng) -> LabeledDataset {
    let half = separation / 2.0;
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let s = if label == 0 { half } else { -half };
        let nx: f64 = StandardNormal.sample(rng);
        let ny: f64 = StandardNormal.sample(rng);
        data.push(center.0 + s * axis.0 + nx);
        data.push(center.1 + s * axis.1 + ny);
        labels.push(label);
    }
    LabeledDataset {
        inputs: Tensor::matrix(n, 2, data).expect("sized above"),
        labels,
        num_classes: 2,
    }
}

/// Binary 2-D tasks: task `t` sits at angle `2πt/n_tasks` on a circle of
/// radius `2·separation`; its two unit-variance blobs are `separation`
/// apart along the tangent. Labels alternate, so classes balance exactly
/// for even `n_per_task`.
pub fn make_synthetic_stream(n_tasks: usize, n_per_task: usize, separation: f64, seed: u64) -> Result<TaskStream> {
    if !(separation > 0.0) {
        return Err(Error::Invalid(format!("synthetic stream: separation {separation}")));
    }
    if n_tasks == 0 || n_per_task == 0 {
        return Err(Error::Invalid("synthetic stream: empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = 2.0 * separation;
    let tasks = (0..n_tasks)
        .map(|t| {
            let angle = TAU * t as f64 / n_tasks as f64;
            let (s, c) = angle.sin_cos();
            let center = (radius * c, radius * s);
            let axis = (-s, c);
            Task {
                train: blob_task(center, axis, separation, n_per_task, &mut rng),
                test: blob_task(center, axis, separation, n_per_task, &mut rng),
                descriptor: TaskDescriptor {
                    name: format!("blobs-{}", t + 1),
                    classes: vec![0, 1],
                    permutation: None,
                },
            }
        })
        .collect();
    Ok(TaskStream {
        tasks,
        scenario: Scenario::Synthetic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_splits() -> DatasetSplits {
        let mk = |n: usize| {
            let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
            let data = (0..n * 4).map(|i| (i % 256) as f64 / 255.0).collect();
            LabeledDataset::new(Tensor::matrix(n, 4, data).unwrap(), labels, 10).unwrap()
        };
        DatasetSplits {
            train: mk(50),
            test: mk(20),
        }
    }

    #[test]
    fn split_tasks_partition_and_remap() {
        let s = toy_splits();
        let stream = make_split_tasks(&s, &DEFAULT_SPLIT_PAIRS).unwrap();
        assert_eq!(stream.len(), 5);
        assert_eq!(stream.num_classes(), 2);
        assert_eq!(stream.tasks.iter().map(|t| t.train.len()).sum::<usize>(), 50);
        assert_eq!(stream.tasks.iter().map(|t| t.test.len()).sum::<usize>(), 20);
        assert!(stream.tasks.iter().all(|t| t.train.labels().iter().all(|&l| l < 2)));
    }

    #[test]
    fn split_tasks_reject_overlap_and_missing() {
        let s = toy_splits();
        assert!(make_split_tasks(&s, &[(0, 1), (1, 2)]).is_err());
        assert!(make_split_tasks(&s, &[(0, 11)]).is_err());
        assert!(make_split_tasks(&s, &[(3, 3)]).is_err());
    }

    #[test]
    fn permutation_is_a_bijection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_permutation(100, &mut rng);
        let mut sorted = p.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        let inv = invert_permutation(&p);
        assert!(p.iter().enumerate().all(|(i, &v)| inv[v] == i));
    }

    #[test]
    fn permuted_first_task_is_identity() {
        let s = toy_splits();
        let stream = make_permuted_tasks(&s, 3, 4).unwrap();
        assert_eq!(stream.tasks[0].train, s.train);
        assert_eq!(stream.tasks[0].test, s.test);
        assert_eq!(stream.num_classes(), 10);
        assert!(make_permuted_tasks(&s, 0, 4).is_err());
    }

    #[test]
    fn synthetic_is_balanced_and_seeded() {
        let a = make_synthetic_stream(3, 200, 10.0, 5).unwrap();
        let b = make_synthetic_stream(3, 200, 10.0, 5).unwrap();
        assert_eq!(a, b);
        for t in &a.tasks {
            assert_eq!(t.train.labels().iter().filter(|&&l| l == 1).count(), 100);
        }
        assert!(make_synthetic_stream(2, 10, 0.0, 1).is_err());
    }

    #[test]
    fn concat_and_truncate() {
        let s = toy_splits();
        let c = LabeledDataset::concat(&[&s.train, &s.test]).unwrap();
        assert_eq!(c.len(), 70);
        assert_eq!(c.input(50), s.test.input(0));
        assert_eq!(s.train.truncated(7).len(), 7);
        assert_eq!(s.train.truncated(0).len(), 50);
    }
}
