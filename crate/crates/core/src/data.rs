//! Class-incremental task streams: synthetic Gaussian blobs and IDX / CSV
//! loaders with seeded, reproducible splits.

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{Batch, ClassRange};

/// Fraction of each task's training pool held out for validation.
pub const VAL_FRACTION: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub train: Batch,
    pub val: Batch,
    pub test: Batch,
    pub range: ClassRange,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    tasks: Vec<Task>,
    input_dim: usize,
    total_classes: usize,
}

impl TaskStream {
    /// Checks that class ranges are contiguous from 0 and that every label
    /// falls in its task's range.
    pub fn new(tasks: Vec<Task>, input_dim: usize) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::validation("a task stream needs at least one task"));
        }
        let mut next = 0;
        for (t, task) in tasks.iter().enumerate() {
            if task.range.start != next || task.range.is_empty() {
                return Err(Error::validation(format!("task {} class range is not contiguous", t + 1)));
            }
            next = task.range.end;
            for b in [&task.train, &task.val, &task.test] {
                if b.inputs.cols != input_dim {
                    return Err(Error::layout(format!("task {} inputs are not {input_dim}-dimensional", t + 1)));
                }
                if let Some(y) = b.labels.iter().find(|&&y| !task.range.contains(y)) {
                    return Err(Error::validation(format!("task {} has label {y} outside its range", t + 1)));
                }
            }
            if task.train.is_empty() {
                return Err(Error::validation(format!("task {} has no training data", t + 1)));
            }
        }
        Ok(Self {
            tasks,
            input_dim,
            total_classes: next,
        })
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn total_classes(&self) -> usize {
        self.total_classes
    }

    /// Classes per task, in order.
    pub fn head_dims(&self) -> Vec<usize> {
        self.tasks.iter().map(|t| t.range.len()).collect()
    }

    /// The first `t` tasks.
    pub fn truncated(&self, t: usize) -> Result<Self> {
        Self::new(self.tasks[..t.min(self.len())].to_vec(), self.input_dim)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlobSpec {
    pub tasks: usize,
    pub classes_per_task: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub spread: f64,
    /// Standard deviation of each class-mean coordinate.
    pub mean_scale: f64,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            tasks: 5,
            classes_per_task: 2,
            dim: 16,
            samples_per_class: 200,
            spread: 0.6,
            mean_scale: 1.0,
            seed: 0,
        }
    }
}

fn sub_seed(seed: u64, stream: u64) -> u64 {
    // SplitMix64 finalizer over (seed, stream).
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derived seed for an independent random stream.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    sub_seed(seed, stream)
}

/// Gaussian clusters, one per class, with unit-norm-scale means drawn once
/// from the seed. Each split resamples from its own sub-seed. Test and
/// validation sizes are `n/2` and `n/10` per class (at least one).
pub fn gen_blobs(spec: &BlobSpec) -> Result<TaskStream> {
    let BlobSpec {
        tasks,
        classes_per_task: c,
        dim: d,
        samples_per_class: n,
        spread,
        mean_scale,
        seed,
    } = *spec;
    if tasks == 0 || c == 0 || d == 0 || n == 0 {
        return Err(Error::validation("blob counts must be at least 1"));
    }
    if !(spread.is_finite() && spread >= 0.0) {
        return Err(Error::validation("blob spread must be finite and nonnegative"));
    }
    if !(mean_scale.is_finite() && mean_scale >= 0.0) {
        return Err(Error::validation("blob mean scale must be finite and nonnegative"));
    }
    let total = tasks * c;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 0));
    let means: Vec<Vec<f64>> = (0..total)
        .map(|_| (0..d).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); mean_scale * z }).collect())
        .collect();
    let sizes = [n, (n / 10).max(1), (n / 2).max(1)];
    let mut out = Vec::with_capacity(tasks);
    for t in 0..tasks {
        let range = ClassRange::new(t * c, (t + 1) * c)?;
        let mut splits = Vec::with_capacity(3);
        for (s, &m) in sizes.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 1 + (t * 3 + s) as u64));
            let mut data = Vec::with_capacity(c * m * d);
            let mut labels = Vec::with_capacity(c * m);
            for class in range.start..range.end {
                for _ in 0..m {
                    for mu in &means[class] {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        data.push(mu + spread * z);
                    }
                    labels.push(class);
                }
            }
            splits.push(Batch::new(Matrix::from_vec(labels.len(), d, data), labels)?);
        }
        let test = splits.pop().expect("three splits");
        let val = splits.pop().expect("three splits");
        let train = splits.pop().expect("three splits");
        out.push(Task { train, val, test, range });
    }
    TaskStream::new(out, d)
}

/// Contiguous partition of `classes` into `t` ranges; the first
/// `classes % t` ranges get one extra class.
pub fn partition_classes(classes: usize, t: usize) -> Result<Vec<ClassRange>> {
    if t == 0 || classes < t {
        return Err(Error::validation(format!("cannot split {classes} classes into {t} tasks")));
    }
    let base = classes / t;
    let extra = classes % t;
    let mut start = 0;
    (0..t)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = ClassRange::new(start, start + len);
            start += len;
            r
        })
        .collect()
}

fn split_rows<R: Rng + ?Sized>(idx: &mut Vec<usize>, frac: f64, rng: &mut R) -> Vec<usize> {
    idx.shuffle(rng);
    let k = if idx.len() > 1 {
        ((idx.len() as f64 * frac).round() as usize).clamp(1, idx.len() - 1)
    } else {
        0
    };
    let held: Vec<usize> = idx.drain(..k).collect();
    idx.sort_unstable();
    let mut held = held;
    held.sort_unstable();
    held
}

/// Groups labelled rows into tasks by class range. Training rows are split
/// 90/10 into train/val per task by a seeded shuffle. When no separate test
/// rows are given the validation split doubles as the test split.
fn build_stream(
    x: &Matrix,
    y: &[usize],
    test: Option<(&Matrix, &[usize])>,
    ranges: &[ClassRange],
    seed: u64,
) -> Result<TaskStream> {
    let mut tasks = Vec::with_capacity(ranges.len());
    let all = Batch::new(x.clone(), y.to_vec())?;
    let test_all = match test {
        Some((tx, ty)) => Some(Batch::new(tx.clone(), ty.to_vec())?),
        None => None,
    };
    for (t, &range) in ranges.iter().enumerate() {
        let mut idx: Vec<usize> = (0..y.len()).filter(|&i| range.contains(y[i])).collect();
        if idx.is_empty() {
            return Err(Error::validation(format!("task {} has no samples", t + 1)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, t as u64));
        let val_idx = split_rows(&mut idx, VAL_FRACTION, &mut rng);
        let train = all.select(&idx);
        let val = all.select(&val_idx);
        let test = match &test_all {
            Some(tb) => {
                let ti: Vec<usize> = (0..tb.len()).filter(|&i| range.contains(tb.labels[i])).collect();
                tb.select(&ti)
            }
            None => val.clone(),
        };
        tasks.push(Task { train, val, test, range });
    }
    TaskStream::new(tasks, x.cols)
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn read_u32(buf: &[u8], at: usize) -> Result<u32> {
    buf.get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format_at("truncated IDX header", at as u64))
}

/// Parses an IDX image file (`u8` pixels) into a row-major matrix scaled
/// to `[0, 1]`.
pub fn parse_idx_images(buf: &[u8]) -> Result<Matrix> {
    let magic = read_u32(buf, 0)?;
    if magic != IDX_IMAGES {
        return Err(Error::format_at(format!("bad IDX image magic {magic:#010x}"), 0));
    }
    let n = read_u32(buf, 4)? as usize;
    let rows = read_u32(buf, 8)? as usize;
    let cols = read_u32(buf, 12)? as usize;
    let d = rows * cols;
    let need = 16 + n * d;
    if buf.len() < need || n == 0 || d == 0 {
        return Err(Error::format_at(
            format!("IDX image payload holds {} bytes, header declares {}", buf.len().saturating_sub(16), n * d),
            buf.len() as u64,
        ));
    }
    let data = buf[16..need].iter().map(|&p| p as f64 / 255.0).collect();
    Ok(Matrix::from_vec(n, d, data))
}

/// Parses an IDX label file.
pub fn parse_idx_labels(buf: &[u8]) -> Result<Vec<usize>> {
    let magic = read_u32(buf, 0)?;
    if magic != IDX_LABELS {
        return Err(Error::format_at(format!("bad IDX label magic {magic:#010x}"), 0));
    }
    let n = read_u32(buf, 4)? as usize;
    if buf.len() < 8 + n || n == 0 {
        return Err(Error::format_at(
            format!("IDX label payload holds {} bytes, header declares {n}", buf.len().saturating_sub(8)),
            buf.len() as u64,
        ));
    }
    Ok(buf[8..8 + n].iter().map(|&b| b as usize).collect())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

fn idx_pair(images: &Path, labels: &Path) -> Result<(Matrix, Vec<usize>)> {
    let x = parse_idx_images(&read_file(images)?)?;
    let y = parse_idx_labels(&read_file(labels)?)?;
    if x.rows != y.len() {
        return Err(Error::validation(format!("{} images but {} labels", x.rows, y.len())));
    }
    Ok((x, y))
}

/// Loads an IDX (MNIST-style) dataset and partitions its classes into `t`
/// contiguous tasks. Labels must be `0..classes`.
pub fn load_idx(
    images: &Path,
    labels: &Path,
    test: Option<(&Path, &Path)>,
    t: usize,
    seed: u64,
) -> Result<TaskStream> {
    let (x, y) = idx_pair(images, labels)?;
    let classes = y.iter().max().map_or(0, |m| m + 1);
    let ranges = partition_classes(classes, t)?;
    match test {
        Some((ti, tl)) => {
            let (tx, ty) = idx_pair(ti, tl)?;
            build_stream(&x, &y, Some((&tx, &ty)), &ranges, seed)
        }
        None => build_stream(&x, &y, None, &ranges, seed),
    }
}

/// Reads a numeric CSV with the class label in column `label_col`.
pub fn read_csv(path: &Path, label_col: usize, has_header: bool) -> Result<(Matrix, Vec<usize>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::format_line(e.to_string(), 0))?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::format_line(e.to_string(), i as u64 + 1))?;
        let line = rec.position().map_or(i as u64 + 1, |p| p.line());
        match width {
            None => {
                if label_col >= rec.len() {
                    return Err(Error::format_line(format!("label column {label_col} missing"), line));
                }
                width = Some(rec.len());
            }
            Some(w) if w != rec.len() => {
                return Err(Error::format_line(format!("row has {} fields, expected {w}", rec.len()), line));
            }
            _ => {}
        }
        for (j, cell) in rec.iter().enumerate() {
            let cell = cell.trim();
            if j == label_col {
                let y: usize = cell
                    .parse()
                    .map_err(|_| Error::format_line(format!("column {j}: label {cell:?} is not a class index"), line))?;
                labels.push(y);
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| Error::format_line(format!("column {j}: {cell:?} is not numeric"), line))?;
                if !v.is_finite() {
                    return Err(Error::format_line(format!("column {j}: non-finite value"), line));
                }
                data.push(v);
            }
        }
    }
    let w = width.ok_or_else(|| Error::format_line("CSV has no data rows", 1))?;
    if w < 2 {
        return Err(Error::format_line("CSV needs a label and at least one feature", 1));
    }
    Ok((Matrix::from_vec(labels.len(), w - 1, data), labels))
}

/// Loads a CSV dataset and partitions its classes into `t` tasks.
pub fn load_csv(path: &Path, label_col: usize, has_header: bool, t: usize, seed: u64) -> Result<TaskStream> {
    let (x, y) = read_csv(path, label_col, has_header)?;
    let classes = y.iter().max().map_or(0, |m| m + 1);
    let ranges = partition_classes(classes, t)?;
    build_stream(&x, &y, None, &ranges, seed)
}
