//! Datasets: the 3by3 bar distribution, IDX/MNIST ingestion, B/BSt
//! binarization, 14x14 miniMNIST pooling and shuffled mini-batches.

pub mod idx;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eval::DiscreteDistribution;
use crate::model::Encoding;
use crate::{Error, Result};

pub use idx::{load_idx, write_idx};

/// Side length of the 3by3 grid.
pub const GRID: usize = 3;

/// The 3by3 bar distribution: choose horizontal or vertical uniformly, then
/// switch on each of the three full bars independently with `bar_prob`.
///
/// Pixel `(r, c)` is visible unit `3 r + c`. Returns the exact pmf over the
/// reachable states (identical images from the two orientations merged).
pub fn three_by_three(bar_prob: f64) -> Result<DiscreteDistribution> {
    if !(0.0..=1.0).contains(&bar_prob) {
        return Err(Error::invalid(format!("bar probability {bar_prob} outside [0, 1]")));
    }
    let mut table: Vec<(Vec<bool>, f64)> = Vec::new();
    for horizontal in [true, false] {
        for bars in 0..8u32 {
            let on = bars.count_ones() as i32;
            let p = 0.5 * bar_prob.powi(on) * (1.0 - bar_prob).powi(GRID as i32 - on);
            let img: Vec<bool> = (0..GRID * GRID)
                .map(|k| {
                    let bar = if horizontal { k / GRID } else { k % GRID };
                    bars >> bar & 1 == 1
                })
                .collect();
            match table.iter_mut().find(|(s, _)| *s == img) {
                Some((_, q)) => *q += p,
                None => table.push((img, p)),
            }
        }
    }
    table.retain(|(_, p)| *p > 0.0);
    let (support, probs) = table.into_iter().unzip();
    DiscreteDistribution::new(support, probs)
}

/// All 512 grid states as `"bitstring probability"` lines, bit `k` = pixel `k`,
/// in increasing order of the state read as a binary number with pixel 0 first.
pub fn dump_three_by_three(dist: &DiscreteDistribution) -> String {
    let n = GRID * GRID;
    let mut out = String::new();
    for code in 0..1usize << n {
        let bits: Vec<bool> = (0..n).map(|k| code >> (n - 1 - k) & 1 == 1).collect();
        let s: String = bits.iter().map(|&b| if b { '1' } else { '0' }).collect();
        let _ = writeln!(out, "{s} {}", dist.prob(&bits));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// Gray images in `[0, 1]`, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    images: Array2<f64>,
    labels: Option<Vec<u8>>,
    width: usize,
    height: usize,
    split: Split,
}

impl ImageDataset {
    pub fn new(images: Array2<f64>, labels: Option<Vec<u8>>, width: usize, height: usize, split: Split) -> Result<Self> {
        if images.ncols() != width * height {
            return Err(Error::shape(format!(
                "{} columns for a {width}x{height} image",
                images.ncols()
            )));
        }
        if images.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("gray values must lie in [0, 1]"));
        }
        if labels.as_ref().is_some_and(|l| l.len() != images.nrows()) {
            return Err(Error::shape("label count differs from image count"));
        }
        Ok(Self {
            images,
            labels,
            width,
            height,
            split,
        })
    }

    pub fn images(&self) -> &Array2<f64> {
        &self.images
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dim(&self) -> usize {
        self.width * self.height
    }

    pub fn len(&self) -> usize {
        self.images.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Rows `range` as a new dataset tagged `split`.
    pub fn slice(&self, range: std::ops::Range<usize>, split: Split) -> Self {
        Self {
            images: self.images.slice(ndarray::s![range.clone(), ..]).to_owned(),
            labels: self.labels.as_ref().map(|l| l[range].to_vec()),
            width: self.width,
            height: self.height,
            split,
        }
    }
}

/// Non-overlapping 2x2 mean pooling, 28x28 -> 14x14.
pub fn downsample_mnist(ds: &ImageDataset) -> Result<ImageDataset> {
    if ds.width != 28 || ds.height != 28 {
        return Err(Error::shape(format!(
            "miniMNIST pooling needs 28x28 images, got {}x{}",
            ds.width, ds.height
        )));
    }
    let (w, h) = (14, 14);
    let mut out = Array2::zeros((ds.len(), w * h));
    for (src, mut dst) in ds.images.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        for r in 0..h {
            for c in 0..w {
                let at = |dr: usize, dc: usize| src[(2 * r + dr) * 28 + 2 * c + dc];
                dst[r * w + c] = (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0;
            }
        }
    }
    ImageDataset::new(out, ds.labels.clone(), w, h, ds.split)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinarizationMode {
    /// Threshold once: gray `>= 0.5` is on.
    #[default]
    B,
    /// Resample every pixel as Bernoulli(gray) whenever a batch is drawn.
    BSt,
}

impl std::str::FromStr for BinarizationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "b" => Ok(BinarizationMode::B),
            "bst" => Ok(BinarizationMode::BSt),
            other => Err(Error::Config(format!("unknown binarization {other:?}"))),
        }
    }
}

pub fn threshold(gray: f64) -> bool {
    gray >= 0.5
}

/// Serves binary batches of a dataset in a given encoding.
#[derive(Debug, Clone)]
pub struct BatchProvider {
    mode: BinarizationMode,
    encoding: Encoding,
    gray: Array2<f64>,
    fixed: Option<Array2<f64>>,
    rng: ChaCha8Rng,
}

/// Builds a batch provider; B materializes the thresholded set once, BSt
/// draws from its own rng stream seeded by `seed`.
pub fn binarize(ds: &ImageDataset, mode: BinarizationMode, encoding: Encoding, seed: u64) -> BatchProvider {
    let fixed = match mode {
        BinarizationMode::B => Some(ds.images.mapv(|g| encoding.encode(threshold(g)))),
        BinarizationMode::BSt => None,
    };
    BatchProvider {
        mode,
        encoding,
        gray: ds.images.clone(),
        fixed,
        rng: ChaCha8Rng::seed_from_u64(seed),
    }
}

impl BatchProvider {
    pub fn mode(&self) -> BinarizationMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.gray.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.gray.ncols()
    }

    /// Restarts the BSt sampling stream (used to make epochs reproducible).
    pub fn reseed(&mut self, seed: u64, stream: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.rng.set_stream(stream);
    }

    /// Binary rows for `indices`, in order.
    pub fn batch(&mut self, indices: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((indices.len(), self.dim()));
        for (mut row, &i) in out.axis_iter_mut(Axis(0)).zip(indices) {
            match &self.fixed {
                Some(f) => row.assign(&f.row(i)),
                None => {
                    for (v, &g) in row.iter_mut().zip(self.gray.row(i)) {
                        *v = self.encoding.encode(self.rng.random::<f64>() < g);
                    }
                }
            }
        }
        out
    }

    /// The whole set in its natural order.
    pub fn all(&mut self) -> Array2<f64> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }
}

/// Per-epoch shuffled mini-batches over `n` items; the last partial batch is kept.
#[derive(Debug, Clone, Copy)]
pub struct EpochBatches {
    n: usize,
    batch_size: usize,
    seed: u64,
}

pub fn split_batches(n: usize, batch_size: usize, seed: u64) -> Result<EpochBatches> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    Ok(EpochBatches { n, batch_size, seed })
}

impl EpochBatches {
    pub fn batches_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch_size)
    }

    /// Index batches for `epoch`; the permutation depends only on `(seed, epoch)`.
    pub fn epoch(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);
        let mut idx: Vec<usize> = (0..self.n).collect();
        idx.shuffle(&mut rng);
        idx.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }
}

/// Train/validation/test partitions of an image collection.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: ImageDataset,
    pub validation: ImageDataset,
    pub test: ImageDataset,
}

fn find_file(dir: &Path, stems: &[&str]) -> Option<PathBuf> {
    stems.iter().find_map(|s| {
        [dir.join(s), dir.join(format!("{s}.gz"))]
            .into_iter()
            .find(|p| p.is_file())
    })
}

/// Standard MNIST layout size of the validation tail carved from the training file.
pub const MNIST_VALIDATION: usize = 10_000;

/// Loads MNIST from `dir`.
///
/// With the standard four-file layout (`train-*` and `t10k-*`, plain or
/// `.gz`), the last 10k training images become validation and `t10k` is the
/// test split. With a single `images-idx3-ubyte[.gz]` file (such as the
/// bundled 10k subset) the images are split 80/10/10 in file order.
pub fn load_mnist_dir(dir: &Path) -> Result<Splits> {
    let train_images = find_file(dir, &["train-images-idx3-ubyte", "train-images.idx3-ubyte"]);
    let test_images = find_file(dir, &["t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"]);
    if let (Some(tr), Some(te)) = (train_images, test_images) {
        let trl = find_file(dir, &["train-labels-idx1-ubyte", "train-labels.idx1-ubyte"]);
        let tel = find_file(dir, &["t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"]);
        let full = load_idx(&tr, trl.as_deref())?;
        let test = load_idx(&te, tel.as_deref())?.with_split(Split::Test);
        if full.len() <= MNIST_VALIDATION {
            return Err(Error::invalid("training file too small to carve a validation split"));
        }
        let cut = full.len() - MNIST_VALIDATION;
        return Ok(Splits {
            train: full.slice(0..cut, Split::Train),
            validation: full.slice(cut..full.len(), Split::Validation),
            test,
        });
    }
    let single = find_file(dir, &["images-idx3-ubyte"]).ok_or_else(|| {
        Error::Config(format!("no MNIST IDX files found in {}", dir.display()))
    })?;
    let labels = find_file(dir, &["labels-idx1-ubyte"]);
    let all = load_idx(&single, labels.as_deref())?;
    let n = all.len();
    let (a, b) = (n * 8 / 10, n * 9 / 10);
    if a == 0 || b == a || b == n {
        return Err(Error::invalid("dataset too small to split 80/10/10"));
    }
    Ok(Splits {
        train: all.slice(0..a, Split::Train),
        validation: all.slice(a..b, Split::Validation),
        test: all.slice(b..n, Split::Test),
    })
}

/// Applies [`downsample_mnist`] to every split.
pub fn mini_splits(s: &Splits) -> Result<Splits> {
    Ok(Splits {
        train: downsample_mnist(&s.train)?,
        validation: downsample_mnist(&s.validation)?,
        test: downsample_mnist(&s.test)?,
    })
}

/// Whether every entry of `x` is a valid unit value of `encoding`.
pub fn is_binary(x: &Array2<f64>, encoding: Encoding) -> bool {
    x.iter().all(|&v| encoding.is_valid(v))
}
