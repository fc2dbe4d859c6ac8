//! Dataset loading (MNIST IDX, CIFAR-10 binary batches), auxiliary/private
//! splitting and PGM/PPM image output.
//!
//! Pixels are kept as the original bytes and scaled by `1/255` when a sample
//! is materialized, so `pixel * 255` always recovers the file contents.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{FidelError, Result};
use crate::tensor::Tensor;

pub const MNIST_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const MNIST_LABEL_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_LEN: usize = 1 + 3 * 32 * 32;
pub const CIFAR_BATCH_RECORDS: usize = 10_000;
/// Leading test-set samples handed to the adversary as auxiliary data.
pub const AUXILIARY_LEN: usize = 6000;
pub const TEST_SET_LEN: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Source {
    Mnist,
    Cifar10,
}

impl Source {
    pub fn name(self) -> &'static str {
        match self {
            Source::Mnist => "mnist",
            Source::Cifar10 => "cifar10",
        }
    }

    pub fn sample_shape(self) -> [usize; 3] {
        match self {
            Source::Mnist => [28, 28, 1],
            Source::Cifar10 => [32, 32, 3],
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Some(Source::Mnist),
            "cifar10" | "cifar-10" | "cifar" => Some(Source::Cifar10),
            _ => None,
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
    Auxiliary,
    PrivatePool,
}

/// Read-only indexed access to labelled samples.
pub trait SampleSource {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn sample_shape(&self) -> &[usize];

    /// Image scaled to `[0, 1]`.
    fn image(&self, index: usize) -> Tensor;

    fn label(&self, index: usize) -> u8;

    /// Stack the given samples into an `N x H x W x C` batch.
    fn batch(&self, indices: &[usize]) -> (Tensor, Vec<u8>) {
        let per: usize = self.sample_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.image(i).data());
            labels.push(self.label(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        (Tensor::new(shape, data).expect("batch shape"), labels)
    }
}

#[derive(Clone, PartialEq)]
pub struct Dataset {
    source: Source,
    split: Split,
    shape: Vec<usize>,
    pixels: Vec<u8>,
    labels: Vec<u8>,
}

impl fmt::Debug for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Dataset")
            .field("source", &self.source)
            .field("split", &self.split)
            .field("len", &self.labels.len())
            .finish()
    }
}

impl Dataset {
    /// Build from raw `H x W x C` bytes; labels must lie in `0..10`.
    pub fn from_raw(source: Source, split: Split, pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        let shape = source.sample_shape().to_vec();
        let per: usize = shape.iter().product();
        if pixels.len() != per * labels.len() {
            return Err(FidelError::Shape(format!(
                "{} labels but {} pixel bytes",
                labels.len(),
                pixels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 9) {
            return Err(FidelError::Shape(format!("label {bad} outside 0..10")));
        }
        Ok(Dataset {
            source,
            split,
            shape,
            pixels,
            labels,
        })
    }

    pub fn source(&self) -> Source {
        self.source
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// Original bytes of sample `index`.
    pub fn raw(&self, index: usize) -> &[u8] {
        let per = self.pixels.len() / self.labels.len().max(1);
        &self.pixels[index * per..(index + 1) * per]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Contiguous, order-preserving slice of the dataset.
    pub fn slice(&self, start: usize, end: usize, split: Split) -> Dataset {
        let per: usize = self.shape.iter().product();
        Dataset {
            source: self.source,
            split,
            shape: self.shape.clone(),
            pixels: self.pixels[start * per..end * per].to_vec(),
            labels: self.labels[start..end].to_vec(),
        }
    }

    pub fn subset(&self, indices: Vec<usize>) -> Subset<'_> {
        Subset { base: self, indices }
    }
}

impl SampleSource for Dataset {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn sample_shape(&self) -> &[usize] {
        &self.shape
    }

    fn image(&self, index: usize) -> Tensor {
        let data = self.raw(index).iter().map(|&b| b as f64 / 255.0).collect();
        Tensor::new(self.shape.clone(), data).expect("sample shape")
    }

    fn label(&self, index: usize) -> u8 {
        self.labels[index]
    }
}

/// A view selecting some samples of a dataset, in the given order.
#[derive(Debug, Clone)]
pub struct Subset<'a> {
    base: &'a Dataset,
    indices: Vec<usize>,
}

impl Subset<'_> {
    /// Positions of the selected samples in the underlying dataset.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

impl SampleSource for Subset<'_> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn sample_shape(&self) -> &[usize] {
        &self.base.shape
    }

    fn image(&self, index: usize) -> Tensor {
        self.base.image(self.indices[index])
    }

    fn label(&self, index: usize) -> u8 {
        self.base.label(self.indices[index])
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| FidelError::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("four bytes")))
        .ok_or_else(|| FidelError::format(path, "truncated header"))
}

/// Parse an MNIST image/label IDX file pair.
pub fn load_mnist(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let img = read_file(images)?;
    let magic = be_u32(&img, 0, images)?;
    if magic != MNIST_IMAGE_MAGIC {
        return Err(FidelError::BadMagic {
            path: images.to_path_buf(),
            expected: MNIST_IMAGE_MAGIC,
            actual: magic,
        });
    }
    let count = be_u32(&img, 4, images)? as usize;
    let rows = be_u32(&img, 8, images)? as usize;
    let cols = be_u32(&img, 12, images)? as usize;
    if (rows, cols) != (28, 28) {
        return Err(FidelError::format(images, format!("expected 28x28 images, header says {rows}x{cols}")));
    }
    let body = &img[16..];
    if body.len() != count * rows * cols {
        return Err(FidelError::format(
            images,
            format!("header promises {count} images, file holds {} bytes of pixels", body.len()),
        ));
    }

    let lab = read_file(labels)?;
    let magic = be_u32(&lab, 0, labels)?;
    if magic != MNIST_LABEL_MAGIC {
        return Err(FidelError::BadMagic {
            path: labels.to_path_buf(),
            expected: MNIST_LABEL_MAGIC,
            actual: magic,
        });
    }
    let label_count = be_u32(&lab, 4, labels)? as usize;
    let label_body = &lab[8..];
    if label_body.len() != label_count {
        return Err(FidelError::format(labels, format!("header promises {label_count} labels, found {}", label_body.len())));
    }
    if label_count != count {
        return Err(FidelError::format(labels, format!("{label_count} labels for {count} images")));
    }
    Dataset::from_raw(Source::Mnist, split, body.to_vec(), label_body.to_vec())
        .map_err(|e| FidelError::format(labels, e.to_string()))
}

/// Load `train-*` and `t10k-*` IDX files from a directory.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_mnist(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
        Split::Train,
    )?;
    let test = load_mnist(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
        Split::Test,
    )?;
    Ok((train, test))
}

/// Parse one CIFAR-10 binary batch: records of a label byte followed by the
/// red, green and blue 32x32 planes. Planes are interleaved into `H x W x C`.
pub fn load_cifar10_batch(path: &Path, split: Split) -> Result<Dataset> {
    let bytes = read_file(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_LEN != 0 {
        return Err(FidelError::format(
            path,
            format!("{} bytes is not a whole number of {CIFAR_RECORD_LEN}-byte records", bytes.len()),
        ));
    }
    let records = bytes.len() / CIFAR_RECORD_LEN;
    let mut pixels = Vec::with_capacity(records * 3072);
    let mut labels = Vec::with_capacity(records);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD_LEN).enumerate() {
        if rec[0] > 9 {
            return Err(FidelError::format(path, format!("record {r} has label {}", rec[0])));
        }
        labels.push(rec[0]);
        let planes = &rec[1..];
        for p in 0..1024 {
            pixels.extend_from_slice(&[planes[p], planes[1024 + p], planes[2048 + p]]);
        }
    }
    Dataset::from_raw(Source::Cifar10, split, pixels, labels)
}

/// Load `data_batch_{1..5}.bin` and `test_batch.bin` from a directory.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for i in 1..=5 {
        let path = dir.join(format!("data_batch_{i}.bin"));
        let batch = load_cifar10_batch(&path, Split::Train)?;
        if batch.len() != CIFAR_BATCH_RECORDS {
            return Err(FidelError::format(&path, format!("expected {CIFAR_BATCH_RECORDS} records, found {}", batch.len())));
        }
        pixels.extend_from_slice(&batch.pixels);
        labels.extend_from_slice(&batch.labels);
    }
    let train = Dataset::from_raw(Source::Cifar10, Split::Train, pixels, labels)?;
    let test_path = dir.join("test_batch.bin");
    let test = load_cifar10_batch(&test_path, Split::Test)?;
    if test.len() != CIFAR_BATCH_RECORDS {
        return Err(FidelError::format(&test_path, format!("expected {CIFAR_BATCH_RECORDS} records, found {}", test.len())));
    }
    Ok((train, test))
}

/// Locations of the datasets below a common root directory.
#[derive(Debug, Clone)]
pub struct DataRoot(pub PathBuf);

impl DataRoot {
    /// Environment variable naming the dataset root.
    pub const ENV: &'static str = "FIDEL_DATA";

    pub fn mnist_dir(&self) -> PathBuf {
        self.0.join("mnist")
    }

    pub fn cifar_dir(&self) -> PathBuf {
        self.0.join("cifar-10-batches-bin")
    }

    /// Train and test splits of `source`.
    pub fn load(&self, source: Source) -> Result<(Dataset, Dataset)> {
        match source {
            Source::Mnist => load_mnist_dir(&self.mnist_dir()),
            Source::Cifar10 => load_cifar10(&self.cifar_dir()),
        }
    }
}

/// Split a test set into the first 6000 samples (auxiliary, adversary-held)
/// and the remaining 4000 (pool private samples are drawn from).
pub fn split_auxiliary(test: &Dataset) -> Result<(Dataset, Dataset)> {
    if test.len() != TEST_SET_LEN {
        return Err(FidelError::Shape(format!(
            "auxiliary split needs the {TEST_SET_LEN}-sample test set, got {}",
            test.len()
        )));
    }
    Ok((
        test.slice(0, AUXILIARY_LEN, Split::Auxiliary),
        test.slice(AUXILIARY_LEN, TEST_SET_LEN, Split::PrivatePool),
    ))
}

/// Draw `n` distinct indices from `0..pool` uniformly, seeded.
pub fn sample_private(pool: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 || n > pool {
        return Err(FidelError::Config(format!("cannot draw {n} private samples from a pool of {pool}")));
    }
    let mut rng = crate::rng::seeded(seed);
    Ok(rand::seq::index::sample(&mut rng, pool, n).into_vec())
}

/// 8-bit pixels of an `H x W x C` tensor (C = 1 or 3).
///
/// With `normalize`, `[min, max]` maps affinely onto `[0, 255]` (a constant
/// image becomes black); otherwise values are clamped to `[0, 1]` and scaled.
pub fn to_bytes(tensor: &Tensor, normalize: bool) -> Result<(usize, usize, usize, Vec<u8>)> {
    let (h, w, c) = match tensor.shape() {
        [h, w, c] if *c == 1 || *c == 3 => (*h, *w, *c),
        [h, w] => (*h, *w, 1),
        other => return Err(FidelError::Shape(format!("cannot draw tensor of shape {other:?}"))),
    };
    let (lo, hi) = tensor.min_max();
    let bytes = tensor
        .data()
        .iter()
        .map(|&v| {
            let unit = if normalize {
                if hi > lo {
                    (v - lo) / (hi - lo)
                } else {
                    0.0
                }
            } else {
                v.clamp(0.0, 1.0)
            };
            (unit * 255.0).round() as u8
        })
        .collect();
    Ok((h, w, c, bytes))
}

fn write_pnm(path: &Path, h: usize, w: usize, c: usize, bytes: &[u8]) -> Result<()> {
    let tag = if c == 1 { "P5" } else { "P6" };
    let mut out = Vec::with_capacity(bytes.len() + 20);
    write!(out, "{tag}\n{w} {h}\n255\n").expect("writing to memory");
    out.extend_from_slice(bytes);
    fs::write(path, out).map_err(|e| FidelError::io(path, e))
}

/// Write an `H x W x 1` tensor as binary PGM or `H x W x 3` as binary PPM.
pub fn emit_image(tensor: &Tensor, path: &Path, normalize: bool) -> Result<()> {
    let (h, w, c, bytes) = to_bytes(tensor, normalize)?;
    write_pnm(path, h, w, c, &bytes)
}

/// Tile equally-shaped images into a grid with `cols` columns and a one-pixel
/// gap. Each tile is normalized on its own when `normalize` is set.
pub fn emit_grid(tiles: &[Tensor], cols: usize, path: &Path, normalize: bool) -> Result<()> {
    let first = tiles.first().ok_or(FidelError::Empty("image grid needs tiles"))?;
    let (th, tw, c, _) = to_bytes(first, normalize)?;
    let cols = cols.clamp(1, tiles.len());
    let rows = tiles.len().div_ceil(cols);
    let (gh, gw) = (rows * (th + 1) - 1, cols * (tw + 1) - 1);
    let mut canvas = vec![0u8; gh * gw * c];
    for (i, tile) in tiles.iter().enumerate() {
        let (h, w, tc, bytes) = to_bytes(tile, normalize)?;
        if (h, w, tc) != (th, tw, c) {
            return Err(FidelError::Shape(format!("grid tile {i} has shape {:?}", tile.shape())));
        }
        let (oy, ox) = ((i / cols) * (th + 1), (i % cols) * (tw + 1));
        for y in 0..th {
            let dst = ((oy + y) * gw + ox) * c;
            canvas[dst..dst + tw * c].copy_from_slice(&bytes[y * tw * c..(y + 1) * tw * c]);
        }
    }
    write_pnm(path, gh, gw, c, &canvas)
}

/// Read a binary PGM/PPM (maxval 255) back into an `H x W x C` tensor in `[0, 1]`.
pub fn read_pnm(path: &Path) -> Result<Tensor> {
    let bytes = read_file(path)?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(FidelError::format(path, "truncated PNM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let c = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(FidelError::format(path, format!("unsupported PNM type {other}"))),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| FidelError::format(path, format!("bad header field {s}")));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(FidelError::format(path, format!("maxval {maxval} unsupported")));
    }
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() != h * w * c {
        return Err(FidelError::format(path, "pixel data length mismatch"));
    }
    Tensor::new(vec![h, w, c], body.iter().map(|&b| b as f64 / 255.0).collect())
}
