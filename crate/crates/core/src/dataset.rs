//! Labeled image datasets: IDX file ingestion, a synthetic corpus with a
//! known ground-truth region, normalization, and train/validation splitting.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

const IDX_IMAGE_MAGIC: u32 = 2051;
const IDX_LABEL_MAGIC: u32 = 2049;

/// An ordered collection of flattened images with class labels.
///
/// Pixels are stored as `f64` in `[0, 1]`; byte-valued sources are scaled by
/// `1/255`, so a zero pixel is a black pixel.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    inputs: Vec<Tensor>,
    labels: Vec<usize>,
    image_height: usize,
    image_width: usize,
    num_classes: usize,
    class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn new(
        inputs: Vec<Tensor>,
        labels: Vec<usize>,
        image_height: usize,
        image_width: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        let d = image_height * image_width;
        for (i, input) in inputs.iter().enumerate() {
            if input.dims1()? != d {
                return Err(Error::at_sample(
                    i,
                    Error::Shape(format!(
                        "input has {} features, expected {}x{}={}",
                        input.len(),
                        image_height,
                        image_width,
                        d
                    )),
                ));
            }
            if input.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::at_sample(
                    i,
                    Error::Parameter("pixel value outside [0, 1]".into()),
                ));
            }
        }
        for (i, &label) in labels.iter().enumerate() {
            if label >= num_classes {
                return Err(Error::at_sample(
                    i,
                    Error::Label {
                        label,
                        num_classes,
                    },
                ));
            }
        }
        Ok(LabeledDataset {
            inputs,
            labels,
            image_height,
            image_width,
            num_classes,
            class_names: Vec::new(),
        })
    }

    /// Attaches display names for classes; purely metadata for reports.
    pub fn with_class_names(mut self, names: Vec<String>) -> Self {
        self.class_names = names;
        self
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.image_height * self.image_width
    }

    pub fn image_height(&self) -> usize {
        self.image_height
    }

    pub fn image_width(&self) -> usize {
        self.image_width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn input(&self, i: usize) -> &Tensor {
        &self.inputs[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn inputs(&self) -> &[Tensor] {
        &self.inputs
    }

    /// New dataset containing the given samples, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        LabeledDataset {
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            image_height: self.image_height,
            image_width: self.image_width,
            num_classes: self.num_classes,
            class_names: self.class_names.clone(),
        }
    }

    /// The first `n` samples (all of them if `n` is larger than the dataset).
    pub fn take(&self, n: usize) -> Self {
        let indices: Vec<usize> = (0..self.len().min(n)).collect();
        self.select(&indices)
    }

    /// Packs samples `indices` into a `[batch, d]` tensor plus their labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.input_dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.inputs[i].data());
            labels.push(self.labels[i]);
        }
        (
            Tensor::new(vec![indices.len(), d], data).expect("batch shape is consistent"),
            labels,
        )
    }

    /// Same dataset with every input replaced; labels and metadata kept.
    pub(crate) fn with_inputs(&self, inputs: Vec<Tensor>) -> Result<Self> {
        let mut out = self.clone();
        if inputs.len() != out.labels.len() {
            return Err(Error::Consistency(format!(
                "{} replacement inputs for {} samples",
                inputs.len(),
                out.labels.len()
            )));
        }
        out.inputs = inputs;
        Ok(out)
    }
}

/// Parameters for a deterministic train/validation split.
#[derive(Debug, Clone, Copy)]
pub struct SplitSpec {
    pub validation_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(validation_fraction: f64, seed: u64) -> Result<Self> {
        if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
            return Err(Error::Parameter(format!(
                "validation fraction must lie strictly between 0 and 1, got {validation_fraction}"
            )));
        }
        Ok(SplitSpec {
            validation_fraction,
            seed,
        })
    }
}

fn read_u32_be(reader: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    reader
        .read_exact(&mut buf)
        .map_err(|e| truncation_or_io(path, e))?;
    Ok(u32::from_be_bytes(buf))
}

fn truncation_or_io(path: &Path, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format(format!("{} is truncated", path.display()))
    } else {
        Error::io(path, e)
    }
}

/// Loads a dataset from a pair of IDX files (images + labels).
///
/// The image file must start with big-endian magic 2051 followed by count,
/// rows, and cols; the label file with magic 2049 followed by count. Pixel
/// bytes are scaled by `1/255` and sample order is preserved.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let file = File::open(images_path).map_err(|e| Error::io(images_path, e))?;
    let mut reader = BufReader::new(file);
    let magic = read_u32_be(&mut reader, images_path)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "{}: expected image magic {IDX_IMAGE_MAGIC}, found {magic}",
            images_path.display()
        )));
    }
    let count = read_u32_be(&mut reader, images_path)? as usize;
    let rows = read_u32_be(&mut reader, images_path)? as usize;
    let cols = read_u32_be(&mut reader, images_path)? as usize;
    let mut pixels = vec![0u8; count * rows * cols];
    reader
        .read_exact(&mut pixels)
        .map_err(|e| truncation_or_io(images_path, e))?;

    let file = File::open(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let mut reader = BufReader::new(file);
    let magic = read_u32_be(&mut reader, labels_path)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::Format(format!(
            "{}: expected label magic {IDX_LABEL_MAGIC}, found {magic}",
            labels_path.display()
        )));
    }
    let label_count = read_u32_be(&mut reader, labels_path)? as usize;
    if label_count != count {
        return Err(Error::Consistency(format!(
            "{count} images but {label_count} labels"
        )));
    }
    let mut label_bytes = vec![0u8; label_count];
    reader
        .read_exact(&mut label_bytes)
        .map_err(|e| truncation_or_io(labels_path, e))?;

    let d = rows * cols;
    let inputs: Vec<Tensor> = pixels
        .chunks(d)
        .map(|chunk| {
            Tensor::new(
                vec![d],
                chunk.iter().map(|&b| f64::from(b) / 255.0).collect(),
            )
            .expect("chunk length equals d")
        })
        .collect();
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().copied().max().map_or(1, |m| m + 1);
    LabeledDataset::new(inputs, labels, rows, cols, num_classes)
}

/// Writes a dataset back out as an IDX image/label file pair.
///
/// Pixels are re-quantized to bytes with `round(255 * v)`, the exact inverse
/// of the `1/255` load scaling, so load-then-save round-trips bitwise.
pub fn write_idx(ds: &LabeledDataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let file = File::create(images_path).map_err(|e| Error::io(images_path, e))?;
    let mut w = BufWriter::new(file);
    let header = [
        IDX_IMAGE_MAGIC,
        ds.len() as u32,
        ds.image_height() as u32,
        ds.image_width() as u32,
    ];
    for v in header {
        w.write_all(&v.to_be_bytes())
            .map_err(|e| Error::io(images_path, e))?;
    }
    let mut bytes = Vec::with_capacity(ds.len() * ds.input_dim());
    for input in ds.inputs() {
        bytes.extend(input.data().iter().map(|&v| (255.0 * v).round() as u8));
    }
    w.write_all(&bytes).map_err(|e| Error::io(images_path, e))?;
    w.flush().map_err(|e| Error::io(images_path, e))?;

    let file = File::create(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&IDX_LABEL_MAGIC.to_be_bytes())
        .map_err(|e| Error::io(labels_path, e))?;
    w.write_all(&(ds.len() as u32).to_be_bytes())
        .map_err(|e| Error::io(labels_path, e))?;
    let labels: Vec<u8> = ds.labels().iter().map(|&l| l as u8).collect();
    w.write_all(&labels).map_err(|e| Error::io(labels_path, e))?;
    w.flush().map_err(|e| Error::io(labels_path, e))?;
    Ok(())
}

/// Generates the four-class quadrant dataset used for desk-scale testing.
///
/// Sample `i` belongs to class `i % 4` and carries a bright blob (pixels in
/// `[0.8, 1.0]`) in quadrant `i % 4` over low-amplitude noise (`[0.0, 0.2]`).
/// The bright quadrant is a known ground-truth region: attribution methods
/// should concentrate their positive scores there.
///
/// Quadrants are numbered 0 = top-left, 1 = top-right, 2 = bottom-left,
/// 3 = bottom-right.
pub fn synth_quadrant(n: usize, side: usize, seed: u64) -> Result<LabeledDataset> {
    if side < 4 {
        return Err(Error::Parameter(format!(
            "side must be at least 4, got {side}"
        )));
    }
    if n < 4 {
        return Err(Error::Parameter(format!(
            "need at least 4 samples for 4 classes, got {n}"
        )));
    }
    let mut rng = Rng::new(seed);
    let half = side / 2;
    let d = side * side;
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 4;
        let (row_lo, row_hi) = if class < 2 { (0, half) } else { (half, side) };
        let (col_lo, col_hi) = if class % 2 == 0 { (0, half) } else { (half, side) };
        let mut data = vec![0.0; d];
        for r in 0..side {
            for c in 0..side {
                let bright = r >= row_lo && r < row_hi && c >= col_lo && c < col_hi;
                data[r * side + c] = if bright {
                    rng.uniform(0.8, 1.0)
                } else {
                    rng.uniform(0.0, 0.2)
                };
            }
        }
        inputs.push(Tensor::new(vec![d], data)?);
        labels.push(class);
    }
    LabeledDataset::new(inputs, labels, side, side, 4).map(|ds| {
        ds.with_class_names(
            ["top-left", "top-right", "bottom-left", "bottom-right"]
                .map(String::from)
                .to_vec(),
        )
    })
}

/// Index span of class `k`'s bright quadrant in a `synth_quadrant` image.
pub fn quadrant_indices(side: usize, class: usize) -> Vec<usize> {
    let half = side / 2;
    let (row_lo, row_hi) = if class < 2 { (0, half) } else { (half, side) };
    let (col_lo, col_hi) = if class % 2 == 0 { (0, half) } else { (half, side) };
    let mut out = Vec::new();
    for r in row_lo..row_hi {
        for c in col_lo..col_hi {
            out.push(r * side + c);
        }
    }
    out
}

/// The index permutation behind [`split`]: which samples land in the train
/// part and which in validation. Useful when per-sample side data (such as
/// relevance maps) must follow the same split.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    let train_n = ((1.0 - spec.validation_fraction) * n as f64).round() as usize;
    if train_n == 0 || train_n == n {
        return Err(Error::Parameter(format!(
            "validation fraction {} leaves an empty part for {n} samples",
            spec.validation_fraction
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = Rng::new(spec.seed);
    rng.shuffle(&mut indices);
    let val = indices.split_off(train_n);
    Ok((indices, val))
}

/// Splits a dataset into disjoint train and validation parts.
///
/// The shuffle is driven entirely by `spec.seed`; the training part gets
/// `round((1 - f) * n)` samples and validation the rest.
pub fn split(ds: &LabeledDataset, spec: &SplitSpec) -> Result<(LabeledDataset, LabeledDataset)> {
    let (train_idx, val_idx) = split_indices(ds.len(), spec)?;
    Ok((ds.select(&train_idx), ds.select(&val_idx)))
}
