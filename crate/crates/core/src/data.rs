//! Datasets: IDX images, precomputed feature-vector sequences, and seeded
//! synthetic sets.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Layout of one sample: an `height x width` grid of sites (row-major), each
/// holding `channels` values. Scalar inputs have one channel and go through a
/// feature map; multi-channel inputs are used as feature vectors directly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Geometry {
    pub fn grid(height: usize, width: usize) -> Self {
        Geometry {
            height,
            width,
            channels: 1,
        }
    }

    /// A length-`len` sequence of `dim`-dimensional feature vectors.
    pub fn sequence(len: usize, dim: usize) -> Self {
        Geometry {
            height: 1,
            width: len,
            channels: dim,
        }
    }

    pub fn sites(&self) -> usize {
        self.height * self.width
    }

    pub fn sample_len(&self) -> usize {
        self.sites() * self.channels
    }
}

/// Labelled samples sharing one geometry; inputs lie in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    geometry: Geometry,
    inputs: Vec<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(geometry: Geometry, inputs: Vec<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if geometry.sample_len() == 0 {
            return Err(Error::InvalidArgument("empty sample geometry".into()));
        }
        if inputs.len() != labels.len() * geometry.sample_len() {
            return Err(Error::Dimension(format!(
                "{} input values for {} samples of {} values",
                inputs.len(),
                labels.len(),
                geometry.sample_len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(Dataset {
            geometry,
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.geometry.sample_len();
        &self.inputs[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    /// The samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let n = self.geometry.sample_len();
        let mut inputs = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            geometry: self.geometry,
            inputs,
            labels,
            num_classes: self.num_classes,
        }
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::parse(format!("byte {offset}"), format!("truncated file while reading {what}")))
}

/// Parses an IDX image file (magic `0x00000803`) into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = read_u32(bytes, 0, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::parse("byte 0", format!("bad image magic {magic:#010x}")));
    }
    let count = read_u32(bytes, 4, "image count")? as usize;
    let rows = read_u32(bytes, 8, "row count")? as usize;
    let cols = read_u32(bytes, 12, "column count")? as usize;
    let expected = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < expected {
        return Err(Error::parse(
            format!("byte {}", 16 + body.len()),
            format!("truncated pixel data: need {expected} bytes, have {}", body.len()),
        ));
    }
    Ok((count, rows, cols, body[..expected].to_vec()))
}

/// Parses an IDX label file (magic `0x00000801`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::parse("byte 0", format!("bad label magic {magic:#010x}")));
    }
    let count = read_u32(bytes, 4, "label count")? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::parse(
            format!("byte {}", 8 + body.len()),
            format!("truncated label data: need {count} bytes, have {}", body.len()),
        ));
    }
    Ok(body[..count].to_vec())
}

/// Builds a dataset from raw IDX bytes; pixels are divided by 255.
pub fn idx_from_bytes(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let (count, rows, cols, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != count {
        return Err(Error::parse(
            "byte 4",
            format!("{count} images but {} labels", labels.len()),
        ));
    }
    let num_classes = labels.iter().map(|&y| y as usize + 1).max().unwrap_or(1).max(10);
    let inputs = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels = labels.iter().map(|&y| y as usize).collect();
    Dataset::new(Geometry::grid(rows, cols), inputs, labels, num_classes)
}

/// Loads an IDX image/label file pair (MNIST and fashion-MNIST layout).
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let images = fs::read(images)?;
    let labels = fs::read(labels)?;
    idx_from_bytes(&images, &labels)
}

/// Serializes a scalar-grid dataset back to IDX bytes `(images, labels)`,
/// quantizing inputs to the nearest 8-bit level.
pub fn idx_to_bytes(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let g = ds.geometry();
    if g.channels != 1 {
        return Err(Error::InvalidArgument("IDX holds single-channel images".into()));
    }
    let mut images = Vec::with_capacity(16 + ds.inputs.len());
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for n in [ds.len(), g.height, g.width] {
        images.extend_from_slice(&(n as u32).to_be_bytes());
    }
    images.extend(ds.inputs.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut labels = Vec::with_capacity(8 + ds.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    for &y in &ds.labels {
        let y = u8::try_from(y).map_err(|_| Error::InvalidArgument(format!("label {y} exceeds a byte")))?;
        labels.push(y);
    }
    Ok((images, labels))
}

/// Deterministic shuffled split into disjoint train and validation sets.
pub fn split(ds: &Dataset, n_train: usize, n_val: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if n_train + n_val > ds.len() {
        return Err(Error::InvalidArgument(format!(
            "split of {n_train} + {n_val} exceeds {} samples",
            ds.len()
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((
        ds.select(&order[..n_train]),
        ds.select(&order[n_train..n_train + n_val]),
    ))
}

/// Header of the sequence CSV format: `N=<n>,d=<d>,min=<a;b;..>,max=<a;b;..>`.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceHeader {
    pub len: usize,
    pub dim: usize,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl SequenceHeader {
    fn parse(line: &str) -> Result<Self> {
        let loc = || "line 1".to_string();
        let (mut len, mut dim, mut min, mut max) = (None, None, None, None);
        for field in line.split(',') {
            let (key, value) = field
                .trim()
                .split_once('=')
                .ok_or_else(|| Error::parse(loc(), format!("header field {field:?} lacks '='")))?;
            let list = |v: &str| -> Result<Vec<f64>> {
                v.split(';')
                    .map(|s| s.trim().parse::<f64>().map_err(|e| Error::parse(loc(), format!("{key}: {e}"))))
                    .collect()
            };
            match key.trim() {
                "N" => len = Some(value.trim().parse().map_err(|e| Error::parse(loc(), format!("N: {e}")))?),
                "d" => dim = Some(value.trim().parse().map_err(|e| Error::parse(loc(), format!("d: {e}")))?),
                "min" => min = Some(list(value)?),
                "max" => max = Some(list(value)?),
                other => return Err(Error::parse(loc(), format!("unknown header key {other:?}"))),
            }
        }
        let missing = |k: &str| Error::parse(loc(), format!("header lacks {k}"));
        let header = SequenceHeader {
            len: len.ok_or_else(|| missing("N"))?,
            dim: dim.ok_or_else(|| missing("d"))?,
            min: min.ok_or_else(|| missing("min"))?,
            max: max.ok_or_else(|| missing("max"))?,
        };
        if header.len == 0 || header.dim == 0 {
            return Err(Error::parse(loc(), "N and d must be positive"));
        }
        if header.min.len() != header.dim || header.max.len() != header.dim {
            return Err(Error::parse(loc(), "min and max need one value per feature dimension"));
        }
        if header.min.iter().zip(&header.max).any(|(lo, hi)| hi <= lo) {
            return Err(Error::parse(loc(), "each max must exceed its min"));
        }
        Ok(header)
    }

    fn render(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";");
        format!("N={},d={},min={},max={}", self.len, self.dim, join(&self.min), join(&self.max))
    }
}

/// Parses the sequence CSV format; see [`load_sequence_csv`].
pub fn parse_sequence_csv(text: &str, num_classes: Option<usize>) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or_else(|| Error::parse("line 1", "empty file"))?;
    let header = SequenceHeader::parse(first)?;
    let width = header.len * header.dim;
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in lines {
        let loc = format!("row {}", lineno + 1);
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != width + 1 {
            return Err(Error::parse(
                loc,
                format!("expected label plus {width} values, found {} fields", fields.len()),
            ));
        }
        let label: usize = fields[0]
            .parse()
            .map_err(|e| Error::parse(loc.clone(), format!("label: {e}")))?;
        labels.push(label);
        for (k, field) in fields[1..].iter().enumerate() {
            let raw: f64 = field
                .parse()
                .map_err(|e| Error::parse(loc.clone(), format!("value {k}: {e}")))?;
            let c = k % header.dim;
            let scaled = (raw - header.min[c]) / (header.max[c] - header.min[c]);
            inputs.push(scaled.clamp(0.0, 1.0));
        }
    }
    let k = num_classes.unwrap_or_else(|| labels.iter().map(|&y| y + 1).max().unwrap_or(1));
    Dataset::new(Geometry::sequence(header.len, header.dim), inputs, labels, k)
}

/// Loads a CSV of precomputed feature-vector sequences. The first line is the
/// header `N=<n>,d=<d>,min=<..>,max=<..>` (per-dimension ranges separated by
/// `;`); each following row is `label, v_1, ..., v_{N*d}` with the `d`
/// components of each site adjacent. Values are min-max normalized per feature
/// dimension and clamped to `[0, 1]`.
pub fn load_sequence_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    parse_sequence_csv(&fs::read_to_string(path)?, None)
}

/// Writes a sequence dataset with identity ranges (`min = 0`, `max = 1`), so
/// reading it back reproduces the values exactly.
pub fn write_sequence_csv(ds: &Dataset) -> String {
    let g = ds.geometry();
    let header = SequenceHeader {
        len: g.sites(),
        dim: g.channels,
        min: vec![0.0; g.channels],
        max: vec![1.0; g.channels],
    };
    let mut out = header.render();
    out.push('\n');
    for i in 0..ds.len() {
        out.push_str(&ds.label(i).to_string());
        for v in ds.sample(i) {
            // Display for f64 prints the shortest string that round-trips.
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

/// Two uniform variables labelled by the XOR of their halves:
/// `1{x1 > 0.5} xor 1{x2 > 0.5}`.
pub fn make_xor_features(n: usize, seed: u64) -> Result<Dataset> {
    if n < 4 {
        return Err(Error::InvalidArgument("xor set needs n >= 4".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let (x1, x2): (f64, f64) = (rng.random(), rng.random());
        inputs.extend([x1, x2]);
        labels.push(xor_label(x1, x2));
    }
    Dataset::new(Geometry::grid(1, 2), inputs, labels, 2)
}

pub fn xor_label(x1: f64, x2: f64) -> usize {
    usize::from((x1 > 0.5) != (x2 > 0.5))
}

/// Two uniform variables labelled by the parity of their cell on a
/// `cells x cells` checkerboard over the unit square.
pub fn make_checkerboard(n: usize, cells: usize, seed: u64) -> Result<Dataset> {
    if n < 4 || cells < 2 {
        return Err(Error::InvalidArgument("checkerboard needs n >= 4 and cells >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    let cell = |x: f64| ((x * cells as f64) as usize).min(cells - 1);
    for _ in 0..n {
        let (x1, x2): (f64, f64) = (rng.random(), rng.random());
        inputs.extend([x1, x2]);
        labels.push((cell(x1) + cell(x2)) % 2);
    }
    Dataset::new(Geometry::grid(1, 2), inputs, labels, 2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_pair(pixels: &[u8], rows: u32, cols: u32, labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
        let count = labels.len() as u32;
        let mut img = Vec::new();
        for v in [0x803u32, count, rows, cols] {
            img.extend_from_slice(&v.to_be_bytes());
        }
        img.extend_from_slice(pixels);
        let mut lab = Vec::new();
        for v in [0x801u32, count] {
            lab.extend_from_slice(&v.to_be_bytes());
        }
        lab.extend_from_slice(labels);
        (img, lab)
    }

    #[test]
    fn single_pixel_idx() {
        let (img, lab) = idx_pair(&[255], 1, 1, &[3]);
        let ds = idx_from_bytes(&img, &lab).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.sample(0), &[1.0]);
        assert_eq!(ds.label(0), 3);
        let (img, lab) = idx_pair(&[51], 1, 1, &[0]);
        assert_eq!(idx_from_bytes(&img, &lab).unwrap().sample(0), &[0.2]);
    }

    #[test]
    fn idx_errors_are_distinct() {
        let (img, lab) = idx_pair(&[1, 2, 3, 4], 2, 2, &[1]);
        let mut bad_magic = img.clone();
        bad_magic[3] = 0x01;
        assert!(matches!(idx_from_bytes(&bad_magic, &lab), Err(Error::Parse { location, .. }) if location == "byte 0"));
        let truncated = &img[..img.len() - 1];
        let err = idx_from_bytes(truncated, &lab).unwrap_err().to_string();
        assert!(err.contains("truncated pixel data"), "{err}");
        let (_, two_labels) = idx_pair(&[], 2, 2, &[1, 2]);
        let err = idx_from_bytes(&img, &two_labels).unwrap_err().to_string();
        assert!(err.contains("1 images but 2 labels"), "{err}");
        assert!(idx_from_bytes(&img[..6], &lab).unwrap_err().to_string().contains("byte 4"));
    }

    #[test]
    fn idx_reserialization_is_lossless() {
        let pixels: Vec<u8> = (0..=255).collect();
        let labels: Vec<u8> = (0..16).map(|i| i % 10).collect();
        let (img, lab) = idx_pair(&pixels, 4, 4, &labels);
        let ds = idx_from_bytes(&img, &lab).unwrap();
        assert!(ds.inputs().iter().all(|v| (0.0..=1.0).contains(v)));
        let (img2, lab2) = idx_to_bytes(&ds).unwrap();
        assert_eq!(img, img2);
        assert_eq!(lab, lab2);
    }

    #[test]
    fn split_is_disjoint_and_deterministic() {
        let n = 100;
        let inputs: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        let labels = vec![0; n];
        let ds = Dataset::new(Geometry::grid(1, 1), inputs, labels, 1).unwrap();
        let (train, val) = split(&ds, 70, 20, 9).unwrap();
        assert_eq!((train.len(), val.len()), (70, 20));
        let mut seen: Vec<f64> = train.inputs().iter().chain(val.inputs()).copied().collect();
        seen.sort_by(f64::total_cmp);
        seen.dedup();
        assert_eq!(seen.len(), 90);
        assert_eq!(split(&ds, 70, 20, 9).unwrap(), (train, val));
        assert!(split(&ds, 90, 0, 1).unwrap().1.is_empty());
        assert!(matches!(split(&ds, 90, 11, 1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn sequence_csv_row() {
        let ds = parse_sequence_csv("N=2,d=2,min=0;0,max=1;1\n3, 0.1,0.2, 0.3,0.4\n", None).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.label(0), 3);
        assert_eq!(ds.geometry(), Geometry::sequence(2, 2));
        assert_eq!(ds.sample(0), &[0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn sequence_csv_normalizes_per_dimension() {
        let ds = parse_sequence_csv("N=1,d=2,min=-10;0,max=10;4\n0,0,1\n1,20,-3\n", None).unwrap();
        assert_eq!(ds.sample(0), &[0.5, 0.25]);
        assert_eq!(ds.sample(1), &[1.0, 0.0]);
    }

    #[test]
    fn ragged_rows_report_row_number() {
        let err = parse_sequence_csv("N=2,d=1,min=0,max=1\n0,0.1,0.2\n1,0.3\n", None).unwrap_err();
        assert!(matches!(&err, Error::Parse { location, .. } if location == "row 3"), "{err}");
        assert!(parse_sequence_csv("N=2,d=1,min=0\n", None).is_err());
    }

    #[test]
    fn xor_labels() {
        assert_eq!(xor_label(0.25, 0.25), 0);
        assert_eq!(xor_label(0.25, 0.75), 1);
        assert_eq!(xor_label(0.75, 0.75), 0);
        let ds = make_xor_features(1000, 4).unwrap();
        let ones = ds.labels().iter().filter(|&&y| y == 1).count();
        assert!((400..600).contains(&ones));
        assert_eq!(make_xor_features(1000, 4).unwrap(), ds);
        assert!(make_xor_features(3, 0).is_err());
    }

    #[test]
    fn checkerboard_labels() {
        let ds = make_checkerboard(500, 4, 2).unwrap();
        for i in 0..ds.len() {
            let x = ds.sample(i);
            let (a, b) = ((x[0] * 4.0) as usize, (x[1] * 4.0) as usize);
            assert_eq!(ds.label(i), (a + b) % 2);
        }
    }
}
