//! Datasets, IDX ingestion, synthetic fixtures, seeded mini-batching and the
//! pseudo-label cache used during crafting.

use std::collections::HashMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{predict, ModelState};
use crate::real::Real;
use crate::tensor::{fnv1a64, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Samples stacked along the leading axis with pixel values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Dataset<F> {
    name: String,
    images: Tensor<F>,
    labels: Option<Vec<usize>>,
    fingerprint: u64,
}

impl<F: Real> Dataset<F> {
    pub fn new(name: impl Into<String>, images: Tensor<F>, labels: Option<Vec<usize>>) -> Result<Self> {
        if images.rank() < 2 {
            return Err(Error::Shape(format!(
                "dataset images need a leading sample axis, got {:?}",
                images.shape()
            )));
        }
        if images
            .data()
            .iter()
            .any(|&v| !(v >= F::zero() && v <= F::one()))
        {
            return Err(Error::InvalidArgument("dataset pixels must lie in [0, 1]".into()));
        }
        if let Some(labels) = &labels {
            if labels.len() != images.shape()[0] {
                return Err(Error::CountMismatch {
                    images: images.shape()[0],
                    labels: labels.len(),
                });
            }
        }
        let fingerprint = fingerprint(&images);
        Ok(Dataset {
            name: name.into(),
            images,
            labels,
            fingerprint,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn images(&self) -> &Tensor<F> {
        &self.images
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// FNV-1a over the 8-bit pixel encoding (`round(255·v)`) of every image.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn fingerprint_hex(&self) -> String {
        format!("{:016x}", self.fingerprint)
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map(|&m| m + 1)
    }

    /// Same images, different labels (used to attach cached pseudo-labels).
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::CountMismatch {
                images: self.len(),
                labels: labels.len(),
            });
        }
        Ok(Dataset {
            name: self.name.clone(),
            images: self.images.clone(),
            labels: Some(labels),
            fingerprint: self.fingerprint,
        })
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let images = self.images.gather_outer(indices)?;
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Dataset::new(self.name.clone(), images, labels)
    }

    /// Seeded sample of `size` distinct samples, kept in ascending index order.
    pub fn subset(&self, size: usize, seed: u64) -> Result<Self> {
        if size == 0 || size > self.len() {
            return Err(Error::InvalidArgument(format!(
                "subset size {size} out of range for {} samples",
                self.len()
            )));
        }
        let mut idx = permutation(self.len(), seed);
        idx.truncate(size);
        idx.sort_unstable();
        let mut out = self.select(&idx)?;
        out.name = format!("{}[subset {size}]", self.name);
        Ok(out)
    }

    /// Splits into the first `n_first` samples and the remainder.
    pub fn split_at(&self, n_first: usize) -> Result<(Self, Self)> {
        if n_first == 0 || n_first >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "split point {n_first} out of range for {} samples",
                self.len()
            )));
        }
        let head: Vec<usize> = (0..n_first).collect();
        let tail: Vec<usize> = (n_first..self.len()).collect();
        Ok((self.select(&head)?, self.select(&tail)?))
    }

    pub fn cast<G: Real>(&self) -> Dataset<G> {
        Dataset {
            name: self.name.clone(),
            images: self.images.cast(),
            labels: self.labels.clone(),
            fingerprint: self.fingerprint,
        }
    }
}

fn fingerprint<F: Real>(images: &Tensor<F>) -> u64 {
    let bytes: Vec<u8> = images.data().iter().map(|&v| quantize(v)).collect();
    fnv1a64(&bytes)
}

fn quantize<F: Real>(v: F) -> u8 {
    (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

/// Loads an IDX image/label pair (`0x00000803` / `0x00000801`), scaling bytes to `[0, 1]`.
pub fn load_idx<F: Real>(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset<F>> {
    let images_path = images_path.as_ref();
    let img = read_file(images_path)?;
    let lbl = read_file(labels_path.as_ref())?;
    let (shape, pixels) = parse_idx_images(&img)?;
    let labels = parse_idx_labels(&lbl)?;
    if labels.len() != shape[0] {
        return Err(Error::CountMismatch {
            images: shape[0],
            labels: labels.len(),
        });
    }
    let scale = F::of(255.0);
    let data = pixels.iter().map(|&b| F::of(b as f64) / scale).collect();
    let name = images_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    Dataset::new(name, Tensor::new(shape, data)?, Some(labels))
}

fn parse_idx_images(bytes: &[u8]) -> Result<(Vec<usize>, &[u8])> {
    let mut cur = Cursor::new(bytes);
    let header = |e: std::io::Error| Error::Truncated(format!("IDX image header: {e}"));
    let magic = cur.read_u32::<BigEndian>().map_err(header)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            what: "IDX images".into(),
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let n = cur.read_u32::<BigEndian>().map_err(header)? as usize;
    let rows = cur.read_u32::<BigEndian>().map_err(header)? as usize;
    let cols = cur.read_u32::<BigEndian>().map_err(header)? as usize;
    let body = &bytes[16..];
    let need = n * rows * cols;
    if body.len() < need {
        return Err(Error::Truncated(format!(
            "IDX images: {} pixel bytes, expected {need}",
            body.len()
        )));
    }
    Ok((vec![n, 1, rows, cols], &body[..need]))
}

fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut cur = Cursor::new(bytes);
    let header = |e: std::io::Error| Error::Truncated(format!("IDX label header: {e}"));
    let magic = cur.read_u32::<BigEndian>().map_err(header)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            what: "IDX labels".into(),
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let n = cur.read_u32::<BigEndian>().map_err(header)? as usize;
    let mut body = Vec::new();
    cur.read_to_end(&mut body)?;
    if body.len() < n {
        return Err(Error::Truncated(format!(
            "IDX labels: {} bytes, expected {n}",
            body.len()
        )));
    }
    Ok(body[..n].iter().map(|&b| b as usize).collect())
}

/// Writes single-channel images and labels as an IDX pair (pixels quantized to bytes).
pub fn write_idx<F: Real>(
    dataset: &Dataset<F>,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let shape = dataset.images().shape();
    let (rows, cols) = match shape {
        [_, 1, h, w] => (*h, *w),
        [_, h, w] => (*h, *w),
        _ => {
            return Err(Error::Shape(format!(
                "IDX export needs [n, 1, h, w] images, got {shape:?}"
            )))
        }
    };
    let labels = dataset
        .labels()
        .ok_or_else(|| Error::InvalidArgument("IDX export needs labels".into()))?;
    if labels.iter().any(|&l| l > 255) {
        return Err(Error::InvalidArgument("IDX labels must fit in a byte".into()));
    }
    let mut img = Vec::with_capacity(16 + dataset.images().len());
    img.write_u32::<BigEndian>(IDX_IMAGES_MAGIC)?;
    img.write_u32::<BigEndian>(dataset.len() as u32)?;
    img.write_u32::<BigEndian>(rows as u32)?;
    img.write_u32::<BigEndian>(cols as u32)?;
    img.extend(dataset.images().data().iter().map(|&v| quantize(v)));
    let mut lbl = Vec::with_capacity(8 + labels.len());
    lbl.write_u32::<BigEndian>(IDX_LABELS_MAGIC)?;
    lbl.write_u32::<BigEndian>(labels.len() as u32)?;
    lbl.extend(labels.iter().map(|&l| l as u8));
    fs::write(images_path, img)?;
    fs::write(labels_path, lbl)?;
    Ok(())
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; u1 is kept away from zero.
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Gaussian clusters around seeded uniform centers; sample `i` has class `i % num_classes`.
pub fn synth_blobs<F: Real>(
    num_classes: usize,
    n: usize,
    sample_shape: &[usize],
    spread: f64,
    seed: u64,
) -> Result<Dataset<F>> {
    if num_classes < 2 || n < num_classes || sample_shape.is_empty() || sample_shape.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "synth_blobs: {num_classes} classes, {n} samples, shape {sample_shape:?}"
        )));
    }
    if !(spread > 0.0) {
        return Err(Error::InvalidArgument("synth_blobs: spread must be > 0".into()));
    }
    let dim: usize = sample_shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<f64> = (0..num_classes * dim).map(|_| rng.random::<f64>()).collect();
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % num_classes;
        for d in 0..dim {
            let v = centers[c * dim + d] + spread * standard_normal(&mut rng);
            data.push(F::of(v.clamp(0.0, 1.0)));
        }
        labels.push(c);
    }
    let mut shape = vec![n];
    shape.extend_from_slice(sample_shape);
    Dataset::new(format!("blobs-k{num_classes}-s{seed}"), Tensor::new(shape, data)?, Some(labels))
}

/// Parameters for [`synth_glyphs`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlyphParams {
    pub num_classes: usize,
    pub n: usize,
    pub side: usize,
    pub strokes: usize,
    pub max_shift: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for GlyphParams {
    fn default() -> Self {
        GlyphParams {
            num_classes: 10,
            n: 6000,
            side: 16,
            strokes: 3,
            max_shift: 2,
            noise: 0.1,
            seed: 0,
        }
    }
}

/// Single-channel stroke images: every class owns a random set of line
/// segments, and each sample is a shifted, contrast-jittered and noisy
/// rendering of its class glyph. Pixels are quantized to bytes so the result
/// survives an IDX round trip unchanged.
pub fn synth_glyphs<F: Real>(p: &GlyphParams) -> Result<Dataset<F>> {
    if p.num_classes < 2 || p.num_classes > 256 || p.n < p.num_classes || p.side < 4 || p.strokes == 0 {
        return Err(Error::InvalidArgument(format!("synth_glyphs: {p:?}")));
    }
    if !(p.noise >= 0.0) || 2 * p.max_shift >= p.side {
        return Err(Error::InvalidArgument(format!("synth_glyphs: {p:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let side = p.side as f64;
    let lo = 0.15 * side;
    let hi = 0.85 * side;
    let glyphs: Vec<Vec<[f64; 4]>> = (0..p.num_classes)
        .map(|_| {
            (0..p.strokes)
                .map(|_| {
                    [
                        rng.random_range(lo..hi),
                        rng.random_range(lo..hi),
                        rng.random_range(lo..hi),
                        rng.random_range(lo..hi),
                    ]
                })
                .collect()
        })
        .collect();

    let pixels = p.side * p.side;
    let mut data = Vec::with_capacity(p.n * pixels);
    let mut labels = Vec::with_capacity(p.n);
    let span = 2 * p.max_shift as i64 + 1;
    for i in 0..p.n {
        let class = i % p.num_classes;
        let dx = (rng.random_range(0..span) - p.max_shift as i64) as f64;
        let dy = (rng.random_range(0..span) - p.max_shift as i64) as f64;
        let contrast = rng.random_range(0.6..1.0);
        for y in 0..p.side {
            for x in 0..p.side {
                let (px, py) = (x as f64 + 0.5 - dx, y as f64 + 0.5 - dy);
                let d = glyphs[class]
                    .iter()
                    .map(|s| segment_distance(px, py, s))
                    .fold(f64::INFINITY, f64::min);
                let ink = (1.5 - d).clamp(0.0, 1.0) * contrast;
                let v = (ink + p.noise * standard_normal(&mut rng)).clamp(0.0, 1.0);
                data.push(F::of((v * 255.0).round() / 255.0));
            }
        }
        labels.push(class);
    }
    let images = Tensor::new(vec![p.n, 1, p.side, p.side], data)?;
    Dataset::new(format!("glyphs-k{}-s{}", p.num_classes, p.seed), images, Some(labels))
}

fn segment_distance(px: f64, py: f64, s: &[f64; 4]) -> f64 {
    let (ax, ay, bx, by) = (s[0], s[1], s[2], s[3]);
    let (vx, vy) = (bx - ax, by - ay);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        (((px - ax) * vx + (py - ay) * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (ax + t * vx - px, ay + t * vy - py);
    (cx * cx + cy * cy).sqrt()
}

/// Seeded Fisher-Yates permutation of `0..n`.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

#[derive(Debug, Clone)]
pub struct Batch<F> {
    pub indices: Vec<usize>,
    pub images: Tensor<F>,
    pub labels: Vec<usize>,
}

impl<F: Real> Batch<F> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Index partition of a seeded permutation into `⌈n/B⌉` chunks (last one may be short).
pub fn batch_indices(n: usize, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    Ok(permutation(n, epoch_seed)
        .chunks(batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

/// Materializes the mini-batches of one epoch. The dataset must carry labels.
pub fn minibatches<F: Real>(dataset: &Dataset<F>, batch_size: usize, epoch_seed: u64) -> Result<Vec<Batch<F>>> {
    let labels = dataset
        .labels()
        .ok_or_else(|| Error::InvalidArgument("mini-batching needs a labeled dataset".into()))?;
    batch_indices(dataset.len(), batch_size, epoch_seed)?
        .into_iter()
        .map(|indices| {
            Ok(Batch {
                images: dataset.images().gather_outer(&indices)?,
                labels: indices.iter().map(|&i| labels[i]).collect(),
                indices,
            })
        })
        .collect()
}

/// Labels from the clean model, computed once per (model, dataset) pair.
#[derive(Debug, Default)]
pub struct PseudoLabelCache {
    entries: HashMap<(u64, u64), Vec<usize>>,
}

impl PseudoLabelCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get_or_compute<F: Real>(&mut self, model: &ModelState<F>, dataset: &Dataset<F>) -> Result<&[usize]> {
        let key = (model.fingerprint(), dataset.fingerprint());
        if let std::collections::hash_map::Entry::Vacant(e) = self.entries.entry(key) {
            let labels = predict(model, dataset.images())?;
            e.insert(labels);
        }
        Ok(&self.entries[&key])
    }
}

/// Uncached convenience wrapper: `argmax f_θ(x)` for every sample.
pub fn pseudo_labels<F: Real>(model: &ModelState<F>, dataset: &Dataset<F>) -> Result<Vec<usize>> {
    predict(model, dataset.images())
}
