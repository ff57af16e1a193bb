//! Labeled image sets, the stratified train/validation split, the
//! generator-side view of the training set, blob datasets and the `LFMC`
//! binary container.

use std::io::Write;
use std::path::Path;

use lfm_autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"LFMC";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 2 + 4 + 2 + 2 + 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("bad magic {found:?}, expected \"LFMC\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u16),

    #[error("truncated file: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("record {record}: label {label} >= class count {classes}")]
    LabelOutOfRange {
        record: usize,
        label: usize,
        classes: usize,
    },

    #[error("{extra} trailing bytes after the last record")]
    TrailingBytes { extra: usize },

    #[error("invalid dataset: {0}")]
    Invalid(String),

    #[error("class {class} has {count} example(s); stratified split needs at least 2")]
    ClassTooSmall { class: usize, count: usize },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e.to_string())
    }
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// Images `[N, H, W, channels]` with values in `[-1, 1]` and labels in `[0, C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledImageSet {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 {
            return Err(DataError::Invalid(format!(
                "images must be [N, H, W, C], got {shape:?}"
            )));
        }
        if shape[0] != labels.len() {
            return Err(DataError::Invalid(format!(
                "{} images but {} labels",
                shape[0],
                labels.len()
            )));
        }
        if num_classes < 2 {
            return Err(DataError::Invalid(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if let Some((record, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(DataError::LabelOutOfRange {
                record,
                label,
                classes: num_classes,
            });
        }
        if let Some(v) = images.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(DataError::Invalid(format!(
                "pixel value {v} outside [-1, 1]"
            )));
        }
        Ok(Self {
            images,
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

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    /// `(height, width, channels)`.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    fn pixels_per_image(&self) -> usize {
        let (h, w, c) = self.image_shape();
        h * w * c
    }

    /// Pixels of record `i` in `H, W, channels` order.
    pub fn image(&self, i: usize) -> &[f64] {
        let p = self.pixels_per_image();
        &self.images.data()[i * p..(i + 1) * p]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let (h, w, c) = self.image_shape();
        let mut data = Vec::with_capacity(indices.len() * h * w * c);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Self {
            images: Tensor::new(vec![indices.len(), h, w, c], data).expect("subset shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Records of `self` followed by those of `other`.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.image_shape() != other.image_shape() || self.num_classes != other.num_classes {
            return Err(DataError::Invalid(
                "cannot concatenate sets of different shape".into(),
            ));
        }
        let (h, w, c) = self.image_shape();
        let mut data = self.images.data().to_vec();
        data.extend_from_slice(other.images.data());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(Self {
            images: Tensor::new(vec![labels.len(), h, w, c], data).expect("concat shape"),
            labels,
            num_classes: self.num_classes,
        })
    }

    /// Batch of records in network layout `[B, channels, H, W]`.
    pub fn batch_nchw(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let (h, w, c) = self.image_shape();
        let mut data = vec![0.0; indices.len() * c * h * w];
        for (b, &i) in indices.iter().enumerate() {
            let img = self.image(i);
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        data[((b * c + ch) * h + y) * w + x] = img[(y * w + x) * c + ch];
                    }
                }
            }
        }
        let t = Tensor::new(vec![indices.len(), c, h, w], data).expect("batch shape");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Indices of every record with label `class`.
    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.labels[i] == class)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    pub stratified: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.5,
            seed: 0,
            stratified: true,
        }
    }
}

/// A disjoint, exhaustive partition of record indices (each side ascending).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Partitions `dataset` into training and validation indices.
///
/// Stratified splits allot `round(fraction · N)` training slots across classes
/// by largest remainder (ties to the lower class index), keeping at least one
/// record of each class on each side.
pub fn split(dataset: &LabeledImageSet, spec: &SplitSpec) -> Result<Split> {
    if dataset.is_empty() {
        return Err(DataError::Invalid("cannot split an empty dataset".into()));
    }
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(DataError::Invalid(format!(
            "train fraction must lie in (0, 1), got {}",
            spec.train_fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = dataset.len();
    let mut train = Vec::new();
    let mut val = Vec::new();

    if spec.stratified {
        let counts = dataset.class_counts();
        for (class, &count) in counts.iter().enumerate() {
            if count == 1 {
                return Err(DataError::ClassTooSmall { class, count });
            }
        }
        let target = (spec.train_fraction * n as f64).round() as usize;
        let exact: Vec<f64> = counts
            .iter()
            .map(|&c| c as f64 * spec.train_fraction)
            .collect();
        let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let assigned: usize = quota.iter().sum();
        let mut order: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] > 0).collect();
        order.sort_by(|&a, &b| {
            let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for &c in order.iter().take(target.saturating_sub(assigned)) {
            quota[c] += 1;
        }
        for (class, &count) in counts.iter().enumerate() {
            if count == 0 {
                continue;
            }
            let q = quota[class].clamp(1, count - 1);
            let mut idx = dataset.indices_of_class(class);
            idx.shuffle(&mut rng);
            train.extend_from_slice(&idx[..q]);
            val.extend_from_slice(&idx[q..]);
        }
    } else {
        if n < 2 {
            return Err(DataError::Invalid(
                "need at least 2 records to split".into(),
            ));
        }
        let q = ((spec.train_fraction * n as f64).round() as usize).clamp(1, n - 1);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        train.extend_from_slice(&idx[..q]);
        val.extend_from_slice(&idx[q..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok(Split { train, val })
}

/// The training set seen from the generator side: each record `(x, y)` is
/// consumed as `(y, x)`, with the label as conditioning input and the image
/// as target. Borrows the underlying set; no pixels are copied.
#[derive(Clone, Copy, Debug)]
pub struct CigView<'a> {
    set: &'a LabeledImageSet,
}

pub fn make_cig_view(train: &LabeledImageSet) -> CigView<'_> {
    CigView { set: train }
}

impl<'a> CigView<'a> {
    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }

    /// `(conditioning label, target image)` of record `i`.
    pub fn get(&self, i: usize) -> (usize, &'a [f64]) {
        (self.set.labels[i], self.set.image(i))
    }

    /// Conditioning labels and target images `[B, channels, H, W]`.
    pub fn batch(&self, indices: &[usize]) -> (Vec<usize>, Tensor) {
        let (images, labels) = self.set.batch_nchw(indices);
        (labels, images)
    }

    pub fn source(&self) -> &'a LabeledImageSet {
        self.set
    }
}

/// Endless shuffled mini-batches over `0..n`; reshuffles every epoch.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Result<Self> {
        if n == 0 || batch == 0 {
            return Err(DataError::Invalid(
                "sampler needs a nonempty set and batch size".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Ok(Self {
            order,
            cursor: 0,
            batch: batch.min(n),
            rng,
            epoch: 0,
        })
    }

    /// Number of completed passes over the data.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
            self.epoch += 1;
        }
        let b = self.order[self.cursor..self.cursor + self.batch].to_vec();
        self.cursor += self.batch;
        b
    }
}

/// Blob dataset together with the templates it was drawn around.
#[derive(Clone, Debug)]
pub struct BlobSet {
    pub data: LabeledImageSet,
    /// Class means in normalized pixel units, `H·W` each.
    pub templates: Vec<Vec<f64>>,
    /// Per-pixel noise standard deviation in normalized units.
    pub sigma: f64,
}

/// Single-channel images of Gaussian noise (σ = 1 before normalization)
/// around class templates.
///
/// Templates are mutually orthogonal smooth spatial patterns with per-pixel
/// RMS amplitude `separation / 2`, so any two class means lie
/// `separation · sqrt(H·W / 2)` apart. Pixels are divided by
/// `separation / 2 · max|pattern| + 4` and clipped to `[-1, 1]`; the scale
/// depends only on the templates, so sets drawn with different noise seeds
/// share units.
pub fn synth_blobs(
    classes: usize,
    per_class: usize,
    shape: (usize, usize),
    separation: f64,
    seed: u64,
) -> Result<BlobSet> {
    synth_blobs_with_noise_seed(classes, per_class, shape, separation, seed, seed)
}

/// Like [`synth_blobs`] but with templates and noise drawn from separate seeds.
pub fn synth_blobs_with_noise_seed(
    classes: usize,
    per_class: usize,
    (h, w): (usize, usize),
    separation: f64,
    template_seed: u64,
    noise_seed: u64,
) -> Result<BlobSet> {
    if classes < 2 {
        return Err(DataError::Invalid(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    let d = h * w;
    if d < classes {
        return Err(DataError::Invalid(format!(
            "{h}x{w} images cannot hold {classes} orthogonal templates"
        )));
    }
    if !(separation >= 0.0) {
        return Err(DataError::Invalid(format!(
            "separation must be non-negative, got {separation}"
        )));
    }
    let patterns = orthogonal_patterns(classes, h, w, template_seed);
    let peak = patterns
        .iter()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let amp = separation / 2.0;
    let scale = amp * peak + 4.0;

    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut data = Vec::with_capacity(classes * per_class * d);
    let mut labels = Vec::with_capacity(classes * per_class);
    for _ in 0..per_class {
        for (c, pattern) in patterns.iter().enumerate() {
            for &p in pattern {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(((amp * p + z) / scale).clamp(-1.0, 1.0));
            }
            labels.push(c);
        }
    }
    let images = Tensor::new(vec![labels.len(), h, w, 1], data).expect("blob shape");
    let templates = patterns
        .iter()
        .map(|p| p.iter().map(|v| amp * v / scale).collect())
        .collect();
    Ok(BlobSet {
        data: LabeledImageSet::new(images, labels, classes)?,
        templates,
        sigma: 1.0 / scale,
    })
}

/// Box-smoothed Gaussian fields, Gram-Schmidt orthogonalized, RMS 1 each.
fn orthogonal_patterns(classes: usize, h: usize, w: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = (h * w) as f64;
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(classes);
    while out.len() < classes {
        let raw: Vec<f64> = (0..h * w)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let mut v = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (mut acc, mut cnt) = (0.0, 0.0);
                for yy in y.saturating_sub(1)..(y + 2).min(h) {
                    for xx in x.saturating_sub(1)..(x + 2).min(w) {
                        acc += raw[yy * w + xx];
                        cnt += 1.0;
                    }
                }
                v[y * w + x] = acc / cnt;
            }
        }
        for u in &out {
            let proj = v.iter().zip(u).map(|(a, b)| a * b).sum::<f64>() / d;
            for (a, b) in v.iter_mut().zip(u) {
                *a -= proj * b;
            }
        }
        let rms = (v.iter().map(|a| a * a).sum::<f64>() / d).sqrt();
        if rms < 1e-6 {
            continue;
        }
        out.push(v.into_iter().map(|a| a / rms).collect());
    }
    out
}

/// Serializes `set` in the `LFMC` container (pixels as little-endian f32).
pub fn write_binary<W: Write>(set: &LabeledImageSet, mut out: W) -> Result<()> {
    let (h, w, c) = set.image_shape();
    let narrow = |v: usize, what: &str, max: usize| {
        if v > max {
            Err(DataError::Invalid(format!(
                "{what} {v} exceeds container limit {max}"
            )))
        } else {
            Ok(v)
        }
    };
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(
        &(narrow(set.num_classes, "class count", u16::MAX as usize)? as u16).to_le_bytes(),
    )?;
    out.write_all(&(narrow(set.len(), "record count", u32::MAX as usize)? as u32).to_le_bytes())?;
    out.write_all(&(narrow(h, "height", u16::MAX as usize)? as u16).to_le_bytes())?;
    out.write_all(&(narrow(w, "width", u16::MAX as usize)? as u16).to_le_bytes())?;
    out.write_all(&[narrow(c, "channels", u8::MAX as usize)? as u8])?;
    let mut buf = Vec::with_capacity(2 + 4 * h * w * c);
    for i in 0..set.len() {
        buf.clear();
        buf.extend_from_slice(&(set.labels[i] as u16).to_le_bytes());
        for &v in set.image(i) {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn save_binary(set: &LabeledImageSet, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_binary(set, &mut w)?;
    w.flush()?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.offset < n {
            return Err(DataError::Truncated {
                offset: self.offset,
                needed: n,
                available: self.bytes.len() - self.offset,
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses an `LFMC` container from memory.
pub fn parse_binary(bytes: &[u8]) -> Result<LabeledImageSet> {
    let mut r = Reader { bytes, offset: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        let mut found = [0u8; 4];
        found.copy_from_slice(magic);
        return Err(DataError::BadMagic { found });
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let classes = r.u16()? as usize;
    let n = r.u32()? as usize;
    let h = r.u16()? as usize;
    let w = r.u16()? as usize;
    let c = r.take(1)?[0] as usize;
    debug_assert_eq!(r.offset, HEADER_LEN);
    let pixels = h * w * c;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * pixels);
    for record in 0..n {
        let label = r.u16()? as usize;
        if label >= classes {
            return Err(DataError::LabelOutOfRange {
                record,
                label,
                classes,
            });
        }
        labels.push(label);
        let raw = r.take(4 * pixels)?;
        data.extend(
            raw.chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64),
        );
    }
    if r.offset != bytes.len() {
        return Err(DataError::TrailingBytes {
            extra: bytes.len() - r.offset,
        });
    }
    let images = Tensor::new(vec![n, h, w, c], data).expect("container shape");
    LabeledImageSet::new(images, labels, classes)
}

pub fn load_binary(path: &Path) -> Result<LabeledImageSet> {
    let bytes = std::fs::read(path)?;
    parse_binary(&bytes)
}
