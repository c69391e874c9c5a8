//! Dataset ingestion and sequencing: big-endian IDX containers, per-class
//! sequential splits, fixed-permutation sequences, incremental test sets, and
//! a deterministic synthetic corpus for desk-scale runs without external
//! downloads.

use crate::error::{Error, Result};
use crate::seeds;
use ndarray::{concatenate, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw uint8 image tensor straight out of an IDX file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImages {
    pub n: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

/// Raw uint8 label vector straight out of an IDX file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawLabels {
    pub labels: Vec<u8>,
}

/// Parsed IDX payload, one variant per supported magic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IdxFile {
    Images(RawImages),
    Labels(RawLabels),
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|s| u32::from_be_bytes(s.try_into().unwrap()))
        .ok_or(Error::Format {
            offset: offset as u64,
            reason: "truncated header".into(),
        })
}

/// Parse a big-endian IDX file: magic `0x00000803` for a `[n, rows, cols]`
/// uint8 image tensor, `0x00000801` for a `[n]` uint8 label vector.
pub fn load_idx(path: &Path) -> Result<IdxFile> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_idx(&bytes)
}

fn parse_idx(bytes: &[u8]) -> Result<IdxFile> {
    let magic = read_be_u32(bytes, 0)?;
    match magic {
        IMAGES_MAGIC => {
            let n = read_be_u32(bytes, 4)? as usize;
            let rows = read_be_u32(bytes, 8)? as usize;
            let cols = read_be_u32(bytes, 12)? as usize;
            let len = n
                .checked_mul(rows)
                .and_then(|v| v.checked_mul(cols))
                .ok_or(Error::Format {
                    offset: 4,
                    reason: format!("dimension overflow: {n} x {rows} x {cols}"),
                })?;
            let payload = bytes.get(16..).unwrap_or(&[]);
            if payload.len() != len {
                return Err(Error::Format {
                    offset: 16,
                    reason: format!("expected {len} payload bytes, found {}", payload.len()),
                });
            }
            Ok(IdxFile::Images(RawImages {
                n,
                rows,
                cols,
                pixels: payload.to_vec(),
            }))
        }
        LABELS_MAGIC => {
            let n = read_be_u32(bytes, 4)? as usize;
            let payload = bytes.get(8..).unwrap_or(&[]);
            if payload.len() != n {
                return Err(Error::Format {
                    offset: 8,
                    reason: format!("expected {n} payload bytes, found {}", payload.len()),
                });
            }
            Ok(IdxFile::Labels(RawLabels {
                labels: payload.to_vec(),
            }))
        }
        other => Err(Error::Format {
            offset: 0,
            reason: format!("unknown magic 0x{other:08x}"),
        }),
    }
}

pub fn write_idx_images(path: &Path, images: &RawImages) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + images.pixels.len());
    buf.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    buf.extend_from_slice(&(images.n as u32).to_be_bytes());
    buf.extend_from_slice(&(images.rows as u32).to_be_bytes());
    buf.extend_from_slice(&(images.cols as u32).to_be_bytes());
    buf.extend_from_slice(&images.pixels);
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + labels.len());
    buf.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    buf.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    buf.extend_from_slice(labels);
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

/// Which split a dataset belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Flattened images scaled into `[0,1]`, with optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    /// `[n, dim]`, one image per row.
    pub images: Array2<f64>,
    pub labels: Option<Vec<u8>>,
    pub split: Split,
    pub source_tag: String,
}

impl ImageDataset {
    pub fn new(
        images: Array2<f64>,
        labels: Option<Vec<u8>>,
        split: Split,
        source_tag: impl Into<String>,
    ) -> Result<Self> {
        if images.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::arg("images", "pixel values must lie in [0, 1]"));
        }
        if let Some(l) = &labels {
            if l.len() != images.nrows() {
                return Err(Error::dim("labels", images.nrows(), l.len()));
            }
            if l.iter().any(|&v| v > 9) {
                return Err(Error::arg("labels", "labels must lie in [0, 9]"));
            }
        }
        Ok(ImageDataset {
            images,
            labels,
            split,
            source_tag: source_tag.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.images.ncols()
    }

    /// Rows at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize], split: Split) -> ImageDataset {
        let images = Array2::from_shape_fn((indices.len(), self.dim()), |(i, j)| {
            self.images[[indices[i], j]]
        });
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        ImageDataset {
            images,
            labels,
            split,
            source_tag: self.source_tag.clone(),
        }
    }
}

/// Flatten raw uint8 images and scale by 1/255; no binarization, gray values
/// are kept as Bernoulli targets.
pub fn preprocess(
    raw: &RawImages,
    labels: Option<Vec<u8>>,
    split: Split,
    source_tag: impl Into<String>,
) -> Result<ImageDataset> {
    let dim = raw.rows * raw.cols;
    let images = Array2::from_shape_fn((raw.n, dim), |(i, j)| {
        raw.pixels[i * dim + j] as f64 / 255.0
    });
    ImageDataset::new(images, labels, split, source_tag)
}

/// One distribution in a sequence.
#[derive(Debug, Clone)]
pub struct DistributionTriple {
    pub train: ImageDataset,
    pub val: ImageDataset,
    pub test: ImageDataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SequenceKind {
    PerClass,
    Permuted,
}

/// An ordered list of distributions presented to the learner one at a time.
#[derive(Debug, Clone)]
pub struct DistributionSequence {
    pub triples: Vec<DistributionTriple>,
    pub kind: SequenceKind,
}

impl DistributionSequence {
    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }
}

/// Split labeled train/test corpora into one pure-class triple per label, in
/// ascending label order, carving a validation set from each class's train
/// split deterministically from `seed`.
pub fn split_by_label(
    train: &ImageDataset,
    test: &ImageDataset,
    val_fraction: f64,
    seed: u64,
) -> Result<DistributionSequence> {
    let train_labels = train
        .labels
        .as_ref()
        .ok_or_else(|| Error::arg("train", "per-class split requires labels"))?;
    let test_labels = test
        .labels
        .as_ref()
        .ok_or_else(|| Error::arg("test", "per-class split requires labels"))?;
    if !(0.0..1.0).contains(&val_fraction) || val_fraction <= 0.0 {
        return Err(Error::arg("val_fraction", "must lie in (0, 1)"));
    }

    let mut classes: Vec<u8> = train_labels.to_vec();
    classes.sort_unstable();
    classes.dedup();

    let mut triples = Vec::with_capacity(classes.len());
    for &class in &classes {
        let class_train: Vec<usize> = train_labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        let class_test: Vec<usize> = test_labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();

        let mut shuffled = class_train.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive2(seed, 0x5350, class as u64));
        for i in (1..shuffled.len()).rev() {
            let j = rng.random_range(0..=i);
            shuffled.swap(i, j);
        }
        let n_val = (val_fraction * class_train.len() as f64).round() as usize;
        let (val_idx, train_idx) = shuffled.split_at(n_val.min(shuffled.len()));

        let tag = format!("{}/class_{class}", train.source_tag);
        let mut t = train.subset(train_idx, Split::Train);
        t.source_tag = tag.clone();
        let mut v = train.subset(val_idx, Split::Val);
        v.source_tag = tag.clone();
        let mut s = test.subset(&class_test, Split::Test);
        s.source_tag = tag;
        triples.push(DistributionTriple {
            train: t,
            val: v,
            test: s,
        });
    }
    Ok(DistributionSequence {
        triples,
        kind: SequenceKind::PerClass,
    })
}

/// Keep at most `cap` samples of every class, preserving order. Datasets
/// without labels are truncated to `cap` rows.
pub fn cap_per_class(ds: &ImageDataset, cap: usize) -> ImageDataset {
    match &ds.labels {
        None => {
            let idx: Vec<usize> = (0..ds.len().min(cap)).collect();
            ds.subset(&idx, ds.split)
        }
        Some(labels) => {
            let mut counts = [0usize; 10];
            let mut keep = Vec::new();
            for (i, &l) in labels.iter().enumerate() {
                if counts[l as usize] < cap {
                    counts[l as usize] += 1;
                    keep.push(i);
                }
            }
            ds.subset(&keep, ds.split)
        }
    }
}

/// The fixed pixel permutations applied by [`make_permuted_sequence`]:
/// `n - 1` pairwise-distinct non-identity permutations of `dim` indices,
/// deterministic in `seed`.
pub fn permutations_for(n: usize, seed: u64, dim: usize) -> Vec<Vec<usize>> {
    let mut perms: Vec<Vec<usize>> = Vec::new();
    let identity: Vec<usize> = (0..dim).collect();
    let mut attempt = 0u64;
    while perms.len() + 1 < n {
        let mut perm = identity.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive2(
            seed,
            0x5045,
            perms.len() as u64 + (attempt << 32),
        ));
        for i in (1..dim).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        attempt += 1;
        if perm != identity && !perms.contains(&perm) {
            perms.push(perm);
        }
    }
    perms
}

/// Reorder pixels of every image: output pixel `k` takes input pixel
/// `perm[k]`.
pub fn apply_permutation(images: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn(images.dim(), |(i, k)| images[[i, perm[k]]])
}

fn permute_dataset(ds: &ImageDataset, perm: &[usize], tag: &str) -> ImageDataset {
    ImageDataset {
        images: apply_permutation(&ds.images, perm),
        labels: ds.labels.clone(),
        split: ds.split,
        source_tag: tag.to_string(),
    }
}

/// Build `n` distributions from one base triple: the first is the base
/// unpermuted, each later one applies a fixed pixel permutation shared across
/// its train/val/test splits.
pub fn make_permuted_sequence(
    base: &DistributionTriple,
    n: usize,
    seed: u64,
) -> Result<DistributionSequence> {
    if n == 0 {
        return Err(Error::arg("n", "need at least one distribution"));
    }
    let dim = base.train.dim();
    let perms = permutations_for(n, seed, dim);
    let mut triples = Vec::with_capacity(n);
    let mut first = base.clone();
    let tag = format!("{}/permutation_0", base.train.source_tag);
    first.train.source_tag = tag.clone();
    first.val.source_tag = tag.clone();
    first.test.source_tag = tag;
    triples.push(first);
    for (i, perm) in perms.iter().enumerate() {
        let tag = format!("{}/permutation_{}", base.train.source_tag, i + 1);
        triples.push(DistributionTriple {
            train: permute_dataset(&base.train, perm, &tag),
            val: permute_dataset(&base.val, perm, &tag),
            test: permute_dataset(&base.test, perm, &tag),
        });
    }
    Ok(DistributionSequence {
        triples,
        kind: SequenceKind::Permuted,
    })
}

/// Union of the test splits of distributions `1..=i` (1-based), in stable
/// order with source tags joined.
pub fn accumulate_test(sequence: &DistributionSequence, i: usize) -> Result<ImageDataset> {
    if i == 0 || i > sequence.len() {
        return Err(Error::arg(
            "i",
            format!("must lie in [1, {}], got {i}", sequence.len()),
        ));
    }
    let parts: Vec<_> = sequence.triples[..i].iter().map(|t| &t.test).collect();
    let views: Vec<_> = parts.iter().map(|d| d.images.view()).collect();
    let images = concatenate(Axis(0), &views).expect("consistent dims");
    let labels = if parts.iter().all(|d| d.labels.is_some()) {
        Some(
            parts
                .iter()
                .flat_map(|d| d.labels.as_ref().unwrap().iter().copied())
                .collect(),
        )
    } else {
        None
    };
    let source_tag = parts
        .iter()
        .map(|d| d.source_tag.as_str())
        .collect::<Vec<_>>()
        .join(",");
    ImageDataset::new(images, labels, Split::Test, source_tag)
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

const SIDE: usize = 28;

/// Render one 28x28 sample of the given class. Ten procedurally drawn shape
/// families with jittered geometry, stroke, intensity and pixel noise; only
/// IEEE-exact arithmetic so corpora are identical across platforms.
///
/// Classes 0-2 share one shape family (a soft disk) and differ only in the
/// vertical band it sits in, so they overlap along a continuous factor the
/// way neighboring digit classes do; 3-9 are distinct stroke families.
fn render_class(class: u8, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let cx = 13.5 + rng.random_range(-2.5..2.5);
    let cy = 13.5 + rng.random_range(-2.5..2.5);
    let stroke = 2.2 + rng.random_range(0.0..1.2);
    let size = rng.random_range(-1.5..1.5);
    let offset = rng.random_range(-3.0..3.0);
    let intensity = 170.0 + rng.random_range(0.0..85.0);
    let band_x = 13.5 + rng.random_range(-3.5..3.5);
    let band_jitter = rng.random_range(-2.2..2.2);

    let hypot = |a: f64, b: f64| (a * a + b * b).sqrt();
    let vbar = |px: f64, py: f64, at: f64, w: f64| {
        ((px - at).abs() - w / 2.0).max((py - 13.5).abs() - 11.0)
    };
    let hbar = |px: f64, py: f64, at: f64, w: f64| {
        ((py - at).abs() - w / 2.0).max((px - 13.5).abs() - 11.0)
    };
    let ring = |px: f64, py: f64, rx: f64, ry: f64, r: f64, t: f64| {
        (hypot(px - rx, py - ry) - r).abs() - t / 2.0
    };
    let disk_at_band = |px: f64, py: f64, band_center: f64| {
        hypot(px - band_x, py - (band_center + band_jitter)) - (3.8 + size * 0.5)
    };

    let dist = |px: f64, py: f64| -> f64 {
        match class {
            0 => disk_at_band(px, py, 7.5),
            1 => disk_at_band(px, py, 13.5),
            2 => disk_at_band(px, py, 19.5),
            3 => ((px - py + offset).abs() * std::f64::consts::FRAC_1_SQRT_2 - stroke / 2.0)
                .max((py - 13.5).abs() - 12.0),
            4 => ((px + py - 27.0 + offset).abs() * std::f64::consts::FRAC_1_SQRT_2
                - stroke / 2.0)
                .max((py - 13.5).abs() - 12.0),
            5 => vbar(px, py, cx, stroke).min(hbar(px, py, cy, stroke)),
            6 => ((px - cx).abs().max((py - cy).abs()) - (7.0 + size)).abs() - stroke / 2.0,
            7 => {
                let gap = 4.5 + stroke / 2.0;
                vbar(px, py, cx - gap, 2.6).min(vbar(px, py, cx + gap, 2.6))
            }
            8 => {
                let r = 3.6 + size * 0.5;
                ring(px, py, cx, cy - 5.0, r, stroke).min(ring(px, py, cx, cy + 5.0, r, stroke))
            }
            9 => hypot(px - cx, py - cy) - (4.5 + size * 0.7),
            other => panic!("synthetic corpus supports classes 0..=9, got {other}"),
        }
    };

    let mut out = Vec::with_capacity(SIDE * SIDE);
    for y in 0..SIDE {
        for x in 0..SIDE {
            let d = dist(x as f64, y as f64);
            let coverage = (0.75 - d).clamp(0.0, 1.0);
            let noise = rng.random_range(-6.0..6.0);
            let v = (intensity * coverage + noise).clamp(0.0, 255.0);
            out.push(v as u8);
        }
    }
    out
}

/// Deterministic labeled corpus of `n_classes` shape families.
pub fn synthesize_corpus(
    n_classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    seed: u64,
) -> Result<(ImageDataset, ImageDataset)> {
    if n_classes == 0 || n_classes > 10 {
        return Err(Error::arg("n_classes", "must lie in [1, 10]"));
    }
    let render_set = |per_class: usize, salt: u64| -> (RawImages, Vec<u8>) {
        let mut pixels = Vec::with_capacity(n_classes * per_class * SIDE * SIDE);
        let mut labels = Vec::with_capacity(n_classes * per_class);
        for class in 0..n_classes as u8 {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seeds::derive2(seed, salt, class as u64));
            for _ in 0..per_class {
                pixels.extend(render_class(class, &mut rng));
                labels.push(class);
            }
        }
        (
            RawImages {
                n: n_classes * per_class,
                rows: SIDE,
                cols: SIDE,
                pixels,
            },
            labels,
        )
    };
    let (train_raw, train_labels) = render_set(train_per_class, 0x5452);
    let (test_raw, test_labels) = render_set(test_per_class, 0x5445);
    Ok((
        preprocess(&train_raw, Some(train_labels), Split::Train, "synthetic")?,
        preprocess(&test_raw, Some(test_labels), Split::Test, "synthetic")?,
    ))
}

/// Write a synthetic corpus as the four standard IDX files under `dir`.
pub fn write_synthetic_idx(
    dir: &Path,
    n_classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    seed: u64,
) -> Result<()> {
    if n_classes == 0 || n_classes > 10 {
        return Err(Error::arg("n_classes", "must lie in [1, 10]"));
    }
    std::fs::create_dir_all(dir)?;
    let render_set = |per_class: usize, salt: u64| -> (RawImages, Vec<u8>) {
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for class in 0..n_classes as u8 {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seeds::derive2(seed, salt, class as u64));
            for _ in 0..per_class {
                pixels.extend(render_class(class, &mut rng));
                labels.push(class);
            }
        }
        (
            RawImages {
                n: n_classes * per_class,
                rows: SIDE,
                cols: SIDE,
                pixels,
            },
            labels,
        )
    };
    let (train_raw, train_labels) = render_set(train_per_class, 0x5452);
    let (test_raw, test_labels) = render_set(test_per_class, 0x5445);
    write_idx_images(&dir.join("train-images-idx3-ubyte"), &train_raw)?;
    write_idx_labels(&dir.join("train-labels-idx1-ubyte"), &train_labels)?;
    write_idx_images(&dir.join("t10k-images-idx3-ubyte"), &test_raw)?;
    write_idx_labels(&dir.join("t10k-labels-idx1-ubyte"), &test_labels)?;
    Ok(())
}

/// Load the four standard IDX files from `dir` into labeled train/test sets.
pub fn load_idx_corpus(dir: &Path, tag: &str) -> Result<(ImageDataset, ImageDataset)> {
    let images = |name: &str| -> Result<RawImages> {
        match load_idx(&dir.join(name))? {
            IdxFile::Images(i) => Ok(i),
            IdxFile::Labels(_) => Err(Error::arg("data_root", format!("{name} is a label file"))),
        }
    };
    let labels = |name: &str| -> Result<Vec<u8>> {
        match load_idx(&dir.join(name))? {
            IdxFile::Labels(l) => Ok(l.labels),
            IdxFile::Images(_) => Err(Error::arg("data_root", format!("{name} is an image file"))),
        }
    };
    let train = preprocess(
        &images("train-images-idx3-ubyte")?,
        Some(labels("train-labels-idx1-ubyte")?),
        Split::Train,
        tag,
    )?;
    let test = preprocess(
        &images("t10k-images-idx3-ubyte")?,
        Some(labels("t10k-labels-idx1-ubyte")?),
        Split::Test,
        tag,
    )?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn idx_image_fixture_parses() {
        let bytes: Vec<u8> = [
            0x00, 0x00, 0x08, 0x03, // magic
            0x00, 0x00, 0x00, 0x01, // n = 1
            0x00, 0x00, 0x00, 0x02, // rows = 2
            0x00, 0x00, 0x00, 0x02, // cols = 2
            0x00, 0x80, 0xff, 0x40, // payload
        ]
        .to_vec();
        match parse_idx(&bytes).unwrap() {
            IdxFile::Images(img) => {
                assert_eq!((img.n, img.rows, img.cols), (1, 2, 2));
                assert_eq!(img.pixels, vec![0, 128, 255, 64]);
            }
            _ => panic!("expected images"),
        }
    }

    #[test]
    fn idx_label_fixture_parses() {
        let bytes: Vec<u8> = [
            0x00, 0x00, 0x08, 0x01, 0x00, 0x00, 0x00, 0x03, 7, 2, 1,
        ]
        .to_vec();
        match parse_idx(&bytes).unwrap() {
            IdxFile::Labels(l) => assert_eq!(l.labels, vec![7, 2, 1]),
            _ => panic!("expected labels"),
        }
    }

    #[test]
    fn idx_rejects_bad_magic_and_truncation() {
        let bad_magic = vec![0, 0, 0, 0, 0, 0, 0, 1];
        match parse_idx(&bad_magic) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }

        let truncated: Vec<u8> = [
            0x00, 0x00, 0x08, 0x03, 0x00, 0x00, 0x00, 0x01, 0x00, 0x00, 0x00, 0x02, 0x00, 0x00,
            0x00, 0x02, 0x00, 0x80,
        ]
        .to_vec();
        match parse_idx(&truncated) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 16),
            other => panic!("expected format error, got {other:?}"),
        }

        let short_header = vec![0x00, 0x00, 0x08, 0x03, 0x00];
        assert!(parse_idx(&short_header).is_err());
    }

    #[test]
    fn idx_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let img = RawImages {
            n: 2,
            rows: 2,
            cols: 3,
            pixels: vec![0, 1, 2, 3, 4, 5, 250, 251, 252, 253, 254, 255],
        };
        let p = dir.path().join("imgs.idx");
        write_idx_images(&p, &img).unwrap();
        assert_eq!(load_idx(&p).unwrap(), IdxFile::Images(img.clone()));
        // A second write of the parsed content is byte-identical.
        let p2 = dir.path().join("imgs2.idx");
        write_idx_images(&p2, &img).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());

        let labels = vec![0u8, 9, 4];
        let pl = dir.path().join("labels.idx");
        write_idx_labels(&pl, &labels).unwrap();
        assert_eq!(
            load_idx(&pl).unwrap(),
            IdxFile::Labels(RawLabels { labels })
        );
    }

    #[test]
    fn preprocess_scales_and_flattens() {
        let raw = RawImages {
            n: 1,
            rows: 28,
            cols: 28,
            pixels: {
                let mut p = vec![0u8; 784];
                p[0] = 255;
                p[1] = 128;
                p
            },
        };
        let ds = preprocess(&raw, None, Split::Train, "t").unwrap();
        assert_eq!(ds.dim(), 784);
        assert_eq!(ds.images[[0, 0]], 1.0);
        assert!((ds.images[[0, 1]] - 128.0 / 255.0).abs() < 1e-12);
        assert_eq!(ds.images[[0, 2]], 0.0);
    }

    fn small_corpus() -> (ImageDataset, ImageDataset) {
        synthesize_corpus(3, 30, 10, 99).unwrap()
    }

    #[test]
    fn split_by_label_is_pure_sized_and_deterministic() {
        let (train, test) = small_corpus();
        let seq = split_by_label(&train, &test, 0.1, 7).unwrap();
        assert_eq!(seq.len(), 3);
        for (d, triple) in seq.triples.iter().enumerate() {
            for part in [&triple.train, &triple.val, &triple.test] {
                assert!(part.labels.as_ref().unwrap().iter().all(|&l| l == d as u8));
            }
            assert_eq!(triple.val.len(), (0.1f64 * 30.0).round() as usize);
            assert_eq!(triple.train.len(), 30 - triple.val.len());
            assert_eq!(triple.test.len(), 10);
        }

        let seq2 = split_by_label(&train, &test, 0.1, 7).unwrap();
        assert_eq!(seq.triples[0].train.images, seq2.triples[0].train.images);
        assert_eq!(seq.triples[2].val.images, seq2.triples[2].val.images);

        let unlabeled = ImageDataset::new(train.images.clone(), None, Split::Train, "u").unwrap();
        assert!(split_by_label(&unlabeled, &test, 0.1, 7).is_err());
        assert!(split_by_label(&train, &test, 0.0, 7).is_err());
    }

    #[test]
    fn permuted_sequence_properties() {
        let (train, test) = small_corpus();
        let seq = split_by_label(&train, &test, 0.1, 7).unwrap();
        let base = &seq.triples[0];
        let permuted = make_permuted_sequence(base, 4, 13).unwrap();
        assert_eq!(permuted.len(), 4);
        // First triple is the base, unpermuted.
        assert_eq!(permuted.triples[0].train.images, base.train.images);

        let dim = base.train.dim();
        let perms = permutations_for(4, 13, dim);
        assert_eq!(perms.len(), 3);
        // Pairwise distinct and non-identity.
        let identity: Vec<usize> = (0..dim).collect();
        for (i, p) in perms.iter().enumerate() {
            assert_ne!(*p, identity);
            for q in &perms[i + 1..] {
                assert_ne!(p, q);
            }
        }

        // Applying the inverse recovers the base image.
        for (k, perm) in perms.iter().enumerate() {
            let mut inverse = vec![0usize; dim];
            for (to, &from) in perm.iter().enumerate() {
                inverse[from] = to;
            }
            let recovered =
                apply_permutation(&permuted.triples[k + 1].train.images, &inverse);
            assert_eq!(recovered, base.train.images);

            // Same permutation on every split of a triple.
            assert_eq!(
                permuted.triples[k + 1].test.images,
                apply_permutation(&base.test.images, perm)
            );
        }

        // Deterministic in the seed.
        let again = make_permuted_sequence(base, 4, 13).unwrap();
        assert_eq!(again.triples[2].train.images, permuted.triples[2].train.images);
    }

    #[test]
    fn accumulate_test_concatenates_in_order() {
        let (train, test) = small_corpus();
        let seq = split_by_label(&train, &test, 0.1, 7).unwrap();
        let first = accumulate_test(&seq, 1).unwrap();
        assert_eq!(first.images, seq.triples[0].test.images);

        let two = accumulate_test(&seq, 2).unwrap();
        assert_eq!(two.len(), seq.triples[0].test.len() + seq.triples[1].test.len());
        let labels: HashSet<u8> = two.labels.as_ref().unwrap().iter().copied().collect();
        assert_eq!(labels, HashSet::from([0, 1]));

        assert!(accumulate_test(&seq, 0).is_err());
        assert!(accumulate_test(&seq, 4).is_err());
    }

    #[test]
    fn corpus_is_deterministic_and_leak_free() {
        let (train_a, test_a) = small_corpus();
        let (train_b, _) = small_corpus();
        assert_eq!(train_a.images, train_b.images);

        // No image appears in both train and test (hash rows).
        let hash_rows = |ds: &ImageDataset| -> HashSet<Vec<u64>> {
            ds.images
                .rows()
                .into_iter()
                .map(|r| r.iter().map(|v| v.to_bits()).collect())
                .collect()
        };
        let train_set = hash_rows(&train_a);
        let test_set = hash_rows(&test_a);
        assert!(train_set.is_disjoint(&test_set));

        // Different classes look different: mean images differ.
        let seq = split_by_label(&train_a, &test_a, 0.1, 3).unwrap();
        let mean = |ds: &ImageDataset| ds.images.mean_axis(Axis(0)).unwrap();
        let m0 = mean(&seq.triples[0].train);
        let m1 = mean(&seq.triples[1].train);
        let l2 = (&m0 - &m1).mapv(|v| v * v).sum().sqrt();
        assert!(l2 > 1.0, "class means too close: {l2}");
    }

    #[test]
    fn synthetic_idx_files_roundtrip_through_loader() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_idx(dir.path(), 2, 5, 3, 42).unwrap();
        let (train, test) = load_idx_corpus(dir.path(), "synthetic").unwrap();
        assert_eq!(train.len(), 10);
        assert_eq!(test.len(), 6);
        assert_eq!(train.dim(), 784);

        // The in-memory generator and the IDX path agree exactly.
        let (mem_train, mem_test) = synthesize_corpus(2, 5, 3, 42).unwrap();
        assert_eq!(train.images, mem_train.images);
        assert_eq!(test.images, mem_test.images);
        assert_eq!(train.labels, mem_train.labels);
        assert_eq!(test.labels, mem_test.labels);
    }

    #[test]
    fn cap_per_class_keeps_stable_prefix() {
        let (train, _) = small_corpus();
        let capped = cap_per_class(&train, 7);
        assert_eq!(capped.len(), 21);
        let labels = capped.labels.as_ref().unwrap();
        for class in 0..3u8 {
            assert_eq!(labels.iter().filter(|&&l| l == class).count(), 7);
        }
        // First 7 of class 0 are the original first 7 rows.
        assert_eq!(
            capped.images.slice(ndarray::s![0..7, ..]),
            train.images.slice(ndarray::s![0..7, ..])
        );
    }
}
