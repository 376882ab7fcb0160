//! Labeled image sets and the MNIST (IDX) and CIFAR-10 (binary) loaders.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::io_util::{read_exact, read_u32_be, Tracked};
use crate::tensor::{Rng, Tensor4};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 3073;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    images: Tensor4,
    labels: Vec<u8>,
    classes: usize,
    split: Split,
}

impl LabeledSet {
    pub fn new(images: Tensor4, labels: Vec<u8>, classes: usize, split: Split) -> Result<Self> {
        if images.n() != labels.len() {
            return Err(Error::Shape(format!("{} images but {} labels", images.n(), labels.len())));
        }
        if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= classes) {
            return Err(Error::InvalidArgument(format!("label {l} at index {i} is not below {classes}")));
        }
        Ok(Self { images, labels, classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor4 {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Empty("subset"));
        }
        let images = self.images.gather(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok(Self { images, labels, classes: self.classes, split })
    }

    /// First `n` samples (all of them when `n >= len`).
    pub fn head(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        self.subset(&(0..n).collect::<Vec<_>>(), self.split)
    }

    /// Splits off the last `count` samples as a validation set.
    pub fn split_validation(&self, count: usize) -> Result<(Self, Self)> {
        if count == 0 || count >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "validation size {count} must be in 1..{}",
                self.len()
            )));
        }
        let cut = self.len() - count;
        let train = self.subset(&(0..cut).collect::<Vec<_>>(), Split::Train)?;
        let val = self.subset(&(cut..self.len()).collect::<Vec<_>>(), Split::Validation)?;
        Ok((train, val))
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: LabeledSet,
    pub validation: LabeledSet,
    pub test: LabeledSet,
}

impl Splits {
    /// Keeps at most `train` training and `test` test samples, with the
    /// validation set shrunk in proportion.
    pub fn limit(&self, train: usize, test: usize) -> Result<Splits> {
        let t = self.train.len();
        let v = self.validation.len();
        let train_n = train.min(t);
        let val_n = ((v as u128 * train_n as u128) / t as u128).max(1) as usize;
        Ok(Splits {
            train: self.train.head(train_n)?,
            validation: self.validation.head(val_n)?,
            test: self.test.head(test)?,
        })
    }
}

fn open_maybe_gz(dir: &Path, name: &str) -> Result<(PathBuf, Box<dyn Read>)> {
    let plain = dir.join(name);
    if plain.is_file() {
        let f = File::open(&plain).map_err(|e| Error::io(&plain, e))?;
        return Ok((plain, Box::new(BufReader::new(f))));
    }
    let gz = dir.join(format!("{name}.gz"));
    let f = File::open(&gz).map_err(|e| Error::io(&gz, e))?;
    Ok((gz, Box::new(GzDecoder::new(BufReader::new(f)))))
}

/// Parses an IDX3 image file; pixels are scaled to `[0, 1]`.
pub fn parse_idx_images<R: Read>(reader: R, what: &str) -> Result<Tensor4> {
    let mut r = Tracked::new(reader);
    let magic = read_u32_be(&mut r, what)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic { what: what.to_string(), expected: IDX_IMAGES_MAGIC, found: magic });
    }
    let n = read_u32_be(&mut r, what)? as usize;
    let h = read_u32_be(&mut r, what)? as usize;
    let w = read_u32_be(&mut r, what)? as usize;
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::Format { what: what.to_string(), message: format!("dimensions {n}x{h}x{w}") });
    }
    let mut raw = vec![0u8; n * h * w];
    read_exact(&mut r, &mut raw, what)?;
    let data = raw.iter().map(|&p| p as f32 / 255.0).collect();
    Tensor4::from_vec([n, 1, h, w], data)
}

/// Parses an IDX1 label file.
pub fn parse_idx_labels<R: Read>(reader: R, what: &str) -> Result<Vec<u8>> {
    let mut r = Tracked::new(reader);
    let magic = read_u32_be(&mut r, what)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic { what: what.to_string(), expected: IDX_LABELS_MAGIC, found: magic });
    }
    let n = read_u32_be(&mut r, what)? as usize;
    let mut labels = vec![0u8; n];
    read_exact(&mut r, &mut labels, what)?;
    Ok(labels)
}

fn load_idx_pair(dir: &Path, images: &str, labels: &str, split: Split) -> Result<LabeledSet> {
    let (ipath, ir) = open_maybe_gz(dir, images)?;
    let (lpath, lr) = open_maybe_gz(dir, labels)?;
    let imgs = parse_idx_images(ir, &ipath.display().to_string())?;
    let labs = parse_idx_labels(lr, &lpath.display().to_string())?;
    if imgs.n() != labs.len() {
        return Err(Error::Format {
            what: lpath.display().to_string(),
            message: format!("{} labels for {} images", labs.len(), imgs.n()),
        });
    }
    LabeledSet::new(imgs, labs, 10, split)
}

/// Loads MNIST from `dir` (plain or `.gz` IDX files). The last sixth of the
/// training file becomes the validation split (50,000/10,000 on the
/// standard files).
pub fn load_mnist(dir: &Path) -> Result<Splits> {
    let full = load_idx_pair(dir, "train-images-idx3-ubyte", "train-labels-idx1-ubyte", Split::Train)?;
    let test = load_idx_pair(dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", Split::Test)?;
    let (train, validation) = full.split_validation((full.len() / 6).max(1))?;
    Ok(Splits { train, validation, test })
}

/// Parses concatenated CIFAR-10 records (1 label byte + 3072 channel-planar
/// pixels).
pub fn parse_cifar_records(bytes: &[u8], what: &str) -> Result<LabeledSet> {
    if bytes.len() % CIFAR_RECORD != 0 {
        let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
        return Err(Error::Truncated { what: what.to_string(), offset: whole as u64 });
    }
    let n = bytes.len() / CIFAR_RECORD;
    if n == 0 {
        return Err(Error::Empty("CIFAR batch"));
    }
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * 3072);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(Error::Format {
                what: what.to_string(),
                message: format!("label {} at byte offset {}", rec[0], i * CIFAR_RECORD),
            });
        }
        labels.push(rec[0]);
        data.extend(rec[1..].iter().map(|&p| p as f32 / 255.0));
    }
    LabeledSet::new(Tensor4::from_vec([n, 3, 32, 32], data)?, labels, 10, Split::Train)
}

fn read_cifar_file(path: &Path) -> Result<LabeledSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar_records(&bytes, &path.display().to_string())
}

fn concat(sets: &[LabeledSet], split: Split) -> Result<LabeledSet> {
    let n: usize = sets.iter().map(LabeledSet::len).sum();
    let mut data = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for s in sets {
        data.extend_from_slice(s.images.as_slice());
        labels.extend_from_slice(&s.labels);
    }
    let [_, c, h, w] = sets[0].images.dims();
    LabeledSet::new(Tensor4::from_vec([n, c, h, w], data)?, labels, 10, split)
}

/// Loads CIFAR-10 binary batches from `dir`; a tenth of the training data
/// (the tail) is the validation split (45,000/5,000 on the standard files).
pub fn load_cifar10(dir: &Path) -> Result<Splits> {
    let mut batches = Vec::new();
    for b in 1..=5 {
        let p = dir.join(format!("data_batch_{b}.bin"));
        if p.is_file() || b == 1 {
            batches.push(read_cifar_file(&p)?);
        }
    }
    let full = concat(&batches, Split::Train)?;
    let test = concat(&[read_cifar_file(&dir.join("test_batch.bin"))?], Split::Test)?;
    let (train, validation) = full.split_validation((full.len() / 10).max(1))?;
    Ok(Splits { train, validation, test })
}

/// Class-prototype images plus Gaussian noise; a stand-in dataset that
/// needs no files.
pub fn synthetic(
    classes: usize,
    channels: usize,
    size: usize,
    count: usize,
    noise: f32,
    rng: &mut Rng,
) -> Result<LabeledSet> {
    if classes == 0 || channels == 0 || size == 0 || count == 0 {
        return Err(Error::InvalidArgument("synthetic set needs non-zero dimensions".into()));
    }
    let item = channels * size * size;
    let protos: Vec<Vec<f32>> =
        (0..classes).map(|_| (0..item).map(|_| if rng.bernoulli(0.3) { 1.0 } else { 0.0 }).collect()).collect();
    let mut data = Vec::with_capacity(count * item);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let c = i % classes;
        labels.push(c as u8);
        data.extend(protos[c].iter().map(|p| (p + noise * rng.normal()).clamp(0.0, 1.0)));
    }
    LabeledSet::new(Tensor4::from_vec([count, channels, size, size], data)?, labels, classes, Split::Train)
}

/// Synthetic train/validation/test triple drawn from one prototype set.
pub fn synthetic_splits(
    classes: usize,
    channels: usize,
    size: usize,
    train: usize,
    test: usize,
    rng: &mut Rng,
) -> Result<Splits> {
    let val = (train / 6).max(classes);
    let all = synthetic(classes, channels, size, train + val + test, 0.25, rng)?;
    let mut order: Vec<usize> = (0..all.len()).collect();
    rng.shuffle(&mut order);
    Ok(Splits {
        train: all.subset(&order[..train], Split::Train)?,
        validation: all.subset(&order[train..train + val], Split::Validation)?,
        test: all.subset(&order[train + val..], Split::Test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, h: u32, w: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
        for d in [n, h, w] {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v.extend_from_slice(pixels);
        v
    }

    #[test]
    fn idx_images_are_big_endian_and_scaled() {
        let bytes = idx_images(2, 2, 1, &[0, 255, 51, 102]);
        let t = parse_idx_images(&bytes[..], "t").unwrap();
        assert_eq!(t.dims(), [2, 1, 2, 1]);
        assert_eq!(t.as_slice(), &[0.0, 1.0, 0.2, 0.4]);
    }

    #[test]
    fn labels_file_with_image_magic_is_rejected() {
        let mut bytes = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.push(3);
        match parse_idx_labels(&bytes[..], "labels") {
            Err(Error::BadMagic { expected, found, .. }) => {
                assert_eq!(expected, IDX_LABELS_MAGIC);
                assert_eq!(found, IDX_IMAGES_MAGIC);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_idx_reports_offset() {
        let bytes = idx_images(2, 2, 2, &[1, 2, 3]);
        match parse_idx_images(&bytes[..], "img") {
            Err(Error::Truncated { offset, .. }) => assert_eq!(offset, 19),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cifar_size_must_be_record_multiple() {
        let bytes = vec![0u8; CIFAR_RECORD + 10];
        match parse_cifar_records(&bytes, "b") {
            Err(Error::Truncated { offset, .. }) => assert_eq!(offset, CIFAR_RECORD as u64),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cifar_label_out_of_range() {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[CIFAR_RECORD] = 10;
        assert!(matches!(parse_cifar_records(&bytes, "b"), Err(Error::Format { .. })));
    }

    #[test]
    fn split_validation_takes_tail() {
        let mut rng = Rng::new(1);
        let s = synthetic(3, 1, 4, 12, 0.1, &mut rng).unwrap();
        let (t, v) = s.split_validation(2).unwrap();
        assert_eq!((t.len(), v.len()), (10, 2));
        assert_eq!(v.labels(), &s.labels()[10..]);
        assert_eq!(v.split(), Split::Validation);
    }

    #[test]
    fn mismatched_counts_rejected() {
        let imgs = Tensor4::zeros(2, 1, 2, 2).unwrap();
        assert!(LabeledSet::new(imgs.clone(), vec![0], 10, Split::Train).is_err());
        assert!(LabeledSet::new(imgs, vec![0, 10], 10, Split::Train).is_err());
    }
}
