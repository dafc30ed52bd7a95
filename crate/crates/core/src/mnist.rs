//! MNIST in the IDX container: loading, writing, splitting and batching.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;
/// Training points kept for training; the rest of the 60k go to validation.
pub const DEFAULT_TRAIN_SIZE: usize = 53_000;

/// Images `[N, 1, rows, cols]` with pixels scaled by 1/255 into `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub tag: String,
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn parse_header(bytes: &[u8], magic: u32, dims: usize, what: &str) -> Result<Vec<usize>> {
    let header = 4 + 4 * dims;
    if bytes.len() < header {
        return Err(Error::format(what, format!("truncated header ({} bytes)", bytes.len())));
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(Error::format(what, format!("bad magic {found:#010x}, expected {magic:#010x}")));
    }
    let shape: Vec<usize> = (0..dims).map(|d| be_u32(bytes, 4 + 4 * d) as usize).collect();
    let payload: usize = shape.iter().product();
    if bytes.len() - header < payload {
        return Err(Error::format(
            what,
            format!("truncated payload: header promises {payload} bytes, file has {}", bytes.len() - header),
        ));
    }
    Ok(shape)
}

impl Dataset {
    /// Parses an image/label IDX pair from memory.
    pub fn from_idx_bytes(images: &[u8], labels: &[u8], tag: &str) -> Result<Self> {
        let ishape = parse_header(images, IMAGE_MAGIC, 3, "image file")?;
        let lshape = parse_header(labels, LABEL_MAGIC, 1, "label file")?;
        if ishape[0] != lshape[0] {
            return Err(Error::format(
                "dataset",
                format!("{} images but {} labels", ishape[0], lshape[0]),
            ));
        }
        let n = ishape[0];
        let pixels = &images[16..16 + n * ishape[1] * ishape[2]];
        let labels: Vec<usize> = labels[8..8 + n].iter().map(|&l| l as usize).collect();
        if let Some(bad) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
            return Err(Error::format("label file", format!("label {bad} out of range")));
        }
        let data = pixels.iter().map(|&p| p as f32 / 255.0).collect();
        Ok(Dataset {
            images: Tensor::new(&[n, 1, ishape[1], ishape[2]], data)?,
            labels,
            tag: tag.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_len(&self) -> usize {
        self.images.per_sample_len()
    }

    /// Examples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize], tag: &str) -> Dataset {
        let (images, labels) = self.gather(indices);
        Dataset { images, labels, tag: tag.to_string() }
    }

    /// First `n` examples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx, &self.tag)
    }

    fn gather(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let len = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * len..(i + 1) * len]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        (Tensor::new(&shape, data).unwrap(), indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Serializes back to the IDX pair (images, labels).
    pub fn to_idx_bytes(&self) -> (Vec<u8>, Vec<u8>) {
        let s = self.images.shape();
        let mut images = Vec::with_capacity(16 + self.images.len());
        for v in [IMAGE_MAGIC, s[0] as u32, s[2] as u32, s[3] as u32] {
            images.extend_from_slice(&v.to_be_bytes());
        }
        images.extend(self.images.data().iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
        let mut labels = Vec::with_capacity(8 + self.len());
        for v in [LABEL_MAGIC, self.len() as u32] {
            labels.extend_from_slice(&v.to_be_bytes());
        }
        labels.extend(self.labels.iter().map(|&l| l as u8));
        (images, labels)
    }

    /// Mean pixel value over the whole dataset.
    pub fn mean_pixel(&self) -> f64 {
        self.images.data().iter().map(|&p| p as f64).sum::<f64>() / self.images.len().max(1) as f64
    }

    /// Iterates over shuffled mini-batches; the order depends only on
    /// `(seed, epoch)` and the last batch may be short.
    pub fn batches(&self, batch_size: usize, seed: u64, epoch: u64) -> Batches<'_> {
        Batches { data: self, order: self.epoch_order(seed, epoch), batch_size: batch_size.max(1), pos: 0 }
    }

    /// The sample order `batches` uses for `(seed, epoch)`.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
        order
    }

    /// Images and labels at `indices` as one batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        self.gather(indices)
    }

    /// Batches in storage order, for evaluation.
    pub fn sequential(&self, batch_size: usize) -> Batches<'_> {
        Batches { data: self, order: (0..self.len()).collect(), batch_size: batch_size.max(1), pos: 0 }
    }
}

pub struct Batches<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = (Tensor<f32>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.data.gather(&self.order[self.pos..end]);
        self.pos = end;
        Some(batch)
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let tag = ip.file_name().and_then(|n| n.to_str()).unwrap_or("idx").to_string();
    Dataset::from_idx_bytes(&read(ip)?, &read(lp)?, &tag)
        .map_err(|e| Error::format(format!("{} / {}", ip.display(), lp.display()), e.to_string()))
}

pub fn write_idx(data: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let (images, labels) = data.to_idx_bytes();
    fs::write(images_path.as_ref(), images).map_err(|e| Error::io(images_path.as_ref(), e))?;
    fs::write(labels_path.as_ref(), labels).map_err(|e| Error::io(labels_path.as_ref(), e))
}

/// The official training and test sets from a directory holding the four
/// uncompressed IDX files under their usual names.
pub fn load_mnist_dir(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let d = dir.as_ref();
    let mut train = load_idx(d.join("train-images-idx3-ubyte"), d.join("train-labels-idx1-ubyte"))?;
    let mut test = load_idx(d.join("t10k-images-idx3-ubyte"), d.join("t10k-labels-idx1-ubyte"))?;
    train.tag = "train".into();
    test.tag = "test".into();
    Ok((train, test))
}

/// Seeded permutation split into `(train, val)` with `n_train` training points.
pub fn split(data: &Dataset, n_train: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if n_train > data.len() {
        return Err(Error::Input(format!("cannot keep {n_train} of {} examples for training", data.len())));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((data.subset(&order[..n_train], "train"), data.subset(&order[n_train..], "val")))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `n` 2x3 images whose pixels encode their index.
    fn synthetic(n: usize) -> (Vec<u8>, Vec<u8>) {
        let mut images = Vec::new();
        for v in [IMAGE_MAGIC, n as u32, 2, 3] {
            images.extend_from_slice(&v.to_be_bytes());
        }
        for i in 0..n {
            images.extend((0..6).map(|j| ((i * 7 + j * 40) % 256) as u8));
        }
        let mut labels = Vec::new();
        for v in [LABEL_MAGIC, n as u32] {
            labels.extend_from_slice(&v.to_be_bytes());
        }
        labels.extend((0..n).map(|i| (i % 10) as u8));
        (images, labels)
    }

    #[test]
    fn parses_header_and_scales_pixels() {
        let (i, l) = synthetic(5);
        let d = Dataset::from_idx_bytes(&i, &l, "t").unwrap();
        assert_eq!(d.images.shape(), &[5, 1, 2, 3]);
        assert_eq!(d.labels, [0, 1, 2, 3, 4]);
        assert_eq!(d.images.data()[1], 40.0 / 255.0);
        assert!(d.images.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn rejects_malformed_files() {
        let (i, l) = synthetic(5);
        let mut bad = i.clone();
        bad[3] = 0x01;
        assert!(matches!(Dataset::from_idx_bytes(&bad, &l, "t"), Err(Error::Format { .. })));
        let err = Dataset::from_idx_bytes(&i[..i.len() - 1], &l, "t").unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        assert!(Dataset::from_idx_bytes(&i[..10], &l, "t").is_err());
        let (_, l4) = synthetic(4);
        assert!(Dataset::from_idx_bytes(&i, &l4, "t").unwrap_err().to_string().contains("5 images but 4 labels"));
        let mut big_label = l.clone();
        big_label[9] = 10;
        assert!(Dataset::from_idx_bytes(&i, &big_label, "t").is_err());
    }

    #[test]
    fn file_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (i, l) = synthetic(13);
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
        fs::write(&ip, &i).unwrap();
        fs::write(&lp, &l).unwrap();
        let d = load_idx(&ip, &lp).unwrap();
        let (ip2, lp2) = (dir.path().join("img2"), dir.path().join("lbl2"));
        write_idx(&d, &ip2, &lp2).unwrap();
        assert_eq!(fs::read(&ip2).unwrap(), i);
        assert_eq!(fs::read(&lp2).unwrap(), l);
        let again = load_idx(&ip2, &lp2).unwrap();
        assert_eq!((&again.images, &again.labels), (&d.images, &d.labels));
        let missing = load_idx(dir.path().join("nope"), &lp).unwrap_err();
        assert!(missing.to_string().contains("nope"));
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_seeded() {
        let (i, l) = synthetic(100);
        let d = Dataset::from_idx_bytes(&i, &l, "t").unwrap();
        let (a, b) = split(&d, 70, 3).unwrap();
        assert_eq!((a.len(), b.len()), (70, 30));
        // the first pixel identifies the example uniquely for n < 37
        let key = |ds: &Dataset| -> Vec<(u32, u32)> {
            ds.images.data().chunks(6).map(|c| ((c[0] * 255.0).round() as u32, (c[1] * 255.0).round() as u32)).collect()
        };
        let mut all: Vec<_> = key(&a).into_iter().chain(key(&b)).collect();
        all.sort();
        let mut expected = key(&d);
        expected.sort();
        assert_eq!(all, expected);
        assert_eq!(split(&d, 70, 3).unwrap(), (a.clone(), b));
        assert_ne!(split(&d, 70, 4).unwrap().0, a);
        assert!(split(&d, 101, 0).is_err());
    }

    #[test]
    fn batches_cover_an_epoch() {
        let (i, l) = synthetic(10);
        let d = Dataset::from_idx_bytes(&i, &l, "t").unwrap();
        let sizes: Vec<usize> = d.batches(4, 1, 0).map(|(_, y)| y.len()).collect();
        assert_eq!(sizes, [4, 4, 2]);
        let mut seen: Vec<usize> = d.batches(4, 1, 0).flat_map(|(_, y)| y).collect();
        seen.sort();
        assert_eq!(seen, (0..10).map(|i| i % 10).collect::<Vec<_>>());
        assert_eq!(d.batches(10, 1, 0).count(), 1);
        let order = |e| d.batches(3, 9, e).flat_map(|(_, y)| y).collect::<Vec<_>>();
        assert_eq!(order(0), order(0));
        assert_ne!(order(0), order(1));
        let (x, y) = d.sequential(3).next().unwrap();
        assert_eq!(x.shape(), &[3, 1, 2, 3]);
        assert_eq!(y, [0, 1, 2]);
    }

    #[test]
    fn official_files_when_present() {
        let dir = std::env::var("FPRUNE_MNIST_DIR").unwrap_or_else(|_| "/root/data/mnist".into());
        if !Path::new(&dir).join("train-images-idx3-ubyte").exists() {
            eprintln!("MNIST not found in {dir}; skipping");
            return;
        }
        let (train, test) = load_mnist_dir(&dir).unwrap();
        assert_eq!((train.len(), test.len()), (60_000, 10_000));
        // independent one-pass mean over the raw bytes
        let raw = fs::read(Path::new(&dir).join("train-images-idx3-ubyte")).unwrap();
        let raw_mean = raw[16..].iter().map(|&b| b as f64).sum::<f64>() / (raw.len() - 16) as f64 / 255.0;
        assert!((raw_mean - 0.1307).abs() < 1e-3);
        assert!((train.mean_pixel() - raw_mean).abs() < 1e-6);
        let (a, b) = split(&train, DEFAULT_TRAIN_SIZE, 0).unwrap();
        assert_eq!((a.len(), b.len()), (53_000, 7_000));
    }
}
