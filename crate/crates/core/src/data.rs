//! MNIST (IDX) and CIFAR-10 (binary) loaders, normalization and
//! crop/flip augmentation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{PcnnError, Result};
use crate::tensor::{Shape4, Tensor4};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

pub const MNIST_MEAN: [f32; 1] = [0.1307];
pub const MNIST_STD: [f32; 1] = [0.3081];
pub const CIFAR10_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR10_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

pub const CIFAR10_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Tensor4,
    pub labels: Vec<usize>,
    pub split: Split,
    pub classes: usize,
    mean: Vec<f32>,
    std: Vec<f32>,
}

/// `(byte / 255 - mean) / std`.
#[inline]
pub fn normalize(byte: u8, mean: f32, std: f32) -> f32 {
    (byte as f32 / 255.0 - mean) / std
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| PcnnError::io(path.display().to_string(), e))
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]])),
        None => Err(PcnnError::Truncated {
            path: path.to_path_buf(),
            offset: bytes.len(),
            needed: offset + 4,
        }),
    }
}

/// Raw IDX image file: `(n, rows, cols, pixels)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = read(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(PcnnError::BadMagic {
            path: path.to_path_buf(),
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let needed = 16 + n * rows * cols;
    if bytes.len() < needed {
        return Err(PcnnError::Truncated {
            path: path.to_path_buf(),
            offset: bytes.len(),
            needed,
        });
    }
    Ok((n, rows, cols, bytes[16..needed].to_vec()))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(PcnnError::BadMagic {
            path: path.to_path_buf(),
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let needed = 8 + n;
    if bytes.len() < needed {
        return Err(PcnnError::Truncated {
            path: path.to_path_buf(),
            offset: bytes.len(),
            needed,
        });
    }
    Ok(bytes[8..needed].to_vec())
}

/// Load an IDX image/label pair, standardized with the MNIST constants.
pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let (n, rows, cols, pixels) = read_idx_images(images)?;
    let labels = read_idx_labels(labels)?;
    if labels.len() != n {
        return Err(PcnnError::Data(format!(
            "{} holds {n} images but the label file holds {}",
            images.display(),
            labels.len()
        )));
    }
    Dataset::from_bytes(Shape4::new(n, 1, rows, cols), &pixels, labels, 10, split, &MNIST_MEAN, &MNIST_STD)
}

fn first_existing(dir: &Path, names: &[&str]) -> Result<PathBuf> {
    names
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.is_file())
        .ok_or_else(|| PcnnError::Data(format!("{} not found in {}", names[0], dir.display())))
}

/// MNIST from a directory holding the four standard (uncompressed) IDX files.
pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let images = first_existing(dir, &[&format!("{prefix}-images-idx3-ubyte"), &format!("{prefix}-images.idx3-ubyte")])?;
    let labels = first_existing(dir, &[&format!("{prefix}-labels-idx1-ubyte"), &format!("{prefix}-labels.idx1-ubyte")])?;
    load_idx(&images, &labels, split)
}

/// One CIFAR-10 binary batch file: records of 1 label byte + 3072 pixel bytes.
pub fn load_cifar10(path: &Path, split: Split) -> Result<Dataset> {
    let bytes = read(path)?;
    cifar_from_bytes(&bytes, path, split)
}

fn cifar_from_bytes(bytes: &[u8], path: &Path, split: Split) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % CIFAR10_RECORD != 0 {
        return Err(PcnnError::Data(format!(
            "{}: size {} is not a multiple of the {CIFAR10_RECORD}-byte record",
            path.display(),
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR10_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR10_RECORD - 1));
    for rec in bytes.chunks_exact(CIFAR10_RECORD) {
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Dataset::from_bytes(Shape4::new(n, 3, 32, 32), &pixels, labels, 10, split, &CIFAR10_MEAN, &CIFAR10_STD)
}

/// CIFAR-10 from the extracted `cifar-10-batches-bin` directory.
pub fn load_cifar10_dir(dir: &Path, split: Split) -> Result<Dataset> {
    let files: Vec<PathBuf> = match split {
        Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    };
    let mut all = Vec::new();
    for f in &files {
        all.extend(read(f)?);
    }
    cifar_from_bytes(&all, dir, split)
}

impl Dataset {
    /// Build from raw bytes laid out `n x c x h x w`.
    pub fn from_bytes(
        shape: Shape4,
        pixels: &[u8],
        labels: Vec<u8>,
        classes: usize,
        split: Split,
        mean: &[f32],
        std: &[f32],
    ) -> Result<Self> {
        if pixels.len() != shape.len() || labels.len() != shape.n || mean.len() != shape.c || std.len() != shape.c {
            return Err(PcnnError::shape("Dataset::from_bytes", shape, (pixels.len(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(PcnnError::LabelOutOfRange {
                label: bad as usize,
                classes,
            });
        }
        let plane = shape.h * shape.w;
        let data = pixels
            .iter()
            .enumerate()
            .map(|(i, &b)| {
                let c = (i / plane) % shape.c;
                normalize(b, mean[c], std[c])
            })
            .collect();
        Ok(Dataset {
            images: Tensor4::new(shape, data)?,
            labels: labels.into_iter().map(usize::from).collect(),
            split,
            classes,
            mean: mean.to_vec(),
            std: std.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(c, h, w)` of one sample.
    pub fn sample_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s.c, s.h, s.w)
    }

    /// Keep the first `n` samples.
    pub fn truncate(&mut self, n: usize) {
        if n >= self.len() {
            return;
        }
        let s = self.images.shape();
        let mut data = std::mem::replace(&mut self.images, Tensor4::zeros(Shape4::new(0, s.c, s.h, s.w))).into_data();
        data.truncate(n * s.sample_len());
        self.images = Tensor4::new(Shape4::new(n, s.c, s.h, s.w), data).expect("truncated length");
        self.labels.truncate(n);
    }

    /// Gather the listed samples into one batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor4, Vec<usize>) {
        let s = self.images.shape();
        let mut data = Vec::with_capacity(indices.len() * s.sample_len());
        for &i in indices {
            data.extend_from_slice(self.images.sample(i));
        }
        let x = Tensor4::new(Shape4::new(indices.len(), s.c, s.h, s.w), data).expect("batch length");
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Undo normalization, recovering the stored pixel bytes.
    pub fn raw_bytes(&self) -> Vec<u8> {
        let s = self.images.shape();
        let plane = s.h * s.w;
        self.images
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = (i / plane) % s.c;
                ((v * self.std[c] + self.mean[c]) * 255.0).round().clamp(0.0, 255.0) as u8
            })
            .collect()
    }
}

/// Mirror every sample left-right.
pub fn flip_horizontal(x: &Tensor4) -> Tensor4 {
    let s = x.shape();
    Tensor4::from_fn(s, |n, c, y, xx| x.at(n, c, y, s.w - 1 - xx))
}

/// Zero-pad each sample by `pad`, take a random `crop x crop` window and
/// mirror it with probability `flip_p`. Labels are untouched by construction.
pub fn augment(batch: &Tensor4, pad: usize, crop: usize, flip_p: f64, rng: &mut impl Rng) -> Result<Tensor4> {
    let s = batch.shape();
    if crop == 0 || crop > s.h + 2 * pad || crop > s.w + 2 * pad || !(0.0..=1.0).contains(&flip_p) {
        return Err(PcnnError::Config(format!(
            "augment: crop {crop} with pad {pad} does not fit {}x{} (flip_p {flip_p})",
            s.h, s.w
        )));
    }
    let out_shape = Shape4::new(s.n, s.c, crop, crop);
    let mut out = Tensor4::zeros(out_shape);
    let sample_out = out_shape.sample_len();
    for n in 0..s.n {
        let oy = rng.gen_range(0..=s.h + 2 * pad - crop);
        let ox = rng.gen_range(0..=s.w + 2 * pad - crop);
        let flip = rng.gen_bool(flip_p);
        let dst = &mut out.data_mut()[n * sample_out..(n + 1) * sample_out];
        for c in 0..s.c {
            for y in 0..crop {
                let sy = (oy + y) as isize - pad as isize;
                if sy < 0 || sy >= s.h as isize {
                    continue;
                }
                for x in 0..crop {
                    let xx = if flip { crop - 1 - x } else { x };
                    let sx = (ox + xx) as isize - pad as isize;
                    if sx < 0 || sx >= s.w as isize {
                        continue;
                    }
                    dst[(c * crop + y) * crop + x] = batch.at(n, c, sy as usize, sx as usize);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::io::Write;

    fn idx_images(n: u32, r: u32, c: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IDX_IMAGES_MAGIC, n, r, c] {
            v.extend(x.to_be_bytes());
        }
        v.extend_from_slice(pixels);
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend(IDX_LABELS_MAGIC.to_be_bytes());
        v.extend((labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
        let p = dir.join(name);
        fs::File::create(&p).unwrap().write_all(bytes).unwrap();
        p
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = (0..2 * 3 * 4).map(|i| (i * 37 % 256) as u8).collect();
        let im = write(dir.path(), "im", &idx_images(2, 3, 4, &pixels));
        let lb = write(dir.path(), "lb", &idx_labels(&[7, 1]));
        let ds = load_idx(&im, &lb, Split::Train).unwrap();
        assert_eq!(ds.images.shape(), Shape4::new(2, 1, 3, 4));
        assert_eq!(ds.labels, vec![7, 1]);
        assert_eq!(ds.raw_bytes(), pixels);
    }

    #[test]
    fn byte_255_is_one_before_standardization() {
        let v = normalize(255, 0.0, 1.0);
        assert_eq!(v, 1.0);
        assert_eq!(normalize(255, MNIST_MEAN[0], MNIST_STD[0]), (1.0 - 0.1307) / 0.3081);
    }

    #[test]
    fn idx_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = idx_images(2, 2, 2, &[0; 8]);
        bytes.truncate(20);
        let p = write(dir.path(), "short", &bytes);
        match read_idx_images(&p) {
            Err(PcnnError::Truncated { offset, needed, .. }) => assert_eq!((offset, needed), (20, 24)),
            other => panic!("{other:?}"),
        }
        let p = write(dir.path(), "magic", &idx_labels(&[1]));
        assert!(matches!(read_idx_images(&p), Err(PcnnError::BadMagic { found: 0x801, .. })));
        let im = write(dir.path(), "im", &idx_images(2, 1, 1, &[0, 0]));
        let lb = write(dir.path(), "lb", &idx_labels(&[0, 1, 2]));
        assert!(matches!(load_idx(&im, &lb, Split::Test), Err(PcnnError::Data(_))));
        let lb = write(dir.path(), "lb10", &idx_labels(&[0, 10]));
        assert!(matches!(load_idx(&im, &lb, Split::Test), Err(PcnnError::LabelOutOfRange { label: 10, .. })));
    }

    #[test]
    fn cifar_round_trip_and_size_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = Vec::new();
        for r in 0..3u8 {
            bytes.push(r);
            bytes.extend((0..3072).map(|i| ((i + r as usize * 11) % 256) as u8));
        }
        let p = write(dir.path(), "batch.bin", &bytes);
        let ds = load_cifar10(&p, Split::Train).unwrap();
        assert_eq!(ds.images.shape(), Shape4::new(3, 3, 32, 32));
        assert_eq!(ds.labels, vec![0, 1, 2]);
        let pixels: Vec<u8> = bytes.chunks(CIFAR10_RECORD).flat_map(|r| r[1..].to_vec()).collect();
        assert_eq!(ds.raw_bytes(), pixels);

        let p = write(dir.path(), "bad.bin", &bytes[..CIFAR10_RECORD + 5]);
        assert!(matches!(load_cifar10(&p, Split::Train), Err(PcnnError::Data(_))));
    }

    #[test]
    fn flip_is_an_involution() {
        let x = Tensor4::from_fn(Shape4::new(2, 3, 4, 5), |n, c, y, x| (n * 100 + c * 20 + y * 5 + x) as f32);
        assert_eq!(flip_horizontal(&flip_horizontal(&x)), x);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor4::from_fn(Shape4::new(2, 1, 4, 4), |n, _, y, x| (n * 16 + y * 4 + x) as f32);
        let f = augment(&x, 0, 4, 1.0, &mut rng).unwrap();
        assert_eq!(f, flip_horizontal(&x));
    }

    #[test]
    fn augment_is_seeded_and_shape_preserving() {
        let x = Tensor4::from_fn(Shape4::new(8, 3, 32, 32), |n, c, y, x| (n + c + y * x) as f32);
        let a = augment(&x, 4, 32, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = augment(&x, 4, 32, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), x.shape());
        assert!(augment(&x, 0, 40, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).is_err());
    }
}
