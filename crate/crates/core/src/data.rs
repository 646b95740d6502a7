//! Image datasets, stratified splits and client partitioning.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset configuration: {0}")]
    Config(String),
    #[error("cannot split {samples} samples across {clients} clients")]
    Partition { samples: usize, clients: usize },
    #[error("failed to read `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed image archive `{0}`")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Labelled images stored as one flat `N x C x H x W` buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    shape: [usize; 3],
    classes: usize,
    images: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(shape: [usize; 3], classes: usize, images: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        let per = shape.iter().product::<usize>();
        if per == 0 || images.len() != per * labels.len() {
            return Err(DataError::Config(format!(
                "{} values for {} images of shape {shape:?}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(DataError::Config(format!("label {l} outside {classes} classes")));
        }
        Ok(Self {
            shape,
            classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Standardizes every channel with statistics of the images in `reference`.
    pub fn normalize(&mut self, reference: &[usize]) {
        let [c, h, w] = self.shape;
        let plane = h * w;
        let count = (reference.len() * plane) as f64;
        if reference.is_empty() {
            return;
        }
        let n = self.image_len();
        for ch in 0..c {
            let range = ch * plane..(ch + 1) * plane;
            let mean = reference
                .iter()
                .map(|&i| self.image(i)[range.clone()].iter().sum::<f64>())
                .sum::<f64>()
                / count;
            let var = reference
                .iter()
                .map(|&i| {
                    self.image(i)[range.clone()]
                        .iter()
                        .map(|v| (v - mean) * (v - mean))
                        .sum::<f64>()
                })
                .sum::<f64>()
                / count;
            let std = var.sqrt().max(1e-12);
            for img in self.images.chunks_mut(n) {
                for v in &mut img[range.clone()] {
                    *v = (*v - mean) / std;
                }
            }
        }
    }

    /// Stacks the given samples into a batch tensor. With `flip`, each image
    /// is mirrored horizontally with probability one half.
    pub fn batch<R: Rng>(&self, indices: &[usize], mut flip: Option<&mut R>) -> (Tensor, Vec<usize>) {
        let [c, h, w] = self.shape;
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            let img = self.image(i);
            let mirrored = flip.as_mut().is_some_and(|r| r.random_bool(0.5));
            if mirrored {
                for row in img.chunks(w) {
                    data.extend(row.iter().rev());
                }
            } else {
                data.extend_from_slice(img);
            }
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let t = Tensor::new(vec![indices.len(), c, h, w], data).expect("batch shape");
        (t, labels)
    }
}

/// Class-conditional image textures: each class owns a random prototype
/// made of coloured sinusoidal gratings; samples are randomly shifted copies
/// of their prototype plus white noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    pub shape: [usize; 3],
    pub gratings: usize,
    pub noise: f64,
    pub max_shift: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            samples_per_class: 100,
            shape: [3, 32, 32],
            gratings: 3,
            noise: 1.0,
            max_shift: 4,
        }
    }
}

pub fn synthetic(spec: &SyntheticSpec, rng: &mut impl Rng) -> Result<Dataset> {
    let [c, h, w] = spec.shape;
    if spec.classes == 0 || spec.samples_per_class == 0 || c * h * w == 0 || spec.gratings == 0 {
        return Err(DataError::Config(
            "synthetic dataset needs classes, samples, gratings and a non-empty shape".into(),
        ));
    }
    let plane = h * w;
    let prototypes: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let mut img = vec![0.0; c * plane];
            for _ in 0..spec.gratings {
                let angle = rng.random_range(0.0..PI);
                let cycles = rng.random_range(1.0..4.0);
                let phase = rng.random_range(0.0..2.0 * PI);
                let colour: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
                let (kx, ky) = (
                    2.0 * PI * cycles * angle.cos() / w as f64,
                    2.0 * PI * cycles * angle.sin() / h as f64,
                );
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            img[ch * plane + y * w + x] += colour[ch] * (kx * x as f64 + ky * y as f64 + phase).cos();
                        }
                    }
                }
            }
            let n = img.len() as f64;
            let mean = img.iter().sum::<f64>() / n;
            let std = (img.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n)
                .sqrt()
                .max(1e-12);
            img.iter().map(|v| (v - mean) / std).collect()
        })
        .collect();
    let total = spec.classes * spec.samples_per_class;
    let mut images = Vec::with_capacity(total * c * plane);
    let mut labels = Vec::with_capacity(total);
    let shift = spec.max_shift as i64;
    for i in 0..total {
        let class = i % spec.classes;
        let p = &prototypes[class];
        let dx = rng.random_range(-shift..=shift);
        let dy = rng.random_range(-shift..=shift);
        for ch in 0..c {
            for y in 0..h {
                let sy = (y as i64 + dy).rem_euclid(h as i64) as usize;
                for x in 0..w {
                    let sx = (x as i64 + dx).rem_euclid(w as i64) as usize;
                    let noise: f64 = StandardNormal.sample(rng);
                    images.push(p[ch * plane + sy * w + sx] + spec.noise * noise);
                }
            }
        }
        labels.push(class);
    }
    Dataset::new(spec.shape, spec.classes, images, labels)
}

/// Reads 32x32x3 archives made of `label byte + 3072 pixel bytes` records,
/// scaling pixels to [0, 1].
pub fn load_image_archive(paths: &[impl AsRef<Path>], classes: usize) -> Result<Dataset> {
    const PIXELS: usize = 3 * 32 * 32;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if bytes.is_empty() || bytes.len() % (PIXELS + 1) != 0 {
            return Err(DataError::Format(path.display().to_string()));
        }
        for record in bytes.chunks(PIXELS + 1) {
            labels.push(record[0] as usize);
            images.extend(record[1..].iter().map(|&b| b as f64 / 255.0));
        }
    }
    Dataset::new([3, 32, 32], classes, images, labels)
}

/// Disjoint train/validation/test index sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Splits every class separately by the `train:val:test` ratios; the test
/// split takes the rounding remainder.
pub fn stratified_split(data: &Dataset, ratios: [f64; 3], rng: &mut impl Rng) -> Result<Splits> {
    let total: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| *r < 0.0 || !r.is_finite()) || total <= 0.0 {
        return Err(DataError::Config(format!("invalid split ratios {ratios:?}")));
    }
    let mut splits = Splits {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for class in 0..data.classes() {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == class).collect();
        idx.shuffle(rng);
        let n = idx.len() as f64;
        let n_train = (n * ratios[0] / total + 1e-9).floor() as usize;
        let n_val = ((n * ratios[1] / total + 1e-9).floor() as usize).min(idx.len() - n_train);
        splits.train.extend_from_slice(&idx[..n_train]);
        splits.val.extend_from_slice(&idx[n_train..n_train + n_val]);
        splits.test.extend_from_slice(&idx[n_train + n_val..]);
    }
    for s in [&mut splits.train, &mut splits.val, &mut splits.test] {
        s.sort_unstable();
    }
    Ok(splits)
}

/// Randomly deals `pool` into `clients` disjoint parts whose sizes differ by
/// at most one.
pub fn partition(pool: &[usize], clients: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    if clients == 0 || clients > pool.len() {
        return Err(DataError::Partition {
            samples: pool.len(),
            clients,
        });
    }
    let mut shuffled = pool.to_vec();
    shuffled.shuffle(rng);
    let base = pool.len() / clients;
    let extra = pool.len() % clients;
    let mut parts = Vec::with_capacity(clients);
    let mut start = 0;
    for i in 0..clients {
        let len = base + usize::from(i < extra);
        let mut part = shuffled[start..start + len].to_vec();
        part.sort_unstable();
        parts.push(part);
        start += len;
    }
    Ok(parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> Dataset {
        let spec = SyntheticSpec {
            samples_per_class: 20,
            shape: [3, 8, 8],
            ..Default::default()
        };
        synthetic(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn synthetic_is_seeded() {
        let a = small();
        assert_eq!(a, small());
        assert_eq!(a.len(), 200);
        assert_eq!(a.labels().iter().filter(|&&l| l == 3).count(), 20);
    }

    #[test]
    fn single_client_gets_everything() {
        let pool: Vec<usize> = (0..37).collect();
        let parts = partition(&pool, 1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(parts, vec![pool]);
    }

    #[test]
    fn two_clients_split_evenly() {
        let pool: Vec<usize> = (0..1000).collect();
        let parts = partition(&pool, 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(parts[0].len(), 500);
        assert_eq!(parts[1].len(), 500);
        let mut union: Vec<usize> = parts.concat();
        union.sort_unstable();
        assert_eq!(union, pool);
        let again = partition(&pool, 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(parts, again);
    }

    #[test]
    fn too_many_clients_rejected() {
        let pool: Vec<usize> = (0..3).collect();
        assert!(matches!(
            partition(&pool, 4, &mut ChaCha8Rng::seed_from_u64(1)),
            Err(DataError::Partition { samples: 3, clients: 4 })
        ));
        assert!(partition(&pool, 0, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn stratified_split_ratios() {
        let d = small();
        let s = stratified_split(&d, [0.7, 0.15, 0.15], &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(s.train.len(), 140);
        assert_eq!(s.val.len(), 30);
        assert_eq!(s.test.len(), 30);
        let mut all = [s.train.clone(), s.val.clone(), s.test.clone()].concat();
        all.sort_unstable();
        assert_eq!(all, (0..200).collect::<Vec<_>>());
    }

    #[test]
    fn normalization_standardizes_reference() {
        let mut d = small();
        let idx: Vec<usize> = (0..d.len()).collect();
        d.normalize(&idx);
        let plane = 64;
        let vals: Vec<f64> = idx
            .iter()
            .flat_map(|&i| d.image(i)[plane..2 * plane].to_vec())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn flip_mirrors_rows() {
        let images = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let d = Dataset::new([1, 2, 3], 1, images, vec![0]).unwrap();
        let (plain, labels) = d.batch::<ChaCha8Rng>(&[0], None);
        assert_eq!(plain.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(labels, vec![0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = [false; 2];
        for _ in 0..50 {
            let (b, _) = d.batch(&[0], Some(&mut rng));
            if b.data() == [3.0, 2.0, 1.0, 6.0, 5.0, 4.0] {
                seen[1] = true;
            } else {
                assert_eq!(b.data(), plain.data());
                seen[0] = true;
            }
        }
        assert_eq!(seen, [true, true]);
    }

    #[test]
    fn archive_loader_reads_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        let mut bytes = Vec::new();
        for label in [3u8, 7] {
            bytes.push(label);
            bytes.extend(std::iter::repeat_n(255u8, 3072));
        }
        std::fs::write(&path, &bytes).unwrap();
        let d = load_image_archive(&[&path], 10).unwrap();
        assert_eq!(d.labels(), &[3, 7]);
        assert!(d.image(1).iter().all(|&v| v == 1.0));
        std::fs::write(&path, &bytes[..100]).unwrap();
        assert!(matches!(load_image_archive(&[&path], 10), Err(DataError::Format(_))));
    }

    #[test]
    fn dataset_rejects_bad_labels() {
        assert!(Dataset::new([1, 1, 1], 2, vec![0.0], vec![2]).is_err());
        assert!(Dataset::new([1, 1, 2], 2, vec![0.0], vec![0]).is_err());
    }

    proptest! {
        #[test]
        fn partitions_are_disjoint_and_exhaustive(n in 16usize..400, seed in any::<u64>(), k in prop::sample::select(vec![1usize, 2, 4, 8, 16])) {
            let pool: Vec<usize> = (0..n).map(|i| i * 3).collect();
            let parts = partition(&pool, k, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(parts.len(), k);
            let mut union = parts.concat();
            union.sort_unstable();
            prop_assert_eq!(union, pool);
            let sizes: Vec<usize> = parts.iter().map(Vec::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }
}
