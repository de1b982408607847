//! Image datasets: CIFAR-10 binary records, a seeded synthetic generator,
//! flip/translate augmentation and per-channel normalisation.
//!
//! Pixels are stored as bytes (value = byte / 255), which is exactly the
//! CIFAR record encoding and keeps a 50k-image split around 150 MB.

mod augment;
mod cifar;
mod synth;

pub use augment::{apply_augmentation, augment, Augment};
pub use cifar::{
    decode_records, encode_records, load_cifar10, read_records, write_records, CIFAR_RECORDS_PER_FILE,
    CIFAR_RECORD_BYTES,
};
pub use synth::{synth_dataset, SynthSpec};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// `[C, H, W]`, values in `[0, 1]`.
    pub pixels: Tensor,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    shape: [usize; 3],
    pixels: Vec<u8>,
    labels: Vec<u8>,
    num_classes: usize,
    split: Split,
}

impl Dataset {
    pub fn from_bytes(
        shape: [usize; 3],
        pixels: Vec<u8>,
        labels: Vec<u8>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        let per = shape.iter().product::<usize>();
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(Error::config(format!(
                "{} pixel bytes do not hold {} images of shape {shape:?}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: l as usize,
                classes: num_classes,
            });
        }
        Ok(Self {
            shape,
            pixels,
            labels,
            num_classes,
            split,
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

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    fn per_image(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image_bytes(&self, i: usize) -> &[u8] {
        let p = self.per_image();
        &self.pixels[i * p..(i + 1) * p]
    }

    pub fn image(&self, i: usize) -> LabeledImage {
        let pixels = self.image_bytes(i).iter().map(|&b| b as f64 / 255.0).collect();
        LabeledImage {
            pixels: Tensor::new(self.shape.to_vec(), pixels).expect("consistent shape"),
            label: self.label(i),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.per_image());
        for &i in indices {
            pixels.extend_from_slice(self.image_bytes(i));
        }
        Dataset {
            shape: self.shape,
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
        }
    }

    pub fn with_split(mut self, split: Split) -> Dataset {
        self.split = split;
        self
    }

    /// First `len − n_test` images as the training split, the rest as test.
    pub fn split_off(self, n_test: usize) -> Result<(Dataset, Dataset)> {
        if n_test == 0 || n_test >= self.len() {
            return Err(Error::config(format!(
                "cannot hold out {n_test} of {} images",
                self.len()
            )));
        }
        let cut = self.len() - n_test;
        let train: Vec<usize> = (0..cut).collect();
        let test: Vec<usize> = (cut..self.len()).collect();
        Ok((
            self.subset(&train).with_split(Split::Train),
            self.subset(&test).with_split(Split::Test),
        ))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Stack images into `[N, C, H, W]`, optionally augmenting each one, then
    /// normalising. Sample `j` of the batch draws from stream `j` of a ChaCha
    /// generator seeded with `stream_seed`, so results do not depend on
    /// thread count.
    pub fn batch(
        &self,
        indices: &[usize],
        norm: Option<&Normalization>,
        augmentation: Option<(&Augment, u64)>,
    ) -> (Tensor, Vec<usize>) {
        let per = self.per_image();
        let mut data = vec![0.0; indices.len() * per];
        par::for_each_chunk_mut(&mut data, per, |j, out| {
            let mut img = self.image(indices[j]);
            if let Some((aug, seed)) = augmentation {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(j as u64);
                img = augment(&img, aug, &mut rng);
            }
            out.copy_from_slice(img.pixels.data());
            if let Some(n) = norm {
                n.apply(out, self.shape);
            }
        });
        let [c, h, w] = self.shape;
        let labels = indices.iter().map(|&i| self.label(i)).collect();
        (
            Tensor::new(vec![indices.len(), c, h, w], data).expect("consistent shape"),
            labels,
        )
    }
}

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub const MEAN_KEY: &'static str = "data.mean";
    pub const STD_KEY: &'static str = "data.std";

    /// Statistics of a training split.
    pub fn fit(train: &Dataset) -> Result<Self> {
        if train.split() != Split::Train {
            return Err(Error::config("normalisation must be fitted on the training split"));
        }
        if train.is_empty() {
            return Err(Error::config("cannot fit normalisation on an empty dataset"));
        }
        let [c, h, w] = train.shape();
        let plane = h * w;
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for i in 0..train.len() {
            let bytes = train.image_bytes(i);
            for ch in 0..c {
                for &b in &bytes[ch * plane..(ch + 1) * plane] {
                    let v = b as f64 / 255.0;
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let count = (train.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / count - m * m).max(0.0).sqrt().max(1e-8))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn apply(&self, image: &mut [f64], shape: [usize; 3]) {
        let plane = shape[1] * shape[2];
        for (ch, chunk) in image.chunks_mut(plane).enumerate() {
            let (m, s) = (self.mean[ch], self.std[ch]);
            chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
    }

    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        let c = self.mean.len();
        vec![
            (
                Self::MEAN_KEY.into(),
                Tensor::new(vec![c], self.mean.clone()).expect("shape"),
            ),
            (
                Self::STD_KEY.into(),
                Tensor::new(vec![c], self.std.clone()).expect("shape"),
            ),
        ]
    }

    pub fn from_tensors(extras: &[(String, Tensor)]) -> Option<Self> {
        let find = |key: &str| extras.iter().find(|(n, _)| n == key).map(|(_, t)| t.data().to_vec());
        Some(Self {
            mean: find(Self::MEAN_KEY)?,
            std: find(Self::STD_KEY)?,
        })
    }
}
