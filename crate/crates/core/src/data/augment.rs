use rand::Rng;

use super::LabeledImage;
use crate::tensor::Tensor;

/// Random horizontal flip plus zero-pad-and-crop translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augment {
    pub flip_prob: f64,
    /// Zero padding on each side before cropping back to the original size.
    pub pad: usize,
}

impl Default for Augment {
    fn default() -> Self {
        Self { flip_prob: 0.5, pad: 4 }
    }
}

/// Draw a flip and crop offset from `rng`, then apply them.
pub fn augment<R: Rng + ?Sized>(image: &LabeledImage, aug: &Augment, rng: &mut R) -> LabeledImage {
    let flip = rng.random_bool(aug.flip_prob);
    let dy = rng.random_range(0..=2 * aug.pad);
    let dx = rng.random_range(0..=2 * aug.pad);
    apply_augmentation(image, flip, dy, dx, aug.pad)
}

/// Deterministic core of [`augment`]: optional horizontal flip, then a crop
/// at `(dy, dx)` of the image zero-padded by `pad`. `dy = dx = pad` is the
/// centre crop.
pub fn apply_augmentation(image: &LabeledImage, flip: bool, dy: usize, dx: usize, pad: usize) -> LabeledImage {
    let shape = image.pixels.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let src = image.pixels.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            // row in the padded image is y + dy, i.e. source row y + dy − pad
            let Some(sy) = (y + dy).checked_sub(pad).filter(|&r| r < h) else {
                continue;
            };
            for x in 0..w {
                let Some(sx) = (x + dx).checked_sub(pad).filter(|&r| r < w) else {
                    continue;
                };
                let sx = if flip { w - 1 - sx } else { sx };
                out[(ch * h + y) * w + x] = src[(ch * h + sy) * w + sx];
            }
        }
    }
    LabeledImage {
        pixels: Tensor::new(shape.to_vec(), out).expect("same shape"),
        label: image.label,
    }
}
