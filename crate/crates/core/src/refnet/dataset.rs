//! Bundled deterministic synthetic image set: four parametric shape classes
//! on 11x11 single-channel images. Everything derives from one seed; no files,
//! no downloads.

use crate::rng::XorShift64;
use crate::tensor::Tensor4;

pub const IMG: usize = 11;
pub const CLASSES: usize = 4;

/// Class labels: 0 = filled rectangle, 1 = hollow rectangle, 2 = plus,
/// 3 = diagonal stripes.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// `[count][1][IMG][IMG]`, values in [0, ~1.1).
    pixels: Vec<f32>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn generate(seed: u64, count: usize) -> Self {
        let mut rng = XorShift64::new(seed);
        let mut pixels = vec![0.0f32; count * IMG * IMG];
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let label = (i % CLASSES) as u8;
            labels.push(label);
            let img = &mut pixels[i * IMG * IMG..(i + 1) * IMG * IMG];
            draw(img, label, &mut rng);
        }
        Self { pixels, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.pixels[i * IMG * IMG..(i + 1) * IMG * IMG]
    }

    /// Assemble a `[N][1][IMG][IMG]` batch from sample indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor4, Vec<u8>) {
        let n = indices.len();
        let mut t = Tensor4::zeros([n, 1, IMG, IMG]);
        let mut labels = Vec::with_capacity(n);
        for (bi, &si) in indices.iter().enumerate() {
            let dst = bi * IMG * IMG;
            t.data_mut()[dst..dst + IMG * IMG].copy_from_slice(self.image(si));
            labels.push(self.label(si));
        }
        (t, labels)
    }
}

fn draw(img: &mut [f32], label: u8, rng: &mut XorShift64) {
    let set = |img: &mut [f32], r: usize, c: usize, v: f32| {
        if r < IMG && c < IMG {
            img[r * IMG + c] = v;
        }
    };
    let ink = rng.range_f32(0.7, 1.0);
    match label {
        0 => {
            // Filled rectangle.
            let h = 4 + rng.below(4);
            let w = 4 + rng.below(4);
            let r0 = rng.below(IMG - h + 1);
            let c0 = rng.below(IMG - w + 1);
            for r in r0..r0 + h {
                for c in c0..c0 + w {
                    set(img, r, c, ink);
                }
            }
        }
        1 => {
            // Hollow rectangle.
            let h = 5 + rng.below(4);
            let w = 5 + rng.below(4);
            let r0 = rng.below(IMG - h + 1);
            let c0 = rng.below(IMG - w + 1);
            for c in c0..c0 + w {
                set(img, r0, c, ink);
                set(img, r0 + h - 1, c, ink);
            }
            for r in r0..r0 + h {
                set(img, r, c0, ink);
                set(img, r, c0 + w - 1, ink);
            }
        }
        2 => {
            // Plus sign.
            let arm = 2 + rng.below(3);
            let rc = arm + rng.below(IMG - 2 * arm);
            let cc = arm + rng.below(IMG - 2 * arm);
            for d in 0..=2 * arm {
                set(img, rc - arm + d, cc, ink);
                set(img, rc, cc - arm + d, ink);
            }
        }
        _ => {
            // Diagonal stripes, every third diagonal.
            let offset = rng.below(3);
            for r in 0..IMG {
                for c in 0..IMG {
                    if (r + c) % 3 == offset {
                        img[r * IMG + c] = ink;
                    }
                }
            }
        }
    }
    // Mild dense noise; keeps raw inputs dense like natural images while the
    // ReLU outputs downstream stay sparse.
    for v in img.iter_mut() {
        *v += rng.range_f32(0.0, 0.1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = Dataset::generate(5, 64);
        let b = Dataset::generate(5, 64);
        assert_eq!(a.pixels, b.pixels);
        assert_eq!(a.labels, b.labels);
        let c = Dataset::generate(6, 64);
        assert_ne!(a.pixels, c.pixels);
    }

    #[test]
    fn classes_are_balanced() {
        let d = Dataset::generate(1, 400);
        for cls in 0..CLASSES as u8 {
            let n = d.labels.iter().filter(|&&l| l == cls).count();
            assert_eq!(n, 100);
        }
    }

    #[test]
    fn images_are_in_range_and_nontrivial() {
        let d = Dataset::generate(2, 200);
        for i in 0..d.len() {
            let img = d.image(i);
            assert!(img.iter().all(|&v| (0.0..1.2).contains(&v)));
            let strong = img.iter().filter(|&&v| v > 0.5).count();
            assert!(strong >= 5, "sample {i} has almost no shape pixels");
        }
    }

    #[test]
    fn batch_assembles_requested_samples() {
        let d = Dataset::generate(3, 40);
        let (t, labels) = d.batch(&[0, 7, 13]);
        assert_eq!(t.shape(), [3, 1, IMG, IMG]);
        assert_eq!(labels, vec![d.label(0), d.label(7), d.label(13)]);
        assert_eq!(&t.data()[IMG * IMG..2 * IMG * IMG], d.image(7));
    }
}
