use rand::Rng;

use super::Dataset;
use crate::netspec::TrainPolicy;
use crate::tensor::Tensor;

/// Per-pixel mean over every image of `ds`, accumulated in f64.
pub fn per_pixel_mean(ds: &Dataset) -> Vec<f32> {
    let n = ds.image_len();
    let mut sum = vec![0.0f64; n];
    for i in 0..ds.len() {
        for (s, &v) in sum.iter_mut().zip(ds.image(i)) {
            *s += f64::from(v);
        }
    }
    let count = ds.len().max(1) as f64;
    sum.iter().map(|s| (s / count) as f32).collect()
}

/// Left-right flip of a `C x H x W` image.
pub fn mirror(image: &[f32], shape: [usize; 3]) -> Vec<f32> {
    let [_, _, w] = shape;
    image
        .chunks_exact(w)
        .flat_map(|row| row.iter().rev().copied())
        .collect()
}

/// Zero-pads by `pad` on every side, then takes the `crop x crop` window whose
/// top-left corner in the padded image is `(top, left)`.
pub fn pad_crop(
    image: &[f32],
    shape: [usize; 3],
    pad: usize,
    crop: usize,
    top: usize,
    left: usize,
) -> Vec<f32> {
    let [c, h, w] = shape;
    assert!(top + crop <= h + 2 * pad && left + crop <= w + 2 * pad, "crop window out of range");
    let mut out = vec![0.0; c * crop * crop];
    for ch in 0..c {
        for y in 0..crop {
            let Some(sy) = (top + y).checked_sub(pad).filter(|&sy| sy < h) else {
                continue;
            };
            for x in 0..crop {
                if let Some(sx) = (left + x).checked_sub(pad).filter(|&sx| sx < w) {
                    out[(ch * crop + y) * crop + x] = image[(ch * h + sy) * w + sx];
                }
            }
        }
    }
    out
}

pub fn center_crop(image: &[f32], shape: [usize; 3], pad: usize, crop: usize) -> Vec<f32> {
    let [_, h, w] = shape;
    pad_crop(image, shape, pad, crop, (h + 2 * pad - crop) / 2, (w + 2 * pad - crop) / 2)
}

/// Mean subtraction and augmentation as set by a training policy.
#[derive(Clone, Debug)]
pub struct Preprocessor {
    mean: Vec<f32>,
    image_shape: [usize; 3],
    mirror: bool,
    pad: usize,
    crop: usize,
}

impl Preprocessor {
    /// `mean` is subtracted from images unless a dataset reports that its own
    /// mean was already removed.
    pub fn new(mean: Vec<f32>, image_shape: [usize; 3], policy: &TrainPolicy) -> Self {
        let [_, h, w] = image_shape;
        let crop = policy.crop.unwrap_or(h.min(w) + 2 * policy.pad);
        Self {
            mean,
            image_shape,
            mirror: policy.mirror,
            pad: policy.pad,
            crop,
        }
    }

    pub fn from_training_set(train: &Dataset, policy: &TrainPolicy) -> Self {
        let mean = train
            .mean_image
            .as_ref()
            .map_or_else(|| per_pixel_mean(train), |_| vec![0.0; train.image_len()]);
        Self::new(mean, train.image_shape, policy)
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.image_shape[0], self.crop, self.crop]
    }

    pub fn mean(&self) -> &[f32] {
        &self.mean
    }

    fn centered(&self, ds: &Dataset, i: usize) -> Vec<f32> {
        let img = ds.image(i);
        if ds.mean_image.is_some() {
            img.to_vec()
        } else {
            img.iter().zip(&self.mean).map(|(v, m)| v - m).collect()
        }
    }

    fn span(&self) -> (usize, usize) {
        let [_, h, w] = self.image_shape;
        (h + 2 * self.pad - self.crop, w + 2 * self.pad - self.crop)
    }

    fn tensor(&self, views: Vec<f32>, n: usize) -> Tensor<f32> {
        let [c, h, w] = self.output_shape();
        Tensor::new(vec![n, c, h, w], views).expect("consistent view shape")
    }

    /// Randomly mirrored and cropped training views.
    pub fn train_batch<R: Rng>(&self, ds: &Dataset, indices: &[usize], rng: &mut R) -> Tensor<f32> {
        let (dy, dx) = self.span();
        let mut out = Vec::with_capacity(indices.len() * self.output_shape().iter().product::<usize>());
        for &i in indices {
            let mut img = self.centered(ds, i);
            if self.mirror && rng.random_bool(0.5) {
                img = mirror(&img, self.image_shape);
            }
            let top = rng.random_range(0..=dy);
            let left = rng.random_range(0..=dx);
            out.extend(pad_crop(&img, self.image_shape, self.pad, self.crop, top, left));
        }
        self.tensor(out, indices.len())
    }

    /// Deterministic center views.
    pub fn eval_batch(&self, ds: &Dataset, indices: &[usize]) -> Tensor<f32> {
        let mut out = Vec::new();
        for &i in indices {
            out.extend(center_crop(&self.centered(ds, i), self.image_shape, self.pad, self.crop));
        }
        self.tensor(out, indices.len())
    }

    /// Four corner crops and the center crop of sample `i`, followed by their
    /// mirror images when the policy mirrors.
    pub fn ten_crop(&self, ds: &Dataset, i: usize) -> Tensor<f32> {
        let (dy, dx) = self.span();
        let img = self.centered(ds, i);
        let corners = [(0, 0), (0, dx), (dy, 0), (dy, dx), (dy / 2, dx / 2)];
        let mut out = Vec::new();
        let mut n = 0;
        let sources = if self.mirror {
            vec![img.clone(), mirror(&img, self.image_shape)]
        } else {
            vec![img]
        };
        for src in &sources {
            for &(t, l) in &corners {
                out.extend(pad_crop(src, self.image_shape, self.pad, self.crop, t, l));
                n += 1;
            }
        }
        self.tensor(out, n)
    }
}
