//! Image normalization: scale to `[0,1]`, standardize with the published
//! ImageNet statistics, and pad to multiples of the output stride by edge
//! replication.

use crate::tensor::Tensor;

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Normalized CHW tensor plus the original (pre-padding) size.
#[derive(Clone, Debug)]
pub struct NormalizedImage {
    pub tensor: Tensor<f32>,
    pub orig_h: usize,
    pub orig_w: usize,
}

fn pad4(x: usize) -> usize {
    x.div_ceil(4) * 4
}

/// Standardizes an RGB image into a `[3, pad4(H), pad4(W)]` tensor.
pub fn normalize_image(image: &image::RgbImage) -> NormalizedImage {
    let (h, w) = (image.height() as usize, image.width() as usize);
    let (ph, pw) = (pad4(h), pad4(w));
    let raw = image.as_raw();
    let mut data = vec![0.0f32; 3 * ph * pw];
    for c in 0..3 {
        let plane = &mut data[c * ph * pw..(c + 1) * ph * pw];
        for y in 0..ph {
            let sy = y.min(h - 1);
            for x in 0..pw {
                let sx = x.min(w - 1);
                let v = raw[(sy * w + sx) * 3 + c] as f32 / 255.0;
                plane[y * pw + x] = (v - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
            }
        }
    }
    NormalizedImage {
        tensor: Tensor::new(vec![3, ph, pw], data).expect("padded buffer size"),
        orig_h: h,
        orig_w: w,
    }
}
