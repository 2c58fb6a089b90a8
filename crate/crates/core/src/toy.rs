//! Synthetic ten-class image set written in image-folder layout.
//!
//! Each image shows one of five shapes, either flat-coloured or filled
//! with one-pixel stripes, on a smooth random gradient. Gaussian sensor noise
//! covers the whole frame; it carries no class information but costs bits.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::quantize8_value;
use crate::data_io::{write_png, ImageBatch, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SHAPES: [&str; 5] = ["disk", "square", "triangle", "cross", "ring"];
pub const CLASS_COUNT: usize = 2 * SHAPES.len();

#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub size: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise_min: f64,
    pub noise_max: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig { size: 32, train_per_class: 500, test_per_class: 100, noise_min: 0.01, noise_max: 0.04, seed: 0 }
    }
}

pub fn class_name(class: usize) -> String {
    let fill = if class % 2 == 0 { "solid" } else { "striped" };
    format!("{class}_{}_{fill}", SHAPES[class / 2])
}

fn inside(shape: usize, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
        2 => dy <= 0.8 * r && dy >= -r + 2.0 * dx.abs(),
        3 => (dx.abs() <= 0.3 * r && dy.abs() <= r) || (dy.abs() <= 0.3 * r && dx.abs() <= r),
        _ => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
        }
    }
}

/// Renders one `1 x 3 x size x size` image of `class` on the 8-bit grid.
pub fn render(class: usize, cfg: &ToyConfig, rng: &mut impl Rng) -> Tensor<f32> {
    let n = cfg.size;
    let nf = n as f64;
    let shape = class / 2;
    let striped = class % 2 == 1;

    let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.85));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.85));
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (ga, gb) = (angle.cos(), angle.sin());

    let mut fg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
    let contrast = rng.random_range(0.25..0.45);
    let mid = [(c0[0] + c1[0]) / 2.0, (c0[1] + c1[1]) / 2.0, (c0[2] + c1[2]) / 2.0];
    let luma = |c: &[f64; 3]| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
    let sign = if luma(&mid) > 0.5 { -1.0 } else { 1.0 };
    let shift = sign * contrast - (luma(&fg) - luma(&mid));
    for v in &mut fg {
        *v = (*v + shift).clamp(0.0, 1.0);
    }

    let r = rng.random_range(0.22 * nf..0.34 * nf);
    let cx = rng.random_range(r..nf - r);
    let cy = rng.random_range(r..nf - r);
    let vertical = rng.random_bool(0.5);
    let amp = rng.random_range(0.04..0.16);

    let sigma = rng.random_range(cfg.noise_min..=cfg.noise_max);
    let noise = Normal::new(0.0, sigma).expect("positive sigma");

    let mut data = vec![0f32; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = (((px - nf / 2.0) * ga + (py - nf / 2.0) * gb) / nf + 0.5).clamp(0.0, 1.0);
            let mut rgb: [f64; 3] = std::array::from_fn(|c| c0[c] * (1.0 - t) + c1[c] * t);
            if inside(shape, px - cx, py - cy, r) {
                rgb = fg;
                if striped {
                    let coord = if vertical { px } else { py };
                    if coord.floor() as i64 % 2 == 0 {
                        let s = if luma(&fg) > 0.5 { -amp } else { amp };
                        rgb = std::array::from_fn(|c| fg[c] + s);
                    }
                }
            }
            for c in 0..3 {
                let v = (rgb[c] + noise.sample(rng)).clamp(0.0, 1.0) as f32;
                data[(c * n + y) * n + x] = quantize8_value(v);
            }
        }
    }
    Tensor::new(vec![1, 3, n, n], data)
}

/// Writes `<root>/{train,test}/<class>/<index>.png`.
pub fn write_toy_dataset(root: impl AsRef<Path>, cfg: &ToyConfig) -> Result<()> {
    if cfg.size < 8 || !(cfg.noise_min >= 0.0 && cfg.noise_max >= cfg.noise_min) {
        return Err(Error::Config("toy images need size >= 8 and 0 <= noise_min <= noise_max".into()));
    }
    let root = root.as_ref();
    for (split, per_class, salt) in [(Split::Train, cfg.train_per_class, 1u64), (Split::Test, cfg.test_per_class, 2)] {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(salt));
        for class in 0..CLASS_COUNT {
            let dir = root.join(split.dir_name()).join(class_name(class));
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for i in 0..per_class {
                let img = ImageBatch::new(render(class, cfg, &mut rng))?;
                write_png(&img, 0, dir.join(format!("{i:05}.png")))?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{decode_image, load_image_folder};

    #[test]
    fn render_is_seeded_and_on_grid() {
        let cfg = ToyConfig::default();
        let a = render(3, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let b = render(3, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        assert!(ImageBatch::new(a).unwrap().is_on_8bit_grid());
    }

    #[test]
    fn writes_loadable_folder() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ToyConfig { size: 16, train_per_class: 2, test_per_class: 1, ..ToyConfig::default() };
        write_toy_dataset(dir.path(), &cfg).unwrap();
        let train = load_image_folder(dir.path(), Split::Train).unwrap();
        assert_eq!(train.len(), 20);
        assert_eq!(train.class_count(), CLASS_COUNT);
        let test = load_image_folder(dir.path(), Split::Test).unwrap();
        assert_eq!(test.len(), 10);
        let (path, label) = &test.items[9];
        assert_eq!(*label, 9);
        assert_eq!(decode_image(path).unwrap().dims(), (1, 3, 16, 16));
    }

    #[test]
    fn class_names_sort_by_index() {
        let mut names: Vec<String> = (0..CLASS_COUNT).map(class_name).collect();
        let original = names.clone();
        names.sort();
        assert_eq!(names, original);
    }
}
