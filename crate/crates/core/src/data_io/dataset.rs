use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::{dynamic_to_batch, open_dynamic, ImageBatch};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidInput(format!("unknown split {other}"))),
        }
    }
}

/// Image-folder dataset: `root/<split>/<class>/<file>`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub items: Vec<(PathBuf, usize)>,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl LabeledDataset {
    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|(_, l)| *l).collect()
    }

    /// Keeps the first `n` items of every class (in dataset order).
    pub fn take_per_class(&self, n: usize) -> LabeledDataset {
        let mut counts = vec![0usize; self.class_count()];
        let items = self
            .items
            .iter()
            .filter(|(_, l)| {
                counts[*l] += 1;
                counts[*l] <= n
            })
            .cloned()
            .collect();
        LabeledDataset { items, class_names: self.class_names.clone(), split: self.split }
    }

    /// Decodes every item as RGB, resizing so the shorter side is at least
    /// `min_side` (bilinear). No cropping happens here.
    pub fn load(&self, min_side: usize) -> Result<ImageStore> {
        let mut images = Vec::with_capacity(self.items.len());
        for (path, _) in &self.items {
            let mut img = open_dynamic(path)?;
            let (w, h) = (img.width() as usize, img.height() as usize);
            let short = w.min(h);
            if short < min_side {
                let scale = min_side as f64 / short as f64;
                let nw = ((w as f64 * scale).round() as u32).max(min_side as u32);
                let nh = ((h as f64 * scale).round() as u32).max(min_side as u32);
                img = img.resize_exact(nw, nh, FilterType::Triangle);
            }
            images.push(dynamic_to_batch(&img, true)?.into_tensor());
        }
        Ok(ImageStore { images, labels: self.labels(), class_count: self.class_count() })
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Scans `root/<split>` for one subdirectory per class. Class indices are
/// the lexicographic ranks of the directory names; items are ordered by
/// path. Undecodable files are skipped with a warning.
pub fn load_image_folder(root: impl AsRef<Path>, split: Split) -> Result<LabeledDataset> {
    let dir = root.as_ref().join(split.dir_name());
    if !dir.is_dir() {
        return Err(Error::MissingDirectory(dir));
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(&dir)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.len() < 2 {
        return Err(Error::InvalidInput(format!("{} holds {} class directories, need at least 2", dir.display(), class_dirs.len())));
    }
    let mut items = Vec::new();
    let mut class_names = Vec::new();
    for (label, cdir) in class_dirs.iter().enumerate() {
        let name = cdir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let mut kept = 0;
        for file in sorted_entries(cdir)?.into_iter().filter(|p| p.is_file()) {
            match open_dynamic(&file) {
                Ok(img) if img.width() >= 1 && img.height() >= 1 => {
                    items.push((file, label));
                    kept += 1;
                }
                Ok(_) => log::warn!("skipping empty image {}", file.display()),
                Err(e) => log::warn!("skipping {}: {e}", file.display()),
            }
        }
        if kept == 0 {
            return Err(Error::EmptyClass(name));
        }
        class_names.push(name);
    }
    Ok(LabeledDataset { items, class_names, split })
}

/// How a fixed-size window is cut from a larger image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropMode {
    Random,
    Center,
}

/// Decoded dataset images held in memory, each `1 x 3 x H x W`.
#[derive(Clone, Debug)]
pub struct ImageStore {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl ImageStore {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Assembles a batch of `size x size` crops of the given items.
    pub fn batch(&self, indices: &[usize], size: usize, mode: CropMode, rng: &mut impl Rng) -> Result<(ImageBatch, Vec<usize>)> {
        let mut parts = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            parts.push(crop(&self.images[i], size, mode, rng)?);
            labels.push(self.labels[i]);
        }
        Ok((ImageBatch::new(Tensor::stack_batch(&parts))?, labels))
    }

    /// Splits off `n` evenly spaced items (so every class keeps its share
    /// when items are grouped by class). Returns `(rest, held_out)`.
    pub fn hold_out(&self, n: usize) -> Result<(ImageStore, ImageStore)> {
        if n == 0 || n >= self.len() {
            return Err(Error::InvalidInput(format!("cannot hold out {n} of {} images", self.len())));
        }
        let picked: std::collections::BTreeSet<usize> = (0..n).map(|k| k * self.len() / n).collect();
        let part = |keep: bool| ImageStore {
            images: (0..self.len()).filter(|i| picked.contains(i) == keep).map(|i| self.images[i].clone()).collect(),
            labels: (0..self.len()).filter(|i| picked.contains(i) == keep).map(|i| self.labels[i]).collect(),
            class_count: self.class_count,
        };
        Ok((part(false), part(true)))
    }

    /// Centre crops of every item, in order.
    pub fn all_center(&self, size: usize) -> Result<(ImageBatch, Vec<usize>)> {
        let idx: Vec<usize> = (0..self.len()).collect();
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        self.batch(&idx, size, CropMode::Center, &mut unused)
    }
}

fn crop(img: &Tensor<f32>, size: usize, mode: CropMode, rng: &mut impl Rng) -> Result<Tensor<f32>> {
    let (_, c, h, w) = img.dims4();
    if h < size || w < size {
        return Err(Error::InvalidInput(format!("image {h}x{w} smaller than crop {size}")));
    }
    if h == size && w == size {
        return Ok(img.clone());
    }
    let (y0, x0) = match mode {
        CropMode::Center => ((h - size) / 2, (w - size) / 2),
        CropMode::Random => (rng.random_range(0..=h - size), rng.random_range(0..=w - size)),
    };
    let mut data = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in y0..y0 + size {
            let row = (ch * h + y) * w;
            data.extend_from_slice(&img.data()[row + x0..row + x0 + size]);
        }
    }
    Ok(Tensor::new(vec![1, c, size, size], data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_ppm(path: &Path, v: u8) {
        let mut bytes = b"P6\n8 8\n255\n".to_vec();
        bytes.extend(std::iter::repeat_n(v, 8 * 8 * 3));
        fs::write(path, bytes).unwrap();
    }

    fn make_tree(root: &Path, classes: &[(&str, usize)]) {
        for (name, count) in classes {
            let d = root.join("train").join(name);
            fs::create_dir_all(&d).unwrap();
            for i in 0..*count {
                write_ppm(&d.join(format!("{i}.ppm")), (i * 40) as u8);
            }
        }
    }

    #[test]
    fn classes_are_ranked_lexicographically() {
        let dir = tempfile::tempdir().unwrap();
        make_tree(dir.path(), &[("dog", 2), ("cat", 2)]);
        let ds = load_image_folder(dir.path(), Split::Train).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.class_count(), 2);
        assert_eq!(ds.class_names, ["cat", "dog"]);
        assert_eq!(ds.labels(), [0, 0, 1, 1]);
        let again = load_image_folder(dir.path(), Split::Train).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn hold_out_keeps_classes_balanced() {
        let store = ImageStore {
            images: (0..20).map(|i| Tensor::full(&[1, 3, 8, 8], i as f32 / 20.0)).collect(),
            labels: (0..20).map(|i| i / 5).collect(),
            class_count: 4,
        };
        let (rest, held) = store.hold_out(8).unwrap();
        assert_eq!((rest.len(), held.len()), (12, 8));
        assert_eq!(held.labels, vec![0, 0, 1, 1, 2, 2, 3, 3]);
        assert!(store.hold_out(20).is_err());
        assert!(store.hold_out(0).is_err());
    }

    #[test]
    fn empty_class_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        make_tree(dir.path(), &[("cat", 1), ("dog", 0)]);
        let err = load_image_folder(dir.path(), Split::Train).unwrap_err();
        assert!(err.to_string().contains("empty class"), "{err}");
    }

    #[test]
    fn undecodable_files_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        make_tree(dir.path(), &[("cat", 1), ("dog", 1)]);
        fs::write(dir.path().join("train/cat/broken.png"), b"nope").unwrap();
        let ds = load_image_folder(dir.path(), Split::Train).unwrap();
        assert_eq!(ds.len(), 2);
    }

    #[test]
    fn missing_split_directory_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_image_folder(dir.path(), Split::Test), Err(Error::MissingDirectory(_))));
    }

    #[test]
    fn small_images_are_resized_then_center_cropped() {
        let dir = tempfile::tempdir().unwrap();
        make_tree(dir.path(), &[("a", 1), ("b", 1)]);
        let store = load_image_folder(dir.path(), Split::Train).unwrap().load(16).unwrap();
        assert_eq!(store.images[0].shape(), &[1, 3, 16, 16]);
        let (batch, labels) = store.all_center(12).unwrap();
        assert_eq!(batch.dims(), (2, 3, 12, 12));
        assert_eq!(labels, [0, 1]);
    }
}
