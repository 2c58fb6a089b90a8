//! Small convolutional classifier that plays the frozen machine-vision
//! network.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Conv2dSpec, Graph, Var};
use crate::config::KeyValues;
use crate::data_io::{Checkpoint, CropMode, ImageBatch, ImageStore};
use crate::error::{Error, Result};
use crate::nn::{conv, init_conv, init_linear, linear};
use crate::npp::check_layout;
use crate::params::{Adam, Bound, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_KIND: &str = "classifier";
const BLOCKS: usize = 3;
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassifierConfig {
    pub width: usize,
    pub class_count: usize,
}

impl ClassifierConfig {
    pub fn to_text(&self) -> String {
        let mut kv = KeyValues::default();
        kv.set("width", self.width);
        kv.set("class_count", self.class_count);
        kv.to_text()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        kv.reject_unknown(&["width", "class_count"])?;
        let width = kv.get("width")?.ok_or_else(|| Error::Config("missing width".into()))?;
        let class_count = kv.get("class_count")?.ok_or_else(|| Error::Config("missing class_count".into()))?;
        Ok(ClassifierConfig { width, class_count })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub config: ClassifierConfig,
    pub params: ParamSet,
}

impl Classifier {
    pub fn init(config: ClassifierConfig, seed: u64) -> Result<Self> {
        if config.class_count < 2 || config.width < 1 {
            return Err(Error::Config("classifier needs at least 2 classes and width >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let mut inp = 3;
        for i in 0..BLOCKS {
            let out = config.width << i;
            init_conv(&mut ps, &mut rng, &format!("block{i}"), out, inp, 3, false)?;
            inp = out;
        }
        init_linear(&mut ps, &mut rng, "head", config.class_count, inp, false)?;
        Ok(Classifier { config, params: ps })
    }

    /// `N x K` logits.
    pub fn logits<'g, T: Scalar>(&self, b: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let mut f = x;
        for i in 0..BLOCKS {
            f = conv(b, &format!("block{i}"), f, Conv2dSpec::same(3)).relu().avg_pool2();
        }
        linear(b, "head", f.global_avg_pool())
    }

    /// Mean cross-entropy of the predictions on `x_hat`.
    pub fn task_loss<'g, T: Scalar>(&self, b: &Bound<'g, T>, x_hat: Var<'g, T>, labels: &[usize]) -> Result<Var<'g, T>> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.config.class_count) {
            return Err(Error::InvalidInput(format!("label {bad} outside {} classes", self.config.class_count)));
        }
        if labels.len() != x_hat.shape()[0] {
            return Err(Error::InvalidInput(format!("{} labels for a batch of {}", labels.len(), x_hat.shape()[0])));
        }
        Ok(self.logits(b, x_hat).cross_entropy(labels))
    }

    /// Arg-max predictions, evaluated in chunks.
    pub fn predict(&self, x: &ImageBatch) -> Vec<usize> {
        let mut out = Vec::with_capacity(x.len());
        let t = x.tensor();
        for start in (0..x.len()).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(x.len());
            let g = Graph::<f32>::new();
            let b = self.params.bind(&g, |_| false);
            let logits = self.logits(&b, g.constant(t.slice_batch(start, end)));
            out.extend(argmax_rows(&logits.value()));
        }
        out
    }

    pub fn accuracy(&self, x: &ImageBatch, labels: &[usize]) -> f64 {
        accuracy_of(&self.predict(x), labels)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(CHECKPOINT_KIND, self.config.to_text(), self.params.clone())
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let ck = ck.expect_kind(CHECKPOINT_KIND)?;
        let config = ClassifierConfig::from_text(&ck.config)?;
        check_layout(&Classifier::init(config.clone(), 0)?.params, &ck.params)?;
        Ok(Classifier { config, params: ck.params })
    }
}

/// Row-wise arg-max of an `N x K` tensor; ties go to the lowest index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy_of(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    predictions.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierTrainConfig {
    pub width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub crop: usize,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig { width: 16, epochs: 8, batch_size: 32, lr: 2e-3, crop: 32, seed: 0 }
    }
}

/// Trains on clean images with cross-entropy. The learning rate drops
/// tenfold for the last quarter of the epochs.
pub fn train_classifier(train: &ImageStore, cfg: &ClassifierTrainConfig) -> Result<Classifier> {
    if train.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    if let Some(&bad) = train.labels.iter().find(|&&l| l >= train.class_count) {
        return Err(Error::InvalidInput(format!("label {bad} outside {} classes", train.class_count)));
    }
    let mut model = Classifier::init(ClassifierConfig { width: cfg.width, class_count: train.class_count }, cfg.seed)?;
    let mut adam = Adam::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let drop_at = cfg.epochs - cfg.epochs / 4;
    for epoch in 0..cfg.epochs {
        let lr = if epoch >= drop_at { cfg.lr * 0.1 } else { cfg.lr };
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch_size) {
            let (x, labels) = train.batch(idx, cfg.crop, CropMode::Random, &mut rng)?;
            let grads = {
                let g = Graph::<f32>::new();
                let b = model.params.bind(&g, |_| true);
                let loss = model.task_loss(&b, g.constant(x.into_tensor()), &labels)?;
                let v = loss.item() as f64;
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("classifier loss at epoch {epoch}")));
                }
                sum += v;
                batches += 1;
                b.gradients(&g.backward(loss))
            };
            adam.update(&mut model.params, &grads, lr);
        }
        log::info!("classifier epoch {} loss {:.4}", epoch + 1, sum / batches as f64);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn uniform_logits_give_ln_k() {
        let g = Graph::<f64>::new();
        let l = g.constant(Tensor::zeros(&[4, 10])).cross_entropy(&[0, 3, 9, 2]);
        assert!((l.item() - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_give_near_zero() {
        let g = Graph::<f64>::new();
        let mut t = Tensor::zeros(&[2, 10]);
        t.data_mut()[3] = 60.0;
        t.data_mut()[10 + 7] = 60.0;
        assert!(g.constant(t).cross_entropy(&[3, 7]).item() < 1e-20);
    }

    #[test]
    fn frozen_weights_get_no_gradient() {
        let model = Classifier::init(ClassifierConfig { width: 2, class_count: 3 }, 1).unwrap();
        let g = Graph::<f32>::new();
        let b = model.params.bind(&g, |_| false);
        let x = g.param(Tensor::full(&[1, 3, 8, 8], 0.5));
        let loss = model.task_loss(&b, x, &[1]).unwrap();
        let grads = g.backward(loss);
        assert!(b.gradients(&grads).is_empty());
        assert!(grads.get(b.get("block0.w")).is_none());
        assert!(grads.get(x).is_some());
        assert!(model.task_loss(&b, x, &[3]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy_of(&[0, 1, 2], &[0, 1, 2]), 1.0);
        let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
        assert!((accuracy_of(&[0; 100], &labels) - 0.1).abs() < 1e-12);
        let t = Tensor::new(vec![2, 3], vec![1.0, 3.0, 3.0, -1.0, -2.0, -1.0]);
        assert_eq!(argmax_rows(&t), vec![1, 0]);
        assert_eq!(argmax_rows(&t.map(|v| 7.5 * v)), vec![1, 0]);
    }

    fn blobs(n: usize, seed: u64) -> ImageStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let label = i % 2;
            let base = if label == 0 { [0.8, 0.2, 0.2] } else { [0.2, 0.2, 0.8] };
            let mut d = Vec::with_capacity(3 * 64);
            for c in 0..3 {
                for _ in 0..64 {
                    d.push((base[c] + 0.1 * (rng.random::<f32>() - 0.5)).clamp(0.0, 1.0));
                }
            }
            images.push(Tensor::new(vec![1, 3, 8, 8], d));
            labels.push(label);
        }
        ImageStore { images, labels, class_count: 2 }
    }

    #[test]
    fn separable_blobs_are_learned() {
        let cfg = ClassifierTrainConfig { width: 4, epochs: 4, batch_size: 16, lr: 1e-2, crop: 8, seed: 3 };
        let model = train_classifier(&blobs(128, 1), &cfg).unwrap();
        let (x, labels) = blobs(64, 2).all_center(8).unwrap();
        assert!(model.accuracy(&x, &labels) >= 0.99);
        let again = train_classifier(&blobs(128, 1), &cfg).unwrap();
        assert!(again.params.bits_eq(&model.params));
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = Classifier::init(ClassifierConfig { width: 3, class_count: 4 }, 5).unwrap();
        let back = Classifier::from_checkpoint(Checkpoint::from_bytes(&model.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, model);
    }
}
