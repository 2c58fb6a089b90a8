use super::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<'g, T: Scalar> Var<'g, T> {
    /// Mean softmax cross-entropy of `B x K` logits against class labels.
    pub fn cross_entropy(self, labels: &[usize]) -> Var<'g, T> {
        let logits = self.value();
        assert_eq!(logits.shape().len(), 2, "cross_entropy expects B x K logits");
        let (b, k) = (logits.shape()[0], logits.shape()[1]);
        assert_eq!(labels.len(), b, "label count does not match batch");
        let mut probs = vec![T::ZERO; b * k];
        let mut total = 0.0f64;
        for (i, row) in logits.data().chunks(k).enumerate() {
            assert!(labels[i] < k, "label {} out of range for {k} classes", labels[i]);
            let m = row.iter().fold(row[0], |a, &v| a.max(v));
            let z: f64 = row.iter().map(|&v| (v - m).to_f64().exp()).sum();
            let lse = m.to_f64() + z.ln();
            total += lse - row[labels[i]].to_f64();
            for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = T::from_f64(((v - m).to_f64()).exp() / z);
            }
        }
        let value = Tensor::scalar(T::from_f64(total / b as f64));
        let labels = labels.to_vec();
        self.graph.push_op(value, &[self], move |_| {
            Box::new(move |g| {
                let scale = g.item() * T::from_f64(1.0 / b as f64);
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= T::ONE;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                vec![Some(Tensor::new(vec![b, k], d))]
            })
        })
    }
}
