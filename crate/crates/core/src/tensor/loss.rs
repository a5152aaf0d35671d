//! Classification loss.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

impl<T: Scalar> Tensor<T> {
    /// Mean softmax cross-entropy of `[N, K]` logits against class labels.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dim("softmax_cross_entropy", s, &[labels.len()]));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Label {
                label: bad,
                num_classes: k,
            });
        }
        let x = self.data();
        let mut probs = Vec::with_capacity(n * k);
        let mut total = T::zero();
        for (row, &lab) in x.chunks(k).zip(labels) {
            let mx = T::from_f64(row.iter().map(|v| v.primal()).fold(f64::NEG_INFINITY, f64::max));
            let sum: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + sum.ln();
            total += lse - row[lab];
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        drop(x);
        let labels = labels.to_vec();
        let inv_n = T::from_f64(1.0 / n as f64);
        Ok(Tensor::from_op(
            vec![total * inv_n],
            vec![1],
            "softmax_cross_entropy",
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let scale = g[0] * inv_n;
                let mut gx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &lab) in labels.iter().enumerate() {
                    gx[i * k + lab] -= scale;
                }
                vec![Some(gx)]
            }),
        ))
    }
}
