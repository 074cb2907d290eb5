use rand::Rng;

use super::{prefixed, prefixed_mut, Mlp, Module};
use crate::autodiff::{softmax_in_place, Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Two-layer perceptron from a flattened row embedding to class logits.
/// This is the frozen black box that counterfactuals are generated for.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierNet {
    pub mlp: Mlp,
}

impl ClassifierNet {
    pub fn new<R: Rng + ?Sized>(input_width: usize, hidden: usize, classes: usize, rng: &mut R) -> Self {
        Self {
            mlp: Mlp::new(&[input_width, hidden, classes], rng),
        }
    }

    pub fn input_width(&self) -> usize {
        self.mlp.input_width()
    }

    pub fn classes(&self) -> usize {
        self.mlp.output_width()
    }

    /// Logits for `x: [B, C*d]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if g.value(x).cols() != self.input_width() {
            return Err(shape_err(format!(
                "classifier expects width {}, got {:?}",
                self.input_width(),
                g.value(x).shape()
            )));
        }
        self.mlp.forward(g, x)
    }

    /// Softmax class probabilities, one row per input row.
    pub fn probabilities(&self, z: &Tensor) -> Result<Tensor> {
        let mut logits = classifier_forward(z, self)?;
        let k = logits.cols();
        for row in logits.data_mut().chunks_mut(k) {
            softmax_in_place(row);
        }
        Ok(logits)
    }

    /// Predicted class per row of `z` (`[B, C, d]` or `[B, C*d]`).
    pub fn predict(&self, z: &Tensor) -> Result<Vec<usize>> {
        let logits = classifier_forward(z, self)?;
        Ok((0..logits.rows())
            .map(|r| {
                let row = logits.row(r);
                (0..row.len()).fold(0, |best, i| if row[i] > row[best] { i } else { best })
            })
            .collect())
    }
}

impl Module for ClassifierNet {
    fn params(&self) -> Vec<(String, &Tensor)> {
        prefixed("mlp", self.mlp.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        prefixed_mut("mlp", self.mlp.params_mut()).collect()
    }
}

/// `[B, K]` logits for a batch of row embeddings.
pub fn classifier_forward(z: &Tensor, f: &ClassifierNet) -> Result<Tensor> {
    let w = f.input_width();
    if w == 0 || !z.len().is_multiple_of(w) {
        return Err(shape_err(format!(
            "embedding {:?} does not match classifier width {w}",
            z.shape()
        )));
    }
    let mut g = Graph::new();
    let x = g.leaf(z.clone().reshape(&[z.len() / w, w])?);
    let out = f.forward(&mut g, x)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_parameters_give_zero_logits() {
        let mut f = ClassifierNet::new(6, 4, 3, &mut ChaCha8Rng::seed_from_u64(0));
        for (_, p) in f.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let z = Tensor::randn(&[2, 3, 2], &mut ChaCha8Rng::seed_from_u64(1));
        let logits = classifier_forward(&z, &f).unwrap();
        assert_eq!(logits.shape(), &[2, 3]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rows_are_independent() {
        let f = ClassifierNet::new(4, 8, 2, &mut ChaCha8Rng::seed_from_u64(0));
        let row = Tensor::randn(&[1, 4], &mut ChaCha8Rng::seed_from_u64(1));
        let z = row.repeat(2).reshape(&[2, 4]).unwrap();
        let logits = classifier_forward(&z, &f).unwrap();
        assert_eq!(logits.row(0), logits.row(1));
        assert!(logits.is_finite());
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let f = ClassifierNet::new(4, 8, 2, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(classifier_forward(&Tensor::zeros(&[1, 5]), &f).is_err());
    }
}
