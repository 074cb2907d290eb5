use rand::Rng;

use super::{prefixed, prefixed_mut, Mlp, Module};
use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Gaussian VAE over flattened row embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularVae {
    pub encoder: Mlp,
    pub decoder: Mlp,
    latent: usize,
}

/// Per-batch pieces of the ELBO, each averaged over rows.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboTerms {
    pub reconstruction: f64,
    pub kl: f64,
}

impl TabularVae {
    pub fn new<R: Rng + ?Sized>(row_width: usize, hidden: usize, latent: usize, rng: &mut R) -> Self {
        Self {
            encoder: Mlp::new(&[row_width, hidden, 2 * latent], rng),
            decoder: Mlp::new(&[latent, hidden, row_width], rng),
            latent,
        }
    }

    pub fn latent(&self) -> usize {
        self.latent
    }

    pub fn row_width(&self) -> usize {
        self.encoder.input_width()
    }

    pub fn hidden(&self) -> usize {
        self.encoder.layers[0].fan_out()
    }

    /// Returns `(mean, log_variance)`, each `[B, latent]`.
    pub fn encode(&self, g: &mut Graph, z: Var) -> Result<(Var, Var)> {
        if g.value(z).cols() != self.row_width() {
            return Err(shape_err(format!(
                "VAE expects width {}, got {:?}",
                self.row_width(),
                g.value(z).shape()
            )));
        }
        let h = self.encoder.forward(g, z)?;
        let mean = g.slice_cols(h, 0, self.latent)?;
        let logvar = g.slice_cols(h, self.latent, self.latent)?;
        Ok((mean, logvar))
    }

    /// Single-sample reparametrized ELBO averaged over the batch, using the
    /// supplied standard-normal draw `eps: [B, latent]`. Returns the scalar
    /// ELBO node and the reconstruction and KL nodes.
    pub fn elbo(&self, g: &mut Graph, z: Var, eps: &Tensor) -> Result<(Var, Var, Var)> {
        let b = g.value(z).rows();
        if eps.rows() != b || eps.cols() != self.latent {
            return Err(shape_err("noise shape does not match batch and latent width"));
        }
        let (mean, logvar) = self.encode(g, z)?;
        let half = g.scale(logvar, 0.5);
        let std = g.exp(half);
        let noise = g.leaf(eps.clone());
        let spread = g.mul(std, noise)?;
        let latent = g.add(mean, spread)?;
        let recon = self.decoder.forward(g, latent)?;
        let diff = g.sub(recon, z)?;
        let sq = g.sum_squares(diff);
        let recon_err = g.scale(sq, 1.0 / b as f64);
        // KL(N(mu, s^2) || N(0, 1)) = 0.5 * sum(mu^2 + s^2 - log s^2 - 1)
        let mu2 = g.square(mean);
        let var = g.exp(logvar);
        let a = g.add(mu2, var)?;
        let c = g.sub(a, logvar)?;
        let c = g.affine(c, 1.0, -1.0);
        let kl_sum = g.sum(c);
        let kl = g.scale(kl_sum, 0.5 / b as f64);
        let neg = g.add(recon_err, kl)?;
        let elbo = g.scale(neg, -1.0);
        Ok((elbo, recon_err, kl))
    }

    /// ELBO of `z` (`[B, C, d]` or `[B, C*d]`) with fresh noise from `rng`.
    pub fn evaluate<R: Rng + ?Sized>(&self, z: &Tensor, rng: &mut R) -> Result<(f64, ElboTerms)> {
        let w = self.row_width();
        if !z.len().is_multiple_of(w) {
            return Err(shape_err(format!("VAE input {:?}", z.shape())));
        }
        let b = z.len() / w;
        let eps = Tensor::randn(&[b, self.latent], rng);
        let mut g = Graph::new();
        let x = g.leaf(z.clone().reshape(&[b, w])?);
        let (elbo, recon, kl) = self.elbo(&mut g, x, &eps)?;
        Ok((
            g.value(elbo).item(),
            ElboTerms {
                reconstruction: g.value(recon).item(),
                kl: g.value(kl).item(),
            },
        ))
    }
}

/// Batch-averaged evidence lower bound of row embeddings under the VAE.
pub fn vae_elbo<R: Rng + ?Sized>(z: &Tensor, model: &TabularVae, rng: &mut R) -> Result<f64> {
    Ok(model.evaluate(z, rng)?.0)
}

impl Module for TabularVae {
    fn params(&self) -> Vec<(String, &Tensor)> {
        prefixed("encoder", self.encoder.params())
            .chain(prefixed("decoder", self.decoder.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let (enc, dec) = (&mut self.encoder, &mut self.decoder);
        prefixed_mut("encoder", enc.params_mut())
            .chain(prefixed_mut("decoder", dec.params_mut()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    /// Encoder emitting a fixed mean and zero log-variance.
    fn fixed_encoder(vae: &mut TabularVae, mean: &[f64]) {
        let l = vae.latent;
        let last = vae.encoder.layers.last_mut().unwrap();
        *last = Linear::zeros(last.fan_in(), 2 * l);
        last.bias.data_mut()[..l].copy_from_slice(mean);
    }

    #[test]
    fn kl_vanishes_at_the_prior() {
        let mut vae = TabularVae::new(6, 8, 3, &mut rng());
        fixed_encoder(&mut vae, &[0.0, 0.0, 0.0]);
        let z = Tensor::randn(&[4, 6], &mut rng());
        let (_, terms) = vae.evaluate(&z, &mut rng()).unwrap();
        assert!(terms.kl.abs() < 1e-12);
    }

    #[test]
    fn kl_of_shifted_unit_gaussian() {
        let mut vae = TabularVae::new(6, 8, 3, &mut rng());
        let mu = [0.5, -1.0, 2.0];
        fixed_encoder(&mut vae, &mu);
        let z = Tensor::randn(&[2, 6], &mut rng());
        let (_, terms) = vae.evaluate(&z, &mut rng()).unwrap();
        let expected = mu.iter().map(|m| m * m).sum::<f64>() / 2.0;
        assert!((terms.kl - expected).abs() < 1e-12);
    }

    #[test]
    fn perfect_reconstruction_has_no_penalty() {
        // Decoder ignores the latent and emits a constant equal to the input.
        let mut vae = TabularVae::new(4, 8, 2, &mut rng());
        let target = [0.3, -0.2, 1.0, 0.0];
        let last = vae.decoder.layers.last_mut().unwrap();
        *last = Linear::zeros(last.fan_in(), 4);
        last.bias.data_mut().copy_from_slice(&target);
        let z = Tensor::new(vec![1, 4], target.to_vec()).unwrap();
        let (_, terms) = vae.evaluate(&z, &mut rng()).unwrap();
        assert!(terms.reconstruction.abs() < 1e-24);
    }

    #[test]
    fn elbo_is_negative_sum_of_terms() {
        let vae = TabularVae::new(6, 8, 3, &mut rng());
        let z = Tensor::randn(&[3, 2, 3], &mut rng());
        let (elbo, terms) = vae.evaluate(&z, &mut rng()).unwrap();
        assert!((elbo + terms.reconstruction + terms.kl).abs() < 1e-9);
        assert_eq!(vae_elbo(&z, &vae, &mut rng()).unwrap(), elbo);
    }
}
