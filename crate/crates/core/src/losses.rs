//! Loss functions recorded on the gradient tape.
//!
//! Reduction conventions: cross-entropy, MSE, and KLD are batch means; the
//! geometric loss is a plain sum over the batch, so its weight interacts
//! with the batch size (batch size is fixed in run configs for that reason).

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::ClusterConfig;
use crate::kernels;
pub use crate::kernels::KldForm;
use crate::tape::{Tape, Var};

/// Weights of the combined losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Geometric loss weight.
    #[serde(default = "default_k_g")]
    pub k_g: f64,
    /// KLD weight (VAE head only).
    #[serde(default = "default_k_d")]
    pub k_d: f64,
}

fn default_k_g() -> f64 {
    0.2
}

fn default_k_d() -> f64 {
    1.0
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { k_g: default_k_g(), k_d: default_k_d() }
    }
}

/// Mean cross-entropy between logits [N,C] and integer labels.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

/// Mean squared error between same-shape tensors.
pub fn mse(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    tape.mse(pred, target)
}

/// Divergence of (mu, sigma) from the unit normal; see [`KldForm`] for the
/// two formula variants.
pub fn kld_loss(tape: &mut Tape, mu: Var, sigma: Var, form: KldForm) -> Result<Var> {
    tape.kld(mu, sigma, form)
}

/// Distance penalty: exactly zero up to the cluster radius, exponential
/// growth beyond it.
pub fn distance_penalty(x: f64, r_c: f64) -> f64 {
    kernels::distance_penalty(x, r_c)
}

/// Sum over the batch of the distance penalty between each sample's latent
/// position and its own class cluster.
pub fn geometric_loss(
    tape: &mut Tape,
    z: Var,
    labels: &[usize],
    clusters: &ClusterConfig,
) -> Result<Var> {
    tape.geometric(z, labels, clusters.centers(), clusters.radii(), clusters.latent_dims())
}

/// Supervised combined loss: cross-entropy plus weighted geometric loss.
pub fn combined_supervised_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    z: Var,
    clusters: &ClusterConfig,
    weights: &LossWeights,
) -> Result<Var> {
    let ce = cross_entropy(tape, logits, labels)?;
    if weights.k_g == 0.0 {
        return Ok(ce);
    }
    let geo = geometric_loss(tape, z, labels, clusters)?;
    let weighted = tape.scale(geo, weights.k_g)?;
    tape.add(ce, weighted)
}

/// Reconstruction combined loss: MSE plus weighted KLD.
pub fn combined_vae_loss(
    tape: &mut Tape,
    pred: Var,
    target: Var,
    mu: Var,
    sigma: Var,
    weights: &LossWeights,
) -> Result<Var> {
    let rec = mse(tape, pred, target)?;
    if weights.k_d == 0.0 {
        return Ok(rec);
    }
    let kld = kld_loss(tape, mu, sigma, KldForm::MuSigma)?;
    let weighted = tape.scale(kld, weights.k_d)?;
    tape.add(rec, weighted)
}
