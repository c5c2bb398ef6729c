//! The training loop and evaluation pass.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geometry::ClusterConfig;
use crate::losses;
use crate::model::{argmax_rows, HeadKind, SaeModel};
use crate::optim::Optimizer;
use crate::tape::{Mode, Tape};
use crate::tensor::Tensor;
use crate::textures::{derive_seed, TextureSample};

/// One line of the machine-readable training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean cross-entropy over the epoch's batches.
    pub l_ce: f64,
    /// Mean (per batch) geometric loss; the in-batch reduction is a sum.
    pub l_g: f64,
    /// Train-mode classification accuracy over the epoch.
    pub acc: f64,
    /// Fraction of train encodings within their class cluster radius.
    pub in_cluster_fraction: f64,
}

pub struct TrainOutcome {
    pub model: SaeModel,
    pub clusters: ClusterConfig,
    pub metrics: Vec<EpochMetrics>,
}

/// Assemble a [N,1,hw,hw] tensor and label list from samples.
pub fn batch_of(samples: &[&TextureSample], hw: usize) -> Result<(Tensor, Vec<usize>)> {
    let mut data = Vec::with_capacity(samples.len() * hw * hw);
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        data.extend_from_slice(&s.image);
        labels.push(s.label.code());
    }
    Ok((Tensor::new(&[samples.len(), 1, hw, hw], data)?, labels))
}

/// Train a fresh model on the given train split. The run is a pure
/// function of (config, dataset): weight init, batch order, and any head
/// sampling all derive from `config.seed`.
pub fn train(
    config: &RunConfig,
    train_set: &[TextureSample],
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::contract("training requires a non-empty train split"));
    }
    let clusters = config.cluster_config()?;
    let mut model = SaeModel::new(config.sae.clone(), derive_seed(config.seed, "init"))?;
    let mut optimizer = Optimizer::new(config.optimizer.kind, config.optimizer.lr);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "shuffle"));
    let mut head_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "head"));
    let hw = config.sae.input_hw;
    let batch_size = config.optimizer.batch_size.max(1);

    let mut tape = Tape::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut metrics = Vec::with_capacity(config.optimizer.epochs);

    for epoch in 0..config.optimizer.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut ce_sum = 0.0;
        let mut geo_sum = 0.0;
        let mut batches = 0usize;
        let mut correct = 0usize;
        let mut in_cluster = 0usize;

        for chunk in order.chunks(batch_size) {
            let samples: Vec<&TextureSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (batch, labels) = batch_of(&samples, hw)?;

            tape.reset();
            let fwd = model.forward_on_tape(&mut tape, &batch, Mode::Train, &mut head_rng)?;
            let ce = losses::cross_entropy(&mut tape, fwd.logits, &labels)?;
            let geo = losses::geometric_loss(&mut tape, fwd.z, &labels, &clusters)?;
            let mut loss = if config.weights.k_g != 0.0 {
                let weighted = tape.scale(geo, config.weights.k_g)?;
                tape.add(ce, weighted)?
            } else {
                ce
            };
            if model.config.head == HeadKind::Vae && config.weights.k_d != 0.0 {
                if let Some((mu, sigma)) = fwd.vae {
                    let kld = losses::kld_loss(&mut tape, mu, sigma, losses::KldForm::MuSigma)?;
                    let weighted = tape.scale(kld, config.weights.k_d)?;
                    loss = tape.add(loss, weighted)?;
                }
            }

            let loss_value = tape.value(loss)[0];
            if !loss_value.is_finite() {
                let op = tape.first_nonfinite_op().unwrap_or("loss");
                return Err(Error::NonFinite { op });
            }

            tape.backward(loss)?;
            model.collect_grads(&tape);
            let mut params: Vec<&mut Tensor> =
                model.named_params_mut().into_iter().map(|(_, p)| p).collect();
            optimizer.step(&mut params);
            model.zero_grads();

            ce_sum += tape.value(ce)[0];
            geo_sum += tape.value(geo)[0];
            batches += 1;
            let predicted = argmax_rows(tape.value(fwd.logits), model.config.n_classes);
            correct += predicted.iter().zip(&labels).filter(|(p, l)| p == l).count();
            let z = tape.value(fwd.z);
            for (j, &label) in labels.iter().enumerate() {
                let zj = &z[j * model.config.latent_dims..(j + 1) * model.config.latent_dims];
                let d = clusters.center_distances(zj)[label];
                if d <= clusters.radius(label) {
                    in_cluster += 1;
                }
            }
        }

        let m = EpochMetrics {
            epoch,
            l_ce: ce_sum / batches as f64,
            l_g: geo_sum / batches as f64,
            acc: correct as f64 / train_set.len() as f64,
            in_cluster_fraction: in_cluster as f64 / train_set.len() as f64,
        };
        on_epoch(&m);
        metrics.push(m);
    }
    tape.reset();
    Ok(TrainOutcome { model, clusters, metrics })
}

/// Classifier and latent-space accuracy over a sample set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    /// Argmax classifier accuracy.
    pub accuracy: f64,
    /// Nearest-cluster-center accuracy, no classifier involved.
    pub ls_accuracy: f64,
    /// confusion[true][predicted], classifier path.
    pub confusion: Vec<Vec<usize>>,
}

pub const EVAL_BATCH: usize = 64;

pub fn evaluate(
    model: &SaeModel,
    clusters: &ClusterConfig,
    samples: &[TextureSample],
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::contract("evaluation requires a non-empty sample set"));
    }
    let n_c = model.config.n_classes;
    let mut confusion = vec![vec![0usize; n_c]; n_c];
    let mut correct = 0usize;
    let mut ls_correct = 0usize;
    let hw = model.config.input_hw;
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&TextureSample> = chunk.iter().collect();
        let (batch, labels) = batch_of(&refs, hw)?;
        let prediction = model.predict(&batch)?;
        for (j, &label) in labels.iter().enumerate() {
            let predicted = prediction.labels[j];
            confusion[label][predicted] += 1;
            if predicted == label {
                correct += 1;
            }
            let zj = &prediction.z.data
                [j * model.config.latent_dims..(j + 1) * model.config.latent_dims];
            if clusters.nearest_center(zj) == label {
                ls_correct += 1;
            }
        }
    }
    Ok(EvalReport {
        n: samples.len(),
        accuracy: correct as f64 / samples.len() as f64,
        ls_accuracy: ls_correct as f64 / samples.len() as f64,
        confusion,
    })
}

/// Eval-mode latent encodings for a sample set, batched.
pub fn encode_set(model: &SaeModel, samples: &[TextureSample]) -> Result<Vec<Vec<f64>>> {
    let hw = model.config.input_hw;
    let n_d = model.config.latent_dims;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&TextureSample> = chunk.iter().collect();
        let (batch, _) = batch_of(&refs, hw)?;
        let z = model.encode_eval(&batch)?;
        for j in 0..chunk.len() {
            out.push(z.data[j * n_d..(j + 1) * n_d].to_vec());
        }
    }
    Ok(out)
}

/// Per-class centroids of a set of encodings.
pub fn class_centroids(encodings: &[Vec<f64>], labels: &[usize], n_c: usize, n_d: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; n_d]; n_c];
    let mut counts = vec![0usize; n_c];
    for (z, &label) in encodings.iter().zip(labels) {
        for k in 0..n_d {
            sums[label][k] += z[k];
        }
        counts[label] += 1;
    }
    for (sum, &count) in sums.iter_mut().zip(&counts) {
        if count > 0 {
            for v in sum.iter_mut() {
                *v /= count as f64;
            }
        }
    }
    sums
}
