//! ADAM optimization with mini-batching, held-out fold monitoring, early
//! stopping and best-epoch weight restoration.
//!
//! Targets are standardized to z-scores using the training folds' mean and
//! SD before optimization and un-standardized for reporting, so the history
//! and metrics stay on the transformed-target scale.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{mse_loss, Mode};
use crate::dataset::{make_batch, Dataset, FoldAssignment};
use crate::error::{CoreError, Result};
use crate::network::{forward, ArchConfig, ModelParameters};
use crate::rng::{substream, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Epochs without holdout improvement before stopping; None runs to
    /// max_epochs and keeps the best epoch, as in the full-scale setup.
    pub early_stop_patience: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk-scale defaults. The full-scale run uses batch 4096 and up to
    /// 300 epochs.
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            max_epochs: 100,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            early_stop_patience: Some(50),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CoreError::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(CoreError::InvalidArgument("max_epochs must be >= 1".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0 < b && b < 1.0) {
                return Err(CoreError::InvalidArgument(format!(
                    "{name} must be in (0, 1), got {b}"
                )));
            }
        }
        Ok(())
    }
}

/// First/second moment estimates and the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParameters) -> Self {
        AdamState {
            m: params.tensors.iter().map(|t| vec![0.0; t.tensor.len()]).collect(),
            v: params.tensors.iter().map(|t| vec![0.0; t.tensor.len()]).collect(),
            t: 0,
        }
    }
}

/// One ADAM update with bias correction:
/// m ← β₁m + (1−β₁)g, v ← β₂v + (1−β₂)g², θ ← θ − lr·m̂/(√v̂ + ε).
pub fn adam_step(
    params: &mut ModelParameters,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.tensors.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "{} gradient tensors for {} parameters",
            grads.len(),
            params.tensors.len()
        )));
    }
    for (pi, g) in grads.iter().enumerate() {
        if g.len() != params.tensors[pi].tensor.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "gradient length mismatch on '{}'",
                params.tensors[pi].name
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Numerical(format!(
                "non-finite gradient in '{}' at step {}",
                params.tensors[pi].name,
                state.t + 1
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    for (pi, g) in grads.iter().enumerate() {
        let m = &mut state.m[pi];
        let v = &mut state.v[pi];
        let theta = params.tensors[pi].tensor.data_mut();
        for i in 0..g.len() {
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            theta[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub holdout_mse: f64,
}

/// Per-epoch losses (transformed-target scale) and the best epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based index of the epoch with minimal holdout MSE.
    pub best_epoch: usize,
    pub best_holdout_mse: f64,
}

impl TrainingHistory {
    /// CSV export for plotting training curves.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,train_mse,holdout_mse")?;
        for e in &self.epochs {
            writeln!(w, "{},{},{}", e.epoch, e.train_mse, e.holdout_mse)?;
        }
        Ok(())
    }

    pub fn write_csv_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
            .map_err(|e| CoreError::io(path, e))
    }
}

/// Training-fold z-score parameters for the target, used to map network
/// outputs back to the transformed-target scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScaling {
    pub mean: f64,
    pub sd: f64,
}

impl TargetScaling {
    fn fit(values: &[f64]) -> TargetScaling {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        TargetScaling {
            mean,
            // constant targets would zero every gradient; fall back to unit
            // scale so training degenerates gracefully
            sd: if sd > 0.0 { sd } else { 1.0 },
        }
    }

    pub fn standardize(&self, v: f64) -> f64 {
        (v - self.mean) / self.sd
    }

    pub fn unstandardize(&self, v: f64) -> f64 {
        v * self.sd + self.mean
    }
}

/// Output of a training run: final (restored) parameters, history and the
/// target scaling needed to interpret raw network outputs.
pub struct TrainOutput {
    pub params: ModelParameters,
    pub history: TrainingHistory,
    pub target_scaling: TargetScaling,
}

/// Trains on all folds except `fold.test_fold`, monitoring holdout MSE on
/// the test fold each epoch. Mini-batches are reshuffled each epoch from the
/// run seed; the last partial batch is used. Parameters are restored to the
/// epoch with minimal holdout MSE. Training halts at max_epochs or once the
/// holdout has not improved for `early_stop_patience` epochs.
pub fn train(
    mut params: ModelParameters,
    dataset: &Dataset,
    fold: &FoldAssignment,
    arch: &ArchConfig,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    config.validate()?;
    fold.validate()?;
    if dataset.fold_labels.len() != dataset.len() {
        return Err(CoreError::InvalidArgument(
            "dataset folds not assigned".into(),
        ));
    }
    if fold.k_folds != dataset.k_folds {
        return Err(CoreError::InvalidArgument(format!(
            "fold assignment expects {} folds, dataset has {}",
            fold.k_folds, dataset.k_folds
        )));
    }
    let train_idx: Vec<usize> = (0..dataset.len())
        .filter(|&i| dataset.fold_labels[i] != fold.test_fold)
        .collect();
    let holdout_idx = dataset.fold_indices(fold.test_fold);
    if train_idx.is_empty() {
        return Err(CoreError::InvalidArgument("empty training fold".into()));
    }
    if holdout_idx.is_empty() {
        return Err(CoreError::InvalidArgument("empty holdout fold".into()));
    }

    let scaling = TargetScaling::fit(
        &train_idx.iter().map(|&i| dataset.targets[i]).collect::<Vec<_>>(),
    );
    let std_targets: Vec<f64> = dataset
        .targets
        .iter()
        .map(|&t| scaling.standardize(t))
        .collect();
    let scale2 = scaling.sd * scaling.sd; // standardized MSE -> target scale

    let mut state = AdamState::new(&params);
    let mut history = TrainingHistory {
        epochs: Vec::new(),
        best_epoch: 0,
        best_holdout_mse: f64::INFINITY,
    };
    let mut best_params = params.clone();
    let mut since_best = 0usize;

    for epoch in 1..=config.max_epochs {
        let mut order = train_idx.clone();
        let mut shuffle_rng = substream(config.seed, Stream::BatchOrder, &[epoch as u64]);
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        for (bi, batch_idx) in order.chunks(config.batch_size).enumerate() {
            debug_assert!(batch_idx
                .iter()
                .all(|&i| dataset.fold_labels[i] != fold.test_fold));
            let batch = make_batch(dataset, batch_idx);
            let target = crate::autograd::Tensor::new(
                vec![batch_idx.len(), 1],
                batch_idx.iter().map(|&i| std_targets[i]).collect(),
            );
            let mut rng = substream(
                config.seed,
                Stream::Dropout,
                &[epoch as u64, bi as u64],
            );
            let mut pass = forward(&params, arch, &batch, Mode::Train, &mut rng)?;
            let loss = mse_loss(&mut pass.tape, pass.predictions, &target)?;
            let loss_value = pass.tape.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(CoreError::Numerical(format!(
                    "training loss became {loss_value} at epoch {epoch}, batch {bi}"
                )));
            }
            loss_sum += loss_value * batch_idx.len() as f64;
            loss_n += batch_idx.len();
            let grads_all = pass.tape.backward(loss)?;
            let grads: Vec<Vec<f64>> = pass
                .param_ids
                .iter()
                .map(|&id| grads_all.get(id).to_vec())
                .collect();
            adam_step(&mut params, &grads, &mut state, config)?;
        }
        let train_mse = loss_sum / loss_n as f64 * scale2;

        let holdout_mse =
            holdout_mse(&params, arch, dataset, &holdout_idx, &std_targets)? * scale2;
        if !holdout_mse.is_finite() {
            return Err(CoreError::Numerical(format!(
                "holdout MSE became {holdout_mse} at epoch {epoch}"
            )));
        }

        history.epochs.push(EpochRecord {
            epoch,
            train_mse,
            holdout_mse,
        });
        if holdout_mse < history.best_holdout_mse {
            history.best_holdout_mse = holdout_mse;
            history.best_epoch = epoch;
            best_params = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if let Some(patience) = config.early_stop_patience {
                if since_best >= patience {
                    break;
                }
            }
        }
    }

    Ok(TrainOutput {
        params: best_params,
        history,
        target_scaling: scaling,
    })
}

/// Eval-mode MSE on the given indices (standardized scale), batched.
fn holdout_mse(
    params: &ModelParameters,
    arch: &ArchConfig,
    dataset: &Dataset,
    indices: &[usize],
    std_targets: &[f64],
) -> Result<f64> {
    let mut sum = 0.0;
    for chunk in indices.chunks(512) {
        let batch = make_batch(dataset, chunk);
        let preds = crate::network::predict(params, arch, &batch)?;
        for (&i, &p) in chunk.iter().zip(preds.iter()) {
            let d = p - std_targets[i];
            sum += d * d;
        }
    }
    Ok(sum / indices.len() as f64)
}

/// Eval-mode predictions for the given indices on the transformed-target
/// scale (un-standardized).
pub fn predict_indices(
    params: &ModelParameters,
    arch: &ArchConfig,
    dataset: &Dataset,
    indices: &[usize],
    scaling: &TargetScaling,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(512) {
        let batch = make_batch(dataset, chunk);
        let preds = crate::network::predict(params, arch, &batch)?;
        out.extend(preds.iter().map(|&p| scaling.unstandardize(p)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tensor;
    use crate::network::{build_network, DenseLayerConfig, NamedTensor};

    fn scalar_params(v: f64) -> ModelParameters {
        ModelParameters {
            tensors: vec![NamedTensor {
                name: "theta".into(),
                tensor: Tensor::new(vec![1], vec![v]),
            }],
        }
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = scalar_params(1.0);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[vec![0.0]], &mut s, &TrainConfig::default()).unwrap();
        assert_eq!(p.tensors[0].tensor.data(), &[1.0]);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        // t=1: m̂ = g, v̂ = g², update = lr·g/(|g| + ε) ≈ lr
        let mut p = scalar_params(1.0);
        let mut s = AdamState::new(&p);
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        adam_step(&mut p, &[vec![0.5]], &mut s, &cfg).unwrap();
        let expected = 1.0 - 1e-3 * 0.5 / (0.5 + 1e-8);
        assert!((p.tensors[0].tensor.data()[0] - expected).abs() < 1e-12);
        assert!((p.tensors[0].tensor.data()[0] - 0.9990000002).abs() < 1e-9);
    }

    #[test]
    fn identical_problems_identical_trajectories() {
        let cfg = TrainConfig::default();
        let mut p1 = scalar_params(1.0);
        let mut p2 = scalar_params(1.0);
        let mut s1 = AdamState::new(&p1);
        let mut s2 = AdamState::new(&p2);
        for i in 0..20 {
            let g = vec![(i as f64 * 0.37).sin()];
            adam_step(&mut p1, &[g.clone()], &mut s1, &cfg).unwrap();
            adam_step(&mut p2, &[g], &mut s2, &cfg).unwrap();
        }
        assert_eq!(p1.tensors[0].tensor.data(), p2.tensors[0].tensor.data());
    }

    #[test]
    fn scaled_gradient_preserves_update_signs() {
        let cfg = TrainConfig::default();
        let g: Vec<f64> = vec![0.3, -1.7, 0.0, 2.4];
        for c in [0.5, 3.0] {
            let mut p1 = ModelParameters {
                tensors: vec![NamedTensor {
                    name: "w".into(),
                    tensor: Tensor::new(vec![4], vec![0.0; 4]),
                }],
            };
            let mut p2 = p1.clone();
            let mut s1 = AdamState::new(&p1);
            let mut s2 = AdamState::new(&p2);
            adam_step(&mut p1, &[g.clone()], &mut s1, &cfg).unwrap();
            let gc: Vec<f64> = g.iter().map(|v| v * c).collect();
            adam_step(&mut p2, &[gc], &mut s2, &cfg).unwrap();
            for (a, b) in p1.tensors[0]
                .tensor
                .data()
                .iter()
                .zip(p2.tensors[0].tensor.data().iter())
            {
                assert_eq!(a.signum(), b.signum());
            }
        }
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut p = scalar_params(1.0);
        let mut s = AdamState::new(&p);
        let err = adam_step(&mut p, &[vec![f64::NAN]], &mut s, &TrainConfig::default());
        assert!(matches!(err, Err(CoreError::Numerical(_))));
    }

    /// Dataset of 2x2 patches with direct patch/target control.
    fn toy_dataset(patches: Vec<Vec<f64>>, targets: Vec<f64>, folds: Vec<u32>) -> Dataset {
        let n = patches.len();
        Dataset {
            patches: patches
                .into_iter()
                .map(|values| crate::dataset::Patch {
                    values,
                    k: 2,
                    center_easting: 0.0,
                    center_northing: 0.0,
                })
                .collect(),
            targets,
            sites: (0..n)
                .map(|_| crate::dataset::Site {
                    easting: 0.0,
                    northing: 0.0,
                    raw_value: Some(1.0),
                    below_detection: false,
                    lower_detection_limit: 0.0,
                })
                .collect(),
            target_transform: crate::dataset::TargetTransform::Identity,
            fold_labels: folds,
            k_folds: 2,
            patch_size: 2,
            national_sd: 1.0,
        }
    }

    fn linear_arch() -> ArchConfig {
        ArchConfig {
            input_size: 2,
            conv_layers: vec![],
            pool: 1,
            dense_layers: vec![],
        }
    }

    #[test]
    fn early_stop_on_increasing_holdout() {
        // Train targets push the single linear unit away from the holdout
        // target, so holdout MSE increases strictly from epoch 1.
        let a = vec![1.0, 1.0, 1.0, 0.0];
        let ds = toy_dataset(
            vec![a.clone(), a.iter().map(|v| -v).collect(), a.clone()],
            vec![11.0, -9.0, -9.0],
            vec![0, 0, 1],
        );
        let arch = linear_arch();
        let mut params = build_network(&arch, 1).unwrap();
        for t in &mut params.tensors {
            for v in t.tensor.data_mut() {
                *v = 0.0;
            }
        }
        let cfg = TrainConfig {
            batch_size: 2,
            max_epochs: 200,
            learning_rate: 0.01,
            early_stop_patience: Some(10),
            seed: 3,
            ..TrainConfig::default()
        };
        let out = train(
            params,
            &ds,
            &FoldAssignment {
                k_folds: 2,
                test_fold: 1,
                seed: 0,
            },
            &arch,
            &cfg,
        )
        .unwrap();
        for w in out.history.epochs.windows(2) {
            assert!(
                w[1].holdout_mse > w[0].holdout_mse,
                "holdout MSE not strictly increasing: {w:?}"
            );
        }
        assert_eq!(out.history.best_epoch, 1);
        assert_eq!(out.history.epochs.len(), 11); // stops after 10 bad epochs
    }

    #[test]
    fn restored_params_reproduce_best_holdout() {
        let patches: Vec<Vec<f64>> = (0..12)
            .map(|i| {
                vec![
                    (i as f64 * 0.7).sin(),
                    (i as f64 * 1.3).cos(),
                    (i as f64 * 0.2).sin(),
                    0.0,
                ]
            })
            .collect();
        let targets: Vec<f64> = patches.iter().map(|p| p[0] * 2.0 - p[1]).collect();
        let folds: Vec<u32> = (0..12).map(|i| (i % 2) as u32).collect();
        let ds = toy_dataset(patches, targets, folds);
        let arch = linear_arch();
        let params = build_network(&arch, 7).unwrap();
        let cfg = TrainConfig {
            batch_size: 4,
            max_epochs: 30,
            learning_rate: 0.05,
            early_stop_patience: None,
            seed: 5,
            ..TrainConfig::default()
        };
        let fold = FoldAssignment {
            k_folds: 2,
            test_fold: 1,
            seed: 0,
        };
        let out = train(params, &ds, &fold, &arch, &cfg).unwrap();
        // re-evaluate restored weights independently
        let holdout: Vec<usize> = ds.fold_indices(1);
        let preds = predict_indices(&out.params, &arch, &ds, &holdout, &out.target_scaling).unwrap();
        let mse = holdout
            .iter()
            .zip(preds.iter())
            .map(|(&i, &p)| (p - ds.targets[i]).powi(2))
            .sum::<f64>()
            / holdout.len() as f64;
        assert!(
            (mse - out.history.best_holdout_mse).abs() < 1e-10,
            "restored {mse} vs reported {}",
            out.history.best_holdout_mse
        );
    }

    #[test]
    fn training_is_reproducible() {
        let patches: Vec<Vec<f64>> = (0..8)
            .map(|i| vec![(i as f64).sin(), (i as f64).cos(), i as f64 * 0.1, 0.0])
            .collect();
        let targets: Vec<f64> = patches.iter().map(|p| p[0] + p[2]).collect();
        let folds: Vec<u32> = (0..8).map(|i| (i % 2) as u32).collect();
        let ds = toy_dataset(patches, targets, folds);
        let arch = ArchConfig {
            input_size: 2,
            conv_layers: vec![],
            pool: 1,
            dense_layers: vec![DenseLayerConfig {
                width: 4,
                dropout_rate: 0.2,
            }],
        };
        let cfg = TrainConfig {
            batch_size: 3,
            max_epochs: 10,
            seed: 11,
            ..TrainConfig::default()
        };
        let fold = FoldAssignment {
            k_folds: 2,
            test_fold: 1,
            seed: 0,
        };
        let a = train(build_network(&arch, 2).unwrap(), &ds, &fold, &arch, &cfg).unwrap();
        let b = train(build_network(&arch, 2).unwrap(), &ds, &fold, &arch, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.history, b.history);
    }
}
