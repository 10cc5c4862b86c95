//! SGD training, evaluation and the one-epoch fine-tune.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{record_forward, Label, LayerParams, Model};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Period of the cosine learning-rate schedule, in epochs.
    pub cosine_t_max: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            epochs: 5,
            batch_size: 128,
            cosine_t_max: 200,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be >= 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.cosine_t_max == 0 {
            return Err(Error::InvalidArgument("epochs, batch size and T_max must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate used during `epoch` (0-based), annealed towards zero.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        0.5 * self.lr * (1.0 + (PI * epoch as f64 / self.cosine_t_max as f64).cos())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean cross-entropy over the epoch's training samples.
    pub loss: f64,
    /// Training accuracy measured during the epoch.
    pub accuracy: f64,
}

/// Renders a history as `epoch,loss,accuracy` CSV.
pub fn history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,loss,accuracy\n");
    for h in history {
        out.push_str(&format!("{},{:.6},{:.6}\n", h.epoch, h.loss, h.accuracy));
    }
    out
}

fn output_indices(model: &Model, labels: &[Label]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&l| model.class_index(l).ok_or(Error::UnknownClass(l)))
        .collect()
}

struct SampleGrad {
    grads: Vec<LayerParams<f32>>,
    loss: f64,
    correct: bool,
}

fn sample_grad(model: &Model, image: &Tensor<f32>, target: usize) -> Result<SampleGrad> {
    let rec = record_forward(model.layers(), model.params(), image)?;
    let probs = rec.probabilities_value();
    let p = probs.data()[target].max(f32::MIN_POSITIVE);
    let correct = rec.logits_value().argmax() == target;
    let mut seed = probs.clone();
    seed.data_mut()[target] -= 1.0;
    let mut g = rec.tape.backward_from(rec.logits, seed)?;
    let grads = rec
        .param_nodes
        .iter()
        .map(|&(w, b)| LayerParams {
            weight: g.take(w),
            bias: g.take(b),
        })
        .collect();
    Ok(SampleGrad {
        grads,
        loss: -(p as f64).ln(),
        correct,
    })
}

/// Mini-batch SGD with momentum on softmax cross-entropy.
///
/// Batches are drawn from a permutation produced by a RNG seeded from
/// `cfg.seed`; per-sample gradients are summed in batch order, so the result
/// is bit-identical for a given seed whatever the thread count.
pub fn train(model: &Model, data: &Dataset, cfg: &TrainConfig) -> Result<(Model, Vec<EpochStats>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let targets = output_indices(model, data.labels())?;
    for img in data.images().iter().take(1) {
        model.check_input(img)?;
    }
    let mut model = model.clone();
    let mut velocity: Vec<LayerParams<f32>> = model
        .params()
        .iter()
        .map(|p| LayerParams {
            weight: Tensor::zeros(p.weight.shape()),
            bias: Tensor::zeros(p.bias.shape()),
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let momentum = cfg.momentum as f32;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.lr_at(epoch) as f32;
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let samples: Vec<SampleGrad> = batch
                .par_iter()
                .map(|&i| sample_grad(&model, &data.images()[i], targets[i]))
                .collect::<Result<_>>()?;
            let scale = 1.0 / batch.len() as f32;
            for (layer, (params, vel)) in model.params_mut().iter_mut().zip(&mut velocity).enumerate() {
                let mut gw = Tensor::zeros(params.weight.shape());
                let mut gb = Tensor::zeros(params.bias.shape());
                for s in &samples {
                    gw.add_assign(&s.grads[layer].weight)?;
                    gb.add_assign(&s.grads[layer].bias)?;
                }
                sgd_step(params.weight.data_mut(), vel.weight.data_mut(), gw.data(), lr, momentum, scale);
                sgd_step(params.bias.data_mut(), vel.bias.data_mut(), gb.data(), lr, momentum, scale);
            }
            for s in &samples {
                loss_sum += s.loss;
                correct += s.correct as usize;
            }
        }
        history.push(EpochStats {
            epoch: epoch + 1,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        });
    }
    model.validate()?;
    Ok((model, history))
}

fn sgd_step(param: &mut [f32], vel: &mut [f32], grad_sum: &[f32], lr: f32, momentum: f32, scale: f32) {
    for ((p, v), &g) in param.iter_mut().zip(vel.iter_mut()).zip(grad_sum) {
        *v = momentum * *v + g * scale;
        *p -= lr * *v;
    }
}

/// One epoch on `data` with momentum 0.9 and batch size 128.
pub fn fine_tune(model: &Model, data: &Dataset, lr: f64, seed: u64) -> Result<(Model, Vec<EpochStats>)> {
    let cfg = TrainConfig {
        lr,
        epochs: 1,
        seed,
        ..TrainConfig::default()
    };
    train(model, data, &cfg)
}

fn count_correct(model: &Model, data: &Dataset, allowed: &[usize]) -> Result<usize> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let targets = output_indices(model, data.labels())?;
    let hits: Vec<bool> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let logits = model.logits(&data.images()[i])?;
            let z = logits.data();
            let mut best = allowed[0];
            for &j in &allowed[1..] {
                if z[j] > z[best] {
                    best = j;
                }
            }
            Ok(best == targets[i])
        })
        .collect::<Result<_>>()?;
    Ok(hits.into_iter().filter(|&h| h).count())
}

/// Fraction of samples whose arg-max output maps to the true label
/// (ties resolved toward the lowest output index).
pub fn evaluate(model: &Model, data: &Dataset) -> Result<f64> {
    let all: Vec<usize> = (0..model.class_map().len()).collect();
    Ok(count_correct(model, data, &all)? as f64 / data.len() as f64)
}

/// Accuracy with the arg-max taken only over the outputs of `classes`.
pub fn evaluate_restricted(model: &Model, data: &Dataset, classes: &[Label]) -> Result<f64> {
    let mut allowed = output_indices(model, classes)?;
    allowed.sort_unstable();
    allowed.dedup();
    if allowed.is_empty() {
        return Err(Error::InvalidArgument("no classes to restrict to".into()));
    }
    Ok(count_correct(model, data, &allowed)? as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{LayerSpec, ModelMeta, Provenance};

    fn linear_model(w: Vec<f32>, b: Vec<f32>, class_map: Vec<Label>) -> Model {
        let n = class_map.len();
        let d = w.len() / n;
        Model::from_parts(
            vec![LayerSpec::Flatten, LayerSpec::linear(n, d)],
            vec![LayerParams {
                weight: Tensor::new(vec![n, d], w).unwrap(),
                bias: Tensor::vector(b),
            }],
            [1, 1, d],
            class_map,
            ModelMeta {
                name: "lin".into(),
                seed: 0,
                provenance: Provenance::Original,
            },
        )
        .unwrap()
    }

    fn toy_data() -> Dataset {
        let imgs = vec![
            Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap(),
            Tensor::new(vec![1, 1, 2], vec![0.0, 1.0]).unwrap(),
            Tensor::new(vec![1, 1, 2], vec![0.9, 0.1]).unwrap(),
        ];
        Dataset::new(imgs, vec![5, 8, 5]).unwrap()
    }

    #[test]
    fn one_epoch_reduces_loss_on_separable_points() {
        let model = Model::build(vec![LayerSpec::Flatten, LayerSpec::linear(2, 2)], [1, 1, 2], vec![5, 8], 3).unwrap();
        let data = Dataset::new(
            vec![
                Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap(),
                Tensor::new(vec![1, 1, 2], vec![0.0, 1.0]).unwrap(),
            ],
            vec![5, 8],
        )
        .unwrap();
        let cfg = TrainConfig {
            lr: 0.5,
            epochs: 1,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let loss = |m: &Model| train(m, &data, &TrainConfig { lr: 0.0, ..cfg.clone() }).unwrap().1[0].loss;
        let (trained, hist) = train(&model, &data, &cfg).unwrap();
        assert_eq!(hist.len(), 1);
        assert!(loss(&trained) < loss(&model));
    }

    #[test]
    fn zero_lr_leaves_weights_alone() {
        let model = Model::build(vec![LayerSpec::Flatten, LayerSpec::linear(2, 2)], [1, 1, 2], vec![5, 8], 3).unwrap();
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 2,
            ..TrainConfig::default()
        };
        let (trained, _) = train(&model, &toy_data(), &cfg).unwrap();
        assert_eq!(trained.params(), model.params());
        let (tuned, hist) = fine_tune(&model, &toy_data(), 0.0, 1).unwrap();
        assert_eq!(hist.len(), 1);
        assert_eq!(tuned.params(), model.params());
    }

    #[test]
    fn training_is_deterministic() {
        let model = Model::build(vec![LayerSpec::Flatten, LayerSpec::linear(2, 2)], [1, 1, 2], vec![5, 8], 3).unwrap();
        let cfg = TrainConfig {
            batch_size: 2,
            epochs: 3,
            seed: 9,
            ..TrainConfig::default()
        };
        let (a, _) = train(&model, &toy_data(), &cfg).unwrap();
        let (b, _) = train(&model, &toy_data(), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_label_rejected() {
        let model = linear_model(vec![1.0, 0.0], vec![0.0], vec![5]);
        assert!(matches!(train(&model, &toy_data(), &TrainConfig::default()), Err(Error::UnknownClass(8))));
        assert!(evaluate(&model, &toy_data()).is_err());
    }

    #[test]
    fn small_step_decreases_batch_loss() {
        let model = Model::build(vec![LayerSpec::Flatten, LayerSpec::linear(2, 2)], [1, 1, 2], vec![5, 8], 11).unwrap();
        let data = toy_data();
        let cfg = TrainConfig {
            lr: 1e-4,
            momentum: 0.0,
            epochs: 1,
            batch_size: data.len(),
            ..TrainConfig::default()
        };
        let frozen = TrainConfig { lr: 0.0, ..cfg.clone() };
        let before = train(&model, &data, &frozen).unwrap().1[0].loss;
        let (stepped, _) = train(&model, &data, &cfg).unwrap();
        let after = train(&stepped, &data, &frozen).unwrap().1[0].loss;
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn constant_logits_pick_index_zero() {
        let model = linear_model(vec![0.0; 4], vec![0.0, 0.0], vec![5, 8]);
        let acc = evaluate(&model, &toy_data()).unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn lookup_model_is_perfect_and_permutation_invariant() {
        let model = linear_model(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], vec![5, 8]);
        assert_eq!(evaluate(&model, &toy_data()).unwrap(), 1.0);
        let swapped = linear_model(vec![0.0, 1.0, 1.0, 0.0], vec![0.0, 0.0], vec![8, 5]);
        assert_eq!(evaluate(&swapped, &toy_data()).unwrap(), 1.0);
    }

    #[test]
    fn single_output_model_is_always_right_on_its_class() {
        let model = linear_model(vec![-3.0, 2.0], vec![0.5], vec![5]);
        let data = toy_data().subset(&[5]).unwrap();
        assert_eq!(evaluate(&model, &data).unwrap(), 1.0);
    }

    #[test]
    fn restricted_accuracy_ignores_other_outputs() {
        // Output for label 9 always wins unless excluded.
        let model = linear_model(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 10.0], vec![5, 8, 9]);
        assert_eq!(evaluate(&model, &toy_data()).unwrap(), 0.0);
        assert_eq!(evaluate_restricted(&model, &toy_data(), &[5, 8]).unwrap(), 1.0);
    }

    #[test]
    fn empty_dataset_rejected() {
        let model = linear_model(vec![1.0, 0.0], vec![0.0], vec![5]);
        let empty = Dataset::new(vec![], vec![]).unwrap();
        assert!(matches!(evaluate(&model, &empty), Err(Error::EmptyDataset)));
    }

    #[test]
    fn cosine_schedule() {
        let cfg = TrainConfig {
            lr: 0.1,
            cosine_t_max: 4,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(0), 0.1);
        assert!((cfg.lr_at(2) - 0.05).abs() < 1e-15);
        assert!(cfg.lr_at(4).abs() < 1e-15);
        assert!(TrainConfig { momentum: 1.0, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..cfg }.validate().is_err());
    }

    #[test]
    fn history_csv_layout() {
        let h = vec![EpochStats {
            epoch: 1,
            loss: 0.5,
            accuracy: 0.75,
        }];
        assert_eq!(history_csv(&h), "epoch,loss,accuracy\n1,0.500000,0.750000\n");
    }
}
