//! Full-precision pretraining and the network-backed ADMM objective.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::admm::{Objective, StepDecay};
use crate::data::{Batches, Dataset};
use crate::error::{Error, Result};
use crate::network::{argmax_rows, Architecture, MomentumSgd, Network, Params};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// RNG substream used for weight initialization.
pub const INIT_STREAM: u64 = 1;

const EVAL_CHUNK: usize = 1000;

/// Fresh He-initialized network drawn from the `init` substream of `seed`.
pub fn init_network<T: Scalar>(arch: Architecture, seed: u64) -> Network<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INIT_STREAM);
    Network::init(arch, &mut rng)
}

/// Fraction of correctly classified samples.
pub fn accuracy<T: Scalar>(arch: &Architecture, params: &Params<T>, data: &Dataset<T>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset(format!("{:?} split has no samples", data.split)));
    }
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (x, labels) = data.gather(chunk);
        let predicted = argmax_rows(&arch.logits(params, &x)?);
        correct += predicted.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Network loss on a shuffled minibatch stream, with optional evaluation
/// data for accuracy reports.
pub struct NetworkObjective<'a, T> {
    arch: &'a Architecture,
    train: &'a Dataset<T>,
    eval: Option<&'a Dataset<T>>,
    batches: Batches,
    current: Option<(Tensor<T>, Vec<usize>)>,
}

impl<'a, T: Scalar> NetworkObjective<'a, T> {
    pub fn new(arch: &'a Architecture, train: &'a Dataset<T>, eval: Option<&'a Dataset<T>>, batch_size: usize, seed: u64) -> Result<Self> {
        if train.sample_shape() != arch.input_shape() {
            return Err(Error::ShapeMismatch {
                op: "dataset vs network input",
                left: train.sample_shape().to_vec(),
                right: arch.input_shape().to_vec(),
            });
        }
        Ok(Self {
            arch,
            train,
            eval,
            batches: Batches::new(train.len(), batch_size, seed)?,
            current: None,
        })
    }
}

impl<T: Scalar> Objective<T> for NetworkObjective<'_, T> {
    fn loss_grad(&mut self, params: &Params<T>) -> Result<(T, Params<T>)> {
        if self.current.is_none() {
            self.advance();
        }
        let (x, labels) = self.current.as_ref().expect("batch drawn");
        self.arch.loss_and_grad(params, x, labels)
    }

    fn advance(&mut self) {
        let indices = self.batches.next_batch();
        self.current = Some(self.train.gather(&indices));
    }

    fn evaluate(&mut self, params: &Params<T>) -> Result<Option<f64>> {
        self.eval.map(|data| accuracy(self.arch, params, data)).transpose()
    }

    fn steps_per_epoch(&self) -> usize {
        self.batches.batches_per_epoch()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Per-epoch decay of `lr`.
    pub lr_schedule: StepDecay,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            lr_schedule: StepDecay { gamma: 0.5, every: 4 },
            seed: 7,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr_schedule.gamma > 0.0) {
            return Err(Error::Config("lr_schedule.gamma must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate used during (1-based) `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_schedule.factor(epoch)
    }
}

/// One row of the pretraining history. Epoch 0 describes the
/// initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub test_accuracy: f64,
    pub lr: Option<f64>,
}

/// SGD with momentum from a seeded initialization.
pub fn pretrain<T: Scalar>(
    arch: Architecture,
    train: &Dataset<T>,
    test: &Dataset<T>,
    config: &PretrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Network<T>, Vec<EpochRecord>)> {
    config.validate()?;
    let mut net = init_network::<T>(arch, config.seed);
    let mut history = vec![EpochRecord {
        epoch: 0,
        train_loss: None,
        test_accuracy: accuracy(&net.arch, &net.params, test)?,
        lr: None,
    }];
    on_epoch(&history[0]);

    let mut batches = Batches::new(train.len(), config.batch_size, config.seed)?;
    let mut optimizer = MomentumSgd::new(T::of(config.momentum));
    for epoch in 1..=config.epochs {
        let lr = config.lr_at(epoch);
        let mut total = 0.0;
        let epoch_batches = batches.next_epoch();
        for indices in &epoch_batches {
            let (x, labels) = train.gather(indices);
            let (loss, grads) = net.backward(&x, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    round: epoch,
                    loss: loss.as_f64(),
                });
            }
            total += loss.as_f64();
            optimizer.step(&mut net.params, &grads, T::of(lr))?;
        }
        let record = EpochRecord {
            epoch,
            train_loss: Some(total / epoch_batches.len() as f64),
            test_accuracy: accuracy(&net.arch, &net.params, test)?,
            lr: Some(lr),
        };
        on_epoch(&record);
        history.push(record);
    }
    Ok((net, history))
}

pub fn write_pretrain_csv<W: std::io::Write>(mut out: W, history: &[EpochRecord]) -> Result<()> {
    writeln!(out, "epoch,train_loss,test_accuracy,lr")?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in history {
        writeln!(out, "{},{},{},{}", r.epoch, opt(r.train_loss), r.test_accuracy, opt(r.lr))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{encode_idx, parse_idx, Split, IMAGES_MAGIC, LABELS_MAGIC};

    /// Two linearly separable 2x2 classes: bright left column vs bright
    /// right column.
    fn toy_dataset(n: usize) -> Dataset<f64> {
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let label = (i % 2) as u8;
            let bright = 200 + (i % 50) as u8;
            pixels.extend_from_slice(&if label == 0 { [bright, 10, bright, 10] } else { [10, bright, 10, bright] });
            labels.push(label);
        }
        let images = parse_idx(&encode_idx(IMAGES_MAGIC, &[n, 2, 2], &pixels), IMAGES_MAGIC).unwrap();
        let labels = parse_idx(&encode_idx(LABELS_MAGIC, &[n], &labels), LABELS_MAGIC).unwrap();
        Dataset::from_idx(&images, &labels, Split::Train, None).unwrap()
    }

    fn toy_arch() -> Architecture {
        Architecture::mlp(vec![1, 2, 2], &[8, 10]).unwrap()
    }

    #[test]
    fn pretrain_learns_toy_problem() {
        let data = toy_dataset(40);
        let config = PretrainConfig {
            epochs: 5,
            batch_size: 8,
            lr: 0.1,
            ..PretrainConfig::default()
        };
        let (net, history) = pretrain(toy_arch(), &data, &data, &config, |_| {}).unwrap();
        assert_eq!(history.len(), 6);
        assert_eq!(history.last().unwrap().test_accuracy, 1.0);
        assert_eq!(accuracy(&net.arch, &net.params, &data).unwrap(), 1.0);
    }

    #[test]
    fn zero_epochs_keeps_initialization() {
        let data = toy_dataset(10);
        let config = PretrainConfig {
            epochs: 0,
            ..PretrainConfig::default()
        };
        let (net, history) = pretrain(toy_arch(), &data, &data, &config, |_| {}).unwrap();
        assert_eq!(net, init_network(toy_arch(), config.seed));
        assert_eq!(history.len(), 1);
    }

    #[test]
    fn pretrain_is_deterministic() {
        let data = toy_dataset(30);
        let config = PretrainConfig {
            epochs: 2,
            batch_size: 7,
            ..PretrainConfig::default()
        };
        let a = pretrain(toy_arch(), &data, &data, &config, |_| {}).unwrap();
        let b = pretrain(toy_arch(), &data, &data, &config, |_| {}).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn empty_split_is_an_error() {
        let data = toy_dataset(4).truncate(0);
        let net = init_network::<f64>(toy_arch(), 1);
        assert!(matches!(accuracy(&net.arch, &net.params, &data), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn objective_rejects_wrong_input_shape() {
        let data = toy_dataset(4);
        let arch = Architecture::mnist_mlp();
        assert!(NetworkObjective::new(&arch, &data, None, 2, 0).is_err());
    }
}
