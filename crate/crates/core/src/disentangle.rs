//! Adversarial removal of attribute information from user embeddings.
//!
//! The generator descends `λ_D · log D(r_u, a)` with the discriminator held
//! fixed; the discriminator then minimizes `−log D(r_u, a)` with the
//! generator held fixed.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::models::{Example, GeneratorModel, PretrainOptions, PretrainReport};
use crate::numerics::{uniform, AdamConfig, AdamState, Axis, ParamId, ParamStore, Tape, Tensor, Var};

/// Two-layer perceptron over preference embeddings.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub params: ParamStore,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    input_dim: usize,
    n_classes: usize,
}

impl Discriminator {
    pub fn build(input_dim: usize, hidden: usize, n_classes: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || hidden == 0 || n_classes < 2 {
            return Err(Error::Config("discriminator needs positive dims and >= 2 classes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let w1 = params.insert("hidden", uniform(input_dim, hidden, 0.1, &mut rng));
        let b1 = params.insert("hidden_bias", Tensor::zeros(1, hidden));
        let w2 = params.insert("out", uniform(hidden, n_classes, 0.1, &mut rng));
        let b2 = params.insert("out_bias", Tensor::zeros(1, n_classes));
        Ok(Self {
            params,
            w1,
            b1,
            w2,
            b2,
            input_dim,
            n_classes,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// `B × |A|` log-probabilities. With `trainable = false` the weights
    /// enter the tape as constants.
    pub fn log_probabilities<'t>(&self, tape: &'t Tape, r: Var<'t>, trainable: bool) -> Result<Var<'t>> {
        if r.shape()[1] != self.input_dim {
            return Err(Error::Contract(format!(
                "discriminator expects width {}, got {}",
                self.input_dim,
                r.shape()[1]
            )));
        }
        let p = |id| {
            if trainable {
                tape.param(&self.params, id)
            } else {
                tape.param_const(&self.params, id)
            }
        };
        r.matmul(p(self.w1))?
            .add_row(p(self.b1))?
            .relu()
            .matmul(p(self.w2))?
            .add_row(p(self.b2))?
            .log_softmax(Axis::Cols)
    }

    /// Mean `log D(r_b, a_b)` over the rows of `r`.
    fn mean_log_true<'t>(&self, tape: &'t Tape, r: Var<'t>, labels: &[usize], trainable: bool) -> Result<Var<'t>> {
        if labels.len() != r.shape()[0] {
            return Err(Error::Contract("one label per embedding row".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&a| a >= self.n_classes) {
            return Err(Error::Domain(format!("label {bad} outside {} classes", self.n_classes)));
        }
        let idx: Vec<(usize, usize)> = labels.iter().copied().enumerate().collect();
        self.log_probabilities(tape, r, trainable)?.pick(&idx)?.mean()
    }

    /// Generator-side term `λ_D · mean log D(r_u, a)`; discriminator
    /// weights receive no gradient.
    pub fn adversarial_loss<'t>(&self, tape: &'t Tape, r_u: Var<'t>, labels: &[usize], lambda: f64) -> Result<Var<'t>> {
        if lambda < 0.0 {
            return Err(Error::Config("adversarial weight must be >= 0".into()));
        }
        Ok(self.mean_log_true(tape, r_u, labels, false)?.scale(lambda))
    }

    /// Discriminator objective `−mean log D(r_u, a)`.
    pub fn cross_entropy<'t>(&self, tape: &'t Tape, r_u: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
        Ok(self.mean_log_true(tape, r_u, labels, true)?.scale(-1.0))
    }

    pub fn predict(&self, r: &Tensor) -> Result<Vec<usize>> {
        let probs = disc_forward(self, r)?;
        Ok((0..probs.rows())
            .map(|i| {
                let row = probs.row_slice(i);
                (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect())
    }

    pub fn accuracy(&self, r: &Tensor, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(r)?;
        Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len().max(1) as f64)
    }
}

/// Probability vectors, one row per embedding row.
pub fn disc_forward(d: &Discriminator, r: &Tensor) -> Result<Tensor> {
    let tape = Tape::inference();
    let lp = d.log_probabilities(&tape, tape.constant(r.clone()), false)?;
    Ok(lp.value().map(f64::exp))
}

/// `λ_D · log D(r_u, a)` for a single embedding row.
pub fn adversarial_loss(d: &Discriminator, r_u: &Tensor, attribute: usize, lambda: f64) -> Result<f64> {
    let tape = Tape::inference();
    d.adversarial_loss(&tape, tape.constant(r_u.clone()), &[attribute], lambda)?.item()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Granularity {
    Batch,
    Epoch,
}

/// `generator_units` units of generator updates, then `discriminator_units`
/// of discriminator updates, per round.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AlternationSchedule {
    pub generator_units: usize,
    pub discriminator_units: usize,
    pub granularity: Granularity,
}

impl Default for AlternationSchedule {
    fn default() -> Self {
        Self {
            generator_units: 1,
            discriminator_units: 1,
            granularity: Granularity::Epoch,
        }
    }
}

impl AlternationSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.generator_units == 0 || self.discriminator_units == 0 {
            return Err(Error::Config("alternation units must both be >= 1".into()));
        }
        Ok(())
    }
}

/// Discriminator plus its optimizer and the generator-side weight `λ_D`.
#[derive(Clone, Debug)]
pub struct Adversary {
    pub discriminator: Discriminator,
    pub lambda: f64,
    pub schedule: AlternationSchedule,
    adam: AdamState,
}

impl Adversary {
    pub fn new(discriminator: Discriminator, lambda: f64, schedule: AlternationSchedule, lr: f64) -> Result<Self> {
        schedule.validate()?;
        if lambda < 0.0 {
            return Err(Error::Config("adversarial weight must be >= 0".into()));
        }
        Ok(Self {
            discriminator,
            lambda,
            schedule,
            adam: AdamState::new(AdamConfig::with_lr(lr)),
        })
    }

    pub fn steps(&self) -> u64 {
        self.adam.step_count()
    }

    /// One discriminator update on the users of `batch`; the generator is
    /// read as constants.
    pub(crate) fn discriminator_step(&mut self, model: &GeneratorModel, batch: &[&Example]) -> Result<f64> {
        let tape = Tape::new();
        let users: Vec<usize> = batch.iter().map(|e| e.context.user).collect();
        let labels: Vec<usize> = batch.iter().map(|e| e.context.attribute).collect();
        let table = tape.param_const(&model.params, model.user_table());
        let r_u = tape.gather(table, &users)?;
        let loss = self.discriminator.cross_entropy(&tape, r_u, &labels)?;
        let value = loss.item()?;
        if !value.is_finite() {
            return Err(Error::Numeric("discriminator loss diverged".into()));
        }
        let grads = tape.backward(loss)?;
        self.adam.step(&mut self.discriminator.params, &grads)?;
        Ok(value)
    }

    pub(crate) fn discriminator_epoch(
        &mut self,
        model: &GeneratorModel,
        train: &[Example],
        batch_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(rng);
        let mut total = 0.0;
        let mut n = 0;
        for chunk in order.chunks(batch_size.max(1)) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            total += self.discriminator_step(model, &batch)?;
            n += 1;
        }
        Ok(total / n.max(1) as f64)
    }
}

/// Pretraining with alternating generator and discriminator phases until the
/// early-stopping rule fires.
pub fn alternate_train(
    model: &mut GeneratorModel,
    adversary: &mut Adversary,
    train: &[Example],
    valid: &[Example],
    options: &PretrainOptions,
) -> Result<PretrainReport> {
    if adversary.discriminator.input_dim() != model.config.user_dim() {
        return Err(Error::Contract("discriminator width must match the user embedding".into()));
    }
    crate::models::fit(model, train, valid, options, Some(adversary))
}

/// Accuracy of a freshly trained probe on held-out users.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Accuracy of always predicting the most common training label.
    pub majority_rate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeOptions {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            hidden: 64,
            epochs: 200,
            lr: 1e-2,
            batch_size: 32,
            train_fraction: 0.5,
            seed: 0,
        }
    }
}

/// Trains a new perceptron to predict `labels` from the rows of
/// `embeddings` and reports its accuracy on the held-out rows.
pub fn probe_leakage(embeddings: &Tensor, labels: &[usize], n_classes: usize, options: &ProbeOptions) -> Result<ProbeResult> {
    let n = embeddings.rows();
    if labels.len() != n || n < 4 {
        return Err(Error::Contract("probe needs one label per row and at least 4 rows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = ((n as f64 * options.train_fraction).round() as usize).clamp(1, n - 1);
    let (train_idx, test_idx) = order.split_at(n_train);
    let subset = |idx: &[usize]| -> Result<(Tensor, Vec<usize>)> {
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| embeddings.row_slice(i).to_vec()).collect();
        Ok((Tensor::from_rows(&rows)?, idx.iter().map(|&i| labels[i]).collect()))
    };
    let (x_train, y_train) = subset(train_idx)?;
    let (x_test, y_test) = subset(test_idx)?;

    let mut probe = Discriminator::build(embeddings.cols(), options.hidden, n_classes, options.seed ^ 0x9e37_79b9)?;
    let mut adam = AdamState::new(AdamConfig::with_lr(options.lr));
    let mut batch_order: Vec<usize> = (0..n_train).collect();
    for _ in 0..options.epochs {
        batch_order.shuffle(&mut rng);
        for chunk in batch_order.chunks(options.batch_size.max(1)) {
            let tape = Tape::new();
            let rows: Vec<Vec<f64>> = chunk.iter().map(|&i| x_train.row_slice(i).to_vec()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| y_train[i]).collect();
            let x = tape.constant(Tensor::from_rows(&rows)?);
            let loss = probe.cross_entropy(&tape, x, &labels)?;
            let grads = tape.backward(loss)?;
            adam.step(&mut probe.params, &grads)?;
        }
    }
    let mut counts = vec![0usize; n_classes];
    for &y in &y_train {
        counts[y] += 1;
    }
    let majority = (0..n_classes).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).expect("classes");
    Ok(ProbeResult {
        train_accuracy: probe.accuracy(&x_train, &y_train)?,
        test_accuracy: probe.accuracy(&x_test, &y_test)?,
        majority_rate: y_test.iter().filter(|&&y| y == majority).count() as f64 / y_test.len() as f64,
    })
}
