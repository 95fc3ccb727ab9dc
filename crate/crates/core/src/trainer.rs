//! Training with real-valued shadow weights.
//!
//! Every minibatch projects the real weights onto the variant's codebook,
//! runs forward and backward with the projected weights, and applies the
//! optimizer step to the real weights. Validation and test errors are always
//! measured with nearest-rounded weights.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, Splits};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::inference::{argmax_rows, QuantizedModel};
use crate::network::{backward, forward, hinge_loss, predict, Mode, NetworkSpec, ParamRole, Parameters};
use crate::quantization::Codebook;
use crate::scalar::Scalar;
use crate::variant::{ModelVariant, WeightConstraint};

pub const CHECKPOINT_FORMAT: &str = "lightnn-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundingMode {
    Stochastic,
    Nearest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Step decay: `initial` until `decay_epoch` (zero-based), then `initial · factor`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay_epoch: Option<usize>,
    pub decay_factor: f64,
}

impl LrSchedule {
    pub fn constant(eta: f64) -> Self {
        LrSchedule { initial: eta, decay_epoch: None, decay_factor: 1.0 }
    }

    pub fn eta(&self, epoch: usize) -> f64 {
        match self.decay_epoch {
            Some(d) if epoch >= d => self.initial * self.decay_factor,
            _ => self.initial,
        }
    }
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { initial: 1e-3, decay_epoch: Some(40), decay_factor: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub optimizer: OptimizerKind,
    pub rounding: RoundingMode,
    /// Share of the labelled training data held out for validation.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 100,
            schedule: LrSchedule::default(),
            adam: AdamConfig::default(),
            optimizer: OptimizerKind::Adam,
            rounding: RoundingMode::Stochastic,
            validation_fraction: 1.0 / 6.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad(format!("validation_fraction {} not in (0, 1)", self.validation_fraction));
        }
        let s = &self.schedule;
        if !(s.initial.is_finite() && s.initial >= 0.0 && s.decay_factor.is_finite() && s.decay_factor >= 0.0) {
            return bad(format!("invalid learning-rate schedule {s:?}"));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.epsilon > 0.0) {
            return bad(format!("invalid adam settings {a:?}"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Bias-corrected Adam for one step `t`, with the corrections precomputed.
#[derive(Clone, Copy, Debug)]
pub struct AdamStep<T> {
    beta1: T,
    beta2: T,
    one_minus_beta1: T,
    one_minus_beta2: T,
    correction1: T,
    correction2: T,
    epsilon: T,
    eta: T,
}

impl<T: Scalar> AdamStep<T> {
    pub fn new(cfg: &AdamConfig, t: u64, eta: T) -> Result<Self> {
        if t == 0 {
            return Err(Error::Config("adam step count starts at 1".into()));
        }
        let t = i32::try_from(t).unwrap_or(i32::MAX);
        Ok(AdamStep {
            beta1: T::narrow(cfg.beta1),
            beta2: T::narrow(cfg.beta2),
            one_minus_beta1: T::narrow(1.0 - cfg.beta1),
            one_minus_beta2: T::narrow(1.0 - cfg.beta2),
            correction1: T::narrow(1.0 - cfg.beta1.powi(t)),
            correction2: T::narrow(1.0 - cfg.beta2.powi(t)),
            epsilon: T::narrow(cfg.epsilon),
            eta,
        })
    }

    /// Updates the moments in place and returns the parameter delta.
    #[inline]
    pub fn delta(&self, m: &mut T, v: &mut T, g: T) -> T {
        *m = self.beta1 * *m + self.one_minus_beta1 * g;
        *v = self.beta2 * *v + self.one_minus_beta2 * g * g;
        let m_hat = *m / self.correction1;
        let v_hat = *v / self.correction2;
        -(self.eta * m_hat / (v_hat.sqrt() + self.epsilon))
    }
}

/// One Adam update of a single parameter; see [`AdamStep`].
pub fn adam_update<T: Scalar>(m: &mut T, v: &mut T, g: T, t: u64, cfg: &AdamConfig, eta: T) -> Result<T> {
    Ok(AdamStep::new(cfg, t, eta)?.delta(m, v, g))
}

/// Real weights, optimizer moments and counters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar + serde::de::DeserializeOwned"))]
pub struct TrainState<T> {
    pub variant: ModelVariant,
    pub spec: NetworkSpec,
    pub params: Parameters<T>,
    pub adam_m: Parameters<T>,
    pub adam_v: Parameters<T>,
    pub step: u64,
    pub seed: u64,
    pub eta: T,
}

impl<T: Scalar> TrainState<T> {
    /// Fresh state; the spec's activations are rewritten for the variant.
    pub fn init<R: Rng + ?Sized>(spec: &NetworkSpec, variant: ModelVariant, seed: u64, eta: f64, rng: &mut R) -> Result<Self> {
        let spec = spec.clone().for_variant(variant);
        let params = Parameters::init(&spec, rng)?;
        Ok(TrainState {
            variant,
            adam_m: params.zeros_like(),
            adam_v: params.zeros_like(),
            spec,
            params,
            step: 0,
            seed,
            eta: T::narrow(eta),
        })
    }

    pub fn from_parameters(spec: &NetworkSpec, variant: ModelVariant, params: Parameters<T>, eta: f64) -> Result<Self> {
        let spec = spec.clone().for_variant(variant);
        params.check(&spec)?;
        Ok(TrainState {
            variant,
            adam_m: params.zeros_like(),
            adam_v: params.zeros_like(),
            spec,
            params,
            step: 0,
            seed: 0,
            eta: T::narrow(eta),
        })
    }

    /// Largest magnitude real weights may take.
    pub fn clip_limit(&self) -> Option<T> {
        match self.variant.weight_constraint() {
            WeightConstraint::None => None,
            WeightConstraint::Binary => Some(T::one()),
            WeightConstraint::KOnes(_) => {
                self.variant.codebook().and_then(|s| Codebook::new(s).ok()).map(|cb| T::narrow(cb.max_magnitude()))
            }
        }
    }
}

/// Projects the real weights for the forward pass (step 1 of every batch).
pub fn constrain_weights<T: Scalar, R: Rng + ?Sized>(
    params: &Parameters<T>,
    variant: ModelVariant,
    rounding: RoundingMode,
    rng: &mut R,
) -> Result<Parameters<T>> {
    Ok(match variant.weight_constraint() {
        WeightConstraint::None => params.clone(),
        WeightConstraint::Binary => params.map_weights(|w| if w >= T::zero() { T::one() } else { -T::one() }),
        WeightConstraint::KOnes(_) => {
            let spec = variant.codebook().ok_or_else(|| Error::InvalidCodebook(format!("{variant} has no codebook")))?;
            let cb = Codebook::new(spec)?;
            let values: Vec<T> = cb.values().iter().map(|&v| T::narrow(v)).collect();
            for (role, s) in params.trainable() {
                if role == ParamRole::Weight && !s.iter().all(|w| w.is_finite()) {
                    return Err(Error::NonFinite(f64::NAN));
                }
            }
            match rounding {
                RoundingMode::Nearest => params.map_weights(|w| values[cb.nearest_index(w.widen())]),
                RoundingMode::Stochastic => {
                    params.map_weights(|w| values[cb.stochastic_index(w.widen(), rng.gen::<f64>())])
                }
            }
        }
    })
}

/// Nearest-rounded real weights, as used for validation, test and export.
pub fn finalized_parameters<T: Scalar>(state: &TrainState<T>) -> Result<Parameters<T>> {
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    constrain_weights(&state.params, state.variant, RoundingMode::Nearest, &mut rng)
}

/// Final projection onto the codebook; biases and batch norm stay real.
pub fn finalize<T: Scalar>(state: &TrainState<T>) -> Result<QuantizedModel<T>> {
    QuantizedModel::from_parameters(&state.spec, &state.params, state.variant)
}

/// One minibatch: constrain, forward, backward, update the real weights.
/// Returns the batch loss.
pub fn train_minibatch<T: Scalar, R: Rng + ?Sized>(
    state: &mut TrainState<T>,
    inputs: &crate::tensor::Tensor<T>,
    labels: &[usize],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<T> {
    let constrained = constrain_weights(&state.params, state.variant, config.rounding, rng)?;
    let trace = forward(&state.spec, &constrained, inputs, Mode::Train, rng)?;
    let (loss, dscores) = hinge_loss(trace.scores(), labels)?;
    // hinge clamps can hide NaN scores, so check them as well
    if !loss.is_finite() || trace.scores().data().iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFiniteLoss { step: state.step + 1, loss: loss.widen() });
    }
    let grads = backward(&state.spec, &constrained, &trace, &dscores)?;

    state.step += 1;
    let eta = state.eta;
    let clip = state.clip_limit();
    let adam = match config.optimizer {
        OptimizerKind::Adam => Some(AdamStep::new(&config.adam, state.step, eta)?),
        OptimizerKind::Sgd => None,
    };
    let slices = state
        .params
        .trainable_mut()
        .into_iter()
        .zip(state.adam_m.trainable_mut())
        .zip(state.adam_v.trainable_mut())
        .zip(grads.trainable());
    for ((((role, w), (_, m)), (_, v)), (_, g)) in slices {
        for i in 0..w.len() {
            let delta = match &adam {
                Some(step) => step.delta(&mut m[i], &mut v[i], g[i]),
                None => -(eta * g[i]),
            };
            w[i] += delta;
            if let (ParamRole::Weight, Some(limit)) = (role, clip) {
                w[i] = w[i].max(-limit).min(limit);
            }
        }
    }
    trace.update_running_stats(&mut state.params);
    Ok(loss)
}

/// Fraction of misclassified items, evaluated in fixed-size chunks.
pub fn error_rate<T: Scalar>(spec: &NetworkSpec, params: &Parameters<T>, data: &Dataset<T>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    const CHUNK: usize = 1000;
    let mut wrong = 0usize;
    for start in (0..data.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(data.len());
        let scores = predict(spec, params, &data.inputs.slice_rows(start, end)?)?;
        wrong += argmax_rows(&scores).iter().zip(&data.labels[start..end]).filter(|(p, l)| p != l).count();
    }
    Ok(wrong as f64 / data.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// One-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_err: f64,
    pub test_err: f64,
}

/// Index of the lowest validation error; the earliest wins ties.
pub fn select_best_epoch(metrics: &[EpochMetrics]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, m) in metrics.iter().enumerate() {
        if best.is_none_or(|b| m.val_err < metrics[b].val_err) {
            best = Some(i);
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct TrainingOutcome<T> {
    /// State after the selected epoch.
    pub best: TrainState<T>,
    pub best_epoch: usize,
    pub metrics: Vec<EpochMetrics>,
}

impl<T> TrainingOutcome<T> {
    pub fn best_metrics(&self) -> &EpochMetrics {
        &self.metrics[self.best_epoch - 1]
    }
}

pub fn run_training<T: Scalar>(
    splits: &Splits<T>,
    spec: &NetworkSpec,
    variant: ModelVariant,
    config: &TrainConfig,
) -> Result<TrainingOutcome<T>> {
    run_training_with(splits, spec, variant, config, |_| {})
}

/// [`run_training`] with a callback after every epoch.
pub fn run_training_with<T: Scalar>(
    splits: &Splits<T>,
    spec: &NetworkSpec,
    variant: ModelVariant,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainingOutcome<T>> {
    config.validate()?;
    splits.check_nonempty()?;
    spec.validate()?;
    if splits.train.sample_shape() != spec.input_shape.as_slice() {
        return Err(Error::Shape(format!(
            "data samples {:?} do not match network input {:?}",
            splits.train.sample_shape(),
            spec.input_shape
        )));
    }
    let classes = spec.classes()?;
    if splits.train.classes > classes {
        return Err(Error::Shape(format!("{} classes in data, {classes} network outputs", splits.train.classes)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = TrainState::init(spec, variant, config.seed, config.schedule.eta(0), &mut rng)?;
    let mut order: Vec<usize> = (0..splits.train.len()).collect();
    let mut metrics: Vec<EpochMetrics> = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, TrainState<T>)> = None;

    for epoch in 0..config.epochs {
        state.eta = T::narrow(config.schedule.eta(epoch));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let x = splits.train.inputs.gather_rows(chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| splits.train.labels[i]).collect();
            loss_sum += train_minibatch(&mut state, &x, &labels, config, &mut rng)?.widen();
            batches += 1;
        }
        let finalized = finalized_parameters(&state)?;
        let m = EpochMetrics {
            epoch: epoch + 1,
            train_loss: loss_sum / batches as f64,
            val_err: error_rate(&state.spec, &finalized, &splits.val)?,
            test_err: error_rate(&state.spec, &finalized, &splits.test)?,
        };
        on_epoch(&m);
        if best.as_ref().is_none_or(|(b, _)| m.val_err < metrics[*b].val_err) {
            best = Some((metrics.len(), state.clone()));
        }
        metrics.push(m);
    }
    let (idx, best) = best.expect("at least one epoch");
    Ok(TrainingOutcome { best, best_epoch: idx + 1, metrics })
}

pub fn write_metrics_csv<W: Write>(out: W, metrics: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for m in metrics {
        w.serialize(m)?;
    }
    w.flush().map_err(|e| Error::io("metrics", e))?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(input: R) -> Result<Vec<EpochMetrics>> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Versioned training checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar + serde::de::DeserializeOwned"))]
pub struct Checkpoint<T> {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub config_digest: String,
    pub epoch: usize,
    pub state: TrainState<T>,
}

impl<T: Scalar + Serialize + serde::de::DeserializeOwned> Checkpoint<T> {
    pub fn new(config: &TrainConfig, epoch: usize, state: TrainState<T>) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_digest: config.digest(),
            config: config.clone(),
            epoch,
            state,
        }
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let ckpt: Checkpoint<T> = serde_json::from_slice(bytes)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::format(0, format!("unsupported checkpoint {} v{}", ckpt.format, ckpt.version)));
        }
        if ckpt.config.digest() != ckpt.config_digest {
            return Err(Error::format(0, "checkpoint config digest mismatch"));
        }
        ckpt.state.params.check(&ckpt.state.spec)?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests;
