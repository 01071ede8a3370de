//! Losses, optimizers, and the training/evaluation loops over unrolled
//! networks. Training is noise-free; Gaussian noise is an evaluation-time
//! transform. The loss is always computed on the final pass's output.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activation::GateRecord;
use crate::autograd::{GradMap, ParamStore};
use crate::data::{Dataset, NoiseSpec};
use crate::error::{Error, Result};
use crate::network::{shared_dropout_masks, Network, ReconLoss, Target, UnrollCtx};
use crate::tensor::Tensor;
use crate::Real;

/// Independent deterministic RNG streams derived from one seed.
#[derive(Debug, Clone, Copy)]
pub enum RngStream {
    Init = 0,
    Shuffle = 1,
    Dropout = 2,
    EvalNoise = 3,
}

pub fn rng_stream(seed: u64, stream: RngStream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// 64-bit FNV-1a, used for config and data content hashes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    Bce,
    SoftmaxCrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: Real,
    pub adam_beta1: Real,
    pub adam_beta2: Real,
    pub adam_eps: Real,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_batches: Option<usize>,
    pub seed: u64,
    pub loss: LossKind,
    pub eval_every: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_noise: Option<NoiseSpec>,
    /// Recorded precision mode; rejected when it disagrees with the build.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 64,
            epochs: 10,
            max_batches: None,
            seed: 0,
            loss: LossKind::Bce,
            eval_every: 100,
            eval_noise: None,
            precision: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Parameter(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::Parameter("batch size must be ≥ 1".into()));
        }
        if self.eval_every < 1 {
            return Err(Error::Parameter("eval cadence must be ≥ 1".into()));
        }
        if let Some(p) = &self.precision {
            if p != crate::precision_name() {
                return Err(Error::Parameter(format!(
                    "config requests {p} precision but this build is {}",
                    crate::precision_name()
                )));
            }
        }
        Ok(())
    }
}

// ---- losses on plain tensors ----

/// Mean squared error.
pub fn mse(prediction: &Tensor, target: &Tensor) -> Result<Real> {
    if prediction.shape() != target.shape() {
        return Err(Error::dim(format!(
            "mse: prediction {:?} and target {:?} differ",
            prediction.shape(),
            target.shape()
        )));
    }
    let n = prediction.len() as Real;
    Ok(prediction
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<Real>()
        / n)
}

/// Mean binary cross-entropy; predictions must lie in `[0, 1]`.
pub fn bce(prediction: &Tensor, target: &Tensor) -> Result<Real> {
    if prediction.shape() != target.shape() {
        return Err(Error::dim(format!(
            "bce: prediction {:?} and target {:?} differ",
            prediction.shape(),
            target.shape()
        )));
    }
    if prediction.data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(Error::Domain("bce: prediction values must lie in [0, 1]".into()));
    }
    let eps: Real = 1e-12;
    let n = prediction.len() as Real;
    Ok(prediction
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let pc = p.clamp(eps, 1.0 - eps);
            -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln())
        })
        .sum::<Real>()
        / n)
}

/// `−log p[true class]`, batch-averaged, over `[B,K]` probabilities.
pub fn softmax_cross_entropy(probabilities: &Tensor, labels: &[u8]) -> Result<Real> {
    if probabilities.rank() != 2 || probabilities.shape()[0] != labels.len() {
        return Err(Error::dim(format!(
            "cross_entropy: probabilities {:?} vs {} labels",
            probabilities.shape(),
            labels.len()
        )));
    }
    let classes = probabilities.shape()[1];
    let mut total = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        let p = probabilities.data()[b * classes + label as usize];
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Domain("cross_entropy: probabilities must lie in [0, 1]".into()));
        }
        total -= p.max(1e-12).ln();
    }
    Ok(total / labels.len() as Real)
}

// ---- optimizer ----

#[derive(Debug, Default)]
pub struct OptState {
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
    step: u64,
}

impl OptState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One optimizer update over every trainable parameter that received a
/// gradient. Non-finite gradients abort with a diagnostic naming the
/// parameter.
pub fn optimizer_step(
    store: &mut ParamStore,
    grads: &GradMap,
    config: &TrainConfig,
    state: &mut OptState,
) -> Result<()> {
    if state.m.len() < store.len() {
        state.m.resize(store.len(), None);
        state.v.resize(store.len(), None);
    }
    state.step += 1;
    for id in store.trainable_ids() {
        let Some(grad) = &grads[id.index()] else { continue };
        if !grad.all_finite() {
            return Err(Error::Diverged(format!(
                "non-finite gradient for parameter `{}`",
                store.name(id)
            )));
        }
        match config.optimizer {
            OptimizerKind::Sgd => {
                let w = store.get_mut(id);
                for (w, &g) in w.data_mut().iter_mut().zip(grad.data()) {
                    *w -= config.learning_rate * g;
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (config.adam_beta1, config.adam_beta2, config.adam_eps);
                let m = state.m[id.index()].get_or_insert_with(|| Tensor::zeros(grad.shape()));
                let v = state.v[id.index()].get_or_insert_with(|| Tensor::zeros(grad.shape()));
                let bias1 = 1.0 - b1.powi(state.step as i32);
                let bias2 = 1.0 - b2.powi(state.step as i32);
                let w = store.get_mut(id);
                for i in 0..grad.len() {
                    let g = grad.data()[i];
                    let mi = b1 * m.data()[i] + (1.0 - b1) * g;
                    let vi = b2 * v.data()[i] + (1.0 - b2) * g * g;
                    m.data_mut()[i] = mi;
                    v.data_mut()[i] = vi;
                    let m_hat = mi / bias1;
                    let v_hat = vi / bias2;
                    w.data_mut()[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

// ---- run records ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub train_loss: Real,
    pub test_loss: Real,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_accuracy: Option<Real>,
}

/// Per-run training trace: one row per evaluation point plus identifying
/// metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub points: Vec<EvalPoint>,
    pub steps: usize,
    pub seed: u64,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diverged: Option<String>,
}

impl RunRecord {
    pub fn final_test_loss(&self) -> Option<Real> {
        self.points.last().map(|p| p.test_loss)
    }

    pub fn final_accuracy(&self) -> Option<Real> {
        self.points.last().and_then(|p| p.test_accuracy)
    }

    /// `step,train_loss,test_loss[,test_accuracy]` rows.
    pub fn write_curves_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        let with_acc = self.points.iter().any(|p| p.test_accuracy.is_some());
        if with_acc {
            writeln!(w, "step,train_loss,test_loss,test_accuracy")?;
        } else {
            writeln!(w, "step,train_loss,test_loss")?;
        }
        for p in &self.points {
            if with_acc {
                writeln!(
                    w,
                    "{},{},{},{}",
                    p.step,
                    p.train_loss,
                    p.test_loss,
                    p.test_accuracy.unwrap_or(Real::NAN)
                )?;
            } else {
                writeln!(w, "{},{},{}", p.step, p.train_loss, p.test_loss)?;
            }
        }
        Ok(())
    }
}

fn batch_target(loss: LossKind, input: &Tensor, labels: &[u8]) -> Target {
    match loss {
        LossKind::Mse => Target::Reconstruction { target: input.clone(), loss: ReconLoss::Mse },
        LossKind::Bce => Target::Reconstruction { target: input.clone(), loss: ReconLoss::Bce },
        LossKind::SoftmaxCrossEntropy => Target::Labels(labels.to_vec()),
    }
}

/// Result of [`evaluate`].
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub loss: Real,
    pub accuracy: Option<Real>,
    pub gates: Option<GateRecord>,
}

const EVAL_BATCH: usize = 250;

/// Forward-only pass over a dataset: mean loss, accuracy for classifiers,
/// and optionally the recorded (μ_D, gain) pairs of every gated unit on
/// every instance.
///
/// When `noise` is set, zero-mean Gaussian noise is added to every hidden
/// layer's pre-activations in every pass; the loss still compares against
/// the clean target. A fresh RNG is seeded from the spec, so two calls with
/// the same arguments are identical.
pub fn evaluate(
    net: &Network,
    data: &Dataset,
    loss: LossKind,
    noise: Option<&NoiseSpec>,
    collect_gates: bool,
) -> Result<EvalReport> {
    let mut noise_rng = noise.map(|ns| rng_stream(ns.seed, RngStream::EvalNoise));
    let mut total_loss = 0.0;
    let mut correct = 0usize;
    let mut gates = collect_gates.then(GateRecord::default);

    let n = data.len();
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_BATCH).min(n);
        let indices: Vec<usize> = (start..end).collect();
        let input = data.gather(&indices);
        let labels = &data.labels[start..end];
        let target = batch_target(loss, &input, labels);
        let mut ctx = UnrollCtx {
            input,
            target,
            train: false,
            dropout_masks: None,
            noise: match (&noise, &mut noise_rng) {
                (Some(ns), Some(rng)) => Some((ns.sigma, rng)),
                _ => None,
            },
            layer_override: None,
        };
        let mut unrolled = net.unroll(&mut ctx)?;
        let batch_loss = unrolled.tape.forward(&net.params)?.item()?;
        total_loss += batch_loss * (end - start) as Real;

        if loss == LossKind::SoftmaxCrossEntropy {
            let logits = unrolled.tape.value(*unrolled.pass_outputs.last().expect("pass"))?;
            let classes = logits.shape()[1];
            for (b, &label) in labels.iter().enumerate() {
                let row = &logits.data()[b * classes..(b + 1) * classes];
                let argmax = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                    .map(|(i, _)| i)
                    .expect("nonempty row");
                if argmax == label as usize {
                    correct += 1;
                }
            }
        }

        if let Some(rec) = gates.as_mut() {
            for tap in &unrolled.gate_taps {
                let mu = unrolled.tape.value(tap.mu_d)?;
                let units = mu.shape()[1];
                for (i, &v) in mu.data().iter().enumerate() {
                    rec.record(tap.layer, i % units, v, &net.spec.fg_params);
                }
            }
        }
        start = end;
    }

    Ok(EvalReport {
        loss: total_loss / n as Real,
        accuracy: (loss == LossKind::SoftmaxCrossEntropy).then(|| correct as Real / n as Real),
        gates,
    })
}

/// Shuffled-minibatch training over the unrolled network.
///
/// Evaluates on the test set every `eval_every` steps and once more at the
/// end; the `train_loss` column is the mean minibatch loss since the
/// previous evaluation point. On divergence the partial record is returned
/// with `diverged` set.
pub fn train(
    net: &mut Network,
    train_data: &Dataset,
    test_data: &Dataset,
    config: &TrainConfig,
) -> Result<RunRecord> {
    config.validate()?;
    let config_hash = {
        let spec_text = toml::to_string(&net.spec).unwrap_or_default();
        let cfg_text = toml::to_string(config).unwrap_or_default();
        format!("fnv1a64:{:016x}", fnv1a64(format!("{spec_text}\n{cfg_text}").as_bytes()))
    };

    let mut shuffle_rng = rng_stream(config.seed, RngStream::Shuffle);
    let mut dropout_rng = rng_stream(config.seed, RngStream::Dropout);
    let mut opt_state = OptState::new();
    let mut record = RunRecord {
        points: Vec::new(),
        steps: 0,
        seed: config.seed,
        config_hash,
        diverged: None,
    };

    // Initial evaluation; the train column holds the first batch's loss.
    let first_batch: Vec<usize> = (0..config.batch_size.min(train_data.len())).collect();
    let initial_train_loss = batch_eval_loss(net, train_data, &first_batch, config.loss)?;
    let test0 = evaluate(net, test_data, config.loss, None, false)?;
    record.points.push(EvalPoint {
        step: 0,
        train_loss: initial_train_loss,
        test_loss: test0.loss,
        test_accuracy: test0.accuracy,
    });

    let needs_masks = net.spec.dropout_rate > 0.0
        && net.spec.layers.iter().any(|l| matches!(l.kind, crate::network::LayerKind::Dropout));

    let mut since_eval: Vec<Real> = Vec::new();
    let mut steps = 0usize;
    'outer: for _epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(config.batch_size) {
            if let Some(max) = config.max_batches {
                if steps >= max {
                    break 'outer;
                }
            }
            let input = train_data.gather(chunk);
            let labels: Vec<u8> = chunk.iter().map(|&i| train_data.labels[i]).collect();
            let target = batch_target(config.loss, &input, &labels);
            let masks = if needs_masks {
                Some(shared_dropout_masks(&net.spec, chunk.len(), &mut dropout_rng)?)
            } else {
                None
            };
            let mut ctx = UnrollCtx {
                input,
                target,
                train: true,
                dropout_masks: masks.as_ref(),
                noise: None,
                layer_override: None,
            };
            let mut unrolled = net.unroll(&mut ctx)?;
            let loss_value = unrolled.tape.forward(&net.params)?.item()?;
            if !loss_value.is_finite() {
                record.diverged = Some(format!("non-finite training loss at step {steps}"));
                break 'outer;
            }
            let grads = unrolled.tape.backward(&net.params)?;
            if let Err(e) = optimizer_step(&mut net.params, &grads, config, &mut opt_state) {
                record.diverged = Some(e.to_string());
                break 'outer;
            }
            net.update_bn_running_stats(&unrolled);
            steps += 1;
            since_eval.push(loss_value);

            if steps % config.eval_every == 0 {
                push_eval_point(net, test_data, config, steps, &mut since_eval, &mut record)?;
            }
        }
    }

    record.steps = steps;
    if record.diverged.is_none() && record.points.last().map(|p| p.step) != Some(steps) {
        push_eval_point(net, test_data, config, steps, &mut since_eval, &mut record)?;
    }
    Ok(record)
}

fn push_eval_point(
    net: &Network,
    test_data: &Dataset,
    config: &TrainConfig,
    steps: usize,
    since_eval: &mut Vec<Real>,
    record: &mut RunRecord,
) -> Result<()> {
    let train_loss = if since_eval.is_empty() {
        record.points.last().map(|p| p.train_loss).unwrap_or(0.0)
    } else {
        since_eval.iter().sum::<Real>() / since_eval.len() as Real
    };
    since_eval.clear();
    let report = evaluate(net, test_data, config.loss, None, false)?;
    record.points.push(EvalPoint {
        step: steps,
        train_loss,
        test_loss: report.loss,
        test_accuracy: report.accuracy,
    });
    Ok(())
}

fn batch_eval_loss(net: &Network, data: &Dataset, indices: &[usize], loss: LossKind) -> Result<Real> {
    let input = data.gather(indices);
    let labels: Vec<u8> = indices.iter().map(|&i| data.labels[i]).collect();
    let target = batch_target(loss, &input, &labels);
    let mut ctx = UnrollCtx {
        input,
        target,
        train: false,
        dropout_masks: None,
        noise: None,
        layer_override: None,
    };
    let mut unrolled = net.unroll(&mut ctx)?;
    unrolled.tape.forward(&net.params)?.item()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::FgReluParams;
    use crate::data::synthetic_fixture;
    use crate::network::{ActivationKind, FeedbackEdge, LayerSpec, NetworkSpec};

    fn tiny_spec(edges: bool) -> NetworkSpec {
        let spec = NetworkSpec {
            input_shape: vec![16],
            layers: vec![
                LayerSpec::dense(8, ActivationKind::Relu),
                LayerSpec::dense(4, ActivationKind::Relu),
                LayerSpec::dense(8, ActivationKind::Relu),
                LayerSpec::dense(16, ActivationKind::Sigmoid),
            ],
            feedback_edges: vec![],
            timesteps: 1,
            fg_params: FgReluParams::default_mnist(),
            dropout_rate: 0.0,
            detach_feedback: false,
        };
        if edges {
            let mut spec = spec.with_edges(vec![FeedbackEdge { source: 2, target: 0 }]);
            spec.timesteps = 2;
            spec
        } else {
            spec
        }
    }

    fn make_net(edges: bool, seed: u64) -> Network {
        let mut rng = rng_stream(seed, RngStream::Init);
        Network::new(tiny_spec(edges), &mut rng).unwrap()
    }

    #[test]
    fn loss_hand_values() {
        let x = Tensor::from_vec(vec![0.3, 0.7, 0.1]);
        assert_eq!(mse(&x, &x).unwrap(), 0.0);

        let half = Tensor::filled(&[4], 0.5);
        let target = Tensor::from_vec(vec![1.0, 0.0, 1.0, 0.0]);
        assert!((bce(&half, &target).unwrap() - (2.0 as Real).ln()).abs() < 1e-12 as Real);

        let uniform = Tensor::filled(&[2, 10], 0.1);
        let ce = softmax_cross_entropy(&uniform, &[3, 9]).unwrap();
        assert!((ce - (10.0 as Real).ln()).abs() < 1e-9 as Real);
    }

    #[test]
    fn loss_error_contracts() {
        let a = Tensor::zeros(&[2]);
        let b = Tensor::zeros(&[3]);
        assert!(matches!(mse(&a, &b), Err(Error::Dimension(_))));
        let bad = Tensor::from_vec(vec![-0.2, 0.5]);
        assert!(matches!(bce(&bad, &a), Err(Error::Domain(_))));
    }

    #[test]
    fn sgd_hand_step() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(1.0), true);
        let grads = vec![Some(Tensor::scalar(0.5))];
        let config = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let mut state = OptState::new();
        optimizer_step(&mut store, &grads, &config, &mut state).unwrap();
        assert!((store.get(w).item().unwrap() - 0.95).abs() < 1e-12 as Real);

        // Zero gradient leaves parameters unchanged.
        let grads = vec![Some(Tensor::scalar(0.0))];
        optimizer_step(&mut store, &grads, &config, &mut state).unwrap();
        assert!((store.get(w).item().unwrap() - 0.95).abs() < 1e-12 as Real);
    }

    #[test]
    fn adam_first_step_magnitude() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(1.0), true);
        let grads = vec![Some(Tensor::scalar(1.0))];
        let config = TrainConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let mut state = OptState::new();
        optimizer_step(&mut store, &grads, &config, &mut state).unwrap();
        let delta = 1.0 - store.get(w).item().unwrap();
        // Bias correction makes the first update ≈ lr · g/|g|.
        assert!((delta - 1e-3).abs() < 1e-6 as Real, "delta {delta}");
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut store = ParamStore::new();
        store.add("good", Tensor::scalar(1.0), true);
        store.add("layer3.w", Tensor::scalar(1.0), true);
        let grads = vec![Some(Tensor::scalar(0.1)), Some(Tensor::scalar(Real::NAN))];
        let config = TrainConfig::default();
        let mut state = OptState::new();
        let err = optimizer_step(&mut store, &grads, &config, &mut state).unwrap_err();
        assert!(err.to_string().contains("layer3.w"), "got {err}");
    }

    #[test]
    fn zero_epochs_records_only_initial_point() {
        let data = synthetic_fixture(32, 16, 1).unwrap();
        let mut net = make_net(false, 5);
        let config = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let record = train(&mut net, &data, &data, &config).unwrap();
        assert_eq!(record.points.len(), 1);
        assert_eq!(record.points[0].step, 0);
        assert_eq!(record.steps, 0);
    }

    #[test]
    fn training_decreases_loss_and_is_deterministic() {
        let data = synthetic_fixture(64, 16, 2).unwrap();
        let config = TrainConfig {
            epochs: 30,
            batch_size: 16,
            eval_every: 40,
            seed: 9,
            ..TrainConfig::default()
        };

        let mut net = make_net(false, 9);
        let record = train(&mut net, &data, &data, &config).unwrap();
        assert!(record.diverged.is_none());
        let first = record.points.first().unwrap().test_loss;
        let last = record.final_test_loss().unwrap();
        assert!(last < first, "loss did not decrease: {first} → {last}");

        let mut net2 = make_net(false, 9);
        let record2 = train(&mut net2, &data, &data, &config).unwrap();
        assert_eq!(record, record2);
    }

    #[test]
    fn zero_init_edges_share_initial_loss_with_twin() {
        let data = synthetic_fixture(32, 16, 3).unwrap();
        let config = TrainConfig { epochs: 0, ..TrainConfig::default() };

        let mut with_edges = make_net(true, 11);
        let mut twin = make_net(false, 11);
        let a = train(&mut with_edges, &data, &data, &config).unwrap();
        let b = train(&mut twin, &data, &data, &config).unwrap();
        assert_eq!(a.points[0].test_loss, b.points[0].test_loss);
    }

    #[test]
    fn single_step_descends_on_one_sample() {
        let data = synthetic_fixture(1, 16, 4).unwrap();
        let config = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.05,
            epochs: 1,
            batch_size: 1,
            seed: 2,
            ..TrainConfig::default()
        };
        let mut net = make_net(false, 2);
        let record = train(&mut net, &data, &data, &config).unwrap();
        let first = record.points.first().unwrap().test_loss;
        let last = record.final_test_loss().unwrap();
        assert!(last < first, "one sgd step should descend: {first} → {last}");
    }

    #[test]
    fn evaluate_is_pure_and_noise_zero_matches_clean() {
        let data = synthetic_fixture(32, 16, 6).unwrap();
        let net = make_net(true, 7);
        let clean = evaluate(&net, &data, LossKind::Bce, None, false).unwrap();
        let clean2 = evaluate(&net, &data, LossKind::Bce, None, false).unwrap();
        assert_eq!(clean.loss, clean2.loss);

        let zero_noise = NoiseSpec::new(0.0, 1).unwrap();
        let z = evaluate(&net, &data, LossKind::Bce, Some(&zero_noise), false).unwrap();
        assert_eq!(z.loss, clean.loss);

        let noisy = NoiseSpec::new(1.0, 1).unwrap();
        let n1 = evaluate(&net, &data, LossKind::Bce, Some(&noisy), false).unwrap();
        let n2 = evaluate(&net, &data, LossKind::Bce, Some(&noisy), false).unwrap();
        assert_eq!(n1.loss, n2.loss);
        assert_ne!(n1.loss, clean.loss);
    }

    #[test]
    fn gate_collection_zero_edges_all_unit_gain() {
        let data = synthetic_fixture(10, 16, 8).unwrap();
        let net = make_net(true, 13);
        let report = evaluate(&net, &data, LossKind::Bce, None, true).unwrap();
        let gates = report.gates.unwrap();
        // One tap on layer 0 at pass 2: 10 instances × 8 units.
        assert_eq!(gates.len(), 10 * 8);
        assert!(gates.entries.iter().all(|e| e.gain == 1.0 && e.mu_d == 0.0));
    }

    #[test]
    fn curves_csv_format() {
        let record = RunRecord {
            points: vec![
                EvalPoint { step: 0, train_loss: 0.5, test_loss: 0.6, test_accuracy: None },
                EvalPoint { step: 100, train_loss: 0.4, test_loss: 0.45, test_accuracy: None },
            ],
            steps: 100,
            seed: 1,
            config_hash: "fnv1a64:0".into(),
            diverged: None,
        };
        let mut buf = Vec::new();
        record.write_curves_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,train_loss,test_loss\n"));
        assert_eq!(text.lines().count(), 3);
    }
}
