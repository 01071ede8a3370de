//! Acceptance suite: one test per criterion, each printing a pass/fail line.
//!
//! The training-based criteria share one desk-scale protocol: 5000/1000
//! instances, 10 epochs, batch 64, adam 1e-3, bce reconstruction loss,
//! activation hyperparameters (β_max, η) = (0.95, 5), three replicate
//! seeds. Real MNIST/CIFAR files are used when `FG_MNIST_DIR`/
//! `FG_CIFAR_DIR` (or `data/mnist`, `data/cifar`) provide them; otherwise
//! the deterministic synthetic fixtures stand in.

use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use fgrelu::activation::{
    apply_gain_override, beta, fg_relu, fg_relu_grads, fg_relu_threshold, gain, FgReluParams,
    GainValue,
};
use fgrelu::autograd::{finite_diff_check_entries, ParamStore};
use fgrelu::data::{self, Dataset, NoiseSpec};
use fgrelu::experiment::{self, DeskScale, ExperimentConfig, SweepAxes};
use fgrelu::network::{
    comprehensive_edges, ActivationKind, FeedbackEdge, LayerSpec, Network, NetworkSpec,
};
use fgrelu::tensor::Tensor;
use fgrelu::train::{evaluate, rng_stream, train, LossKind, OptimizerKind, RngStream, RunRecord, TrainConfig};
use fgrelu::Real;

const REPLICATE_SEEDS: [u64; 3] = [11, 12, 13];
const GRAD_TOL: Real = if cfg!(feature = "single") { 1e-3 } else { 1e-6 };

fn pass(criterion: &str, details: &str) {
    println!("[PASS] criterion {criterion}: {details}");
}

struct Checked {
    criterion: &'static str,
    start: Instant,
}

impl Checked {
    fn begin(criterion: &'static str) -> Self {
        Checked { criterion, start: Instant::now() }
    }

    fn finish(self, runtime_bound_secs: Option<u64>, details: &str) {
        let elapsed = self.start.elapsed().as_secs_f64();
        if let Some(bound) = runtime_bound_secs {
            assert!(
                elapsed < bound as f64,
                "[FAIL] criterion {}: runtime {elapsed:.1}s exceeded {bound}s",
                self.criterion
            );
        }
        pass(self.criterion, &format!("{details} ({elapsed:.1}s)"));
    }
}

// ---- shared desk-scale protocol ----

fn mnist_dir() -> Option<PathBuf> {
    let candidates = [
        std::env::var("FG_MNIST_DIR").ok().map(PathBuf::from),
        Some(PathBuf::from("data/mnist")),
        Some(PathBuf::from("../../data/mnist")),
    ];
    candidates
        .into_iter()
        .flatten()
        .find(|d| d.join("train-images-idx3-ubyte").exists())
}

fn cifar_dir() -> Option<PathBuf> {
    let candidates = [
        std::env::var("FG_CIFAR_DIR").ok().map(PathBuf::from),
        Some(PathBuf::from("data/cifar")),
        Some(PathBuf::from("../../data/cifar")),
    ];
    candidates
        .into_iter()
        .flatten()
        .find(|d| d.join("data_batch_1.bin").exists())
}

struct Protocol {
    train_data: Dataset,
    test_data: Dataset,
    fg_params: FgReluParams,
    source: String,
}

fn protocol() -> &'static Protocol {
    static CELL: OnceLock<Protocol> = OnceLock::new();
    CELL.get_or_init(|| match mnist_dir() {
        Some(dir) => {
            let (train, test) = data::load_mnist(&dir).expect("readable MNIST files");
            Protocol {
                train_data: train.take(5000),
                test_data: test.take(1000),
                fg_params: FgReluParams::new(0.95, 5.0).unwrap(),
                source: format!("mnist:{}", dir.display()),
            }
        }
        None => Protocol {
            train_data: data::synthetic_fixture(5000, 784, 0x460f).unwrap(),
            test_data: data::synthetic_fixture(1000, 784, 0x4610).unwrap(),
            fg_params: FgReluParams::new(0.95, 5.0).unwrap(),
            source: "fixture:dim=784,n=5000/1000".into(),
        },
    })
}

fn desk_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        optimizer: OptimizerKind::Adam,
        learning_rate: 1e-3,
        batch_size: 64,
        epochs: 10,
        seed,
        loss: LossKind::Bce,
        eval_every: 100,
        ..TrainConfig::default()
    }
}

fn ae_spec(bottleneck: usize, p: &Protocol) -> NetworkSpec {
    NetworkSpec {
        input_shape: vec![784],
        layers: vec![
            LayerSpec::dense(392, ActivationKind::Relu),
            LayerSpec::dense(bottleneck, ActivationKind::Relu),
            LayerSpec::dense(392, ActivationKind::Relu),
            LayerSpec::dense(784, ActivationKind::Sigmoid),
        ],
        feedback_edges: vec![],
        timesteps: 1,
        fg_params: p.fg_params.clone(),
        dropout_rate: 0.0,
        detach_feedback: false,
    }
}

fn partial_spec(p: &Protocol) -> NetworkSpec {
    let mut spec = ae_spec(10, p).with_edges(vec![FeedbackEdge { source: 2, target: 0 }]);
    spec.timesteps = 2;
    spec
}

fn comprehensive_spec(p: &Protocol) -> NetworkSpec {
    let base = ae_spec(10, p);
    let edges = comprehensive_edges(&base.layers);
    let mut spec = base.with_edges(edges);
    spec.timesteps = 2;
    spec
}

fn train_replicates(spec: &NetworkSpec, p: &Protocol) -> Vec<(Network, RunRecord)> {
    REPLICATE_SEEDS
        .iter()
        .map(|&seed| {
            let mut net = Network::new(spec.clone(), &mut rng_stream(seed, RngStream::Init))
                .expect("valid spec");
            let record = train(&mut net, &p.train_data, &p.test_data, &desk_train_config(seed))
                .expect("training runs");
            assert!(record.diverged.is_none(), "training diverged: {:?}", record.diverged);
            (net, record)
        })
        .collect()
}

fn mean_final(runs: &[(Network, RunRecord)]) -> Real {
    let finals: Vec<Real> = runs.iter().map(|(_, r)| r.final_test_loss().unwrap()).collect();
    finals.iter().sum::<Real>() / finals.len() as Real
}

/// Trained models of the shared protocol, reused by criteria 5–10 and 14.
struct TrainedModels {
    baseline: Vec<(Network, RunRecord)>,
    partial: Vec<(Network, RunRecord)>,
    comprehensive: Vec<(Network, RunRecord)>,
}

fn trained() -> &'static TrainedModels {
    static CELL: OnceLock<TrainedModels> = OnceLock::new();
    CELL.get_or_init(|| {
        let p = protocol();
        let baseline = train_replicates(&ae_spec(10, p), p);
        let partial = train_replicates(&partial_spec(p), p);
        let comprehensive = train_replicates(&comprehensive_spec(p), p);
        TrainedModels { baseline, partial, comprehensive }
    })
}

// ---- criteria ----

#[test]
fn criterion_01_closed_form_activation_suite() {
    let c = Checked::begin("1");
    let tol: Real = 1e-12;
    let p = FgReluParams::new(0.95, 5.0).unwrap();

    // β examples.
    assert!((beta(0.0, &p) - 0.0).abs() <= tol);
    assert!((beta(2.5, &p) - 0.475).abs() <= tol);
    assert!((beta(10.0, &p) - 0.95).abs() <= tol);

    // gain examples.
    assert!((gain(0.0, &p) - 1.0).abs() <= tol);
    assert!((gain(2.5, &p) - 1.0 / 0.525).abs() <= tol);
    assert!((gain(10.0, &p) - 20.0).abs() <= tol * 20.0);

    // fg_relu examples.
    assert!((fg_relu(3.0, 0.0, &p) - 3.0).abs() <= tol);
    assert!((fg_relu(-1.0, 10.0, &p) - 0.0).abs() <= tol);
    assert!((fg_relu(2.0, 10.0, &p) - 40.0).abs() <= tol * 40.0);

    // Threshold variant examples.
    let pt = FgReluParams::new(0.95, 5.0).unwrap().with_alpha(0.1);
    assert!((fg_relu_threshold(1.0, 10.0, &pt).unwrap() - 40.0).abs() <= tol * 40.0);
    let pt005 = FgReluParams::new(0.95, 5.0).unwrap().with_alpha(0.05);
    assert!((fg_relu_threshold(-1.0, 10.0, &pt005).unwrap() - 0.0).abs() <= tol);
    let pt0 = FgReluParams::new(0.95, 5.0).unwrap().with_alpha(0.0);
    for &(s, d) in &[(3.0, 0.0), (-1.0, 10.0), (2.0, 10.0), (0.5, -4.0), (2.0, 2.5)] {
        assert!((fg_relu_threshold(s, d, &pt0).unwrap() - fg_relu(s, d, &p)).abs() <= tol);
    }

    // Gradient examples.
    let g = fg_relu_grads(2.0, 2.5, &p);
    let gv = 1.0 / 0.525;
    assert!((g.d_mu_s - gv).abs() <= 1e-12 * gv);
    assert!((g.d_mu_d - 2.0 * (0.95 / 5.0) * gv * gv).abs() <= 1e-11);
    let dead = fg_relu_grads(-3.0, 1.0, &p);
    assert!(dead.d_mu_s == 0.0 && dead.d_mu_d == 0.0);
    let sat = fg_relu_grads(2.0, 50.0, &p);
    assert!((sat.d_mu_s - 20.0).abs() <= 1e-11 && sat.d_mu_d == 0.0);

    // Override examples.
    let x = Tensor::from_vec(vec![2.0, -1.0]);
    let out = apply_gain_override(&x, &GainValue::Constant(10.0)).unwrap();
    assert!((out.data()[0] - 20.0).abs() <= tol && out.data()[1] == 0.0);
    let plain = apply_gain_override(&x, &GainValue::Constant(1.0)).unwrap();
    assert_eq!(plain.data(), &[2.0, 0.0]);
    let per_unit: Vec<Real> = (0..11).map(|i| i as Real).collect();
    let ones = Tensor::ones(&[11]);
    let scaled = apply_gain_override(&ones, &GainValue::PerUnit(per_unit.clone())).unwrap();
    assert_eq!(scaled.data(), per_unit.as_slice());

    c.finish(Some(1), "closed-form activation examples match to 1e-12");
}

#[test]
fn criterion_02_gradient_oracle_unrolled_net() {
    let c = Checked::begin("2");
    // 784→32→10→32→784 with one feedback edge, two timesteps.
    let spec = {
        let mut s = NetworkSpec {
            input_shape: vec![784],
            layers: vec![
                LayerSpec::dense(32, ActivationKind::Relu),
                LayerSpec::dense(10, ActivationKind::Relu),
                LayerSpec::dense(32, ActivationKind::Relu),
                LayerSpec::dense(784, ActivationKind::Sigmoid),
            ],
            feedback_edges: vec![],
            timesteps: 1,
            fg_params: FgReluParams::new(0.95, 5.0).unwrap(),
            dropout_rate: 0.0,
            detach_feedback: false,
        }
        .with_edges(vec![FeedbackEdge { source: 2, target: 0 }]);
        s.timesteps = 2;
        s
    };
    let mut net = Network::new(spec, &mut rng_stream(5, RngStream::Init)).unwrap();
    // Nonzero feedback weights so the gate branch is exercised.
    let edge = net.edge_param_ids()[0];
    {
        let w = net.params.get_mut(edge);
        let len = w.len();
        for (i, v) in w.data_mut().iter_mut().enumerate() {
            *v = ((i * 37 % 19) as Real - 9.0) / (len as Real).sqrt() * 0.4;
        }
    }

    let input = {
        let mut rng = rng_stream(17, RngStream::Init);
        let mut t = Tensor::zeros(&[2, 784]);
        use rand::Rng;
        for v in t.data_mut().iter_mut() {
            *v = rng.random::<f64>() as Real;
        }
        t
    };
    let mut ctx = fgrelu::network::UnrollCtx {
        input: input.clone(),
        target: fgrelu::network::Target::Reconstruction {
            target: input,
            loss: fgrelu::network::ReconLoss::Mse,
        },
        train: true,
        dropout_masks: None,
        noise: None,
        layer_override: None,
    };
    let unrolled = net.unroll(&mut ctx).unwrap();
    let mut tape = unrolled.tape;

    // 100 random parameter coordinates across all trainable tensors.
    let mut store: ParamStore = net.params.clone();
    let ids = store.trainable_ids();
    let mut coords = Vec::new();
    let mut rng = rng_stream(23, RngStream::Init);
    use rand::Rng;
    while coords.len() < 100 {
        let pid = ids[rng.random_range(0..ids.len())];
        let entry = rng.random_range(0..store.get(pid).len());
        coords.push((pid, entry));
    }

    let mut worst: Real = 0.0;
    for (pid, entry) in coords {
        let err = finite_diff_check_entries(&mut tape, &mut store, pid, &[entry], 1e-5).unwrap();
        worst = worst.max(err);
    }
    assert!(
        worst <= GRAD_TOL,
        "[FAIL] criterion 2: max relative gradient error {worst} exceeds {GRAD_TOL}"
    );
    c.finish(Some(60), &format!("max relative gradient error {worst:.3e} over 100 sampled coordinates"));
}

#[test]
fn criterion_03_zero_feedback_equivalence_bit_exact() {
    let c = Checked::begin("3");
    let p = protocol();
    let with_edges = Network::new(partial_spec(p), &mut rng_stream(21, RngStream::Init)).unwrap();
    let mut twin_spec = partial_spec(p).without_feedback();
    twin_spec.timesteps = 2;
    let twin = Network::new(twin_spec, &mut rng_stream(21, RngStream::Init)).unwrap();

    let fixture = data::synthetic_fixture(64, 784, 99).unwrap();
    let input = fixture.gather(&(0..64).collect::<Vec<_>>());

    let run = |net: &Network| -> Vec<Tensor> {
        let mut ctx = fgrelu::network::UnrollCtx {
            input: input.clone(),
            target: fgrelu::network::Target::None,
            train: false,
            dropout_masks: None,
            noise: None,
            layer_override: None,
        };
        let mut unrolled = net.unroll(&mut ctx).unwrap();
        unrolled.tape.forward(&net.params).unwrap();
        unrolled
            .pass_outputs
            .iter()
            .map(|&id| unrolled.tape.value(id).unwrap().clone())
            .collect()
    };
    let a = run(&with_edges);
    let b = run(&twin);
    assert_eq!(a.len(), b.len());
    for (pass, (x, y)) in a.iter().zip(&b).enumerate() {
        assert_eq!(x, y, "[FAIL] criterion 3: outputs differ at pass {pass}");
    }
    c.finish(Some(1), "zero-initialized edges reproduce the edge-free network bit-exactly at every pass");
}

#[test]
fn criterion_04_parameter_count_law_exact() {
    let c = Checked::begin("4");
    let p = protocol();

    // Independent count from the n×m rule over the preset's layer widths.
    let widths = [392usize, 10, 392, 784];
    let partial_expected = widths[0] * widths[2]; // E1 ← D1
    assert_eq!(partial_expected, 153_664);

    let partial = Network::new(partial_spec(p), &mut rng_stream(1, RngStream::Init)).unwrap();
    let twin = Network::new(ae_spec(10, p), &mut rng_stream(1, RngStream::Init)).unwrap();
    assert_eq!(
        partial.param_count() - twin.param_count(),
        partial_expected,
        "[FAIL] criterion 4: partial edge parameter delta"
    );

    // Comprehensive: Σ n×m over its six edges, enumerated independently.
    let mut comp_expected = 0usize;
    for target in 0..4 {
        for source in (target + 1)..4 {
            if target == 3 {
                continue;
            }
            comp_expected += widths[target] * widths[source];
        }
    }
    assert_eq!(comp_expected, 784_000);
    let comp = Network::new(comprehensive_spec(p), &mut rng_stream(1, RngStream::Init)).unwrap();
    assert_eq!(
        comp.param_count() - twin.param_count(),
        comp_expected,
        "[FAIL] criterion 4: comprehensive parameter delta"
    );
    c.finish(None, "feedback adds exactly 153664 (partial) and 784000 (comprehensive) parameters");
}

#[test]
fn criterion_05_partial_feedback_beats_baseline() {
    let c = Checked::begin("5");
    let models = trained();
    let fb = mean_final(&models.partial);
    let base = mean_final(&models.baseline);
    assert!(
        fb <= 0.95 * base,
        "[FAIL] criterion 5: mean final loss feedback {fb} vs baseline {base} (ratio {})",
        fb / base
    );
    c.finish(
        Some(900),
        &format!(
            "mean final test loss {fb:.5} (feedback) ≤ 0.95 × {base:.5} (baseline), ratio {:.3} on {}",
            fb / base,
            protocol().source
        ),
    );
}

#[test]
fn criterion_06_comprehensive_ordering() {
    let c = Checked::begin("6");
    let models = trained();
    let comp = mean_final(&models.comprehensive);
    let part = mean_final(&models.partial);
    let base = mean_final(&models.baseline);
    assert!(
        comp < base,
        "[FAIL] criterion 6: comprehensive {comp} not below baseline {base}"
    );
    assert!(
        part < base,
        "[FAIL] criterion 6: partial {part} not below baseline {base}"
    );
    let middle = if comp < part { "holds" } else { "within noise (reversed)" };
    c.finish(
        None,
        &format!("comprehensive {comp:.5} < baseline {base:.5}, partial {part:.5} < baseline; middle inequality {middle}"),
    );
}

#[test]
fn criterion_07_timestep_property() {
    let c = Checked::begin("7");
    let p = protocol();
    let models = trained();
    let loss_t1 = mean_final(&models.baseline);
    let loss_t2 = mean_final(&models.partial);

    let mut spec4 = partial_spec(p);
    spec4.timesteps = 4;
    let t4 = train_replicates(&spec4, p);
    let loss_t4 = mean_final(&t4);

    assert!(
        loss_t2 < loss_t1,
        "[FAIL] criterion 7: loss(t=2) {loss_t2} not below loss(t=1) {loss_t1}"
    );
    let gain_2v1 = loss_t1 - loss_t2;
    let drift_4v2 = (loss_t4 - loss_t2).abs();
    assert!(
        drift_4v2 < 0.5 * gain_2v1,
        "[FAIL] criterion 7: |loss(4)−loss(2)| = {drift_4v2} ≥ 0.5 × (loss(1)−loss(2)) = {}",
        0.5 * gain_2v1
    );
    c.finish(
        None,
        &format!("loss(t=1)={loss_t1:.5}, loss(t=2)={loss_t2:.5}, loss(t=4)={loss_t4:.5}; extra timesteps change little"),
    );
}

#[test]
fn criterion_08_gain_histogram_majority_at_max() {
    let c = Checked::begin("8");
    let p = protocol();
    let models = trained();
    // Collect gates over the full test split on every partial replicate.
    let mut top = 0usize;
    let mut total = 0usize;
    let max_gain = p.fg_params.max_gain();
    let bins = 50usize;
    let top_lo = max_gain * (bins as Real - 1.0) / bins as Real;
    for (net, _) in &models.partial {
        let report = evaluate(net, &p.test_data, LossKind::Bce, None, true).unwrap();
        let gates = report.gates.unwrap();
        for e in &gates.entries {
            assert!(e.gain > 0.0 && e.gain <= max_gain + 1e-9);
            total += 1;
            if e.gain >= top_lo {
                top += 1;
            }
        }
    }
    let fraction = top as Real / total as Real;
    assert!(
        fraction > 0.5,
        "[FAIL] criterion 8: top-bin gain fraction {fraction:.3} ≤ 0.5 over {total} records"
    );
    c.finish(
        None,
        &format!("{:.1}% of {total} recorded gains sit in the top bin containing the max gain {max_gain:.2}", fraction * 100.0),
    );
}

#[test]
fn criterion_09_constant_gain_properties() {
    let c = Checked::begin("9");
    let p = protocol();
    let models = trained();

    // (a) Constant gain 10 on the second encoding layer trains to a final
    // loss ≥ learned feedback.
    let gain_spec = {
        let mut s = ae_spec(10, p);
        s.layers[1].activation = ActivationKind::FgRelu;
        s.fg_params = s.fg_params.with_gain_override(GainValue::Constant(10.0));
        s
    };
    let gain_runs = train_replicates(&gain_spec, p);
    let gain_loss = mean_final(&gain_runs);
    let fb_loss = mean_final(&models.partial);
    assert!(
        gain_loss >= fb_loss,
        "[FAIL] criterion 9: constant-gain loss {gain_loss} below learned feedback {fb_loss}"
    );

    // (b) Override = 1 matches the baseline curve bit-exactly (shared seed,
    // short budget).
    let unit_spec = {
        let mut s = ae_spec(10, p);
        s.layers[1].activation = ActivationKind::FgRelu;
        s.fg_params = s.fg_params.with_gain_override(GainValue::Constant(1.0));
        s
    };
    let short = TrainConfig { epochs: 1, ..desk_train_config(77) };
    let mut unit_net = Network::new(unit_spec, &mut rng_stream(77, RngStream::Init)).unwrap();
    let unit_rec = train(&mut unit_net, &p.train_data, &p.test_data, &short).unwrap();
    let mut base_net = Network::new(ae_spec(10, p), &mut rng_stream(77, RngStream::Init)).unwrap();
    let base_rec = train(&mut base_net, &p.train_data, &p.test_data, &short).unwrap();
    assert_eq!(
        unit_rec.points, base_rec.points,
        "[FAIL] criterion 9: unit-gain override curve differs from baseline"
    );
    c.finish(
        None,
        &format!("constant gain 10 final loss {gain_loss:.5} ≥ learned feedback {fb_loss:.5}; unit override bit-matches baseline"),
    );
}

#[test]
fn criterion_10_noise_robustness_ordering() {
    let c = Checked::begin("10");
    let p = protocol();
    let models = trained();
    let sigma: Real = 2.0;
    let noisy_mean = |runs: &[(Network, RunRecord)]| -> Real {
        let mut losses = Vec::new();
        for (net, _) in runs {
            for k in 0..5u64 {
                let noise = NoiseSpec::new(sigma, 9000 + k).unwrap();
                losses.push(evaluate(net, &p.test_data, LossKind::Bce, Some(&noise), false).unwrap().loss);
            }
        }
        losses.iter().sum::<Real>() / losses.len() as Real
    };
    let fb = noisy_mean(&models.partial);
    let base = noisy_mean(&models.baseline);
    assert!(
        fb < base,
        "[FAIL] criterion 10: noisy-eval loss feedback {fb} not below baseline {base} at sigma {sigma}"
    );
    c.finish(
        None,
        &format!("σ=2.0 noisy evaluation: feedback {fb:.5} < baseline {base:.5} (5 noise seeds × {} models)", models.partial.len()),
    );
}

#[test]
fn criterion_11_loader_fidelity() {
    let c = Checked::begin("11");
    // IDX fixture round-trip, bit exact after 8-bit quantization.
    let ds = data::synthetic_fixture(24, 784, 5).unwrap();
    let quantized = Dataset {
        images: ds.images.map(|v| (v * 255.0).round() / 255.0),
        labels: ds.labels.clone(),
        split: ds.split,
    };
    let img_bytes = data::encode_idx_images(&quantized, 28, 28).unwrap();
    let lbl_bytes = data::encode_idx_labels(&quantized);
    assert_eq!(data::parse_idx_images(&img_bytes).unwrap(), quantized.images);
    assert_eq!(data::parse_idx_labels(&lbl_bytes).unwrap(), quantized.labels);

    // CIFAR fixture round-trip.
    let shaped = data::synthetic_fixture_shaped(6, 3, 32, 32, 8).unwrap();
    let quantized = Dataset {
        images: shaped.images.map(|v| (v * 255.0).round() / 255.0),
        labels: shaped.labels.clone(),
        split: shaped.split,
    };
    let bytes = data::encode_cifar_batch(&quantized).unwrap();
    let (images, labels) = data::parse_cifar_batch(&bytes).unwrap();
    assert_eq!(images, quantized.images);
    assert_eq!(labels, quantized.labels);

    // Full-file counts when the real datasets are present.
    let mut details = String::from("fixture round-trips bit-exact");
    match mnist_dir() {
        Some(dir) => {
            let (train, test) = data::load_mnist(&dir).unwrap();
            assert_eq!((train.len(), test.len()), (60_000, 10_000), "[FAIL] criterion 11: MNIST counts");
            details.push_str("; MNIST 60000/10000");
        }
        None => details.push_str("; real MNIST not supplied (count check skipped)"),
    }
    match cifar_dir() {
        Some(dir) => {
            let (train, test) = data::load_cifar10(&dir).unwrap();
            assert_eq!((train.len(), test.len()), (50_000, 10_000), "[FAIL] criterion 11: CIFAR counts");
            details.push_str("; CIFAR 50000/10000");
        }
        None => details.push_str("; real CIFAR not supplied (count check skipped)"),
    }
    c.finish(None, &details);
}

#[test]
fn criterion_12_rerun_determinism_byte_identical() {
    let c = Checked::begin("12");
    let scratch = std::env::temp_dir().join(format!("fg_accept_det_{}", std::process::id()));
    let make_config = |sub: &str| ExperimentConfig {
        kind: None,
        preset: Some("mnist_ae_10_partial".into()),
        network: None,
        out_dir: scratch.join(sub),
        replicates: 1,
        seed: 4,
        full_data: false,
        mnist_dir: mnist_dir(),
        cifar_dir: None,
        train: TrainConfig { epochs: 1, ..desk_train_config(4) },
        sweep: SweepAxes::default(),
        desk: DeskScale { mnist_train: 512, mnist_test: 128, ..DeskScale::default() },
    };
    experiment::run_curve_compare(&make_config("a")).unwrap();
    experiment::run_curve_compare(&make_config("b")).unwrap();
    let a = std::fs::read(scratch.join("a/curves.csv")).unwrap();
    let b = std::fs::read(scratch.join("b/curves.csv")).unwrap();
    assert_eq!(a, b, "[FAIL] criterion 12: curves.csv differs between identical reruns");
    std::fs::remove_dir_all(&scratch).ok();
    c.finish(None, "identical rerun produces byte-identical curves.csv");
}

#[test]
fn criterion_13_cifar_desk_smoke() {
    let c = Checked::begin("13");
    let (train_data, test_data, source) = match cifar_dir() {
        Some(dir) => {
            let (tr, te) = data::load_cifar10(&dir).unwrap();
            (tr.take(2000), te.take(500), format!("cifar10:{}", dir.display()))
        }
        None => (
            data::synthetic_fixture_shaped(2000, 3, 32, 32, 0x460f).unwrap(),
            data::synthetic_fixture_shaped(500, 3, 32, 32, 0x4610).unwrap(),
            "fixture".into(),
        ),
    };
    let preset = experiment::preset("cifar_ae").unwrap();
    let fb_spec = preset.spec.clone();
    let mut base_spec = preset.spec.without_feedback();
    base_spec.timesteps = 1;

    let cfg = TrainConfig {
        epochs: 2,
        loss: LossKind::Mse,
        ..desk_train_config(3)
    };
    let mut results = Vec::new();
    for (name, spec) in [("feedback", &fb_spec), ("no_feedback", &base_spec)] {
        let mut net = Network::new(spec.clone(), &mut rng_stream(3, RngStream::Init)).unwrap();
        let record = train(&mut net, &train_data, &test_data, &cfg).unwrap();
        assert!(record.diverged.is_none(), "[FAIL] criterion 13: {name} diverged");
        let first = record.points.first().unwrap().train_loss;
        let last = record.points.last().unwrap().train_loss;
        assert!(first.is_finite() && last.is_finite());
        assert!(
            last < first,
            "[FAIL] criterion 13: {name} training loss did not decrease ({first} → {last})"
        );
        results.push((name, record.final_test_loss().unwrap()));
    }
    let ordering = if results[0].1 < results[1].1 {
        "feedback below baseline"
    } else {
        "baseline below feedback"
    };
    c.finish(
        Some(1200),
        &format!(
            "losses finite and decreasing on {source}; final test losses {:.5} (feedback) vs {:.5} (baseline), {ordering} (reported, not asserted)",
            results[0].1, results[1].1
        ),
    );
}

#[test]
fn criterion_14_threshold_variant() {
    let c = Checked::begin("14");
    let p = protocol();
    let models = trained();

    let mut spec = partial_spec(p);
    spec.layers[0].activation = ActivationKind::FgReluThreshold;
    let runs = train_replicates(&spec, p);
    let threshold_loss = mean_final(&runs);
    let base = mean_final(&models.baseline);
    let fb = mean_final(&models.partial);
    assert!(
        threshold_loss < base,
        "[FAIL] criterion 14: threshold variant {threshold_loss} not below baseline {base}"
    );
    let vs_gain = if threshold_loss < fb { "below" } else { "above" };
    c.finish(
        None,
        &format!("threshold+gain {threshold_loss:.5} < baseline {base:.5}; {vs_gain} gain-only {fb:.5} (reported, not asserted)"),
    );
}
