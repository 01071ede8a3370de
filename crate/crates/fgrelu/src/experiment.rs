//! Config-driven experiment harness: named network presets, dataset
//! resolution (real files or synthetic fixtures), the experiment runners
//! behind the `fg` CLI, and their file outputs (CSV curves and sweep tables,
//! histograms, reconstruction images, manifests, checkpoints).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::activation::{FgReluParams, GainValue, GateRecord};
use crate::checkpoint;
use crate::data::{self, Dataset, NoiseSpec, Split};
use crate::error::{Error, Result};
use crate::network::{
    comprehensive_edges, ActivationKind, FeedbackEdge, LayerSpec, Network, NetworkSpec, Target,
    UnrollCtx,
};
use crate::tensor::{Padding, Tensor};
use crate::train::{evaluate, fnv1a64, rng_stream, train, LossKind, RngStream, RunRecord, TrainConfig};
use crate::Real;

pub const PRESETS: &[&str] = &[
    "mnist_ae_196",
    "mnist_ae_10",
    "mnist_ae_10_partial",
    "mnist_ae_10_comprehensive",
    "cifar_ae",
    "cifar_ae_bn",
    "cifar_clf",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Mnist,
    Cifar,
}

/// A named preset: architecture, its natural loss, and the dataset family.
#[derive(Debug, Clone)]
pub struct Preset {
    pub spec: NetworkSpec,
    pub loss: LossKind,
    pub data: DataKind,
}

fn mnist_ae_layers(bottleneck: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::dense(392, ActivationKind::Relu),
        LayerSpec::dense(bottleneck, ActivationKind::Relu),
        LayerSpec::dense(392, ActivationKind::Relu),
        LayerSpec::dense(784, ActivationKind::Sigmoid),
    ]
}

fn mnist_ae_spec(bottleneck: usize) -> NetworkSpec {
    NetworkSpec {
        input_shape: vec![784],
        layers: mnist_ae_layers(bottleneck),
        feedback_edges: vec![],
        timesteps: 1,
        fg_params: FgReluParams::default_mnist(),
        dropout_rate: 0.0,
        detach_feedback: false,
    }
}

fn cifar_ae_spec(batch_norm: bool) -> NetworkSpec {
    let mut layers = Vec::new();
    layers.push(LayerSpec::conv2d(16, 5, 1, Padding::Valid, ActivationKind::Relu));
    if batch_norm {
        layers.push(LayerSpec::batch_norm());
    }
    layers.push(LayerSpec::conv2d(16, 5, 1, Padding::Valid, ActivationKind::Relu));
    if batch_norm {
        layers.push(LayerSpec::batch_norm());
    }
    layers.push(LayerSpec::conv2d_transpose(16, 5, 1, ActivationKind::Relu));
    if batch_norm {
        layers.push(LayerSpec::batch_norm());
    }
    layers.push(LayerSpec::conv2d_transpose(3, 5, 1, ActivationKind::Sigmoid));
    let decoder1 = if batch_norm { 4 } else { 2 };
    let mut spec = NetworkSpec {
        input_shape: vec![3, 32, 32],
        layers,
        feedback_edges: vec![],
        timesteps: 1,
        fg_params: FgReluParams::default_mnist(),
        dropout_rate: 0.0,
        detach_feedback: false,
    }
    .with_edges(vec![FeedbackEdge { source: decoder1, target: 0 }]);
    spec.timesteps = 2;
    spec
}

fn cifar_clf_spec() -> NetworkSpec {
    let layers = vec![
        LayerSpec::conv2d(64, 5, 1, Padding::Same, ActivationKind::Relu),
        LayerSpec::max_pool(),
        LayerSpec::batch_norm(),
        LayerSpec::dropout(),
        LayerSpec::conv2d(64, 5, 1, Padding::Same, ActivationKind::Relu),
        LayerSpec::max_pool(),
        LayerSpec::batch_norm(),
        LayerSpec::dropout(),
        LayerSpec::dense(200, ActivationKind::Relu),
        LayerSpec::dropout(),
        LayerSpec::dense(10, ActivationKind::Softmax),
    ];
    let edges = comprehensive_edges(&layers);
    let mut spec = NetworkSpec {
        input_shape: vec![3, 32, 32],
        layers,
        feedback_edges: vec![],
        timesteps: 1,
        fg_params: FgReluParams::default_mnist(),
        dropout_rate: 0.5,
        detach_feedback: false,
    }
    .with_edges(edges);
    spec.timesteps = 2;
    spec
}

/// Resolve a preset name. Unknown names list the available presets.
pub fn preset(name: &str) -> Result<Preset> {
    let p = match name {
        "mnist_ae_196" => Preset { spec: mnist_ae_spec(196), loss: LossKind::Bce, data: DataKind::Mnist },
        "mnist_ae_10" => Preset { spec: mnist_ae_spec(10), loss: LossKind::Bce, data: DataKind::Mnist },
        "mnist_ae_10_partial" => {
            let mut spec = mnist_ae_spec(10).with_edges(vec![FeedbackEdge { source: 2, target: 0 }]);
            spec.timesteps = 2;
            Preset { spec, loss: LossKind::Bce, data: DataKind::Mnist }
        }
        "mnist_ae_10_comprehensive" => {
            let base = mnist_ae_spec(10);
            let edges = comprehensive_edges(&base.layers);
            let mut spec = base.with_edges(edges);
            spec.timesteps = 2;
            Preset { spec, loss: LossKind::Bce, data: DataKind::Mnist }
        }
        "cifar_ae" => Preset { spec: cifar_ae_spec(false), loss: LossKind::Mse, data: DataKind::Cifar },
        "cifar_ae_bn" => Preset { spec: cifar_ae_spec(true), loss: LossKind::Mse, data: DataKind::Cifar },
        "cifar_clf" => Preset { spec: cifar_clf_spec(), loss: LossKind::SoftmaxCrossEntropy, data: DataKind::Cifar },
        other => {
            return Err(Error::Usage(format!(
                "unknown preset `{other}`; available: {}",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(p)
}

// ---- experiment configuration ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    CurveCompare,
    TimestepSweep,
    ConstantGain,
    NoiseSweep,
    GridSearch,
    GainHist,
    ContrastSweep,
    GainProbe,
    Classify,
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainScope {
    Layer,
    All,
}

/// Sweep axes and experiment-specific knobs, all optional in the TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepAxes {
    pub sigmas: Vec<Real>,
    pub timesteps: Vec<usize>,
    pub etas: Vec<Real>,
    pub beta_maxes: Vec<Real>,
    pub contrast_factors: Vec<Real>,
    pub gain_value: Real,
    pub gain_scope: GainScope,
    /// Gated layer for constant gain / probes; defaults to the second
    /// encoding layer.
    pub gain_layer: usize,
    pub gain_grid: Vec<Real>,
    /// Cap on probed units (all units when absent).
    pub probe_units: Option<usize>,
    /// Test-set image the probe reconstructs.
    pub probe_sample: usize,
    /// Reuse a trained model instead of training in-run.
    pub checkpoint: Option<PathBuf>,
}

impl Default for SweepAxes {
    fn default() -> Self {
        SweepAxes {
            sigmas: vec![0.0, 0.5, 1.0, 2.0, 3.0],
            timesteps: vec![1, 2, 4, 6, 8],
            etas: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            beta_maxes: vec![0.8, 0.85, 0.9, 0.95],
            contrast_factors: (0..=10).map(|i| i as Real / 10.0).collect(),
            gain_value: 10.0,
            gain_scope: GainScope::Layer,
            gain_layer: 1,
            gain_grid: (0..=10).map(|i| i as Real).collect(),
            probe_units: None,
            probe_sample: 0,
            checkpoint: None,
        }
    }
}

/// Desk-scale dataset budgets; `--full-data` bypasses them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeskScale {
    pub mnist_train: usize,
    pub mnist_test: usize,
    pub cifar_train: usize,
    pub cifar_test: usize,
}

impl Default for DeskScale {
    fn default() -> Self {
        DeskScale { mnist_train: 5000, mnist_test: 1000, cifar_train: 2000, cifar_test: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<ExperimentKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// Inline architecture, used when no preset is named.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<NetworkSpec>,
    pub out_dir: PathBuf,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub full_data: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mnist_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cifar_dir: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sweep: SweepAxes,
    #[serde(default)]
    pub desk: DeskScale,
}

fn default_replicates() -> usize {
    3
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Usage(format!("bad experiment config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates < 1 {
            return Err(Error::Parameter("replicates must be ≥ 1".into()));
        }
        self.train.validate()
    }

    fn preset_of(&self) -> Result<Preset> {
        match (&self.preset, &self.network) {
            (Some(name), _) => preset(name),
            (None, Some(spec)) => {
                spec.validate()?;
                let data = if spec.input_shape == [3, 32, 32] { DataKind::Cifar } else { DataKind::Mnist };
                Ok(Preset { spec: spec.clone(), loss: self.train.loss, data })
            }
            (None, None) => Err(Error::Usage("config needs a `preset` or an inline `network`".into())),
        }
    }

    fn replicate_seeds(&self) -> Vec<u64> {
        (0..self.replicates as u64).map(|r| self.seed.wrapping_add(r)).collect()
    }
}

// ---- data resolution ----

/// Where a dataset came from, for the manifest.
#[derive(Debug, Clone, Serialize)]
pub struct DataProvenance {
    pub source: String,
    pub train_len: usize,
    pub test_len: usize,
    pub train_checksum: String,
    pub test_checksum: String,
}

fn checksum(ds: &Dataset) -> String {
    let mut bytes = Vec::with_capacity(ds.images.len() * 8 + ds.labels.len());
    for &v in ds.images.data() {
        bytes.extend_from_slice(&(v as f64).to_le_bytes());
    }
    bytes.extend_from_slice(&ds.labels);
    format!("fnv1a64:{:016x}", fnv1a64(&bytes))
}

/// Fixture seeds are fixed so the synthetic datasets are identical across
/// runs and replicate seeds.
const FIXTURE_TRAIN_SEED: u64 = 0x460f;
const FIXTURE_TEST_SEED: u64 = 0x4610;

/// Load the preset's dataset family: real files when a directory is
/// configured, the deterministic synthetic fixture otherwise. Desk-scale
/// subsampling applies unless `full_data` is set.
pub fn resolve_data(config: &ExperimentConfig, kind: DataKind) -> Result<(Dataset, Dataset, DataProvenance)> {
    let (mut train_ds, mut test_ds, source) = match kind {
        DataKind::Mnist => match &config.mnist_dir {
            Some(dir) if dir.join("train-images-idx3-ubyte").exists() => {
                let (tr, te) = data::load_mnist(dir)?;
                (tr, te, format!("mnist:{}", dir.display()))
            }
            _ => {
                let n_train = config.desk.mnist_train;
                let n_test = config.desk.mnist_test;
                let mut tr = data::synthetic_fixture(n_train, 784, FIXTURE_TRAIN_SEED)?;
                tr.split = Split::Train;
                let mut te = data::synthetic_fixture(n_test, 784, FIXTURE_TEST_SEED)?;
                te.split = Split::Test;
                (tr, te, format!("fixture:dim=784,n={n_train}/{n_test}"))
            }
        },
        DataKind::Cifar => match &config.cifar_dir {
            Some(dir) if dir.join("data_batch_1.bin").exists() => {
                let (tr, te) = data::load_cifar10(dir)?;
                (tr, te, format!("cifar10:{}", dir.display()))
            }
            _ => {
                let n_train = config.desk.cifar_train;
                let n_test = config.desk.cifar_test;
                let mut tr = data::synthetic_fixture_shaped(n_train, 3, 32, 32, FIXTURE_TRAIN_SEED)?;
                tr.split = Split::Train;
                let mut te = data::synthetic_fixture_shaped(n_test, 3, 32, 32, FIXTURE_TEST_SEED)?;
                te.split = Split::Test;
                (tr, te, format!("fixture:shape=3x32x32,n={n_train}/{n_test}"))
            }
        },
    };
    if !config.full_data {
        let (cap_train, cap_test) = match kind {
            DataKind::Mnist => (config.desk.mnist_train, config.desk.mnist_test),
            DataKind::Cifar => (config.desk.cifar_train, config.desk.cifar_test),
        };
        train_ds = train_ds.take(cap_train);
        test_ds = test_ds.take(cap_test);
    }
    let provenance = DataProvenance {
        source,
        train_len: train_ds.len(),
        test_len: test_ds.len(),
        train_checksum: checksum(&train_ds),
        test_checksum: checksum(&test_ds),
    };
    Ok((train_ds, test_ds, provenance))
}

// ---- output helpers ----

#[derive(Serialize)]
struct Manifest<'a> {
    package: &'static str,
    version: &'static str,
    precision: &'static str,
    kind: &'a str,
    replicate_seeds: Vec<u64>,
    data: &'a DataProvenance,
    config: &'a ExperimentConfig,
}

fn write_manifest(
    out_dir: &Path,
    kind: &str,
    config: &ExperimentConfig,
    provenance: &DataProvenance,
) -> Result<()> {
    let manifest = Manifest {
        package: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        precision: crate::precision_name(),
        kind,
        replicate_seeds: config.replicate_seeds(),
        data: provenance,
        config,
    };
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::Usage(format!("cannot serialize manifest: {e}")))?;
    fs::write(out_dir.join("manifest"), text)?;
    Ok(())
}

/// Training curves of one variant across replicates.
#[derive(Debug, Clone)]
pub struct VariantRuns {
    pub variant: String,
    pub records: Vec<RunRecord>,
}

impl VariantRuns {
    pub fn mean_final_loss(&self) -> Real {
        mean(&self.records.iter().filter_map(|r| r.final_test_loss()).collect::<Vec<_>>())
    }

    pub fn mean_final_accuracy(&self) -> Option<Real> {
        let accs: Vec<Real> = self.records.iter().filter_map(|r| r.final_accuracy()).collect();
        (!accs.is_empty()).then(|| mean(&accs))
    }
}

pub fn mean(xs: &[Real]) -> Real {
    xs.iter().sum::<Real>() / xs.len() as Real
}

fn write_variant_curves(path: &Path, runs: &[VariantRuns]) -> Result<()> {
    let with_acc = runs
        .iter()
        .flat_map(|v| &v.records)
        .any(|r| r.points.iter().any(|p| p.test_accuracy.is_some()));
    let mut out = String::new();
    out.push_str(if with_acc {
        "variant,replicate,step,train_loss,test_loss,test_accuracy\n"
    } else {
        "variant,replicate,step,train_loss,test_loss\n"
    });
    for v in runs {
        for (r, record) in v.records.iter().enumerate() {
            for p in &record.points {
                if with_acc {
                    out.push_str(&format!(
                        "{},{},{},{},{},{}\n",
                        v.variant,
                        r,
                        p.step,
                        p.train_loss,
                        p.test_loss,
                        p.test_accuracy.unwrap_or(Real::NAN)
                    ));
                } else {
                    out.push_str(&format!(
                        "{},{},{},{},{}\n",
                        v.variant, r, p.step, p.train_loss, p.test_loss
                    ));
                }
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn write_summary(path: &Path, runs: &[VariantRuns]) -> Result<()> {
    let mut out = String::from("variant,replicates,mean_final_test_loss,mean_final_test_accuracy\n");
    for v in runs {
        out.push_str(&format!(
            "{},{},{},{}\n",
            v.variant,
            v.records.len(),
            v.mean_final_loss(),
            v.mean_final_accuracy().map_or(String::from(""), |a| a.to_string())
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// 8-bit binary PGM; pixels are clamped to `[0,1]`.
pub fn write_pgm(path: &Path, pixels: &[Real], h: usize, w: usize) -> Result<()> {
    if pixels.len() != h * w {
        return Err(Error::dim(format!("pgm: {} pixels for {h}×{w}", pixels.len())));
    }
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    buf.extend(pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, buf)?;
    Ok(())
}

/// 8-bit binary PPM from channel-planar `[3,h,w]` data.
pub fn write_ppm(path: &Path, pixels: &[Real], h: usize, w: usize) -> Result<()> {
    if pixels.len() != 3 * h * w {
        return Err(Error::dim(format!("ppm: {} values for 3×{h}×{w}", pixels.len())));
    }
    let plane = h * w;
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    for i in 0..plane {
        for c in 0..3 {
            buf.push((pixels[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

fn train_one(
    spec: &NetworkSpec,
    loss: LossKind,
    train_data: &Dataset,
    test_data: &Dataset,
    base: &TrainConfig,
    seed: u64,
) -> Result<(Network, RunRecord)> {
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.loss = loss;
    let mut net = Network::new(spec.clone(), &mut rng_stream(seed, RngStream::Init))?;
    let record = train(&mut net, train_data, test_data, &cfg)?;
    Ok((net, record))
}

fn train_variant(
    name: &str,
    spec: &NetworkSpec,
    loss: LossKind,
    train_data: &Dataset,
    test_data: &Dataset,
    config: &ExperimentConfig,
) -> Result<(VariantRuns, Vec<Network>)> {
    let mut records = Vec::new();
    let mut nets = Vec::new();
    for seed in config.replicate_seeds() {
        let (net, record) = train_one(spec, loss, train_data, test_data, &config.train, seed)?;
        records.push(record);
        nets.push(net);
    }
    Ok((VariantRuns { variant: name.to_string(), records }, nets))
}

fn ensure_out_dir(config: &ExperimentConfig) -> Result<PathBuf> {
    fs::create_dir_all(&config.out_dir)?;
    Ok(config.out_dir.clone())
}

/// The feedback variant of a preset: the preset itself when it already has
/// edges, otherwise the default partial edge (first decoder → first encoder).
fn feedback_variant(preset: &Preset) -> Result<NetworkSpec> {
    if !preset.spec.feedback_edges.is_empty() {
        return Ok(preset.spec.clone());
    }
    // Default partial topology on the four-layer autoencoder shape.
    let mut spec = preset.spec.clone().with_edges(vec![FeedbackEdge { source: 2, target: 0 }]);
    spec.timesteps = spec.timesteps.max(2);
    Ok(spec)
}

/// The no-feedback twin, run as a plain single-pass feedforward network.
fn baseline_variant(preset: &Preset) -> NetworkSpec {
    let mut spec = preset.spec.without_feedback();
    spec.timesteps = 1;
    spec
}

// ---- runners ----

/// Paired feedback/no-feedback training under identical seeds and budgets.
pub fn run_curve_compare(config: &ExperimentConfig) -> Result<Vec<VariantRuns>> {
    config.validate()?;
    let preset = config.preset_of()?;
    let (train_data, test_data, provenance) = resolve_data(config, preset.data)?;
    let out = ensure_out_dir(config)?;
    write_manifest(&out, "curve_compare", config, &provenance)?;

    let fb_spec = feedback_variant(&preset)?;
    let base_spec = baseline_variant(&preset);
    let (fb_runs, fb_nets) =
        train_variant("feedback", &fb_spec, preset.loss, &train_data, &test_data, config)?;
    let (base_runs, base_nets) =
        train_variant("no_feedback", &base_spec, preset.loss, &train_data, &test_data, config)?;

    checkpoint::save(out.join("checkpoint_feedback.bin"), &fb_nets[0], None)?;
    checkpoint::save(out.join("checkpoint_no_feedback.bin"), &base_nets[0], None)?;

    let runs = vec![fb_runs, base_runs];
    write_variant_curves(&out.join("curves.csv"), &runs)?;
    write_summary(&out.join("summary.csv"), &runs)?;
    Ok(runs)
}

/// Result of the timestep sweep: mean final loss per timestep count.
pub struct TimestepSweep {
    pub per_t: Vec<(usize, VariantRuns)>,
    /// True when t = 1 rows dropped the preset's feedback edges.
    pub edges_dropped_at_t1: bool,
}

pub fn run_timestep_sweep(config: &ExperimentConfig) -> Result<TimestepSweep> {
    config.validate()?;
    let preset = config.preset_of()?;
    if config.sweep.timesteps.iter().any(|&t| t < 1) {
        return Err(Error::Parameter("timestep values must be ≥ 1".into()));
    }
    let (train_data, test_data, provenance) = resolve_data(config, preset.data)?;
    let out = ensure_out_dir(config)?;
    write_manifest(&out, "timestep_sweep", config, &provenance)?;

    let fb_spec = feedback_variant(&preset)?;
    let mut per_t = Vec::new();
    let mut edges_dropped = false;
    for &t in &config.sweep.timesteps {
        let spec = if t == 1 {
            edges_dropped = !fb_spec.feedback_edges.is_empty();
            let mut s = fb_spec.without_feedback();
            s.timesteps = 1;
            s
        } else {
            let mut s = fb_spec.clone();
            s.timesteps = t;
            s
        };
        let (runs, _) = train_variant(&format!("t{t}"), &spec, preset.loss, &train_data, &test_data, config)?;
        per_t.push((t, runs));
    }

    let mut table = String::from("timesteps,replicate,seed,final_test_loss,edges_dropped\n");
    for (t, runs) in &per_t {
        for (r, record) in runs.records.iter().enumerate() {
            table.push_str(&format!(
                "{},{},{},{},{}\n",
                t,
                r,
                record.seed,
                record.final_test_loss().unwrap_or(Real::NAN),
                *t == 1 && edges_dropped
            ));
        }
    }
    fs::write(out.join("sweep.csv"), table)?;
    let all: Vec<VariantRuns> = per_t.iter().map(|(_, v)| v.clone()).collect();
    write_variant_curves(&out.join("curves.csv"), &all)?;
    Ok(TimestepSweep { per_t, edges_dropped_at_t1: edges_dropped })
}

/// Constant-gain spec: the no-feedback twin with a fixed gain override on
/// the scoped layer(s); it has zero feedback parameters and runs one pass.
fn constant_gain_spec(preset: &Preset, value: Real, scope: GainScope, layer: usize) -> Result<NetworkSpec> {
    if value <= 0.0 {
        return Err(Error::Parameter(format!("gain value must be > 0, got {value}")));
    }
    let mut spec = baseline_variant(preset);
    match scope {
        GainScope::All => {
            for l in spec.layers.iter_mut() {
                if l.activation == ActivationKind::Relu {
                    l.activation = ActivationKind::FgRelu;
                }
            }
        }
        GainScope::Layer => {
            if layer >= spec.layers.len() || !spec.layers[layer].activation.is_gateable() {
                return Err(Error::Parameter(format!(
                    "gain layer {layer} is not a gateable layer"
                )));
            }
            spec.layers[layer].activation = ActivationKind::FgRelu;
        }
    }
    spec.fg_params = spec.fg_params.with_gain_override(GainValue::Constant(value));
    Ok(spec)
}

/// Baseline vs learned feedback vs constant-gain override.
pub fn run_constant_gain(config: &ExperimentConfig) -> Result<Vec<VariantRuns>> {
    config.validate()?;
    let preset = config.preset_of()?;
    let (train_data, test_data, provenance) = resolve_data(config, preset.data)?;
    let out = ensure_out_dir(config)?;
    write_manifest(&out, "constant_gain", config, &provenance)?;

    let base_spec = baseline_variant(&preset);
    let fb_spec = feedback_variant(&preset)?;
    let gain_spec = constant_gain_spec(&preset, config.sweep.gain_value, config.sweep.gain_scope, config.sweep.gain_layer)?;

    let (base_runs, _) = train_variant("no_feedback", &base_spec, preset.loss, &train_data, &test_data, config)?;
    let (fb_runs, _) = train_variant("feedback", &fb_spec, preset.loss, &train_data, &test_data, config)?;
    let (gain_runs, _) = train_variant("constant_gain", &gain_spec, preset.loss, &train_data, &test_data, config)?;

    let runs = vec![base_runs, fb_runs, gain_runs];
    write_variant_curves(&out.join("curves.csv"), &runs)?;
    write_summary(&out.join("summary.csv"), &runs)?;
    Ok(runs)
}

#[derive(Debug, Clone)]
pub struct NoiseRow {
    pub sigma: Real,
    pub variant: String,
    pub noise_replicate: usize,
    pub loss: Real,
}

/// Train both variants once, then evaluate under pre-activation noise of
/// each σ with `replicates` independent noise seeds per model.
pub fn run_noise_sweep(config: &ExperimentConfig) -> Result<Vec<NoiseRow>> {
    config.validate()?;
    let preset = config.preset_of()?;
    let (train_data, test_data, provenance) = resolve_data(config, preset.data)?;
    let out = ensure_out_dir(config)?;
    write_manifest(&out, "noise_sweep", config, &provenance)?;

    let fb_spec = feedback_variant(&preset)?;
    let base_spec = baseline_variant(&preset);
    let (fb_net, _) = train_one(&fb_spec, preset.loss, &train_data, &test_data, &config.train, config.seed)?;
    let (base_net, _) = train_one(&base_spec, preset.loss, &train_data, &test_data, &config.train, config.seed)?;
    checkpoint::save(out.join("checkpoint_feedback.bin"), &fb_net, None)?;
    checkpoint::save(out.join("checkpoint_no_feedback.bin"), &base_net, None)?;

    let mut rows = Vec::new();
    for &sigma in &config.sweep.sigmas {
        for (name, net) in [("feedback", &fb_net), ("no_feedback", &base_net)] {
            for r in 0..config.replicates {
                let noise = NoiseSpec::new(sigma, config.seed.wrapping_add(1000 + r as u64))?;
                let report = evaluate(net, &test_data, preset.loss, Some(&noise), false)?;
                rows.push(NoiseRow {
                    sigma,
                    variant: name.to_string(),
                    noise_replicate: r,
                    loss: report.loss,
                });
            }
        }
    }

    let mut table = String::from("sigma,variant,noise_replicate,loss\n");
    for row in &rows {
        table.push_str(&format!("{},{},{},{}\n", row.sigma, row.variant, row.noise_replicate, row.loss));
    }
    fs::write(out.join("sweep.csv"), table)?;
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct GridRow {
    pub beta_max: Real,
    pub eta: Real,
    pub replicate: usize,
    pub final_loss: Real,
}

pub struct GridSearch {
    pub rows: Vec<GridRow>,
    pub best: (Real, Real),
}

/// Train the feedback variant per (β_max, η) grid point; rank by mean final
/// test loss with ties broken by larger β_max, then smaller η.
pub fn run_grid_search(config: &ExperimentConfig) -> Result<GridSearch> {
    config.validate()?;
    let preset = config.preset_of()?;
    if config.sweep.etas.is_empty() || config.sweep.beta_maxes.is_empty() {
        return Err(Error::Parameter("grid search needs nonempty eta and beta_max grids".into()));
    }
    let (train_data, test_data, provenance) = resolve_data(config, preset.data)?;
    let out = ensure_out_dir(config)?;
    write_manifest(&out, "grid_search", config, &provenance)?;

    let fb_spec = feedback_variant(&preset)?;
    let mut rows = Vec::new();
    let mut means: Vec<(Real, Real, Real)> = Vec::new();
    for &beta_max in &config.sweep.beta_maxes {
        for &eta in &config.sweep.etas {
            let mut spec = fb_spec.clone();
            let mut params = FgReluParams::new(beta_max, eta)?;
            if let Some(a) = spec.fg_params.alpha {
                params = params.with_alpha(a);
            }
            spec.fg_params = params;
            let (runs, _) = train_variant(
                &format!("b{beta_max}_e{eta}"),
                &spec,
                preset.loss,
                &train_data,
                &test_data,
                config,
            )?;
            for (r, record) in runs.records.iter().enumerate() {
                rows.push(GridRow {
                    beta_max,
                    eta,
                    replicate: r,
                    final_loss: record.final_test_loss().unwrap_or(Real::NAN),
                });
            }
            means.push((beta_max, eta, runs.mean_final_loss()));
        }
    }

    // Rank: smaller loss, then larger beta_max, then smaller eta.
    means.sort_by(|a, b| {
        a.2.partial_cmp(&b.2)
            .expect("finite losses")
            .then(b.0.partial_cmp(&a.0).expect("finite beta_max"))
            .then(a.1.partial_cmp(&b.1).expect("finite eta"))
    });
    let best = (means[0].0, means[0].1);

    let mut table = String::from("beta_max,eta,replicate,final_test_loss\n");
    for row in &rows {
        table.push_str(&format!("{},{},{},{}\n", row.beta_max, row.eta, row.replicate, row.final_loss));
    }
    table.push_str(&format!("# best beta_max={} eta={}\n", best.0, best.1));
    fs::write(out.join("sweep.csv"), table)?;
    Ok(GridSearch { rows, best })
}

#[derive(Debug, Clone)]
pub struct Histogram {
    pub lo: Real,
    pub hi: Real,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn build(values: impl Iterator<Item = Real> + Clone, lo: Real, hi: Real, bins: usize) -> Histogram {
        let mut counts = vec![0usize; bins];
        let width = (hi - lo) / bins as Real;
        for v in values {
            let mut idx = ((v - lo) / width).floor() as isize;
            if idx < 0 {
                idx = 0;
            }
            if idx >= bins as isize {
                idx = bins as isize - 1;
            }
            counts[idx as usize] += 1;
        }
        Histogram { lo, hi, counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Fraction of the mass in the last (top) bin.
    pub fn top_bin_fraction(&self) -> Real {
        if self.total() == 0 {
            return 0.0;
        }
        *self.counts.last().expect("bins ≥ 1") as Real / self.total() as Real
    }

    fn write_rows(&self, metric: &str, out: &mut String) {
        let width = (self.hi - self.lo) / self.counts.len() as Real;
        for (i, &c) in self.counts.iter().enumerate() {
            let lo = self.lo + width * i as Real;
            out.push_str(&format!("{metric},{},{},{}\n", lo, lo + width, c));
        }
    }
}

pub struct LayerHist {
    pub layer: usize,
    pub mu_d: Histogram,
    pub gain: Histogram,
}

pub struct GainHist {
    pub per_layer: Vec<LayerHist>,
    pub gates: GateRecord,
}

const HIST_BINS: usize = 50;

/// Collect (μ_D, gain) over the test set on a trained feedback model and
/// bin them per gated layer.
pub fn run_gain_hist(config: &ExperimentConfig) -> Result<GainHist> {
    config.validate()?;
    let preset = config.preset_of()?;
    let (train_data, test_data, provenance) = resolve_data(config, preset.data)?;
    let out = ensure_out_dir(config)?;
    write_manifest(&out, "gain_hist", config, &provenance)?;

    let net = match &config.sweep.checkpoint {
        Some(path) => checkpoint::load(path)?.0,
        None => {
            let fb_spec = feedback_variant(&preset)?;
            train_one(&fb_spec, preset.loss, &train_data, &test_data, &config.train, config.seed)?.0
        }
    };
    checkpoint::save(out.join("checkpoint.bin"), &net, None)?;

    let report = evaluate(&net, &test_data, preset.loss, None, true)?;
    let gates = report.gates.expect("gate collection requested");
    let max_gain = net.spec.fg_params.max_gain();

    let mut per_layer = Vec::new();
    for layer in gates.layers() {
        let values: Vec<_> = gates.entries.iter().filter(|e| e.layer == layer).collect();
        let mu_lo = values.iter().map(|e| e.mu_d).fold(Real::INFINITY, Real::min);
        let mu_hi = values.iter().map(|e| e.mu_d).fold(Real::NEG_INFINITY, Real::max);
        let (mu_lo, mu_hi) = if mu_lo < mu_hi { (mu_lo, mu_hi) } else { (mu_lo - 0.5, mu_lo + 0.5) };
        let mu_d = Histogram::build(values.iter().map(|e| e.mu_d), mu_lo, mu_hi, HIST_BINS);
        let gain = Histogram::build(values.iter().map(|e| e.gain), 0.0, max_gain, HIST_BINS);

        let mut text = String::from("metric,bin_lo,bin_hi,count\n");
        mu_d.write_rows("mu_d", &mut text);
        gain.write_rows("gain", &mut text);
        fs::write(out.join(format!("hist_layer{layer}.csv")), text)?;
        per_layer.push(LayerHist { layer, mu_d, gain });
    }

    let mut gates_csv = Vec::new();
    gates.write_csv(&mut gates_csv)?;
    fs::write(out.join("gates.csv"), gates_csv)?;
    Ok(GainHist { per_layer, gates })
}

#[derive(Debug, Clone)]
pub struct ContrastRow {
    pub factor: Real,
    pub mean_abs_diff: Real,
}

/// Reconstruct contrast-reduced inputs and record the absolute difference in
/// mean pixel value between first- and second-pass reconstructions.
pub fn run_contrast_sweep(config: &ExperimentConfig) -> Result<Vec<ContrastRow>> {
    config.validate()?;
    let preset = config.preset_of()?;
    let (train_data, test_data, provenance) = resolve_data(config, preset.data)?;
    let out = ensure_out_dir(config)?;
    write_manifest(&out, "contrast_sweep", config, &provenance)?;

    let net = match &config.sweep.checkpoint {
        Some(path) => checkpoint::load(path)?.0,
        None => {
            let fb_spec = feedback_variant(&preset)?;
            train_one(&fb_spec, preset.loss, &train_data, &test_data, &config.train, config.seed)?.0
        }
    };
    if net.spec.timesteps < 2 {
        return Err(Error::Spec("contrast sweep needs a multi-pass network".into()));
    }
    checkpoint::save(out.join("checkpoint.bin"), &net, None)?;

    let mut rows = Vec::new();
    for &factor in &config.sweep.contrast_factors {
        let reduced = data::reduce_contrast(&test_data.images, factor)?;
        let mut total = 0.0;
        let n = test_data.len();
        let sample_len: usize = test_data.sample_shape().iter().product();
        let mut start = 0;
        while start < n {
            let end = (start + 250).min(n);
            let batch = {
                let mut shape = vec![end - start];
                shape.extend_from_slice(test_data.sample_shape());
                Tensor::new(
                    shape,
                    reduced.data()[start * sample_len..end * sample_len].to_vec(),
                )?
            };
            let mut ctx = UnrollCtx {
                input: batch,
                target: Target::None,
                train: false,
                dropout_masks: None,
                noise: None,
                layer_override: None,
            };
            let mut unrolled = net.unroll(&mut ctx)?;
            unrolled.tape.forward(&net.params)?;
            let first = unrolled.tape.value(unrolled.pass_outputs[0])?;
            let last = unrolled.tape.value(*unrolled.pass_outputs.last().expect("passes"))?;
            for b in 0..(end - start) {
                let m1 = mean(&first.data()[b * sample_len..(b + 1) * sample_len]);
                let m2 = mean(&last.data()[b * sample_len..(b + 1) * sample_len]);
                total += (m1 - m2).abs();
            }
            start = end;
        }
        rows.push(ContrastRow { factor, mean_abs_diff: total / n as Real });

        // Sample reconstruction dump for flat (grayscale) data.
        if test_data.sample_shape().len() == 1 && config.sweep.probe_sample < n {
            let side = (sample_len as f64).sqrt() as usize;
            if side * side == sample_len {
                let i = config.sweep.probe_sample;
                let input = Tensor::new(
                    vec![1, sample_len],
                    reduced.data()[i * sample_len..(i + 1) * sample_len].to_vec(),
                )?;
                let mut ctx = UnrollCtx {
                    input: input.clone(),
                    target: Target::None,
                    train: false,
                    dropout_masks: None,
                    noise: None,
                    layer_override: None,
                };
                let mut unrolled = net.unroll(&mut ctx)?;
                unrolled.tape.forward(&net.params)?;
                let r1 = unrolled.tape.value(unrolled.pass_outputs[0])?.clone();
                let r2 = unrolled.tape.value(*unrolled.pass_outputs.last().expect("passes"))?.clone();
                let tag = format!("{:.1}", factor);
                write_pgm(&out.join(format!("recon_c{tag}_input.pgm")), input.data(), side, side)?;
                write_pgm(&out.join(format!("recon_c{tag}_pass1.pgm")), r1.data(), side, side)?;
                write_pgm(&out.join(format!("recon_c{tag}_pass2.pgm")), r2.data(), side, side)?;
            }
        }
    }

    let mut table = String::from("contrast_factor,mean_abs_diff\n");
    for row in &rows {
        table.push_str(&format!("{},{}\n", row.factor, row.mean_abs_diff));
    }
    fs::write(out.join("sweep.csv"), table)?;
    Ok(rows)
}

/// Manually drive one layer's gains and dump the resulting reconstructions:
/// unit `i` gets each grid gain while all other units hold the reference
/// value (the last grid entry).
pub fn run_gain_probe(config: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let preset = config.preset_of()?;
    let (train_data, test_data, provenance) = resolve_data(config, preset.data)?;
    let out = ensure_out_dir(config)?;
    write_manifest(&out, "gain_probe", config, &provenance)?;

    let net = match &config.sweep.checkpoint {
        Some(path) => checkpoint::load(path)?.0,
        None => {
            let fb_spec = feedback_variant(&preset)?;
            train_one(&fb_spec, preset.loss, &train_data, &test_data, &config.train, config.seed)?.0
        }
    };
    let layer = config.sweep.gain_layer;
    let units = net.spec.feedback_units(layer)?;
    let probe_units = config.sweep.probe_units.unwrap_or(units).min(units);
    if config.sweep.probe_sample >= test_data.len() {
        return Err(Error::Parameter(format!(
            "probe sample {} out of range ({} test instances)",
            config.sweep.probe_sample,
            test_data.len()
        )));
    }
    let reference = *config.sweep.gain_grid.last().ok_or_else(|| {
        Error::Parameter("gain probe needs a nonempty gain grid".into())
    })?;

    let sample_len: usize = test_data.sample_shape().iter().product();
    let side = (sample_len as f64).sqrt() as usize;
    if side * side != sample_len {
        return Err(Error::dim(format!(
            "gain probe writes square grayscale images; sample length {sample_len} is not square"
        )));
    }
    let input = Tensor::new(
        vec![1, sample_len],
        test_data.sample(config.sweep.probe_sample).to_vec(),
    )?;

    let mut files = Vec::new();
    for unit in 0..probe_units {
        for (gi, &g) in config.sweep.gain_grid.iter().enumerate() {
            let mut overrides = vec![reference; units];
            overrides[unit] = g;
            let mut ctx = UnrollCtx {
                input: input.clone(),
                target: Target::None,
                train: false,
                dropout_masks: None,
                noise: None,
                layer_override: Some((layer, GainValue::PerUnit(overrides))),
            };
            let mut unrolled = net.unroll(&mut ctx)?;
            let recon = unrolled.tape.forward(&net.params)?;
            let path = out.join(format!("recon_u{unit}_g{gi}.pgm"));
            write_pgm(&path, recon.data(), side, side)?;
            files.push(path);
        }
    }
    Ok(files)
}

pub struct ClassifyResult {
    pub runs: Vec<VariantRuns>,
    /// feedback accuracy − baseline accuracy, over replicate means.
    pub accuracy_delta: Real,
}

/// Classification with and without comprehensive feedback.
pub fn run_classify(config: &ExperimentConfig) -> Result<ClassifyResult> {
    config.validate()?;
    let preset = config.preset_of()?;
    if preset.loss != LossKind::SoftmaxCrossEntropy {
        return Err(Error::Usage("classify needs a classification preset (cifar_clf)".into()));
    }
    let (train_data, test_data, provenance) = resolve_data(config, preset.data)?;
    let out = ensure_out_dir(config)?;
    write_manifest(&out, "classify", config, &provenance)?;

    let fb_spec = feedback_variant(&preset)?;
    let base_spec = {
        // The classifier keeps its pass count so dropout/batch-norm budgets
        // match; without edges every pass is identical anyway.
        let mut s = preset.spec.without_feedback();
        s.timesteps = 1;
        s
    };
    let (fb_runs, fb_nets) = train_variant("feedback", &fb_spec, preset.loss, &train_data, &test_data, config)?;
    let (base_runs, base_nets) =
        train_variant("no_feedback", &base_spec, preset.loss, &train_data, &test_data, config)?;
    checkpoint::save(out.join("checkpoint_feedback.bin"), &fb_nets[0], None)?;
    checkpoint::save(out.join("checkpoint_no_feedback.bin"), &base_nets[0], None)?;

    let delta = fb_runs.mean_final_accuracy().unwrap_or(0.0) - base_runs.mean_final_accuracy().unwrap_or(0.0);
    let runs = vec![fb_runs, base_runs];
    write_variant_curves(&out.join("curves.csv"), &runs)?;
    write_summary(&out.join("summary.csv"), &runs)?;
    let mut f = fs::File::create(out.join("accuracy_delta.txt"))?;
    writeln!(f, "{delta}")?;
    Ok(ClassifyResult { runs, accuracy_delta: delta })
}

/// Train one model (the preset as-is) and save curves plus a checkpoint.
pub fn run_train(config: &ExperimentConfig) -> Result<RunRecord> {
    config.validate()?;
    let preset = config.preset_of()?;
    let (train_data, test_data, provenance) = resolve_data(config, preset.data)?;
    let out = ensure_out_dir(config)?;
    write_manifest(&out, "train", config, &provenance)?;

    let (net, record) = train_one(&preset.spec, preset.loss, &train_data, &test_data, &config.train, config.seed)?;
    checkpoint::save(out.join("checkpoint.bin"), &net, None)?;
    let mut csv = Vec::new();
    record.write_curves_csv(&mut csv)?;
    fs::write(out.join("curves.csv"), csv)?;
    Ok(record)
}

pub struct EvalOutcome {
    pub loss: Real,
    pub accuracy: Option<Real>,
}

/// Evaluate a checkpoint on the preset's test data, optionally with noise
/// and gate collection.
pub fn run_eval(config: &ExperimentConfig, sigma: Option<Real>, collect_gates: bool) -> Result<EvalOutcome> {
    config.validate()?;
    let preset = config.preset_of()?;
    let (_, test_data, provenance) = resolve_data(config, preset.data)?;
    let out = ensure_out_dir(config)?;
    write_manifest(&out, "eval", config, &provenance)?;

    let path = config
        .sweep
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Usage("eval needs `sweep.checkpoint` pointing at a trained model".into()))?;
    let (net, _) = checkpoint::load(path)?;
    let noise = match sigma {
        Some(s) => Some(NoiseSpec::new(s, config.seed)?),
        None => None,
    };
    let report = evaluate(&net, &test_data, preset.loss, noise.as_ref(), collect_gates)?;
    if let Some(gates) = &report.gates {
        let mut buf = Vec::new();
        gates.write_csv(&mut buf)?;
        fs::write(out.join("gates.csv"), buf)?;
    }
    Ok(EvalOutcome { loss: report.loss, accuracy: report.accuracy })
}
