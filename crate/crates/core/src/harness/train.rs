//! Full-batch training of the unmixing network.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{DatasetBundle, HyperCubeSequence};
use crate::exec::Exec;
use crate::geom::{vca_endmember_set, vca_per_phase};
use crate::metrics::{evaluate, MetricsReport};
use crate::nn::model::forward;
use crate::nn::{
    infer, save_checkpoint, ArchitectureConfig, CemMode, DataDims, Graph, ModelParameters, ModuleSwitches, Prediction, Tensor,
};
use crate::objective::{phase_anchors, LossWeights};
use crate::{Error, Result};

/// Optimiser, schedule and ablation settings for one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Learning rate is multiplied by `decay_factor` every `decay_every` epochs.
    pub decay_every: usize,
    pub decay_factor: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    pub use_gam: bool,
    pub use_cem: bool,
    /// Ignored when `use_cem` is false.
    pub cem_mode: CemMode,
    /// Log the loss every this many epochs (0 = never).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            learning_rate: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            decay_every: 300,
            decay_factor: 0.5,
            clip_norm: 5.0,
            seed: 0,
            use_gam: true,
            use_cem: true,
            cem_mode: CemMode::default(),
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.betas;
        let problems = [
            (self.epochs >= 1, "epochs must be at least 1"),
            (self.learning_rate > 0.0 && self.learning_rate.is_finite(), "learning_rate must be positive"),
            ((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2), "betas must lie in [0, 1)"),
            (self.eps > 0.0, "eps must be positive"),
            (self.decay_every >= 1, "decay_every must be at least 1"),
            (self.decay_factor > 0.0 && self.decay_factor <= 1.0, "decay_factor must lie in (0, 1]"),
            (self.clip_norm >= 0.0, "clip_norm must be non-negative"),
        ];
        match problems.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config((*msg).into())),
            None => Ok(()),
        }
    }

    pub fn switches(&self) -> ModuleSwitches {
        ModuleSwitches { use_gam: self.use_gam, use_cem: self.use_cem, cem_mode: self.cem_mode }
    }

    pub fn with_switches(mut self, s: ModuleSwitches) -> Self {
        (self.use_gam, self.use_cem, self.cem_mode) = (s.use_gam, s.use_cem, s.cem_mode);
        self
    }

    /// Step size in effect during `epoch` (0-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

/// Loss components of one training step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub total: f64,
    pub re: f64,
    pub sad: f64,
    pub simplex: f64,
}

/// Everything a finished run reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub arch: ArchitectureConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub loss_trace: Vec<LossPoint>,
    pub metrics: MetricsReport,
    pub checkpoint: Option<PathBuf>,
}

/// A trained model with its final prediction.
pub struct TrainedModel {
    pub params: ModelParameters,
    pub prediction: Prediction,
    pub record: RunRecord,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    fn new(params: &ModelParameters) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }

    fn update(&mut self, params: &mut ModelParameters, grads: &[Option<Tensor>], lr: f64, tc: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = tc.betas;
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        for (k, (_, p)) in params.iter_mut().enumerate() {
            let Some(g) = &grads[k] else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + tc.eps);
            }
        }
    }
}

/// Resolves the endmember count from the architecture or, when it is 0, the dataset.
pub fn resolve_arch(arch: &ArchitectureConfig, bundle: &DatasetBundle) -> Result<ArchitectureConfig> {
    let mut arch = arch.clone();
    if arch.endmembers == 0 {
        arch.endmembers = bundle
            .endmembers()
            .ok_or_else(|| Error::Config("arch.endmembers is 0 and the dataset has no ground truth".into()))?;
    }
    arch.validate()?;
    Ok(arch)
}

fn input_tensor(seq: &HyperCubeSequence) -> Tensor {
    Tensor::new([seq.phases(), seq.bands(), seq.height(), seq.width()], seq.to_f64())
}

/// One forward/backward pass; returns the loss components and per-parameter gradients.
fn step(
    params: &ModelParameters,
    x: &Tensor,
    anchors: &Tensor,
    tc: &TrainConfig,
    weights: &LossWeights,
    rng: &mut ChaCha8Rng,
    exec: Exec,
) -> Result<(LossPoint, Vec<Option<Tensor>>)> {
    let mut g = Graph::new(exec);
    let b = params.bind(&mut g);
    let xv = g.constant(x.clone());
    let av = g.constant(anchors.clone());
    let out = forward(&mut g, &b, xv, &tc.switches(), Some(rng));
    let re = g.loss_re(xv, out.reconstruction);
    let sad = g.loss_sad(xv, out.reconstruction)?;
    let simplex = g.loss_simplex(out.decoder, av);
    let total = g.weighted_sum(&[(re, weights.beta), (sad, weights.gamma), (simplex, weights.lambda_)]);
    let point = LossPoint {
        total: g.value(total).item(),
        re: g.value(re).item(),
        sad: g.value(sad).item(),
        simplex: g.value(simplex).item(),
    };
    if !point.total.is_finite() {
        return Ok((point, Vec::new()));
    }
    let mut grads = g.backward(total);
    Ok((point, b.iter().map(|(_, v)| grads.take(v)).collect()))
}

fn clip(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(Tensor::norm_squared).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Trains on the whole sequence: VCA-initialised decoders, Adam, step decay,
/// gradient clipping. Fails with `Divergence` on the first non-finite loss or gradient.
pub fn train(
    bundle: &DatasetBundle,
    arch: &ArchitectureConfig,
    tc: &TrainConfig,
    weights: &LossWeights,
    exec: Exec,
) -> Result<TrainedModel> {
    tc.validate()?;
    weights.validate()?;
    bundle.validate()?;
    let arch = resolve_arch(arch, bundle)?;
    let seq = &bundle.observed;
    let started = Instant::now();
    let mut params = ModelParameters::init(&arch, DataDims::of(seq), tc.seed)?;
    let vca = vca_per_phase(seq, arch.endmembers, tc.seed, exec)?;
    params.set_decoders(&vca_endmember_set(&vca)?)?;

    let x = input_tensor(seq);
    let anchors = Tensor::new([seq.phases(), seq.bands()], phase_anchors(seq).concat());
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    rng.set_stream(0x7472);
    let mut adam = Adam::new(&params);
    let mut trace = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        let (point, mut grads) = step(&params, &x, &anchors, tc, weights, &mut rng, exec)?;
        let norm = if point.total.is_finite() { clip(&mut grads, tc.clip_norm) } else { f64::NAN };
        if !norm.is_finite() {
            log::error!("non-finite loss or gradient at epoch {epoch}");
            return Err(Error::Divergence { epoch });
        }
        adam.update(&mut params, &grads, tc.learning_rate_at(epoch), tc);
        if tc.log_every > 0 && (epoch % tc.log_every == 0 || epoch + 1 == tc.epochs) {
            log::info!(
                "epoch {epoch}: loss {:.6} (re {:.6}, sad {:.6}, simplex {:.6}), |g| {norm:.3e}",
                point.total,
                point.re,
                point.sad,
                point.simplex
            );
        }
        trace.push(point);
    }

    let prediction = infer(&params, seq, &tc.switches(), exec).map_err(|e| match e {
        Error::Divergence { .. } => Error::Divergence { epoch: tc.epochs },
        e => e,
    })?;
    let runtime = started.elapsed().as_secs_f64();
    let metrics = evaluate(bundle, &prediction.abundances, &prediction.endmembers, runtime)?;
    let record = RunRecord { arch, train: tc.clone(), loss: *weights, loss_trace: trace, metrics, checkpoint: None };
    Ok(TrainedModel { params, prediction, record })
}

impl TrainedModel {
    /// Writes the checkpoint blob and `arch.json` into `dir` and records the path.
    pub fn save(&mut self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let path = save_checkpoint(dir.as_ref(), &self.params, &self.record.train.switches())?;
        self.record.checkpoint = Some(path.clone());
        Ok(path)
    }
}

pub const LOSS_CURVE_HEADER: &str = "epoch,total,re,sad,simplex";

pub fn loss_curve_csv(trace: &[LossPoint]) -> String {
    let mut s = format!("{LOSS_CURVE_HEADER}\n");
    for (i, p) in trace.iter().enumerate() {
        let _ = writeln!(s, "{i},{},{},{},{}", p.total, p.re, p.sad, p.simplex);
    }
    s
}

pub fn write_loss_curve(path: impl AsRef<Path>, trace: &[LossPoint]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, loss_curve_csv(trace)).map_err(|e| Error::io(path, e))
}
