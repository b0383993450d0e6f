//! Optimization: Adam, incremental coefficient training, scale fine-tuning
//! and ensembles.

use crate::cae::{CaeConfig, CaeModel, CoeffMask, ScaleSet, Tradeoff};
use crate::error::{Error, Result};
use crate::nn::{Normalization, SurrogateMode};
use crate::rng::{streams, Rng};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Zero moments for parameters with the given sizes.
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update. A non-finite gradient rejects the whole
    /// step and leaves parameters and moments untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&[f64]], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "adam: {} moment buffers, {} params, {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: vec![g.len()],
                });
            }
            if let Some(j) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of parameter {i} at index {j}")));
            }
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// `initial · τ^κ / (τ + t)^κ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerDecay {
    pub initial: f64,
    pub tau: f64,
    pub kappa: f64,
}

impl Default for PowerDecay {
    fn default() -> Self {
        Self {
            initial: 1e-3,
            tau: 1000.0,
            kappa: 0.8,
        }
    }
}

impl PowerDecay {
    pub fn at(&self, t: u64) -> f64 {
        self.initial * self.tau.powf(self.kappa) / (self.tau + t as f64).powf(self.kappa)
    }
}

/// Scale fine-tuning learning rate, `1e-3 · 1000^0.8 / (1000 + t)^0.8`.
pub fn lr_schedule(t: u64) -> f64 {
    PowerDecay::default().at(t)
}

/// Training images as `(3, H, W)` tensors.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    images: Vec<Tensor>,
}

impl Dataset {
    pub fn new(images: Vec<Tensor>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        for img in &images {
            let (c, _, _) = img.chw()?;
            if c != 3 {
                return Err(Error::InvalidShape {
                    op: "dataset",
                    shape: img.shape().to_vec(),
                    reason: "expected RGB".into(),
                });
            }
        }
        Ok(Self { images })
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn normalization(&self) -> Result<Normalization> {
        Normalization::fit(&self.images)
    }
}

/// Uniformly placed square crops, drawn from a dedicated stream.
#[derive(Clone, Debug)]
pub struct CropSampler {
    size: usize,
    rng: Rng,
}

impl CropSampler {
    pub fn new(size: usize, seed: u64) -> Self {
        Self {
            size,
            rng: Rng::with_stream(seed, streams::CROPS),
        }
    }

    pub fn batch(&mut self, data: &Dataset, n: usize) -> Result<Vec<Tensor>> {
        (0..n).map(|_| self.crop(data)).collect()
    }

    fn crop(&mut self, data: &Dataset) -> Result<Tensor> {
        let img = &data.images[self.rng.below(data.len())];
        let (c, h, w) = img.chw()?;
        let s = self.size;
        if h < s || w < s {
            return Err(Error::InvalidArgument(format!("image {h}x{w} smaller than crop {s}")));
        }
        let y0 = self.rng.below(h - s + 1);
        let x0 = self.rng.below(w - s + 1);
        let src = img.data();
        let mut out = Vec::with_capacity(c * s * s);
        for ch in 0..c {
            for y in y0..y0 + s {
                let o = (ch * h + y) * w + x0;
                out.extend_from_slice(&src[o..o + s]);
            }
        }
        Tensor::new(vec![c, s, s], out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub crop_size: usize,
    pub lr: f64,
    /// Rate used once every coefficient is enabled and training plateaus.
    pub lr_final: f64,
    /// Relative window-over-window improvement below which training counts
    /// as plateaued.
    pub plateau_threshold: f64,
    pub window: usize,
    pub max_steps: usize,
    /// Coefficients enabled at the start; the rest are switched on one at a
    /// time at each plateau. Equal to the channel count disables the
    /// incremental schedule.
    pub initial_coeffs: usize,
    pub tradeoff: Tradeoff,
    pub seed: u64,
    /// Abort when the loss exceeds this multiple of the first step's loss.
    pub divergence_factor: f64,
}

impl TrainConfig {
    /// Short-budget profile. Learning rates are ten times the full-scale
    /// ones because the run is a few thousand updates rather than a million.
    pub fn desk(tradeoff: Tradeoff) -> Self {
        Self {
            batch_size: 8,
            crop_size: 32,
            lr: 1e-3,
            lr_final: 1e-4,
            plateau_threshold: 0.005,
            window: 100,
            max_steps: 2000,
            initial_coeffs: 2,
            tradeoff,
            seed: 0,
            divergence_factor: 1e3,
        }
    }

    pub fn paper(tradeoff: Tradeoff) -> Self {
        Self {
            batch_size: 32,
            crop_size: 128,
            lr: 1e-4,
            lr_final: 1e-5,
            max_steps: 1_000_000,
            ..Self::desk(tradeoff)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.crop_size == 0 || self.crop_size % crate::cae::DOWNSAMPLE != 0 {
            return bad("crop_size must be a positive multiple of 8");
        }
        if !(self.lr > 0.0 && self.lr_final > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.window < 2 {
            return bad("window must be at least 2");
        }
        if !(self.plateau_threshold >= 0.0) {
            return bad("plateau_threshold must be non-negative");
        }
        if !(self.divergence_factor > 1.0) {
            return bad("divergence_factor must exceed 1");
        }
        self.tradeoff.validate()
    }
}

/// One row of the training trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub enabled_coeffs: usize,
    pub rate_bits: f64,
    pub mse: f64,
    pub loss: f64,
    pub lr: f64,
}

impl TraceRow {
    pub const CSV_HEADER: &'static str = "step,enabled_coeffs,rate_bits,mse,loss,lr";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.enabled_coeffs, self.rate_bits, self.mse, self.loss, self.lr
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub trace: Vec<TraceRow>,
    /// `(step, channel)` for every coefficient switched on during training.
    pub enable_events: Vec<(usize, usize)>,
    pub lr_drop_step: Option<usize>,
    /// Nonzero code entries seen in disabled channels, summed over all
    /// steps; zero unless masking is broken.
    pub masked_nonzero: usize,
}

/// Windowed plateau detector: compares the mean of the last `window` losses
/// with the window before it.
#[derive(Clone, Debug)]
struct Plateau {
    window: usize,
    threshold: f64,
    losses: Vec<f64>,
}

impl Plateau {
    fn new(window: usize, threshold: f64) -> Self {
        Self {
            window,
            threshold,
            losses: Vec::new(),
        }
    }

    fn push(&mut self, loss: f64) -> bool {
        self.losses.push(loss);
        let n = self.losses.len();
        let w = self.window;
        if n < 2 * w {
            return false;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let prev = mean(&self.losses[n - 2 * w..n - w]);
        let cur = mean(&self.losses[n - w..]);
        (prev - cur) / prev.abs().max(f64::MIN_POSITIVE) < self.threshold
    }

    fn reset(&mut self) {
        self.losses.clear();
    }
}

/// Compute the batch loss gradient and apply one Adam step to every network
/// parameter.
fn network_step(
    model: &mut CaeModel,
    adam: &mut AdamState,
    batch: &[Tensor],
    tradeoff: Tradeoff,
    noise: &mut Rng,
    lr: f64,
) -> Result<crate::cae::ForwardStats> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let ls = tape.constant(Tensor::from_vec(model.active_scales().log_scales.clone()));
    let fv = model.training_forward_on(&mut tape, &vars, ls, batch, tradeoff, noise)?;
    tape.backward(fv.loss)?;
    let flat = vars.flat();
    let grads: Vec<&[f64]> = flat.iter().map(|&v| tape.grad(v).expect("tracked parameter")).collect();
    let mut params = model.params_mut();
    adam.step(&mut params, &grads, lr)?;
    Ok(fv.stats)
}

/// Train all network parameters with Adam, enabling coefficients one at a
/// time whenever the loss plateaus. After the last coefficient is enabled,
/// the next plateau lowers the learning rate to `lr_final`.
///
/// `observer` sees every trace row as it is produced, so a trace survives an
/// aborted run.
pub fn train_incremental(
    model: &mut CaeModel,
    data: &Dataset,
    config: &TrainConfig,
    mut observer: impl FnMut(&TraceRow),
) -> Result<TrainReport> {
    config.validate()?;
    let channels = model.code_channels();
    if config.initial_coeffs == 0 || config.initial_coeffs > channels {
        return Err(Error::InvalidArgument(format!(
            "initial_coeffs must be in 1..={channels}"
        )));
    }
    model.mask = CoeffMask::new(channels, config.initial_coeffs);
    let sizes: Vec<usize> = model.params().iter().map(|t| t.len()).collect();
    let mut adam = AdamState::new(&sizes);
    let mut crops = CropSampler::new(config.crop_size, config.seed);
    let mut noise = Rng::with_stream(config.seed, streams::NOISE);
    let mut plateau = Plateau::new(config.window, config.plateau_threshold);
    let mut lr = config.lr;
    let mut report = TrainReport::default();
    let mut first_loss = None;

    for step in 0..config.max_steps {
        let batch = crops.batch(data, config.batch_size)?;
        let stats = network_step(model, &mut adam, &batch, config.tradeoff, &mut noise, lr)?;
        let row = TraceRow {
            step,
            enabled_coeffs: model.mask.popcount(),
            rate_bits: stats.rate_bits,
            mse: stats.mse,
            loss: stats.loss,
            lr,
        };
        report.masked_nonzero += masked_nonzero(&stats.codes, &model.mask);
        observer(&row);
        report.trace.push(row);
        let first = *first_loss.get_or_insert(stats.loss.abs().max(f64::MIN_POSITIVE));
        if stats.loss > config.divergence_factor * first {
            return Err(Error::Diverged {
                step,
                loss: stats.loss,
                limit: config.divergence_factor * first,
            });
        }
        if plateau.push(stats.loss) {
            if let Some(c) = model.mask.enable_next() {
                log::info!("step {step}: enabling coefficient {c}");
                report.enable_events.push((step, c));
                plateau.reset();
            } else if report.lr_drop_step.is_none() {
                log::info!("step {step}: lowering learning rate to {}", config.lr_final);
                lr = config.lr_final;
                report.lr_drop_step = Some(step);
                plateau.reset();
            }
        }
    }
    Ok(report)
}

fn masked_nonzero(codes: &[Tensor], mask: &CoeffMask) -> usize {
    codes
        .iter()
        .map(|z| {
            let per = z.len() / mask.len();
            z.data()
                .chunks(per)
                .zip(mask.bits())
                .filter(|(_, &on)| !on)
                .map(|(c, _)| c.iter().filter(|&&v| v != 0.0).count())
                .sum::<usize>()
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub crop_size: usize,
    pub schedule: PowerDecay,
    pub seed: u64,
}

impl FinetuneConfig {
    pub fn paper() -> Self {
        Self {
            iterations: 10_000,
            batch_size: 32,
            crop_size: 128,
            schedule: PowerDecay::default(),
            seed: 0,
        }
    }

    pub fn desk() -> Self {
        Self {
            iterations: 300,
            batch_size: 8,
            crop_size: 32,
            ..Self::paper()
        }
    }
}

/// Optimize only the per-channel log-scales of `model` for `tradeoff`,
/// starting from the active scale set. Every other parameter is read-only.
pub fn finetune_scales(
    model: &CaeModel,
    data: &Dataset,
    tradeoff: Tradeoff,
    config: &FinetuneConfig,
) -> Result<ScaleSet> {
    tradeoff.validate()?;
    if config.batch_size == 0 || config.crop_size == 0 || config.crop_size % crate::cae::DOWNSAMPLE != 0 {
        return Err(Error::InvalidArgument("invalid fine-tuning batch or crop size".into()));
    }
    let mut log_scales = Tensor::from_vec(model.active_scales().log_scales.clone());
    let mut adam = AdamState::new(&[log_scales.len()]);
    let mut crops = CropSampler::new(config.crop_size, config.seed);
    let mut noise = Rng::with_stream(config.seed, streams::NOISE);
    for t in 0..config.iterations {
        let batch = crops.batch(data, config.batch_size)?;
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, false);
        let ls = tape.param(log_scales.clone());
        let fv = model.training_forward_on(&mut tape, &vars, ls, &batch, tradeoff, &mut noise)?;
        tape.backward(fv.loss)?;
        let g = tape.grad(ls).expect("tracked").to_vec();
        adam.step(&mut [&mut log_scales], &[&g], config.schedule.at(t as u64))?;
    }
    Ok(ScaleSet {
        log_scales: log_scales.into_data(),
        label: tradeoff.value(),
    })
}

/// Per-channel linear interpolation in log-scale space.
pub fn interpolate_scales(a: &ScaleSet, b: &ScaleSet, w: f64) -> Result<ScaleSet> {
    ScaleSet::interpolate(a, b, w)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preset {
    pub alpha: f64,
    pub code_channels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleSpec {
    pub presets: Vec<Preset>,
}

impl EnsembleSpec {
    pub fn paper() -> Self {
        Self {
            presets: vec![
                Preset { alpha: 0.01, code_channels: 96 },
                Preset { alpha: 0.05, code_channels: 96 },
                Preset { alpha: 0.2, code_channels: 64 },
            ],
        }
    }

    /// Same α values with 16/16/12 code channels.
    pub fn desk() -> Self {
        Self {
            presets: vec![
                Preset { alpha: 0.01, code_channels: 16 },
                Preset { alpha: 0.05, code_channels: 16 },
                Preset { alpha: 0.2, code_channels: 12 },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.presets.is_empty() || self.presets.len() > 256 {
            return Err(Error::InvalidArgument("ensemble needs 1..=256 presets".into()));
        }
        if self.presets.windows(2).any(|w| w[0].alpha >= w[1].alpha) {
            return Err(Error::InvalidArgument("presets must be ordered by strictly increasing alpha".into()));
        }
        for p in &self.presets {
            Tradeoff::Alpha(p.alpha).validate()?;
        }
        Ok(())
    }
}

/// Train one model per preset; model `i` gets id `i`.
pub fn train_ensemble(
    spec: &EnsembleSpec,
    base: CaeConfig,
    data: &Dataset,
    config: &TrainConfig,
    mut observer: impl FnMut(u8, &TraceRow),
) -> Result<Vec<(CaeModel, TrainReport)>> {
    spec.validate()?;
    let norm = data.normalization()?;
    let mut out = Vec::with_capacity(spec.presets.len());
    for (i, p) in spec.presets.iter().enumerate() {
        let id = i as u8;
        let tradeoff = Tradeoff::Alpha(p.alpha);
        let cfg = CaeConfig {
            code_channels: p.code_channels,
            ..base
        };
        let mut model = CaeModel::new(cfg, norm.clone(), tradeoff, config.seed)?;
        model.id = id;
        let tc = TrainConfig {
            tradeoff,
            initial_coeffs: config.initial_coeffs.min(p.code_channels),
            ..config.clone()
        };
        let report = train_incremental(&mut model, data, &tc, |r| observer(id, r))?;
        out.push((model, report));
    }
    Ok(out)
}

/// Convenience: a model for `data` with the surrogate set.
pub fn new_model(config: CaeConfig, data: &Dataset, tradeoff: Tradeoff, seed: u64) -> Result<CaeModel> {
    CaeModel::new(config, data.normalization()?, tradeoff, seed)
}

/// Same architecture and seed, different surrogate.
pub fn with_surrogate(config: CaeConfig, surrogate: SurrogateMode) -> CaeConfig {
    CaeConfig { surrogate, ..config }
}
