//! Compressive autoencoder: encoder, decoder, rate model, per-channel scales
//! and the incremental coefficient mask.
//!
//! Encoder: mirror-padded strided 5×5 convolutions down to 1/4 resolution,
//! residual blocks, and a final strided 5×5 convolution to `code_channels`
//! at 1/8 resolution. Decoder: zero-padded 3×3 convolutions followed by
//! sub-pixel reshuffles back to full resolution, then denormalization and
//! clipping to `[0, 255]`.

use crate::coder::SymbolHistogram;
use crate::entropy::GsmModel;
use crate::error::{Error, Result};
use crate::nn::{quantize_surrogate, round_half_away, uniform_noise, ConvSpec, Direction, Normalization, Padding, SurrogateMode, LEAKY_SLOPE};
use crate::rng::{streams, Rng};
use crate::tape::{ForwardMode, Tape, Var};
use crate::tensor::Tensor;

/// Spatial downsampling factor between image and coefficients.
pub const DOWNSAMPLE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CaeConfig {
    pub base_filters: usize,
    pub residual_blocks: usize,
    pub code_channels: usize,
    pub surrogate: SurrogateMode,
}

impl CaeConfig {
    /// Small network for experiments that run in minutes on one core.
    pub fn desk() -> Self {
        Self {
            base_filters: 16,
            residual_blocks: 1,
            code_channels: 16,
            surrogate: SurrogateMode::RoundSte,
        }
    }

    /// Full-size network (128 filters, 3 residual blocks, 96 code channels).
    pub fn paper() -> Self {
        Self {
            base_filters: 128,
            residual_blocks: 3,
            code_channels: 96,
            surrogate: SurrogateMode::RoundSte,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.code_channels == 0 || self.code_channels > 255 {
            return Err(Error::InvalidArgument(format!(
                "code_channels must be in 1..=255, got {}",
                self.code_channels
            )));
        }
        if self.base_filters < 2 {
            return Err(Error::InvalidArgument("base_filters must be >= 2".into()));
        }
        Ok(())
    }

    fn half_filters(&self) -> usize {
        (self.base_filters / 2).max(1)
    }
}

/// Rate–distortion tradeoff.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Tradeoff {
    /// `bits + β · MSE`
    Beta(f64),
    /// `−(α/N) ln q + (1 − α)/(1000 · M) · ‖x − x̂‖²`, with `N` coefficients
    /// and `M` pixel values.
    Alpha(f64),
}

impl Tradeoff {
    pub fn value(self) -> f64 {
        match self {
            Tradeoff::Beta(v) | Tradeoff::Alpha(v) => v,
        }
    }

    pub fn validate(self) -> Result<()> {
        let ok = match self {
            Tradeoff::Beta(b) => b > 0.0 && b.is_finite(),
            Tradeoff::Alpha(a) => a > 0.0 && a < 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid tradeoff {self:?}")))
        }
    }

    /// Combine rate and squared error into the training objective.
    ///
    /// `log2_q` is `log₂ q(·)` summed over `n_coeffs` coefficients and
    /// `sq_err` is `‖x − x̂‖²` over `n_pixels` values.
    pub fn loss(self, log2_q: f64, sq_err: f64, n_coeffs: usize, n_pixels: usize) -> f64 {
        match self {
            Tradeoff::Beta(b) => -log2_q + b * sq_err / n_pixels as f64,
            Tradeoff::Alpha(a) => {
                -(a / n_coeffs as f64) * log2_q * std::f64::consts::LN_2
                    + (1.0 - a) / (1000.0 * n_pixels as f64) * sq_err
            }
        }
    }

    fn coefficients(self, n_coeffs: usize, n_pixels: usize) -> (f64, f64) {
        // loss = rate_coef * log2_q + dist_coef * sq_err
        match self {
            Tradeoff::Beta(b) => (-1.0, b / n_pixels as f64),
            Tradeoff::Alpha(a) => (
                -(a / n_coeffs as f64) * std::f64::consts::LN_2,
                (1.0 - a) / (1000.0 * n_pixels as f64),
            ),
        }
    }
}

/// Per-channel log-scales `log λ`, shared across spatial positions.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleSet {
    pub log_scales: Vec<f64>,
    /// Tradeoff value the set was tuned for.
    pub label: f64,
}

impl ScaleSet {
    pub fn unit(channels: usize, label: f64) -> Self {
        Self {
            log_scales: vec![0.0; channels],
            label,
        }
    }

    pub fn scales(&self) -> Vec<f64> {
        self.log_scales.iter().map(|l| l.exp()).collect()
    }

    /// Per-channel linear interpolation of log-scales, `(1 − w)·a + w·b`.
    pub fn interpolate(a: &ScaleSet, b: &ScaleSet, w: f64) -> Result<ScaleSet> {
        if a.log_scales.len() != b.log_scales.len() {
            return Err(Error::ShapeMismatch {
                op: "interpolate_scales",
                left: vec![a.log_scales.len()],
                right: vec![b.log_scales.len()],
            });
        }
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::InvalidArgument(format!("interpolation weight {w} outside [0, 1]")));
        }
        if w == 0.0 {
            return Ok(a.clone());
        }
        if w == 1.0 {
            return Ok(b.clone());
        }
        let log_scales = a
            .log_scales
            .iter()
            .zip(&b.log_scales)
            .map(|(x, y)| (1.0 - w) * x + w * y)
            .collect();
        Ok(ScaleSet {
            log_scales,
            label: (1.0 - w) * a.label + w * b.label,
        })
    }
}

/// Binary per-channel gate; entries are only ever switched on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoeffMask {
    enabled: Vec<bool>,
}

impl CoeffMask {
    /// First `initial` channels enabled.
    pub fn new(channels: usize, initial: usize) -> Self {
        Self {
            enabled: (0..channels).map(|c| c < initial).collect(),
        }
    }

    pub fn full(channels: usize) -> Self {
        Self::new(channels, channels)
    }

    pub fn from_bits(enabled: Vec<bool>) -> Self {
        Self { enabled }
    }

    pub fn len(&self) -> usize {
        self.enabled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.enabled.is_empty()
    }

    pub fn popcount(&self) -> usize {
        self.enabled.iter().filter(|&&e| e).count()
    }

    pub fn is_enabled(&self, c: usize) -> bool {
        self.enabled[c]
    }

    pub fn all_enabled(&self) -> bool {
        self.enabled.iter().all(|&e| e)
    }

    /// Enable the lowest disabled channel; returns its index.
    pub fn enable_next(&mut self) -> Option<usize> {
        let c = self.enabled.iter().position(|&e| !e)?;
        self.enabled[c] = true;
        Some(c)
    }

    pub fn bits(&self) -> &[bool] {
        &self.enabled
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.enabled.iter().map(|&e| if e { 1.0 } else { 0.0 }).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaeModel {
    pub config: CaeConfig,
    /// Ensemble selector written into compressed files.
    pub id: u8,
    pub tradeoff: Tradeoff,
    pub encoder: Vec<ConvSpec>,
    pub decoder: Vec<ConvSpec>,
    pub gsm: GsmModel,
    pub norm: Normalization,
    pub scale_sets: Vec<ScaleSet>,
    pub active_scale_set: usize,
    pub mask: CoeffMask,
    /// Coding tables, one slot per scale set.
    pub histograms: Vec<Option<SymbolHistogram>>,
}

/// Models addressable by their one-byte id.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    models: Vec<CaeModel>,
}

impl Ensemble {
    pub fn new(models: Vec<CaeModel>) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::InvalidArgument("ensemble needs at least one model".into()));
        }
        for (i, m) in models.iter().enumerate() {
            if models[..i].iter().any(|o| o.id == m.id) {
                return Err(Error::InvalidArgument(format!("duplicate model id {}", m.id)));
            }
        }
        Ok(Self { models })
    }

    pub fn models(&self) -> &[CaeModel] {
        &self.models
    }

    pub fn models_mut(&mut self) -> &mut [CaeModel] {
        &mut self.models
    }

    pub fn into_models(self) -> Vec<CaeModel> {
        self.models
    }

    pub fn get(&self, id: u8) -> Option<&CaeModel> {
        self.models.iter().find(|m| m.id == id)
    }
}

/// Tape handles for every network parameter.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub encoder: Vec<(Var, Var)>,
    pub decoder: Vec<(Var, Var)>,
    pub gsm_log_weights: Var,
    pub gsm_log_precisions: Var,
}

impl ParamVars {
    /// All handles in [`CaeModel::params`] order.
    pub fn flat(&self) -> Vec<Var> {
        let mut v = Vec::new();
        for &(w, b) in self.encoder.iter().chain(&self.decoder) {
            v.push(w);
            v.push(b);
        }
        v.push(self.gsm_log_weights);
        v.push(self.gsm_log_precisions);
        v
    }
}

/// Values of one training forward pass, averaged over the batch.
#[derive(Clone, Debug)]
pub struct ForwardStats {
    pub rate_bits: f64,
    pub mse: f64,
    pub loss: f64,
    pub codes: Vec<Tensor>,
}

/// Tape handles produced by [`CaeModel::training_forward_on`].
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub loss: Var,
    pub stats: ForwardStats,
}

impl CaeModel {
    /// Freshly initialized model; weights drawn from `seed`.
    pub fn new(config: CaeConfig, norm: Normalization, tradeoff: Tradeoff, seed: u64) -> Result<Self> {
        config.validate()?;
        if norm.channels() != 3 {
            return Err(Error::InvalidArgument("normalization must have 3 channels".into()));
        }
        let f = config.base_filters;
        let h = config.half_filters();
        let c = config.code_channels;
        let mut layer = 0u64;
        let mut next = |cin, cout, k, stride, pad| {
            layer += 1;
            let mut rng = Rng::with_stream(seed, streams::INIT + 16 * layer);
            ConvSpec::new(cin, cout, k, stride, pad, &mut rng)
        };
        let mut encoder = vec![
            next(3, h, 5, 2, Padding::Mirror)?,
            next(h, f, 5, 2, Padding::Mirror)?,
        ];
        for _ in 0..config.residual_blocks {
            encoder.push(next(f, f, 3, 1, Padding::Mirror)?);
            encoder.push(next(f, f, 3, 1, Padding::Mirror)?);
        }
        encoder.push(next(f, c, 5, 2, Padding::Mirror)?);
        let mut decoder = vec![next(c, 4 * f, 3, 1, Padding::Zero)?];
        for _ in 0..config.residual_blocks {
            decoder.push(next(f, f, 3, 1, Padding::Zero)?);
            decoder.push(next(f, f, 3, 1, Padding::Zero)?);
        }
        decoder.push(next(f, 4 * h, 3, 1, Padding::Zero)?);
        decoder.push(next(h, 4 * 3, 3, 1, Padding::Zero)?);
        Ok(Self {
            config,
            id: 0,
            tradeoff,
            encoder,
            decoder,
            gsm: GsmModel::new(c),
            norm,
            scale_sets: vec![ScaleSet::unit(c, tradeoff.value())],
            active_scale_set: 0,
            mask: CoeffMask::full(c),
            histograms: vec![None],
        })
    }

    pub fn code_channels(&self) -> usize {
        self.config.code_channels
    }

    pub fn active_scales(&self) -> &ScaleSet {
        &self.scale_sets[self.active_scale_set]
    }

    pub fn add_scale_set(&mut self, set: ScaleSet) -> Result<usize> {
        if set.log_scales.len() != self.code_channels() {
            return Err(Error::ShapeMismatch {
                op: "add_scale_set",
                left: vec![set.log_scales.len()],
                right: vec![self.code_channels()],
            });
        }
        if self.scale_sets.len() >= 255 {
            return Err(Error::InvalidArgument("at most 255 scale sets".into()));
        }
        self.scale_sets.push(set);
        self.histograms.push(None);
        Ok(self.scale_sets.len() - 1)
    }

    /// Trainable tensors: conv weights and biases (encoder, then decoder),
    /// then GSM log-weights and log-precisions.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut v = Vec::new();
        for l in self.encoder.iter().chain(&self.decoder) {
            v.push(&l.weight);
            v.push(&l.bias);
        }
        v.push(&self.gsm.log_weights);
        v.push(&self.gsm.log_precisions);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = Vec::new();
        for l in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            v.push(&mut l.weight);
            v.push(&mut l.bias);
        }
        v.push(&mut self.gsm.log_weights);
        v.push(&mut self.gsm.log_precisions);
        v
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Put every parameter on `tape`, tracked or not.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let mut leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let encoder = self
            .encoder
            .iter()
            .map(|l| (leaf(&l.weight), leaf(&l.bias)))
            .collect();
        let decoder = self
            .decoder
            .iter()
            .map(|l| (leaf(&l.weight), leaf(&l.bias)))
            .collect();
        ParamVars {
            encoder,
            decoder,
            gsm_log_weights: leaf(&self.gsm.log_weights),
            gsm_log_precisions: leaf(&self.gsm.log_precisions),
        }
    }

    fn apply_layer(&self, tape: &mut Tape, spec: &ConvSpec, vars: (Var, Var), x: Var) -> Result<Var> {
        spec.apply(tape, x, vars.0, vars.1)
    }

    /// Residual block: conv → leaky → conv, plus identity skip.
    fn residual(
        &self,
        tape: &mut Tape,
        layers: &[ConvSpec],
        vars: &[(Var, Var)],
        x: Var,
    ) -> Result<Var> {
        let h = self.apply_layer(tape, &layers[0], vars[0], x)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        let h = self.apply_layer(tape, &layers[1], vars[1], h)?;
        tape.add(x, h)
    }

    /// Encoder on a tape: `(3, H, W)` pixels → `(C, H/8, W/8)` coefficients.
    pub fn encode_on(&self, tape: &mut Tape, vars: &ParamVars, image: Var) -> Result<Var> {
        let (c, h, w) = tape.value(image).chw()?;
        if c != 3 || h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
            return Err(Error::InvalidShape {
                op: "encode",
                shape: vec![c, h, w],
                reason: format!("expected 3 channels and dims divisible by {DOWNSAMPLE}"),
            });
        }
        let enc = &self.encoder;
        let ev = &vars.encoder;
        let mut x = self.norm.normalize(tape, image)?;
        x = self.apply_layer(tape, &enc[0], ev[0], x)?;
        x = tape.leaky_relu(x, LEAKY_SLOPE)?;
        x = self.apply_layer(tape, &enc[1], ev[1], x)?;
        x = tape.leaky_relu(x, LEAKY_SLOPE)?;
        for b in 0..self.config.residual_blocks {
            let i = 2 + 2 * b;
            x = self.residual(tape, &enc[i..i + 2], &ev[i..i + 2], x)?;
        }
        let last = enc.len() - 1;
        self.apply_layer(tape, &enc[last], ev[last], x)
    }

    /// Decoder on a tape: `(C, h, w)` coefficients → `(3, 8h, 8w)` pixels in
    /// `[0, 255]`.
    pub fn decode_on(&self, tape: &mut Tape, vars: &ParamVars, codes: Var) -> Result<Var> {
        let (c, _, _) = tape.value(codes).chw()?;
        if c != self.code_channels() {
            return Err(Error::ShapeMismatch {
                op: "decode",
                left: tape.value(codes).shape().to_vec(),
                right: vec![self.code_channels()],
            });
        }
        let dec = &self.decoder;
        let dv = &vars.decoder;
        let mut x = self.apply_layer(tape, &dec[0], dv[0], codes)?;
        x = tape.subpixel(x, 2, Direction::Up)?;
        x = tape.leaky_relu(x, LEAKY_SLOPE)?;
        for b in 0..self.config.residual_blocks {
            let i = 1 + 2 * b;
            x = self.residual(tape, &dec[i..i + 2], &dv[i..i + 2], x)?;
        }
        let n = dec.len();
        x = self.apply_layer(tape, &dec[n - 2], dv[n - 2], x)?;
        x = tape.subpixel(x, 2, Direction::Up)?;
        x = tape.leaky_relu(x, LEAKY_SLOPE)?;
        x = self.apply_layer(tape, &dec[n - 1], dv[n - 1], x)?;
        x = tape.subpixel(x, 2, Direction::Up)?;
        x = self.norm.denormalize(tape, x)?;
        tape.clip_st(x, 0.0, 255.0)
    }

    /// Real-valued coefficients `f(x)`.
    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let y = self.encode_on(&mut tape, &vars, x)?;
        Ok(tape.value(y).clone())
    }

    /// `g(codes)` clipped to `[0, 255]`.
    pub fn decode(&self, codes: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let z = tape.constant(codes.clone());
        let x = self.decode_on(&mut tape, &vars, z)?;
        Ok(tape.value(x).clone())
    }

    /// Test-time integer codes `[f(x) ∘ λ] ∘ m`.
    pub fn quantized_codes(&self, image: &Tensor, log_scales: &[f64]) -> Result<Tensor> {
        let y = self.encode(image)?;
        self.quantize_coefficients(&y, log_scales, true)
    }

    /// `y ∘ λ ∘ m`, rounded when `round` is set.
    pub fn quantize_coefficients(&self, y: &Tensor, log_scales: &[f64], round: bool) -> Result<Tensor> {
        let (c, h, w) = y.chw()?;
        if log_scales.len() != c {
            return Err(Error::ShapeMismatch {
                op: "quantize",
                left: y.shape().to_vec(),
                right: vec![log_scales.len()],
            });
        }
        let mut out = y.clone();
        for (ch, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
            let lam = log_scales[ch].exp();
            let on = self.mask.is_enabled(ch);
            for v in plane {
                *v = if !on {
                    0.0
                } else if round {
                    round_half_away(*v * lam)
                } else {
                    *v * lam
                };
            }
        }
        Ok(out)
    }

    /// `g(codes / λ)`.
    pub fn reconstruct(&self, codes: &Tensor, log_scales: &[f64]) -> Result<Tensor> {
        let (c, h, w) = codes.chw()?;
        if log_scales.len() != c {
            return Err(Error::ShapeMismatch {
                op: "reconstruct",
                left: codes.shape().to_vec(),
                right: vec![log_scales.len()],
            });
        }
        let mut scaled = codes.clone();
        for (ch, plane) in scaled.data_mut().chunks_mut(h * w).enumerate() {
            let inv = (-log_scales[ch]).exp();
            for v in plane {
                *v *= inv;
            }
        }
        self.decode(&scaled)
    }

    /// Batch objective on `tape`.
    ///
    /// Per image: `codes = Q(f(x) ∘ λ) ∘ m` with `Q` the configured
    /// surrogate, rate `−log₂ q(codes + u)` (for additive noise the noise is
    /// the quantizer itself and is not added twice), distortion
    /// `‖x − g(codes / λ)‖²`. The returned loss is the batch mean.
    #[allow(clippy::too_many_arguments)]
    pub fn training_forward_on(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        log_scales: Var,
        images: &[Tensor],
        tradeoff: Tradeoff,
        rng: &mut Rng,
    ) -> Result<ForwardVars> {
        if images.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mode = self.config.surrogate;
        let mask = tape.constant(Tensor::from_vec(self.mask.as_f64()));
        let lam = tape.exp(log_scales)?;
        let neg = tape.scale(log_scales, -1.0)?;
        let inv_lam = tape.exp(neg)?;
        let mut total: Option<Var> = None;
        let mut stats = ForwardStats {
            rate_bits: 0.0,
            mse: 0.0,
            loss: 0.0,
            codes: Vec::with_capacity(images.len()),
        };
        for image in images {
            let x = tape.constant(image.clone());
            let y = self.encode_on(tape, vars, x)?;
            let ys = tape.mul_channel(y, lam)?;
            let shape = tape.value(ys).shape().to_vec();
            let (codes, rate_in) = if mode == SurrogateMode::AdditiveNoise {
                let masked = tape.mul_channel(ys, mask)?;
                let noisy = quantize_surrogate(tape, masked, mode, rng)?;
                (noisy, noisy)
            } else {
                let q = quantize_surrogate(tape, ys, mode, rng)?;
                let masked = tape.mul_channel(q, mask)?;
                let u = tape.constant(uniform_noise(&shape, rng));
                let rate_in = tape.add(masked, u)?;
                (masked, rate_in)
            };
            let log2_q = tape.gsm_log2_density(rate_in, vars.gsm_log_weights, vars.gsm_log_precisions)?;
            let dec_in = tape.mul_channel(codes, inv_lam)?;
            let xhat = self.decode_on(tape, vars, dec_in)?;
            let sq = tape.sq_err_sum(xhat, x)?;

            let n_coeffs = shape.iter().product::<usize>();
            let n_pixels = image.len();
            let (rc, dc) = tradeoff.coefficients(n_coeffs, n_pixels);
            let r_term = tape.scale(log2_q, rc)?;
            let d_term = tape.scale(sq, dc)?;
            let loss = tape.add(r_term, d_term)?;
            total = Some(match total {
                Some(t) => tape.add(t, loss)?,
                None => loss,
            });

            stats.rate_bits -= tape.value(log2_q).item();
            stats.mse += tape.value(sq).item() / n_pixels as f64;
            stats.codes.push(tape.value(codes).clone());
        }
        let n = images.len() as f64;
        let loss = tape.scale(total.expect("non-empty batch"), 1.0 / n)?;
        stats.rate_bits /= n;
        stats.mse /= n;
        stats.loss = tape.value(loss).item();
        if !stats.loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss (rate {} bits, mse {})",
                stats.rate_bits, stats.mse
            )));
        }
        Ok(ForwardVars { loss, stats })
    }

    /// Evaluate the training objective without keeping gradients.
    pub fn training_forward(
        &self,
        images: &[Tensor],
        tradeoff: Tradeoff,
        rng: &mut Rng,
    ) -> Result<ForwardStats> {
        let mut tape = Tape::with_mode(ForwardMode::Exact);
        let vars = self.bind(&mut tape, false);
        let ls = tape.constant(Tensor::from_vec(self.active_scales().log_scales.clone()));
        Ok(self
            .training_forward_on(&mut tape, &vars, ls, images, tradeoff, rng)?
            .stats)
    }
}
