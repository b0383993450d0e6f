//! Lossless transport of quantized coefficients and ensemble selection.
//!
//! A coding setting is a model id, a scale-set id and an interpolation
//! weight `w`. With `w = 0` the scale set is used as stored; otherwise its
//! log-scales are interpolated towards the next scale set and the tables of
//! whichever endpoint is nearer are used for coding.
//!
//! Coefficients are coded channel by channel in raster order. Channels
//! disabled by the model's mask are always zero and are not transmitted.

mod container;
mod histogram;
mod range;

pub use container::{CompressedFile, Header, HEADER_LEN, MAGIC, VERSION};
pub use histogram::{to_symbol, ChannelTable, SymbolHistogram, FREQ_TOTAL, MARGIN, MAX_SUPPORT};
pub use range::{RangeDecoder, RangeEncoder};

use crate::cae::{CaeModel, Ensemble, ScaleSet, DOWNSAMPLE};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::tensor::Tensor;

/// Fixed-point denominator of the interpolation weight.
pub const WEIGHT_ONE: f64 = 65536.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Setting {
    pub model_id: u8,
    pub scale_set: u8,
    pub interp_weight: u16,
}

impl Setting {
    pub fn plain(model_id: u8, scale_set: u8) -> Self {
        Self {
            model_id,
            scale_set,
            interp_weight: 0,
        }
    }

    pub fn weight(&self) -> f64 {
        f64::from(self.interp_weight) / WEIGHT_ONE
    }
}

/// Selection rule applied by [`compress`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Policy {
    /// Highest rate not exceeding the target bpp.
    MaxRateUnder(f64),
    /// Smallest distortion among settings not exceeding the target bpp.
    MinDistortionUnder(f64),
    Fixed(Setting),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CompressOptions {
    /// Interpolation points between consecutive scale sets, endpoints
    /// excluded.
    pub interp_steps: u16,
}

impl Default for CompressOptions {
    fn default() -> Self {
        Self { interp_steps: 3 }
    }
}

/// One fully coded candidate.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub setting: Setting,
    pub file: CompressedFile,
    pub codes: Tensor,
    pub reconstruction: RgbImage,
    pub mse: f64,
}

impl Candidate {
    pub fn bpp(&self) -> f64 {
        self.file.bpp()
    }
}

/// Log-scales and coding tables for `setting`.
pub fn resolve<'m>(model: &'m CaeModel, setting: Setting) -> Result<(ScaleSet, &'m SymbolHistogram)> {
    let s = usize::from(setting.scale_set);
    let set = model.scale_sets.get(s).ok_or_else(|| {
        Error::Format(format!("model {} has no scale set {s}", model.id))
    })?;
    let w = setting.weight();
    let (scales, table_idx) = if setting.interp_weight == 0 {
        (set.clone(), s)
    } else {
        let next = model.scale_sets.get(s + 1).ok_or_else(|| {
            Error::Format(format!("model {} has no scale set {} to interpolate towards", model.id, s + 1))
        })?;
        let idx = if w < 0.5 { s } else { s + 1 };
        (ScaleSet::interpolate(set, next, w)?, idx)
    };
    let hist = model.histograms[table_idx].as_ref().ok_or_else(|| {
        Error::InvalidArgument(format!(
            "model {} scale set {table_idx} has no coding tables; fit histograms first",
            model.id
        ))
    })?;
    Ok((scales, hist))
}

/// Every setting the ensemble can code with.
pub fn settings(ensemble: &Ensemble, opts: CompressOptions) -> Vec<Setting> {
    let mut out = Vec::new();
    for m in ensemble.models() {
        let n = m.scale_sets.len();
        for s in 0..n {
            if m.histograms[s].is_none() {
                continue;
            }
            out.push(Setting::plain(m.id, s as u8));
            if s + 1 < n && m.histograms[s + 1].is_some() {
                let steps = u32::from(opts.interp_steps);
                for k in 1..=steps {
                    let w = (u32::from(k) * 65536 / (steps + 1)) as u16;
                    out.push(Setting {
                        model_id: m.id,
                        scale_set: s as u8,
                        interp_weight: w,
                    });
                }
            }
        }
    }
    out
}

fn check_dims(image: &RgbImage) -> Result<()> {
    if u32::try_from(image.width()).is_err() || u32::try_from(image.height()).is_err() {
        return Err(Error::InvalidArgument("image dimensions exceed u32".into()));
    }
    Ok(())
}

/// Encoder output `f(x)` of the mirror-padded image.
pub fn analyze(model: &CaeModel, image: &RgbImage) -> Result<Tensor> {
    model.encode(&image.pad_to_multiple(DOWNSAMPLE).to_tensor())
}

/// Range-code integer `codes` with `hist`, skipping masked channels.
pub fn encode_codes(model: &CaeModel, hist: &SymbolHistogram, codes: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = codes.chw()?;
    if c != hist.channels() || c != model.code_channels() {
        return Err(Error::ShapeMismatch {
            op: "encode_codes",
            left: codes.shape().to_vec(),
            right: vec![hist.channels()],
        });
    }
    let mut enc = RangeEncoder::new();
    for (ch, plane) in codes.data().chunks(h * w).enumerate() {
        if !model.mask.is_enabled(ch) {
            continue;
        }
        let table = hist.table(ch);
        for &v in plane {
            table.encode(&mut enc, to_symbol(v)?);
        }
    }
    Ok(enc.finish())
}

/// Inverse of [`encode_codes`] for a `(C, h, w)` grid.
pub fn decode_codes(model: &CaeModel, hist: &SymbolHistogram, payload: &[u8], h: usize, w: usize) -> Result<Tensor> {
    let c = model.code_channels();
    let mut out = Tensor::zeros(&[c, h, w]);
    let mut dec = RangeDecoder::new(payload)?;
    for (ch, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
        if !model.mask.is_enabled(ch) {
            continue;
        }
        let table = hist.table(ch);
        for v in plane {
            *v = f64::from(table.decode(&mut dec)?);
        }
    }
    dec.finish()?;
    Ok(out)
}

fn mse_u8(a: &RgbImage, b: &RgbImage) -> f64 {
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum();
    s / a.data().len() as f64
}

/// Code `image` with one setting, given the model's encoder output `y`.
pub fn code_with(model: &CaeModel, setting: Setting, image: &RgbImage, y: &Tensor) -> Result<Candidate> {
    check_dims(image)?;
    let (scales, hist) = resolve(model, setting)?;
    let codes = model.quantize_coefficients(y, &scales.log_scales, true)?;
    let payload = encode_codes(model, hist, &codes)?;
    if u32::try_from(payload.len()).is_err() {
        return Err(Error::InvalidArgument("payload exceeds 4 GiB".into()));
    }
    let file = CompressedFile {
        header: Header {
            model_id: setting.model_id,
            scale_set: setting.scale_set,
            interp_weight: setting.interp_weight,
            width: image.width() as u32,
            height: image.height() as u32,
        },
        payload,
    };
    let reconstruction = synthesize(model, &codes, &scales, image.width(), image.height())?;
    let mse = mse_u8(image, &reconstruction);
    Ok(Candidate {
        setting,
        file,
        codes,
        reconstruction,
        mse,
    })
}

/// `g(codes / λ)`, rounded to 8 bits and cropped to `width × height`.
pub fn synthesize(model: &CaeModel, codes: &Tensor, scales: &ScaleSet, width: usize, height: usize) -> Result<RgbImage> {
    let x = model.reconstruct(codes, &scales.log_scales)?;
    RgbImage::from_tensor(&x)?.crop(width, height)
}

/// Laplace smoothing added to every table entry.
pub const SMOOTHING: u64 = 1;

/// Fit coding tables for scale set `set` on the integer codes of `images`.
pub fn fit_histograms(model: &CaeModel, images: &[RgbImage], set: usize) -> Result<SymbolHistogram> {
    let scales = model
        .scale_sets
        .get(set)
        .ok_or_else(|| Error::InvalidArgument(format!("model {} has no scale set {set}", model.id)))?;
    let codes = images
        .iter()
        .map(|img| model.quantize_coefficients(&analyze(model, img)?, &scales.log_scales, true))
        .collect::<Result<Vec<_>>>()?;
    SymbolHistogram::build(&codes, SMOOTHING)
}

/// Fit tables for every scale set of `model`.
pub fn fit_all_histograms(model: &mut CaeModel, images: &[RgbImage]) -> Result<()> {
    let tables = (0..model.scale_sets.len())
        .map(|s| fit_histograms(model, images, s).map(Some))
        .collect::<Result<Vec<_>>>()?;
    model.histograms = tables;
    Ok(())
}

/// Code `image` with every available setting.
pub fn candidates(ensemble: &Ensemble, image: &RgbImage, opts: CompressOptions) -> Result<Vec<Candidate>> {
    let all = settings(ensemble, opts);
    if all.is_empty() {
        return Err(Error::InvalidArgument("no model in the ensemble has coding tables".into()));
    }
    let mut out = Vec::with_capacity(all.len());
    let mut cached: Option<(u8, Tensor)> = None;
    for s in all {
        let model = ensemble.get(s.model_id).expect("setting from ensemble");
        if cached.as_ref().is_none_or(|(id, _)| *id != s.model_id) {
            cached = Some((s.model_id, analyze(model, image)?));
        }
        let y = &cached.as_ref().expect("just filled").1;
        out.push(code_with(model, s, image, y)?);
    }
    Ok(out)
}

/// Apply `policy` to already coded candidates.
pub fn select(cands: &[Candidate], policy: Policy) -> Result<usize> {
    let target = match policy {
        Policy::Fixed(s) => {
            return cands
                .iter()
                .position(|c| c.setting == s)
                .ok_or_else(|| Error::InvalidArgument(format!("setting {s:?} not available")));
        }
        Policy::MaxRateUnder(t) | Policy::MinDistortionUnder(t) => t,
    };
    let feasible: Vec<usize> = (0..cands.len()).filter(|&i| cands[i].bpp() <= target).collect();
    let better = |a: &Candidate, b: &Candidate| -> bool {
        match policy {
            Policy::MaxRateUnder(_) => (a.bpp(), -a.mse) > (b.bpp(), -b.mse),
            _ => (a.mse, a.bpp()) < (b.mse, b.bpp()),
        }
    };
    let mut best: Option<usize> = None;
    for i in feasible {
        if best.is_none_or(|b| better(&cands[i], &cands[b])) {
            best = Some(i);
        }
    }
    best.ok_or_else(|| {
        let mut achievable: Vec<f64> = cands.iter().map(Candidate::bpp).collect();
        achievable.sort_by(f64::total_cmp);
        Error::TargetUnreachable { target, achievable }
    })
}

/// Code `image` with the setting chosen by `policy`.
pub fn compress(ensemble: &Ensemble, image: &RgbImage, policy: Policy, opts: CompressOptions) -> Result<Candidate> {
    if let Policy::Fixed(s) = policy {
        let model = ensemble
            .get(s.model_id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown model id {}", s.model_id)))?;
        let y = analyze(model, image)?;
        return code_with(model, s, image, &y);
    }
    let mut cands = candidates(ensemble, image, opts)?;
    let i = select(&cands, policy)?;
    Ok(cands.swap_remove(i))
}

/// Decoded integer coefficients and the model/scales needed to synthesize.
pub fn decode_file<'e>(file: &CompressedFile, ensemble: &'e Ensemble) -> Result<(Tensor, &'e CaeModel, ScaleSet)> {
    let h = &file.header;
    let model = ensemble
        .get(h.model_id)
        .ok_or_else(|| Error::Format(format!("unknown model id {}", h.model_id)))?;
    let setting = Setting {
        model_id: h.model_id,
        scale_set: h.scale_set,
        interp_weight: h.interp_weight,
    };
    let (scales, hist) = resolve(model, setting)?;
    let ch = (h.height as usize).div_ceil(DOWNSAMPLE);
    let cw = (h.width as usize).div_ceil(DOWNSAMPLE);
    let codes = decode_codes(model, hist, &file.payload, ch, cw).map_err(|e| match e {
        Error::Corrupt { offset, reason } => Error::Corrupt {
            offset: offset + HEADER_LEN,
            reason,
        },
        other => other,
    })?;
    Ok((codes, model, scales))
}

pub fn decompress(bytes: &[u8], ensemble: &Ensemble) -> Result<RgbImage> {
    let file = CompressedFile::parse(bytes)?;
    let (codes, model, scales) = decode_file(&file, ensemble)?;
    synthesize(model, &codes, &scales, file.header.width as usize, file.header.height as usize)
}
