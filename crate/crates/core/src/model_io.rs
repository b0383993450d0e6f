//! Binary model files holding one or more models (an ensemble).
//!
//! The layout is documented in `docs/model-format.md`. Integers are
//! little-endian; reals are IEEE-754 binary64.

use std::path::Path;

use crate::cae::{CaeConfig, CaeModel, CoeffMask, Ensemble, ScaleSet, Tradeoff};
use crate::coder::{ChannelTable, SymbolHistogram};
use crate::entropy::GsmModel;
use crate::error::{Error, Result};
use crate::nn::{Normalization, Padding, SurrogateMode};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"CAEM";
pub const VERSION: u32 = 1;

const TAG_CONF: [u8; 4] = *b"CONF";
const TAG_CONV: [u8; 4] = *b"CONV";
const TAG_GSM: [u8; 4] = *b"GSM ";
const TAG_NORM: [u8; 4] = *b"NORM";
const TAG_SCAL: [u8; 4] = *b"SCAL";
const TAG_MASK: [u8; 4] = *b"MASK";
const TAG_HIST: [u8; 4] = *b"HIST";

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for &x in v {
            self.f64(x);
        }
    }
    fn len_u32(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("length fits in u32"));
    }
    fn section(&mut self, tag: [u8; 4], body: Writer) {
        self.buf.extend_from_slice(&tag);
        self.u64(body.buf.len() as u64);
        self.buf.extend_from_slice(&body.buf);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], base: usize) -> Self {
        Self { buf, pos: 0, base }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corrupt {
                offset: self.base + self.buf.len(),
                reason: format!("model file truncated: needed {n} more bytes"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if n > (self.buf.len() - self.pos) / 8 {
            return Err(Error::Corrupt {
                offset: self.base + self.pos,
                reason: format!("array of {n} reals exceeds section"),
            });
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn offset(&self) -> usize {
        self.base + self.pos
    }
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn encode_model(m: &CaeModel, w: &mut Writer) {
    let mut sections = Vec::new();

    let mut s = Writer::default();
    s.u8(m.id);
    s.len_u32(m.config.base_filters);
    s.len_u32(m.config.residual_blocks);
    s.len_u32(m.config.code_channels);
    s.u8(m.config.surrogate.to_byte());
    match m.tradeoff {
        Tradeoff::Beta(v) => {
            s.u8(0);
            s.f64(v);
        }
        Tradeoff::Alpha(v) => {
            s.u8(1);
            s.f64(v);
        }
    }
    sections.push((TAG_CONF, s));

    let mut s = Writer::default();
    s.len_u32(m.encoder.len());
    s.len_u32(m.decoder.len());
    for l in m.encoder.iter().chain(&m.decoder) {
        s.len_u32(l.in_channels);
        s.len_u32(l.out_channels);
        s.len_u32(l.kernel);
        s.len_u32(l.stride);
        s.u8(match l.padding {
            Padding::Mirror => 0,
            Padding::Zero => 1,
        });
        s.f64s(l.weight.data());
        s.f64s(l.bias.data());
    }
    sections.push((TAG_CONV, s));

    let mut s = Writer::default();
    s.len_u32(m.gsm.channels());
    s.len_u32(m.gsm.scales());
    s.f64s(m.gsm.log_weights.data());
    s.f64s(m.gsm.log_precisions.data());
    sections.push((TAG_GSM, s));

    let mut s = Writer::default();
    s.len_u32(m.norm.channels());
    s.f64s(&m.norm.mean);
    s.f64s(&m.norm.std);
    sections.push((TAG_NORM, s));

    let mut s = Writer::default();
    s.len_u32(m.scale_sets.len());
    s.len_u32(m.active_scale_set);
    for set in &m.scale_sets {
        s.f64(set.label);
        s.len_u32(set.log_scales.len());
        s.f64s(&set.log_scales);
    }
    sections.push((TAG_SCAL, s));

    let mut s = Writer::default();
    s.len_u32(m.mask.len());
    for &b in m.mask.bits() {
        s.u8(u8::from(b));
    }
    sections.push((TAG_MASK, s));

    let mut s = Writer::default();
    s.len_u32(m.histograms.len());
    for h in &m.histograms {
        match h {
            None => s.u8(0),
            Some(h) => {
                s.u8(1);
                s.len_u32(h.channels());
                for t in h.tables() {
                    s.i32(t.support().0);
                    s.len_u32(t.counts().len());
                    for &c in t.counts() {
                        s.u64(c);
                    }
                    s.u64(t.escape_count());
                }
            }
        }
    }
    sections.push((TAG_HIST, s));

    w.len_u32(sections.len());
    for (tag, body) in sections {
        w.section(tag, body);
    }
}

pub fn ensemble_to_bytes(ensemble: &Ensemble) -> Vec<u8> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(&MAGIC);
    w.u32(VERSION);
    w.len_u32(ensemble.models().len());
    for m in ensemble.models() {
        encode_model(m, &mut w);
    }
    w.buf
}

#[derive(Default)]
struct Parts {
    conf: Option<(u8, CaeConfig, Tradeoff)>,
    conv: Option<Vec<(usize, usize, usize, usize, Padding, Vec<f64>, Vec<f64>)>>,
    enc_layers: usize,
    gsm: Option<GsmModel>,
    norm: Option<Normalization>,
    scales: Option<(Vec<ScaleSet>, usize)>,
    mask: Option<CoeffMask>,
    hist: Option<Vec<Option<SymbolHistogram>>>,
}

fn parse_section(tag: [u8; 4], r: &mut Reader<'_>, p: &mut Parts) -> Result<()> {
    match tag {
        TAG_CONF => {
            let id = r.u8()?;
            let base_filters = r.usize()?;
            let residual_blocks = r.usize()?;
            let code_channels = r.usize()?;
            let surrogate = SurrogateMode::from_byte(r.u8()?)?;
            let kind = r.u8()?;
            let v = r.f64()?;
            let tradeoff = match kind {
                0 => Tradeoff::Beta(v),
                1 => Tradeoff::Alpha(v),
                k => return Err(format_err(format!("unknown tradeoff kind {k}"))),
            };
            let config = CaeConfig {
                base_filters,
                residual_blocks,
                code_channels,
                surrogate,
            };
            p.conf = Some((id, config, tradeoff));
        }
        TAG_CONV => {
            let ne = r.usize()?;
            let nd = r.usize()?;
            let mut layers = Vec::new();
            for _ in 0..ne + nd {
                let cin = r.usize()?;
                let cout = r.usize()?;
                let k = r.usize()?;
                let stride = r.usize()?;
                let pad = match r.u8()? {
                    0 => Padding::Mirror,
                    1 => Padding::Zero,
                    b => return Err(format_err(format!("unknown padding mode {b}"))),
                };
                let n = cout
                    .checked_mul(cin)
                    .and_then(|x| x.checked_mul(k * k))
                    .ok_or_else(|| format_err("layer size overflow"))?;
                let w = r.f64s(n)?;
                let b = r.f64s(cout)?;
                layers.push((cin, cout, k, stride, pad, w, b));
            }
            p.enc_layers = ne;
            p.conv = Some(layers);
        }
        TAG_GSM => {
            let k = r.usize()?;
            let s = r.usize()?;
            let n = k.checked_mul(s).ok_or_else(|| format_err("GSM size overflow"))?;
            let lw = Tensor::new(vec![k, s], r.f64s(n)?)?;
            let lp = Tensor::new(vec![k, s], r.f64s(n)?)?;
            p.gsm = Some(GsmModel::from_params(lw, lp)?);
        }
        TAG_NORM => {
            let c = r.usize()?;
            let mean = r.f64s(c)?;
            let std = r.f64s(c)?;
            p.norm = Some(Normalization::new(mean, std)?);
        }
        TAG_SCAL => {
            let n = r.usize()?;
            let active = r.usize()?;
            let mut sets = Vec::new();
            for _ in 0..n {
                let label = r.f64()?;
                let c = r.usize()?;
                sets.push(ScaleSet {
                    log_scales: r.f64s(c)?,
                    label,
                });
            }
            p.scales = Some((sets, active));
        }
        TAG_MASK => {
            let c = r.usize()?;
            let bits = (0..c)
                .map(|_| match r.u8()? {
                    0 => Ok(false),
                    1 => Ok(true),
                    b => Err(format_err(format!("mask entry {b} not 0/1"))),
                })
                .collect::<Result<Vec<_>>>()?;
            p.mask = Some(CoeffMask::from_bits(bits));
        }
        TAG_HIST => {
            let n = r.usize()?;
            let mut out = Vec::new();
            for _ in 0..n {
                match r.u8()? {
                    0 => out.push(None),
                    1 => {
                        let c = r.usize()?;
                        let mut tables = Vec::new();
                        for _ in 0..c {
                            let lo = r.i32()?;
                            let len = r.usize()?;
                            if len > crate::coder::MAX_SUPPORT {
                                return Err(format_err("histogram support too large"));
                            }
                            let counts = (0..len).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
                            let esc = r.u64()?;
                            tables.push(ChannelTable::from_counts(lo, counts, esc)?);
                        }
                        out.push(Some(SymbolHistogram::from_tables(tables)?));
                    }
                    b => return Err(format_err(format!("bad histogram presence flag {b}"))),
                }
            }
            p.hist = Some(out);
        }
        other => {
            log::warn!("skipping unknown model section {:?}", String::from_utf8_lossy(&other));
            r.take(r.buf.len() - r.pos)?;
        }
    }
    if !r.done() {
        return Err(Error::Corrupt {
            offset: r.offset(),
            reason: format!("section {:?} has trailing bytes", String::from_utf8_lossy(&tag)),
        });
    }
    Ok(())
}

fn assemble(p: Parts) -> Result<CaeModel> {
    let missing = |s: &str| format_err(format!("model is missing section {s}"));
    let (id, config, tradeoff) = p.conf.ok_or_else(|| missing("CONF"))?;
    let norm = p.norm.ok_or_else(|| missing("NORM"))?;
    let mut m = CaeModel::new(config, norm, tradeoff, 0)?;
    m.id = id;
    let conv = p.conv.ok_or_else(|| missing("CONV"))?;
    if p.enc_layers != m.encoder.len() || conv.len() != m.encoder.len() + m.decoder.len() {
        return Err(format_err("layer count does not match the configuration"));
    }
    for (spec, (cin, cout, k, stride, pad, w, b)) in m.encoder.iter_mut().chain(m.decoder.iter_mut()).zip(conv) {
        if (spec.in_channels, spec.out_channels, spec.kernel, spec.stride, spec.padding) != (cin, cout, k, stride, pad) {
            return Err(format_err("layer geometry does not match the configuration"));
        }
        spec.weight = Tensor::new(spec.weight.shape().to_vec(), w)?;
        spec.bias = Tensor::new(spec.bias.shape().to_vec(), b)?;
    }
    let gsm = p.gsm.ok_or_else(|| missing("GSM"))?;
    if gsm.channels() != config.code_channels {
        return Err(format_err("GSM channel count does not match the configuration"));
    }
    m.gsm = gsm;
    let (sets, active) = p.scales.ok_or_else(|| missing("SCAL"))?;
    if sets.is_empty() || active >= sets.len() || sets.iter().any(|s| s.log_scales.len() != config.code_channels) {
        return Err(format_err("inconsistent scale sets"));
    }
    m.scale_sets = sets;
    m.active_scale_set = active;
    let mask = p.mask.ok_or_else(|| missing("MASK"))?;
    if mask.len() != config.code_channels {
        return Err(format_err("mask length does not match the configuration"));
    }
    m.mask = mask;
    let hist = p.hist.unwrap_or_else(|| vec![None; m.scale_sets.len()]);
    if hist.len() != m.scale_sets.len() || hist.iter().flatten().any(|h| h.channels() != config.code_channels) {
        return Err(format_err("histograms do not match the scale sets"));
    }
    m.histograms = hist;
    Ok(m)
}

pub fn ensemble_from_bytes(bytes: &[u8]) -> Result<Ensemble> {
    let mut r = Reader::new(bytes, 0);
    if r.take(4).map_err(|_| format_err("not a model file"))? != MAGIC {
        return Err(format_err("bad magic, not a model file"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format_err(format!("unsupported model file version {version}")));
    }
    let count = r.usize()?;
    let mut models = Vec::new();
    for _ in 0..count {
        let sections = r.usize()?;
        let mut parts = Parts::default();
        for _ in 0..sections {
            let tag: [u8; 4] = r.take(4)?.try_into().expect("4");
            let len = r.u64()?;
            let len = usize::try_from(len).map_err(|_| format_err("section too large"))?;
            let base = r.offset();
            let body = r.take(len)?;
            parse_section(tag, &mut Reader::new(body, base), &mut parts)?;
        }
        models.push(assemble(parts)?);
    }
    if !r.done() {
        return Err(Error::Corrupt {
            offset: r.offset(),
            reason: "trailing bytes after last model".into(),
        });
    }
    Ensemble::new(models)
}

pub fn save_ensemble(ensemble: &Ensemble, path: &Path) -> Result<()> {
    write_atomic(path, &ensemble_to_bytes(ensemble))
}

pub fn load_ensemble(path: &Path) -> Result<Ensemble> {
    ensemble_from_bytes(&std::fs::read(path)?)
}

/// Write through a temporary sibling and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn model(id: u8, seed: u64) -> CaeModel {
        let norm = Normalization::new(vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]).unwrap();
        let mut m = CaeModel::new(CaeConfig::desk(), norm, Tradeoff::Alpha(0.05), seed).unwrap();
        m.id = id;
        m.mask = CoeffMask::new(16, 5);
        let mut rng = Rng::new(seed);
        let ls = (0..16).map(|_| rng.normal()).collect();
        m.add_scale_set(ScaleSet { log_scales: ls, label: 0.1 }).unwrap();
        let codes = Tensor::new(vec![16, 2, 2], (0..64).map(|i| f64::from(i % 5) - 2.0).collect()).unwrap();
        m.histograms[1] = Some(SymbolHistogram::build(&[codes], 1).unwrap());
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let e = Ensemble::new(vec![model(0, 1), model(1, 2)]).unwrap();
        let bytes = ensemble_to_bytes(&e);
        let back = ensemble_from_bytes(&bytes).unwrap();
        assert_eq!(back, e);
        assert_eq!(ensemble_to_bytes(&back), bytes);
    }

    #[test]
    fn truncation_and_magic_rejected() {
        let bytes = ensemble_to_bytes(&Ensemble::new(vec![model(0, 1)]).unwrap());
        assert!(ensemble_from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ensemble_from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes;
        bad[4] = 2;
        assert!(matches!(ensemble_from_bytes(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn atomic_write() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.cae");
        let e = Ensemble::new(vec![model(3, 4)]).unwrap();
        save_ensemble(&e, &p).unwrap();
        assert_eq!(load_ensemble(&p).unwrap(), e);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
