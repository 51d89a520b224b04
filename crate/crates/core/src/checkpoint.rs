//! Binary checkpoint format.
//!
//! ```text
//! magic "MSQCKPT\0" | version u32 | section count u32
//! per section: name len u32 | name | payload len u64 | crc32 u32 | payload
//! ```
//!
//! All integers and floats are little-endian. Parameter sections hold
//! `count u32` tensors, each `name len u32 | name | ndim u32 | dims u64.. |
//! f64 data`.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::Params;
use crate::numcore::{SeededRng, Tensor};
use crate::optim::AdamState;
use crate::pipeline::Pipeline;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 8] = b"MSQCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

const SECTIONS: [&str; 9] = [
    "config",
    "params.bank",
    "params.connector",
    "params.dit",
    "params.align",
    "params.backbone",
    "optim",
    "rng",
    "step",
];

/// Complete training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Pipeline,
    /// Adam state for the trainable groups (bank, connector, DiT, alignment).
    pub optim: Vec<AdamState>,
    pub rng: SeededRng,
    pub step: u64,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        self.0.extend_from_slice(&t.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    section: &'a str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], section: &'a str) -> Self {
        Self { buf, pos: 0, section }
    }
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Load { section: self.section.to_string(), msg: msg.into() }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated: need {n} bytes at offset {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| self.err("non-UTF-8 name"))
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return Err(self.err(format!("implausible rank {ndim}")));
        }
        let shape = (0..ndim).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.err("tensor too large"))?)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Tensor::new(shape, data).map_err(|e| self.err(e.to_string()))
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

/// Serializes a parameter group (names, shapes, and values in visit order).
pub fn encode_params(p: &dyn Params) -> Vec<u8> {
    let named = p.named_tensors();
    let mut w = Writer(Vec::new());
    w.u32(named.len() as u32);
    for (name, t) in named {
        w.str(&name);
        w.tensor(t);
    }
    w.0
}

/// Overwrites `p` from a blob; names and shapes must match exactly.
fn decode_params_into(p: &mut dyn Params, blob: &[u8], section: &str) -> Result<()> {
    let expected: Vec<(String, Vec<usize>)> =
        p.named_tensors().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    let mut r = Reader::new(blob, section);
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(r.err(format!("schema mismatch: {count} tensors, config expects {}", expected.len())));
    }
    let mut loaded = Vec::with_capacity(count);
    for (name, shape) in &expected {
        let got = r.str()?;
        let t = r.tensor()?;
        if &got != name || t.shape() != shape.as_slice() {
            return Err(r.err(format!(
                "schema mismatch: found `{got}` {:?}, config expects `{name}` {shape:?}",
                t.shape()
            )));
        }
        loaded.push(t);
    }
    r.finish()?;
    let mut it = loaded.into_iter();
    p.visit_mut(&mut |t| *t = it.next().expect("count checked"));
    Ok(())
}

/// SHA-256 of the frozen backbone's parameter blob.
pub fn backbone_hash(model: &Pipeline) -> [u8; 32] {
    Sha256::digest(encode_params(&model.backbone)).into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn encode_optim(states: &[AdamState]) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.u32(states.len() as u32);
    for s in states {
        w.u64(s.step);
        w.u32(s.m.len() as u32);
        for t in s.m.iter().chain(&s.v) {
            w.tensor(t);
        }
    }
    w.0
}

fn decode_optim(blob: &[u8]) -> Result<Vec<AdamState>> {
    let mut r = Reader::new(blob, "optim");
    let groups = r.u32()? as usize;
    let mut out = Vec::with_capacity(groups);
    for _ in 0..groups {
        let step = r.u64()?;
        let n = r.u32()? as usize;
        let m = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        let v = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        out.push(AdamState { step, m, v });
    }
    r.finish()?;
    Ok(out)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let config = serde_json::to_vec(&self.config).expect("config serializes");
        let mut rng = Writer(Vec::new());
        for w in self.rng.to_words() {
            rng.u64(w);
        }
        let payloads: [Vec<u8>; 9] = [
            config,
            encode_params(&self.model.bank),
            encode_params(&self.model.connector),
            encode_params(&self.model.dit),
            encode_params(&self.model.align),
            encode_params(&self.model.backbone),
            encode_optim(&self.optim),
            rng.0,
            self.step.to_le_bytes().to_vec(),
        ];
        let mut w = Writer(MAGIC.to_vec());
        w.u32(FORMAT_VERSION);
        w.u32(SECTIONS.len() as u32);
        for (name, payload) in SECTIONS.iter().zip(&payloads) {
            w.str(name);
            w.u64(payload.len() as u64);
            w.u32(crc32fast::hash(payload));
            w.0.extend_from_slice(payload);
        }
        w.0
    }

    /// Parses a checkpoint, verifying magic, version, section order and CRCs,
    /// and that every tensor matches the embedded config's schema.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "header");
        if r.take(MAGIC.len())? != MAGIC {
            return Err(r.err("bad magic; not a checkpoint"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(r.err(format!("unsupported format version {version} (expected {FORMAT_VERSION})")));
        }
        let count = r.u32()? as usize;
        if count != SECTIONS.len() {
            return Err(r.err(format!("{count} sections, expected {}", SECTIONS.len())));
        }
        let mut payloads = Vec::with_capacity(count);
        for expected in SECTIONS {
            let name = r.str()?;
            if name != expected {
                return Err(Error::Load { section: name, msg: format!("expected section `{expected}`") });
            }
            let len = r.u64()? as usize;
            let crc = r.u32()?;
            r.section = expected;
            let payload = r.take(len)?;
            if crc32fast::hash(payload) != crc {
                return Err(r.err("checksum mismatch"));
            }
            payloads.push(payload);
            r.section = "header";
        }
        r.finish()?;

        let config: TrainConfig = serde_json::from_slice(payloads[0])
            .map_err(|e| Error::Load { section: "config".into(), msg: e.to_string() })?;
        config.validate().map_err(|e| Error::Load { section: "config".into(), msg: e.to_string() })?;
        let mut model = Pipeline::init(config.model.clone(), &mut SeededRng::new(0))
            .map_err(|e| Error::Load { section: "config".into(), msg: e.to_string() })?;
        decode_params_into(&mut model.bank, payloads[1], SECTIONS[1])?;
        decode_params_into(&mut model.connector, payloads[2], SECTIONS[2])?;
        decode_params_into(&mut model.dit, payloads[3], SECTIONS[3])?;
        decode_params_into(&mut model.align, payloads[4], SECTIONS[4])?;
        decode_params_into(&mut model.backbone, payloads[5], SECTIONS[5])?;
        let optim = decode_optim(payloads[6])?;
        for (s, group) in optim.iter().zip(model.trainable_groups()) {
            let shapes: Vec<Vec<usize>> = group.named_tensors().iter().map(|(_, t)| t.shape().to_vec()).collect();
            let ok = s.m.is_empty()
                || (s.m.len() == shapes.len()
                    && s.m.iter().zip(&s.v).zip(&shapes).all(|((m, v), sh)| m.shape() == sh.as_slice() && v.shape() == sh.as_slice()));
            if !ok {
                return Err(Error::Load { section: "optim".into(), msg: "moment shapes do not match parameters".into() });
            }
        }
        let mut rr = Reader::new(payloads[7], "rng");
        let words = [rr.u64()?, rr.u64()?, rr.u64()?, rr.u64()?, rr.u64()?];
        rr.finish()?;
        let mut sr = Reader::new(payloads[8], "step");
        let step = sr.u64()?;
        sr.finish()?;
        Ok(Self { config, model, optim, rng: SeededRng::from_words(words), step })
    }

    /// Like [`Checkpoint::from_bytes`], additionally requiring the stored scales
    /// to equal `scales`.
    pub fn from_bytes_expecting(bytes: &[u8], scales: &crate::msq::ScaleSet) -> Result<Self> {
        let c = Self::from_bytes(bytes)?;
        if &c.config.model.scales != scales {
            return Err(Error::Load {
                section: "config".into(),
                msg: format!("schema mismatch: checkpoint scales {:?}, expected {:?}", c.config.model.scales, scales),
            });
        }
        Ok(c)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::{fresh_checkpoint, TrainConfig};

    fn tiny() -> Checkpoint {
        fresh_checkpoint(&TrainConfig::tiny()).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = tiny();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corruption_is_detected_per_section() {
        let bytes = tiny().to_bytes();
        for pos in [bytes.len() / 3, bytes.len() / 2, bytes.len() - 3] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x40;
            match Checkpoint::from_bytes(&bad) {
                Err(Error::Load { section, msg }) => assert!(!section.is_empty() && !msg.is_empty()),
                other => panic!("corruption at {pos} not detected: {other:?}"),
            }
        }
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Load { .. })));
    }

    #[test]
    fn unknown_version_is_rejected() {
        let mut bytes = tiny().to_bytes();
        bytes[8] = 9;
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::Load { msg, .. }) => assert!(msg.contains("version 9")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn changed_scales_are_a_schema_error() {
        let bytes = tiny().to_bytes();
        let other = crate::msq::ScaleSet::parse("1x1,2x2,4x4").unwrap();
        assert!(matches!(Checkpoint::from_bytes_expecting(&bytes, &other), Err(Error::Load { .. })));
        let same = tiny().config.model.scales;
        assert!(Checkpoint::from_bytes_expecting(&bytes, &same).is_ok());
    }

    #[test]
    fn blob_that_disagrees_with_config_is_rejected() {
        let c = tiny();
        let mut cfg2 = c.config.clone();
        cfg2.model.scales = crate::msq::ScaleSet::parse("1x1,4x4").unwrap();
        let mut swapped = c.clone();
        swapped.config = cfg2;
        match Checkpoint::from_bytes(&swapped.to_bytes()) {
            Err(Error::Load { section, msg }) => {
                assert_eq!(section, "params.bank");
                assert!(msg.contains("schema"));
            }
            other => panic!("{other:?}"),
        }
    }
}
