//! The `PXEB` model bundle.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "PXEB"
//! 4       4     format version (u32, currently 1)
//! 8       8     payload length n (u64)
//! 16      n     payload
//! 16+n    4     CRC-32 (IEEE) of the payload (u32)
//! ```
//!
//! All integers are little-endian, floats are IEEE-754 little-endian, and
//! float arrays carry a `u32` element count. The payload holds, in order:
//! input height and width (`u32`), the layer records, the similarity
//! function, the target policy, the prototype block and the optional head.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::proto::{ModelBundle, Provenance, PrototypeSet, SimilarityFunction, TargetPolicy};
use crate::tensor::{Backbone, Conv2d, LayerSpec, MaxPool2d, Tensor};

pub const MAGIC: &[u8; 4] = b"PXEB";
pub const VERSION: u32 = 1;

const LAYER_CONV: u8 = 0;
const LAYER_RELU: u8 = 1;
const LAYER_MAXPOOL: u8 = 2;
const SIM_LOG_RATIO: u8 = 0;
const SIM_NEG_EXP: u8 = 1;
const POLICY_TOP_K: u8 = 0;
const POLICY_THRESHOLD: u8 = 1;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::argument(format!("{v} exceeds u32")))?;
        self.0.extend(v.to_le_bytes());
        Ok(())
    }

    fn f64(&mut self, v: f64) {
        self.0.extend(v.to_le_bytes());
    }

    fn floats(&mut self, v: &[f32]) -> Result<()> {
        self.u32(v.len())?;
        for x in v {
            self.0.extend(x.to_le_bytes());
        }
        Ok(())
    }

    fn string(&mut self, s: &str) -> Result<()> {
        self.u32(s.len())?;
        self.0.extend(s.as_bytes());
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format!("payload ends inside {what} at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> std::result::Result<u8, String> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> std::result::Result<usize, String> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self, what: &str) -> std::result::Result<f64, String> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn floats(&mut self, what: &str, expected: usize) -> std::result::Result<Vec<f32>, String> {
        let n = self.u32(what)?;
        if n != expected {
            return Err(format!("{what} declares {n} values, shape needs {expected}"));
        }
        let b = self.take(n.checked_mul(4).ok_or("array too large")?, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn string(&mut self, what: &str) -> std::result::Result<String, String> {
        let n = self.u32(what)?;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| format!("{what} is not UTF-8"))
    }
}

/// Serializes a bundle to bytes.
pub fn encode_bundle(model: &ModelBundle) -> Result<Vec<u8>> {
    if model.prototypes().is_empty() {
        return Err(Error::argument("refusing to save a bundle without prototypes"));
    }
    let mut w = Writer::default();
    let (ih, iw) = model.input_size();
    w.u32(ih)?;
    w.u32(iw)?;
    w.u32(model.backbone().depth())?;
    for layer in model.backbone().layers() {
        match layer {
            LayerSpec::Conv2d(c) => {
                w.u8(LAYER_CONV);
                let (kh, kw) = c.kernel();
                for v in [c.out_channels(), c.in_channels(), kh, kw, c.stride(), c.padding()] {
                    w.u32(v)?;
                }
                w.floats(c.weight().data())?;
                w.floats(c.bias().data())?;
            }
            LayerSpec::Relu => w.u8(LAYER_RELU),
            LayerSpec::MaxPool2d(p) => {
                w.u8(LAYER_MAXPOOL);
                w.u32(p.window)?;
                w.u32(p.stride)?;
            }
        }
    }
    match model.simfn() {
        SimilarityFunction::LogRatio { epsilon } => {
            w.u8(SIM_LOG_RATIO);
            w.f64(epsilon);
        }
        SimilarityFunction::NegExp => {
            w.u8(SIM_NEG_EXP);
            w.f64(0.0);
        }
    }
    match model.policy() {
        TargetPolicy::ProtopnetTop10 => {
            w.u8(POLICY_TOP_K);
            w.f64(0.0);
        }
        TargetPolicy::PrototreeThreshold { theta } => {
            w.u8(POLICY_THRESHOLD);
            w.f64(theta);
        }
    }
    let protos = model.prototypes();
    w.u32(protos.len())?;
    w.u32(protos.dim())?;
    for v in protos.vectors() {
        w.floats(v)?;
    }
    for i in 0..protos.len() {
        match protos.provenance(i) {
            Some(p) => {
                w.u8(1);
                w.string(&p.image_id)?;
                w.u32(p.h)?;
                w.u32(p.w)?;
            }
            None => w.u8(0),
        }
    }
    match model.head() {
        Some(head) => {
            w.u8(1);
            w.u32(head.shape()[0])?;
            w.u32(head.shape()[1])?;
            w.floats(head.data())?;
        }
        None => w.u8(0),
    }
    let payload = w.0;
    let mut out = Vec::with_capacity(payload.len() + 20);
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((payload.len() as u64).to_le_bytes());
    out.extend(&payload);
    out.extend(crc32fast::hash(&payload).to_le_bytes());
    Ok(out)
}

/// Parses bytes written by [`encode_bundle`]. `origin` names the source in
/// diagnostics.
pub fn decode_bundle(bytes: &[u8], origin: &Path) -> Result<ModelBundle> {
    let fail = |m: String| Error::format(origin, m);
    if bytes.len() < 20 {
        return Err(fail(format!("{} bytes is too short for a bundle", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail(format!(
            "bad magic {:?}, expected \"PXEB\"",
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(fail(format!(
            "unsupported format version {version}, this build reads {VERSION}"
        )));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let expected = 16u64.checked_add(n).and_then(|v| v.checked_add(4));
    if expected != Some(bytes.len() as u64) {
        return Err(fail(format!(
            "payload length {n} does not match file size {}",
            bytes.len()
        )));
    }
    let payload = &bytes[16..16 + n as usize];
    let stored = u32::from_le_bytes(bytes[16 + n as usize..].try_into().expect("4 bytes"));
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(fail(format!(
            "checksum mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }
    let mut r = Reader {
        bytes: payload,
        pos: 0,
    };
    let model = read_payload(&mut r).map_err(fail)?;
    if r.pos != payload.len() {
        return Err(fail(format!(
            "{} trailing payload bytes",
            payload.len() - r.pos
        )));
    }
    model.map_err(|e| match e {
        Error::Config(m) | Error::Argument(m) => fail(m),
        other => other,
    })
}

fn read_payload(r: &mut Reader) -> std::result::Result<Result<ModelBundle>, String> {
    let ih = r.u32("input height")?;
    let iw = r.u32("input width")?;
    let depth = r.u32("layer count")?;
    let mut layers = Vec::new();
    for i in 0..depth {
        let what = format!("layer {i}");
        let layer = match r.u8(&what)? {
            LAYER_CONV => {
                let mut dims = [0usize; 6];
                for d in dims.iter_mut() {
                    *d = r.u32(&what)?;
                }
                let [out, inp, kh, kw, stride, padding] = dims;
                let count = out
                    .checked_mul(inp)
                    .and_then(|v| v.checked_mul(kh))
                    .and_then(|v| v.checked_mul(kw))
                    .ok_or_else(|| format!("{what}: weight shape overflows"))?;
                let weight = r.floats(&format!("{what} weights"), count)?;
                let bias = r.floats(&format!("{what} bias"), out)?;
                let conv = Tensor::new(vec![out, inp, kh, kw], weight)
                    .and_then(|wt| Conv2d::new(wt, Tensor::new(vec![out], bias)?, stride, padding));
                match conv {
                    Ok(c) => LayerSpec::Conv2d(c),
                    Err(e) => return Ok(Err(e)),
                }
            }
            LAYER_RELU => LayerSpec::Relu,
            LAYER_MAXPOOL => {
                let window = r.u32(&what)?;
                let stride = r.u32(&what)?;
                match MaxPool2d::new(window, stride) {
                    Ok(p) => LayerSpec::MaxPool2d(p),
                    Err(e) => return Ok(Err(e)),
                }
            }
            k => return Err(format!("{what}: unknown layer kind {k}")),
        };
        layers.push(layer);
    }
    let simfn = match (r.u8("similarity kind")?, r.f64("similarity parameter")?) {
        (SIM_LOG_RATIO, epsilon) => SimilarityFunction::LogRatio { epsilon },
        (SIM_NEG_EXP, _) => SimilarityFunction::NegExp,
        (k, _) => return Err(format!("unknown similarity kind {k}")),
    };
    let policy = match (r.u8("policy kind")?, r.f64("policy parameter")?) {
        (POLICY_TOP_K, _) => TargetPolicy::ProtopnetTop10,
        (POLICY_THRESHOLD, theta) => TargetPolicy::PrototreeThreshold { theta },
        (k, _) => return Err(format!("unknown policy kind {k}")),
    };
    let p = r.u32("prototype count")?;
    let d = r.u32("prototype dimension")?;
    let vectors = (0..p)
        .map(|i| r.floats(&format!("prototype {i}"), d))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut provenance = Vec::with_capacity(p);
    for i in 0..p {
        let what = format!("prototype {i} provenance");
        provenance.push(match r.u8(&what)? {
            0 => None,
            1 => Some(Provenance {
                image_id: r.string(&what)?,
                h: r.u32(&what)?,
                w: r.u32(&what)?,
            }),
            k => return Err(format!("{what}: bad presence flag {k}")),
        });
    }
    let head = match r.u8("head flag")? {
        0 => None,
        1 => {
            let classes = r.u32("head rows")?;
            let cols = r.u32("head columns")?;
            let data = r.floats("head", classes.saturating_mul(cols))?;
            match Tensor::new(vec![classes, cols], data) {
                Ok(t) => Some(t),
                Err(e) => return Ok(Err(e)),
            }
        }
        k => return Err(format!("bad head flag {k}")),
    };
    Ok(Backbone::new(layers).and_then(|backbone| {
        ModelBundle::new(
            backbone,
            PrototypeSet::with_provenance(vectors, provenance)?,
            simfn,
            head,
            policy,
            (ih, iw),
        )
    }))
}

pub fn save_bundle(model: &ModelBundle, path: &Path) -> Result<()> {
    let bytes = encode_bundle(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bundle(&bytes, path)
}
