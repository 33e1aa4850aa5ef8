//! Binary model files.
//!
//! Layout (little-endian):
//!
//! ```text
//! "SCAN"  version:u8 = 1  form:u8 (0 sac, 1 absorbed)  layers:u32
//! per layer:  in:u32 out:u32
//!             form 0: k[out·in·9]  k_i[out·in·9]  θ[out]
//!             form 1: k_u[out·in·9]
//! head:       classes:u32 channels:u32 weights[classes·channels] bias[classes]
//! crc32:u32   over every preceding byte
//! ```
//!
//! All values are `f32`. Every layer is ReLU-activated and uses `γ_m = 1`;
//! networks outside that are rejected on save.

use std::path::Path;

use crate::error::{Result, ScanError};
use crate::network::{Head, Layer, NetworkForm, PlainLayer, SacNetwork};
use crate::sac::{SacLayer, DEFAULT_GAMMA_M, KERNEL_SIZE};
use crate::tensor::DenseArray;

pub const MAGIC: &[u8; 4] = b"SCAN";
pub const VERSION: u8 = 1;

const TAPS: usize = KERNEL_SIZE * KERNEL_SIZE;
/// Upper bound on any single dimension, to reject garbage before allocating.
const MAX_DIM: u32 = 1 << 16;

pub fn encode_model(net: &SacNetwork) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(net.form().code());
    put_u32(&mut out, net.layers().len())?;
    for (i, layer) in net.layers().iter().enumerate() {
        if !layer.relu() {
            return Err(ScanError::Format(format!("layer {i} has no ReLU; the file format cannot express that")));
        }
        put_u32(&mut out, layer.in_channels())?;
        put_u32(&mut out, layer.out_channels())?;
        match layer {
            Layer::Sac(s) => {
                if s.gamma_m() != DEFAULT_GAMMA_M {
                    return Err(ScanError::Format(format!(
                        "layer {i} uses gamma_m = {}; the file format fixes it at {DEFAULT_GAMMA_M}",
                        s.gamma_m()
                    )));
                }
                put_f32s(&mut out, s.k().data());
                put_f32s(&mut out, s.k_i().data());
                put_f32s(&mut out, s.theta());
            }
            Layer::Plain(p) => put_f32s(&mut out, p.kernel().data()),
        }
    }
    let head = net.head();
    put_u32(&mut out, head.classes())?;
    put_u32(&mut out, head.channels())?;
    put_f32s(&mut out, head.weights.data());
    put_f32s(&mut out, head.bias.data());
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<SacNetwork> {
    if bytes.len() < 6 {
        return Err(ScanError::Format(format!("file truncated: {} bytes, header needs 6", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(ScanError::Format(format!("bad magic {:02x?}, expected \"SCAN\"", &bytes[..4])));
    }
    if bytes[4] != VERSION {
        return Err(ScanError::Format(format!(
            "unsupported format version {}, this build reads version {VERSION}",
            bytes[4]
        )));
    }
    let form = match bytes[5] {
        0 => NetworkForm::Sac,
        1 => NetworkForm::Absorbed,
        other => return Err(ScanError::Format(format!("unknown form code {other}"))),
    };
    if bytes.len() < 10 {
        return Err(ScanError::Format("file truncated inside the header".into()));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 4);
    let mut r = Reader { bytes: payload, pos: 6 };
    let layer_count = r.dim("layer count")?;
    let mut layers = Vec::with_capacity(layer_count);
    for i in 0..layer_count {
        let c_in = r.dim("input channels")?;
        let c_out = r.dim("output channels")?;
        let bank = c_out * c_in * TAPS;
        let shape = [c_out, c_in, KERNEL_SIZE, KERNEL_SIZE];
        let layer = match form {
            NetworkForm::Sac => {
                let k = DenseArray::from_vec(&shape, r.f32s(bank, "k bank")?)?;
                let k_i = DenseArray::from_vec(&shape, r.f32s(bank, "k_i bank")?)?;
                let theta = r.f32s(c_out, "scale vector")?;
                Layer::Sac(
                    SacLayer::from_parts(k, k_i, theta, DEFAULT_GAMMA_M, true)
                        .map_err(|e| ScanError::Format(format!("layer {i}: {e}")))?,
                )
            }
            NetworkForm::Absorbed => {
                let k_u = DenseArray::from_vec(&shape, r.f32s(bank, "k_u bank")?)?;
                Layer::Plain(PlainLayer::from_kernel(k_u, true).map_err(|e| ScanError::Format(format!("layer {i}: {e}")))?)
            }
        };
        layers.push(layer);
    }
    let classes = r.dim("class count")?;
    let channels = r.dim("head channels")?;
    let weights = DenseArray::from_vec(&[classes, channels], r.f32s(classes * channels, "head weights")?)?;
    let bias = DenseArray::from_vec(&[classes], r.f32s(classes, "head bias")?)?;
    if r.pos != payload.len() {
        return Err(ScanError::Format(format!(
            "{} unexpected bytes after the head",
            payload.len() - r.pos
        )));
    }
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(ScanError::Format(format!(
            "checksum mismatch: file says {stored:08x}, contents hash to {actual:08x}"
        )));
    }
    SacNetwork::new(layers, Head { weights, bias }).map_err(|e| ScanError::Format(format!("inconsistent model: {e}")))
}

pub fn save_model(net: &SacNetwork, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_model(net)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<SacNetwork> {
    decode_model(&std::fs::read(path)?)
}

/// The network as it will read back from a file: every value rounded to `f32`.
pub fn round_to_f32(net: &SacNetwork) -> SacNetwork {
    let arrays: Vec<DenseArray> = net
        .param_arrays()
        .iter()
        .map(|a| a.map(|v| v as f32 as f64))
        .collect();
    let mut out = net.with_param_arrays(&arrays).expect("same architecture");
    out.meta = net.meta;
    out
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| ScanError::Format(format!("dimension {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(ScanError::Format(format!(
                "file truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn dim(&mut self, what: &str) -> Result<usize> {
        let v = u32::from_le_bytes(self.take(4, what)?.try_into().unwrap());
        if v == 0 || v > MAX_DIM {
            return Err(ScanError::Format(format!("{what} {v} out of range")));
        }
        Ok(v as usize)
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n.saturating_mul(4), what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}
