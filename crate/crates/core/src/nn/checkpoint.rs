//! Binary network checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "PMDN"  u32 version  u64 seed  i64 feature_tap (-1 = none)
//! u32 input_rank  u32 x input_rank dims  u32 layer_count
//! layer_count x { u8 tag  u32 len  len bytes of layer description }
//! f32 parameter blobs, layer by layer
//! ```
//!
//! Blob contents per layer: Dense/Conv2d weight then bias; LayerNorm gamma,
//! beta; BatchNorm gamma, beta, running mean, running variance; MDN running
//! coefficients; PMDN coefficients. The MDN gram inverse is solver state kept
//! in `f64` inside the layer description.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{ColumnRole, GramInverse};
use crate::mdn::{MdnState, PmdnParams};
use crate::nn::{validate_chain, BatchNorm, Conv2d, Dense, Layer, LayerNorm, LayerSpec, Network};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"PMDN";
pub const VERSION: u32 = 1;

const TAG_DENSE: u8 = 1;
const TAG_RELU: u8 = 2;
const TAG_CONV: u8 = 3;
const TAG_FLATTEN: u8 = 4;
const TAG_LAYERNORM: u8 = 5;
const TAG_BATCHNORM: u8 = 6;
const TAG_MDN: u8 = 7;
const TAG_PMDN: u8 = 8;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i64(&mut self, v: i64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s<T: Scalar>(&mut self, v: impl IntoIterator<Item = T>) {
        for x in v {
            self.0.extend_from_slice(&(x.to_f64() as f32).to_le_bytes());
        }
    }
    fn record(&mut self, tag: u8, body: Writer) {
        self.u8(tag);
        self.u32(body.0.len());
        self.0.extend_from_slice(&body.0);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.clone(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f32s<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let bytes = self.take(n * 4)?;
        let out: Vec<T> = bytes
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(self.fail("non-finite parameter value"));
        }
        Ok(out)
    }
    fn f32_tensor(&mut self, shape: [usize; 2]) -> Result<Tensor> {
        Tensor::new(shape, self.f32s::<f64>(shape[0] * shape[1])?)
    }
    fn roles(&mut self, k: usize) -> Result<Vec<ColumnRole>> {
        (0..k)
            .map(|_| {
                let c = self.u8()?;
                ColumnRole::from_code(c).ok_or_else(|| self.fail(format!("unknown column role {c}")))
            })
            .collect()
    }
}

fn encode_layer<T: Scalar>(layer: &Layer<T>) -> (u8, Writer) {
    let mut w = Writer::default();
    let tag = match layer {
        Layer::Dense(d) => {
            w.u32(d.input);
            w.u32(d.output);
            TAG_DENSE
        }
        Layer::Relu => TAG_RELU,
        Layer::Conv2d(c) => {
            w.u32(c.in_channels);
            w.u32(c.out_channels);
            TAG_CONV
        }
        Layer::Flatten => TAG_FLATTEN,
        Layer::LayerNorm(n) => {
            w.u32(n.channels);
            w.f64(n.eps);
            TAG_LAYERNORM
        }
        Layer::BatchNorm(n) => {
            w.u32(n.channels);
            w.f64(n.momentum);
            w.f64(n.eps);
            TAG_BATCHNORM
        }
        Layer::Mdn(s) => {
            w.u32(s.channels());
            w.u32(s.roles().len());
            s.roles().iter().for_each(|r| w.u8(r.code()));
            w.u64(s.n_total() as u64);
            w.f64(s.gram_inv().ridge_eps());
            w.f64(s.momentum());
            w.u64(s.seen_batches());
            s.gram_inv().matrix().data().iter().for_each(|&v| w.f64(v));
            TAG_MDN
        }
        Layer::Pmdn(p) => {
            w.u32(p.channels());
            w.u32(p.roles().len());
            p.roles().iter().for_each(|r| w.u8(r.code()));
            TAG_PMDN
        }
    };
    (tag, w)
}

/// Serializes `net` into the checkpoint byte format.
pub fn to_bytes<T: Scalar>(net: &Network<T>) -> Vec<u8> {
    let mut w = Writer::default();
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION as usize);
    w.u64(net.seed());
    w.i64(net.feature_tap().map_or(-1, |t| t as i64));
    w.u32(net.input_shape().len());
    net.input_shape().iter().for_each(|&d| w.u32(d));
    w.u32(net.layer_count());
    for layer in net.layers() {
        let (tag, body) = encode_layer(layer);
        w.record(tag, body);
    }
    for layer in net.layers() {
        match layer {
            Layer::Dense(d) => {
                w.f32s(d.weight.iter().copied());
                w.f32s(d.bias.iter().copied());
            }
            Layer::Conv2d(c) => {
                w.f32s(c.weight.iter().copied());
                w.f32s(c.bias.iter().copied());
            }
            Layer::LayerNorm(n) => {
                w.f32s(n.gamma.iter().copied());
                w.f32s(n.beta.iter().copied());
            }
            Layer::BatchNorm(n) => {
                w.f32s(n.gamma.iter().copied());
                w.f32s(n.beta.iter().copied());
                w.f32s(n.running_mean.iter().copied());
                w.f32s(n.running_var.iter().copied());
            }
            Layer::Mdn(s) => w.f32s(s.running_beta().data().iter().copied()),
            Layer::Pmdn(p) => w.f32s(p.beta().data().iter().copied()),
            Layer::Relu | Layer::Flatten => {}
        }
    }
    w.0
}

enum Pending {
    Dense(usize, usize),
    Relu,
    Conv(usize, usize),
    Flatten,
    LayerNorm(usize, f64),
    BatchNorm(usize, f64, f64),
    Mdn {
        channels: usize,
        roles: Vec<ColumnRole>,
        gram: GramInverse,
        momentum: f64,
        seen: u64,
    },
    Pmdn(usize, Vec<ColumnRole>),
}

fn decode_layer(r: &mut Reader<'_>) -> Result<Pending> {
    let tag = r.u8()?;
    let len = r.u32()?;
    let end = r.pos + len;
    let pending = match tag {
        TAG_DENSE => Pending::Dense(r.u32()?, r.u32()?),
        TAG_RELU => Pending::Relu,
        TAG_CONV => Pending::Conv(r.u32()?, r.u32()?),
        TAG_FLATTEN => Pending::Flatten,
        TAG_LAYERNORM => Pending::LayerNorm(r.u32()?, r.f64()?),
        TAG_BATCHNORM => Pending::BatchNorm(r.u32()?, r.f64()?, r.f64()?),
        TAG_MDN => {
            let channels = r.u32()?;
            let k = r.u32()?;
            let roles = r.roles(k)?;
            let n_total = r.u64()? as usize;
            let ridge = r.f64()?;
            let momentum = r.f64()?;
            let seen = r.u64()?;
            let gram = (0..k * k).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let gram = GramInverse::from_parts(Tensor::new([k, k], gram)?, ridge, n_total)?;
            Pending::Mdn {
                channels,
                roles,
                gram,
                momentum,
                seen,
            }
        }
        TAG_PMDN => {
            let channels = r.u32()?;
            let k = r.u32()?;
            Pending::Pmdn(channels, r.roles(k)?)
        }
        other => return Err(r.fail(format!("unknown layer tag {other}"))),
    };
    if r.pos != end {
        return Err(r.fail(format!("layer record with tag {tag} has length {len}, parsed {}", len + r.pos - end)));
    }
    Ok(pending)
}

fn spec_of(p: &Pending) -> LayerSpec {
    match *p {
        Pending::Dense(input, output) => LayerSpec::Dense { input, output },
        Pending::Relu => LayerSpec::Relu,
        Pending::Conv(in_channels, out_channels) => LayerSpec::Conv2d {
            in_channels,
            out_channels,
        },
        Pending::Flatten => LayerSpec::Flatten,
        Pending::LayerNorm(dim, _) => LayerSpec::LayerNorm { dim },
        Pending::BatchNorm(dim, momentum, _) => LayerSpec::BatchNorm { dim, momentum },
        Pending::Mdn { .. } => LayerSpec::Mdn,
        Pending::Pmdn(..) => LayerSpec::Pmdn,
    }
}

/// Parses a checkpoint produced by [`to_bytes`]. `path` only labels errors.
pub fn from_bytes<T: Scalar>(bytes: &[u8], path: &str) -> Result<Network<T>> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        path: path.to_string(),
    };
    if r.take(4)? != MAGIC {
        return Err(r.fail("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let seed = r.u64()?;
    let tap = r.i64()?;
    let rank = r.u32()?;
    let input_shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let count = r.u32()?;
    let pending = (0..count).map(|_| decode_layer(&mut r)).collect::<Result<Vec<_>>>()?;

    let mut specs = Vec::with_capacity(count);
    let mut layers = Vec::with_capacity(count);
    for p in pending {
        specs.push(spec_of(&p));
        let layer = match p {
            Pending::Dense(input, output) => Layer::Dense(Dense {
                input,
                output,
                weight: r.f32s(input * output)?,
                bias: r.f32s(output)?,
            }),
            Pending::Relu => Layer::Relu,
            Pending::Conv(in_channels, out_channels) => Layer::Conv2d(Conv2d {
                in_channels,
                out_channels,
                weight: r.f32s(in_channels * out_channels * 9)?,
                bias: r.f32s(out_channels)?,
            }),
            Pending::Flatten => Layer::Flatten,
            Pending::LayerNorm(channels, eps) => Layer::LayerNorm(LayerNorm {
                channels,
                gamma: r.f32s(channels)?,
                beta: r.f32s(channels)?,
                eps,
            }),
            Pending::BatchNorm(channels, momentum, eps) => Layer::BatchNorm(BatchNorm {
                channels,
                gamma: r.f32s(channels)?,
                beta: r.f32s(channels)?,
                running_mean: r.f32s(channels)?,
                running_var: r.f32s(channels)?,
                momentum,
                eps,
            }),
            Pending::Mdn {
                channels,
                roles,
                gram,
                momentum,
                seen,
            } => {
                let k = roles.len();
                let mut state = MdnState::with_gram(gram, roles, channels)?;
                state.set_momentum(momentum)?;
                state.restore(r.f32_tensor([channels, k])?, seen)?;
                Layer::Mdn(state)
            }
            Pending::Pmdn(channels, roles) => {
                let k = roles.len();
                Layer::Pmdn(PmdnParams::from_beta(r.f32_tensor([channels, k])?, roles)?)
            }
        };
        layers.push(layer);
    }
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    validate_chain(&input_shape, &specs)?;
    let feature_tap = match tap {
        -1 => None,
        t if t >= 0 && (t as usize) < count => Some(t as usize),
        t => return Err(r.fail(format!("feature tap {t} out of range"))),
    };
    Ok(Network::from_parts(specs, layers, input_shape, seed, feature_tap))
}

pub fn save<T: Scalar>(net: &Network<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(net))?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<Network<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    from_bytes(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::MetadataMatrix;
    use crate::nn::{CnnConfig, Mode, NormMode};

    fn small() -> CnnConfig {
        CnnConfig {
            image_size: 6,
            conv1: 2,
            conv2: 3,
            hidden: 4,
        }
    }

    fn meta(n: usize) -> MetadataMatrix {
        let conf = Tensor::new([n, 1], (0..n).map(|i| (i * 7 % 5) as f64).collect()).unwrap();
        let labels: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        MetadataMatrix::fit(&conf, Some(&labels), true).unwrap()
    }

    #[test]
    fn round_trip_every_norm_mode() {
        let m = meta(8);
        let x = Tensor::<f32>::new([8, 1, 6, 6], (0..288).map(|i| (i % 13) as f32 / 13.0).collect()).unwrap();
        let batch = m.all_rows();
        for norm in NormMode::ALL {
            let mut net = Network::<f32>::baseline_cnn(&small(), norm, Some(&m), 3).unwrap();
            // one training pass so running statistics are non-trivial
            net.forward(&x, Some(&batch), Mode::Train).unwrap();
            let bytes = to_bytes(&net);
            assert_eq!(&bytes[..4], MAGIC);
            let back: Network<f32> = from_bytes(&bytes, "mem").unwrap();
            assert_eq!(back.specs(), net.specs());
            assert_eq!(back.task_params(), net.task_params(), "{norm}");
            // f64 running statistics are narrowed once, then stable
            assert_eq!(to_bytes(&back), bytes);
            assert_eq!(from_bytes::<f32>(&to_bytes(&back), "mem").unwrap(), back);
        }
    }

    #[test]
    fn rejects_corruption() {
        let net = Network::<f32>::baseline_cnn(&small(), NormMode::None, None, 1).unwrap();
        let bytes = to_bytes(&net);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes::<f32>(&bad, "x"), Err(Error::Format { .. })));
        assert!(from_bytes::<f32>(&bytes[..bytes.len() - 1], "x").is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(from_bytes::<f32>(&long, "x").is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        let net = Network::<f32>::baseline_cnn(&small(), NormMode::BatchNorm, None, 9).unwrap();
        save(&net, &path).unwrap();
        assert_eq!(load::<f32>(&path).unwrap(), net);
    }
}
