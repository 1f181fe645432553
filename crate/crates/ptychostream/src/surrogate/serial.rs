//! The PTNN model file: magic "PTNN", format version u16 LE, model
//! version u64 LE, layer count u16 LE, then each layer as kind u8,
//! rank u8, dims u32 LE, f32 LE weights, f32 LE biases.
//!
//! Layers are written flat in trunk/amp/phase order. The reader re-splits
//! around the unique sigmoid: with the scaled tanh last at index L-1 and
//! the sigmoid at s, both heads span L-1-s layers. Heads of unequal
//! length are therefore unrepresentable and rejected. `trained_on_pairs`
//! is a run-time counter and is not persisted.

use super::layers::Layer;
use super::net::{Network, SurrogateModel};
use super::tensor::Tensor4Of;
use super::SurrogateError;

pub const FORMAT_VERSION: u16 = 1;

const KIND_CONV3X3: u8 = 1;
const KIND_RELU: u8 = 2;
const KIND_LEAKY_RELU: u8 = 3;
const KIND_MAXPOOL2: u8 = 4;
const KIND_UPSAMPLE2: u8 = 5;
const KIND_SIGMOID: u8 = 6;
const KIND_SCALED_TANH: u8 = 7;

fn push_layer(out: &mut Vec<u8>, layer: &Layer<f32>) {
    match layer {
        Layer::Conv3x3 { weight, bias } => {
            out.push(KIND_CONV3X3);
            out.push(4);
            let (a, b, c, d) = weight.shape();
            for dim in [a, b, c, d] {
                out.extend_from_slice(&(dim as u32).to_le_bytes());
            }
            for &w in weight.data() {
                out.extend_from_slice(&w.to_le_bytes());
            }
            for &b in bias {
                out.extend_from_slice(&b.to_le_bytes());
            }
        }
        Layer::Relu => out.extend_from_slice(&[KIND_RELU, 0]),
        Layer::LeakyRelu => out.extend_from_slice(&[KIND_LEAKY_RELU, 0]),
        Layer::MaxPool2 => out.extend_from_slice(&[KIND_MAXPOOL2, 0]),
        Layer::Upsample2Nearest => out.extend_from_slice(&[KIND_UPSAMPLE2, 0]),
        Layer::Sigmoid => out.extend_from_slice(&[KIND_SIGMOID, 0]),
        Layer::ScaledTanh => out.extend_from_slice(&[KIND_SCALED_TANH, 0]),
    }
}

pub fn serialize(model: &SurrogateModel) -> Vec<u8> {
    let layers: Vec<&Layer<f32>> = model.net.layers().collect();
    let mut out = Vec::with_capacity(16 + 4 * model.param_count());
    out.extend_from_slice(b"PTNN");
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&model.version.to_le_bytes());
    out.extend_from_slice(&(layers.len() as u16).to_le_bytes());
    for layer in layers {
        push_layer(&mut out, layer);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SurrogateError> {
        let end = self.at.checked_add(n).ok_or(SurrogateError::Truncated { at: self.at })?;
        if end > self.buf.len() {
            return Err(SurrogateError::Truncated { at: end });
        }
        let slice = &self.buf[self.at..end];
        self.at = end;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8, SurrogateError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, SurrogateError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("length checked")))
    }

    fn u32(&mut self) -> Result<u32, SurrogateError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("length checked")))
    }

    fn u64(&mut self) -> Result<u64, SurrogateError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("length checked")))
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>, SurrogateError> {
        let bytes = self.take(count.checked_mul(4).ok_or(SurrogateError::Truncated { at: self.at })?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4"))).collect())
    }
}

fn read_layer(r: &mut Reader) -> Result<Layer<f32>, SurrogateError> {
    let kind = r.u8()?;
    let rank = r.u8()?;
    let plain = |state: u8| {
        if rank == 0 {
            Ok(state)
        } else {
            Err(SurrogateError::BadStructure("parameterless layer with nonzero rank"))
        }
    };
    match kind {
        KIND_CONV3X3 => {
            if rank != 4 {
                return Err(SurrogateError::BadStructure("conv3x3 must have rank 4"));
            }
            let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
            if dims[2] != 3 || dims[3] != 3 || dims[0] == 0 || dims[1] == 0 {
                return Err(SurrogateError::BadStructure("conv3x3 dims must be (out, in, 3, 3)"));
            }
            let n_weights = dims[0] * dims[1] * 9;
            let weight = Tensor4Of::from_data((dims[0], dims[1], 3, 3), r.f32s(n_weights)?)
                .map_err(|_| SurrogateError::BadStructure("conv3x3 weight length"))?;
            let bias = r.f32s(dims[0])?;
            Ok(Layer::Conv3x3 { weight, bias })
        }
        KIND_RELU => plain(0).map(|_| Layer::Relu),
        KIND_LEAKY_RELU => plain(0).map(|_| Layer::LeakyRelu),
        KIND_MAXPOOL2 => plain(0).map(|_| Layer::MaxPool2),
        KIND_UPSAMPLE2 => plain(0).map(|_| Layer::Upsample2Nearest),
        KIND_SIGMOID => plain(0).map(|_| Layer::Sigmoid),
        KIND_SCALED_TANH => plain(0).map(|_| Layer::ScaledTanh),
        other => Err(SurrogateError::BadLayerKind(other)),
    }
}

/// Splits the flat layer list back into trunk and heads; see module docs.
fn split_heads(
    mut layers: Vec<Layer<f32>>,
) -> Result<Network<f32>, SurrogateError> {
    let total = layers.len();
    let sigmoids: Vec<usize> = layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, Layer::Sigmoid))
        .map(|(i, _)| i)
        .collect();
    let tanhs: Vec<usize> = layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, Layer::ScaledTanh))
        .map(|(i, _)| i)
        .collect();
    let [s] = sigmoids[..] else {
        return Err(SurrogateError::BadStructure("expected exactly one sigmoid"));
    };
    if tanhs != [total - 1] {
        return Err(SurrogateError::BadStructure("expected one scaled tanh, last"));
    }
    let head_len = total - 1 - s;
    let trunk_len = (s + 1)
        .checked_sub(head_len)
        .ok_or(SurrogateError::BadStructure("heads overlap the trunk"))?;
    let phase_head = layers.split_off(s + 1);
    let amp_head = layers.split_off(trunk_len);
    Ok(Network { trunk: layers, amp_head, phase_head })
}

pub fn deserialize(bytes: &[u8]) -> Result<SurrogateModel, SurrogateError> {
    let r = &mut Reader { buf: bytes, at: 0 };
    if r.take(4)? != b"PTNN" {
        return Err(SurrogateError::BadMagic);
    }
    let format = r.u16()?;
    if format != FORMAT_VERSION {
        return Err(SurrogateError::UnsupportedVersion(format));
    }
    let version = r.u64()?;
    let count = r.u16()?;
    let mut layers = Vec::with_capacity(count as usize);
    for _ in 0..count {
        layers.push(read_layer(r)?);
    }
    if r.at != bytes.len() {
        return Err(SurrogateError::BadStructure("trailing bytes after last layer"));
    }
    Ok(SurrogateModel { net: split_heads(layers)?, version, trained_on_pairs: 0 })
}
