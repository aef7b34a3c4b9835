//! Binary checkpoint container and network serialization.
//!
//! Container layout: magic bytes `XAIM01`, a 32-bit little-endian tensor
//! count, then per tensor a 32-bit rank, `rank` 64-bit dims, and the
//! row-major payload as 64-bit IEEE-754 floats, all little-endian. Floats
//! are stored bit-for-bit, so save/load round-trips exactly.
//!
//! A network checkpoint stores the architecture as tensor 0 (a rank-1
//! descriptor: input dim, layer count, then one `(kind, arg)` pair per
//! layer with kinds 0 = fully-connected, 1 = relu, 2 = batch norm,
//! 3 = sigmoid) followed by each layer's parameter tensors in layer order:
//! dense weight then bias; batch norm gamma, beta, running mean, running
//! variance.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{LayerParams, LayerSpec, Network, NetworkSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"XAIM01";

/// Writes tensors into a container file.
pub fn write_container(path: &Path, tensors: &[Tensor]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes()).map_err(io_err)?;
    for t in tensors {
        w.write_all(&(t.rank() as u32).to_le_bytes()).map_err(io_err)?;
        for &dim in t.shape() {
            w.write_all(&(dim as u64).to_le_bytes()).map_err(io_err)?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Reads every tensor out of a container file.
pub fn read_container(path: &Path) -> Result<Vec<Tensor>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let truncated = |e: std::io::Error| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!("{} is truncated", path.display()))
        } else {
            Error::io(path, e)
        }
    };
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {:?}, expected {:?}",
            path.display(),
            magic,
            MAGIC
        )));
    }
    let mut buf4 = [0u8; 4];
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf4).map_err(truncated)?;
    let count = u32::from_le_bytes(buf4) as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut buf4).map_err(truncated)?;
        let rank = u32::from_le_bytes(buf4) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut buf8).map_err(truncated)?;
            shape.push(u64::from_le_bytes(buf8) as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut buf8).map_err(truncated)?;
            data.push(f64::from_le_bytes(buf8));
        }
        tensors.push(Tensor::new(shape, data)?);
    }
    Ok(tensors)
}

const KIND_FC: f64 = 0.0;
const KIND_RELU: f64 = 1.0;
const KIND_BATCH_NORM: f64 = 2.0;
const KIND_SIGMOID: f64 = 3.0;

fn spec_descriptor(spec: &NetworkSpec) -> Tensor {
    let mut desc = vec![spec.input_dim() as f64, spec.layers().len() as f64];
    for layer in spec.layers() {
        match layer {
            LayerSpec::FullyConnected { out_dim } => {
                desc.push(KIND_FC);
                desc.push(*out_dim as f64);
            }
            LayerSpec::Relu => {
                desc.push(KIND_RELU);
                desc.push(0.0);
            }
            LayerSpec::BatchNorm => {
                desc.push(KIND_BATCH_NORM);
                desc.push(0.0);
            }
            LayerSpec::Sigmoid => {
                desc.push(KIND_SIGMOID);
                desc.push(0.0);
            }
        }
    }
    Tensor::new(vec![desc.len()], desc).expect("descriptor shape is consistent")
}

fn parse_descriptor(desc: &Tensor) -> Result<NetworkSpec> {
    let data = desc.data();
    if desc.rank() != 1 || data.len() < 2 {
        return Err(Error::Format("malformed network descriptor".into()));
    }
    let input_dim = data[0] as usize;
    let n_layers = data[1] as usize;
    if data.len() != 2 + 2 * n_layers {
        return Err(Error::Format(format!(
            "descriptor declares {n_layers} layers but holds {} entries",
            data.len()
        )));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let kind = data[2 + 2 * i];
        let arg = data[3 + 2 * i] as usize;
        let layer = if kind == KIND_FC {
            LayerSpec::FullyConnected { out_dim: arg }
        } else if kind == KIND_RELU {
            LayerSpec::Relu
        } else if kind == KIND_BATCH_NORM {
            LayerSpec::BatchNorm
        } else if kind == KIND_SIGMOID {
            LayerSpec::Sigmoid
        } else {
            return Err(Error::Format(format!("unknown layer kind code {kind}")));
        };
        layers.push(layer);
    }
    NetworkSpec::new(input_dim, layers)
}

/// Appends a network's tensors (descriptor + parameters) to `out`.
pub(crate) fn push_network_tensors(net: &Network, out: &mut Vec<Tensor>) {
    out.push(spec_descriptor(net.spec()));
    for params in net.params() {
        match params {
            LayerParams::Dense { weight, bias } => {
                out.push(weight.clone());
                out.push(bias.clone());
            }
            LayerParams::BatchNorm { gamma, beta, running_mean, running_var } => {
                out.push(gamma.clone());
                out.push(beta.clone());
                out.push(running_mean.clone());
                out.push(running_var.clone());
            }
            LayerParams::Stateless => {}
        }
    }
}

/// Rebuilds a network from tensors produced by [`push_network_tensors`],
/// consuming them from the front of the slice. Returns the network and the
/// number of tensors consumed.
pub(crate) fn take_network_tensors(tensors: &[Tensor]) -> Result<(Network, usize)> {
    if tensors.is_empty() {
        return Err(Error::Format("missing network descriptor".into()));
    }
    let spec = parse_descriptor(&tensors[0])?;
    let mut idx = 1;
    let mut take = |n: usize| -> Result<Vec<Tensor>> {
        if idx + n > tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint ends early: wanted {n} tensors at offset {idx}, have {}",
                tensors.len()
            )));
        }
        let out = tensors[idx..idx + n].to_vec();
        idx += n;
        Ok(out)
    };
    let mut params = Vec::with_capacity(spec.layers().len());
    for layer in spec.layers() {
        match layer {
            LayerSpec::FullyConnected { .. } => {
                let mut t = take(2)?;
                let bias = t.pop().expect("two tensors taken");
                let weight = t.pop().expect("two tensors taken");
                params.push(LayerParams::Dense { weight, bias });
            }
            LayerSpec::BatchNorm => {
                let mut t = take(4)?;
                let running_var = t.pop().expect("four tensors taken");
                let running_mean = t.pop().expect("four tensors taken");
                let beta = t.pop().expect("four tensors taken");
                let gamma = t.pop().expect("four tensors taken");
                params.push(LayerParams::BatchNorm { gamma, beta, running_mean, running_var });
            }
            LayerSpec::Relu | LayerSpec::Sigmoid => params.push(LayerParams::Stateless),
        }
    }
    let net = Network::from_parts(spec, params)?;
    Ok((net, idx))
}

/// Number of tensors a network occupies in a container.
pub(crate) fn network_tensor_count(net: &Network) -> usize {
    1 + net
        .params()
        .iter()
        .map(|p| match p {
            LayerParams::Dense { .. } => 2,
            LayerParams::BatchNorm { .. } => 4,
            LayerParams::Stateless => 0,
        })
        .sum::<usize>()
}

/// Saves a network (architecture, parameters, running statistics) to a file.
pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    push_network_tensors(net, &mut tensors);
    write_container(path, &tensors)
}

/// Loads a network saved by [`save_checkpoint`]. The result is in inference
/// mode; parameters and running statistics match the saved ones bit-for-bit.
pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let tensors = read_container(path)?;
    let (net, used) = take_network_tensors(&tensors)?;
    if used != tensors.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors but the network uses {used}",
            tensors.len()
        )));
    }
    Ok(net)
}
