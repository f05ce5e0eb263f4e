//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "MMFCKPT\0"
//! version  u32
//! spec     u32 length + UTF-8 JSON of the NetworkSpec
//! count    u32 number of tensors
//! tensor   u32 name length + UTF-8 name, u8 dtype (1 = f64), u32 rank,
//!          rank x u64 dims, f64 data
//! ```
//!
//! Parameters come first in network order, followed by the running mean and
//! variance of each batch-norm layer.

use std::io::{Read, Write};
use std::path::Path;

use super::network::Network;
use super::spec::NetworkSpec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MMFCKPT\0";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

pub fn write_checkpoint(net: &Network, mut w: impl Write) -> Result<()> {
    let spec = serde_json::to_vec(net.spec()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(spec.len() as u32).to_le_bytes())?;
    w.write_all(&spec)?;
    let stats = net.running_stats();
    let count = net.params().len() + 2 * stats.len();
    w.write_all(&(count as u32).to_le_bytes())?;
    for p in net.params() {
        write_tensor(&mut w, &p.name, p.value.shape(), p.value.data())?;
    }
    for (k, (mean, var)) in stats.iter().enumerate() {
        write_tensor(&mut w, &format!("bn{k}.running_mean"), &[mean.len()], mean)?;
        write_tensor(&mut w, &format!("bn{k}.running_var"), &[var.len()], var)?;
    }
    Ok(())
}

fn write_tensor(w: &mut impl Write, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[DTYPE_F64])?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &x in data {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<Network> {
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = read_u32(&mut r, "spec length")? as usize;
    let mut spec = vec![0u8; len];
    read_exact(&mut r, &mut spec, "spec")?;
    let spec: NetworkSpec = serde_json::from_slice(&spec).map_err(|e| Error::Checkpoint(format!("spec: {e}")))?;
    let mut net = Network::new(&spec, 0)?;
    let count = read_u32(&mut r, "tensor count")? as usize;
    let n_params = net.params().len();
    let n_stats = net.running_stats().len();
    if count != n_params + 2 * n_stats {
        return Err(Error::Checkpoint(format!("expected {} tensors, found {count}", n_params + 2 * n_stats)));
    }
    let mut values = Vec::with_capacity(n_params);
    for i in 0..n_params {
        let (name, t) = read_tensor(&mut r)?;
        if name != net.params()[i].name {
            return Err(Error::Checkpoint(format!("expected tensor {}, found {name}", net.params()[i].name)));
        }
        values.push(t);
    }
    let mut stats = Vec::with_capacity(n_stats);
    for _ in 0..n_stats {
        let mean = read_tensor(&mut r)?.1.into_data();
        let var = read_tensor(&mut r)?.1.into_data();
        stats.push((mean, var));
    }
    net.load_state(values, stats)?;
    Ok(net)
}

fn read_tensor(r: &mut impl Read) -> Result<(String, Tensor)> {
    let len = read_u32(r, "name length")? as usize;
    let mut name = vec![0u8; len];
    read_exact(r, &mut name, "name")?;
    let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
    let mut dtype = [0u8];
    read_exact(r, &mut dtype, "dtype")?;
    if dtype[0] != DTYPE_F64 {
        return Err(Error::Checkpoint(format!("{name}: unsupported dtype {}", dtype[0])));
    }
    let rank = read_u32(r, "rank")? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        read_exact(r, &mut b, "dims")?;
        shape.push(u64::from_le_bytes(b) as usize);
    }
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 8];
    read_exact(r, &mut bytes, &name)?;
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((name, Tensor::new(shape, data)?))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Checkpoint(format!("truncated while reading {what}")),
        _ => Error::Io(e),
    })
}

pub fn save(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(net, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Network> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip_preserves_parameters_and_statistics() {
        let spec = NetworkSpec::mnist().reduced(&[2, 3], 5).with_head(Some(4));
        let mut net = Network::new(&spec, 7).unwrap();
        let x = Tensor::uniform(vec![3, 1, 28, 28], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        net.forward_train(&mut g, xv, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();

        let mut buf = Vec::new();
        write_checkpoint(&net, &mut buf).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.params(), net.params());
        assert_eq!(back.running_stats(), net.running_stats());
        assert_eq!(back.embed(&x, 2).unwrap(), net.embed(&x, 2).unwrap());
    }

    #[test]
    fn truncated_and_foreign_files_rejected() {
        let net = Network::new(&NetworkSpec::ag(), 0).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&net, &mut buf).unwrap();
        let err = read_checkpoint(&buf[..buf.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        let err = read_checkpoint(&b"PK\x03\x04 not it"[..]).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }
}
