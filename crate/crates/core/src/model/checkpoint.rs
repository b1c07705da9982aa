//! Binary checkpoint container for a [`HelmholtzMachine`].
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "HMCKPT1"                      7 bytes
//! layer count (L + 1)            u32
//! layer sizes l_0 .. l_L         u32 each
//! encoding                       u8  (0 = ZeroOne, 1 = PlusMinusOne)
//! p.layers[0 .. L]               f64 row-major, l_i x (l_{i+1} + 1)
//! p prior biases                 f64 x l_L
//! q.layers[0 .. L]               f64 row-major, l_{i+1} x (l_i + 1)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{Architecture, Direction, Encoding, HelmholtzMachine, SigmoidBeliefNet, StochasticLayer};
use crate::{Error, Result};

pub const MAGIC: &[u8; 7] = b"HMCKPT1";

const MAX_LAYER_SIZE: u32 = 1 << 24;

pub fn write_checkpoint<W: Write>(hm: &HelmholtzMachine, mut w: W) -> std::io::Result<()> {
    let arch = hm.architecture();
    w.write_all(MAGIC)?;
    w.write_all(&(arch.layer_sizes().len() as u32).to_le_bytes())?;
    for &l in arch.layer_sizes() {
        w.write_all(&(l as u32).to_le_bytes())?;
    }
    w.write_all(&[arch.encoding().to_byte()])?;
    let mut put = |vals: &mut dyn Iterator<Item = &f64>| -> std::io::Result<()> {
        for v in vals {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    };
    for layer in hm.p.layers() {
        put(&mut layer.weights().iter())?;
    }
    put(&mut hm.p.prior_biases().expect("generative prior").iter())?;
    for layer in hm.q.layers() {
        put(&mut layer.weights().iter())?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R, origin: &Path) -> Result<HelmholtzMachine> {
    let bad = |reason: &str| Error::Format {
        path: origin.to_path_buf(),
        reason: reason.to_string(),
    };
    let truncated = |e: std::io::Error| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            bad("truncated checkpoint")
        } else {
            Error::Io(e)
        }
    };
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(bad("bad magic, expected HMCKPT1"));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(truncated)?;
    let count = u32::from_le_bytes(u32buf);
    if !(2..=4096).contains(&count) {
        return Err(bad("implausible layer count"));
    }
    let mut sizes = Vec::with_capacity(count as usize);
    for _ in 0..count {
        r.read_exact(&mut u32buf).map_err(truncated)?;
        let l = u32::from_le_bytes(u32buf);
        if l == 0 || l > MAX_LAYER_SIZE {
            return Err(bad("implausible layer size"));
        }
        sizes.push(l as usize);
    }
    let mut enc = [0u8; 1];
    r.read_exact(&mut enc).map_err(truncated)?;
    let encoding = Encoding::from_byte(enc[0]).ok_or_else(|| bad("unknown encoding byte"))?;
    let arch = Architecture::new(sizes.clone(), encoding)?;

    let mut read_mat = |rows: usize, cols: usize| -> Result<Array2<f64>> {
        let mut buf = vec![0u8; rows * cols * 8];
        r.read_exact(&mut buf).map_err(truncated)?;
        let vals = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Array2::from_shape_vec((rows, cols), vals).expect("sized buffer"))
    };
    let depth = arch.depth();
    let mut p_layers = Vec::with_capacity(depth);
    for i in 0..depth {
        p_layers.push(StochasticLayer::new(read_mat(sizes[i], sizes[i + 1] + 1)?)?);
    }
    let prior: Array1<f64> = read_mat(1, sizes[depth])?.into_shape_with_order(sizes[depth]).unwrap();
    let mut q_layers = Vec::with_capacity(depth);
    for i in 0..depth {
        q_layers.push(StochasticLayer::new(read_mat(sizes[i + 1], sizes[i] + 1)?)?);
    }
    let p = SigmoidBeliefNet::new(arch.clone(), Direction::TopDown, p_layers, Some(prior))?;
    let q = SigmoidBeliefNet::new(arch, Direction::BottomUp, q_layers, None)?;
    HelmholtzMachine::new(p, q)
}

pub fn save(hm: &HelmholtzMachine, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(hm, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<HelmholtzMachine> {
    read_checkpoint(BufReader::new(File::open(path)?), path)
}
