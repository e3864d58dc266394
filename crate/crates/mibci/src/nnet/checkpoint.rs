//! Model checkpoint: one text manifest line listing the array shapes,
//! then the parameter arrays (trainable parameters followed by
//! batch-norm running statistics, per layer, in layer order) as
//! little-endian 32-bit floats.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::{Network, Scalar};

const MAGIC: &str = "mibci-checkpoint v1";

pub fn save_checkpoint<F: Scalar>(network: &Network<F>, path: &Path) -> Result<()> {
    let arrays: Vec<&ndarray::ArrayD<F>> = network
        .layers
        .iter()
        .flat_map(|l| l.params().into_iter().chain(l.state()))
        .collect();
    let shapes: Vec<String> = arrays
        .iter()
        .map(|a| {
            a.shape()
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x")
        })
        .collect();
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{MAGIC} {}", shapes.join(";"))?;
    for a in arrays {
        for v in a.iter() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Load parameters into a network of matching architecture.
pub fn load_checkpoint<F: Scalar>(network: &mut Network<F>, path: &Path) -> Result<()> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = Vec::new();
    loop {
        let mut byte = [0u8; 1];
        r.read_exact(&mut byte)
            .map_err(|_| Error::Format("checkpoint missing manifest line".into()))?;
        if byte[0] == b'\n' {
            break;
        }
        header.push(byte[0]);
    }
    let header = String::from_utf8(header)
        .map_err(|_| Error::Format("checkpoint manifest is not UTF-8".into()))?;
    let shapes_str = header
        .strip_prefix(MAGIC)
        .ok_or_else(|| Error::Format(format!("bad checkpoint magic: '{header}'")))?
        .trim();

    let expected: Vec<String> = network
        .layers
        .iter()
        .flat_map(|l| l.params().into_iter().chain(l.state()))
        .map(|a| {
            a.shape()
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x")
        })
        .collect();
    if shapes_str != expected.join(";") {
        return Err(Error::Format(format!(
            "checkpoint shapes '{shapes_str}' do not match network '{}'",
            expected.join(";")
        )));
    }

    let fill = |arr: &mut ndarray::ArrayD<F>, r: &mut BufReader<File>| -> Result<()> {
        for v in arr.iter_mut() {
            let mut buf = [0u8; 4];
            r.read_exact(&mut buf)
                .map_err(|_| Error::Format("checkpoint truncated".into()))?;
            *v = F::from_f64(f64::from(f32::from_le_bytes(buf)));
        }
        Ok(())
    };
    for layer in &mut network.layers {
        for arr in layer.params_mut() {
            fill(arr, &mut r)?;
        }
        for arr in layer.state_mut() {
            fill(arr, &mut r)?;
        }
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("checkpoint has trailing bytes".into()));
    }
    Ok(())
}
