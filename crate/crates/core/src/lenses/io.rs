//! Probe file: magic, u32 LE header length, JSON header, then `A` and `b`
//! per layer in tensor serialization.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{KlDirection, Probe};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PROBE_MAGIC: &[u8; 8] = b"FMLENS01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeFileHeader {
    pub n_layers: usize,
    pub d_model: usize,
    pub vocab: usize,
    pub norm_eps: f64,
    pub direction: KlDirection,
}

pub fn save_probes(path: &Path, header: &ProbeFileHeader, probes: &[Probe]) -> Result<()> {
    if probes.len() != header.n_layers {
        return Err(Error::Format(format!(
            "header says {} layers, got {} probes",
            header.n_layers,
            probes.len()
        )));
    }
    let json = serde_json::to_vec(header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(PROBE_MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for p in probes {
        p.a.write_to(&mut w)?;
        p.b.write_to(&mut w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_probes(path: &Path) -> Result<(ProbeFileHeader, Vec<Probe>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("probe file too short".into()))?;
    if &magic != PROBE_MAGIC {
        return Err(Error::Format("not a probe file".into()));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_le_bytes(len) as usize;
    if len > 1 << 20 {
        return Err(Error::Format(format!("header length {len} is implausible")));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: ProbeFileHeader = serde_json::from_slice(&json)?;
    let mut probes = Vec::with_capacity(header.n_layers);
    for layer in 0..header.n_layers {
        let a = Tensor::read_from(&mut r)?;
        let b = Tensor::read_from(&mut r)?;
        let p = Probe::new(layer, a, b)?;
        if p.d_model() != header.d_model {
            return Err(Error::Format(format!("layer {layer} probe has d={}", p.d_model())));
        }
        probes.push(p);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", rest.len())));
    }
    Ok((header, probes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.lens");
        let h = ProbeFileHeader {
            n_layers: 2,
            d_model: 3,
            vocab: 5,
            norm_eps: 1e-5,
            direction: KlDirection::Forward,
        };
        let mut p1 = Probe::identity(1, 3).unwrap();
        p1.b = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let probes = vec![Probe::identity(0, 3).unwrap(), p1];
        save_probes(&path, &h, &probes).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], PROBE_MAGIC);
        let (h2, p2) = load_probes(&path).unwrap();
        assert_eq!(h2, h);
        assert_eq!(p2, probes);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(load_probes(&path).is_err());
    }
}
