//! Binary tensor format: `MHTENSR1`, u32 rank, u64 dims, f64 payload, all little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const TENSOR_MAGIC: &[u8; 8] = b"MHTENSR1";

// Guard against corrupt headers asking for absurd allocations.
const MAX_RANK: u32 = 16;

impl<T: Scalar> Tensor<T> {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&(self.rank() as u32).to_le_bytes())?;
        for &d in self.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in self.data() {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != TENSOR_MAGIC {
            return Err(Error::Format(format!("bad tensor magic {magic:?}")));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let rank = u32::from_le_bytes(b4);
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::Format(format!("unsupported tensor rank {rank}")));
        }
        let mut b8 = [0u8; 8];
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            r.read_exact(&mut b8)?;
            let d = usize::try_from(u64::from_le_bytes(b8))
                .map_err(|_| Error::Format("dim does not fit in usize".into()))?;
            shape.push(d);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("element count overflows".into()))?;
        let mut data = Vec::with_capacity(n.min(1 << 24));
        for _ in 0..n {
            r.read_exact(&mut b8)?;
            data.push(T::of(f64::from_le_bytes(b8)));
        }
        Tensor::new(shape, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(12 + 8 * self.rank() + 8 * self.len());
        self.write_to(&mut buf).expect("writing to Vec cannot fail");
        buf
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let t = Self::read_from(&mut bytes)?;
        if !bytes.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len())));
        }
        Ok(t)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}
