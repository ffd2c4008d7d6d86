//! Checkpoint container: a one-line JSON header followed by flat
//! little-endian 64-bit float parameter blocks in a declared order. Matrices
//! are flattened row-major. The same convention backs the vpe-v1, enc-v1,
//! gen-v1, dm-v1 and dp-v1 schemas.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{de::DeserializeOwned, Serialize};

use crate::error::{Error, Result};
use crate::num::Scalar;

pub struct CheckpointWriter<W: Write> {
    inner: W,
}

impl CheckpointWriter<BufWriter<File>> {
    pub fn create<H: Serialize>(path: impl AsRef<Path>, header: &H) -> Result<Self> {
        let mut inner = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut inner, header)?;
        inner.write_all(b"\n")?;
        Ok(CheckpointWriter { inner })
    }
}

impl<W: Write> CheckpointWriter<W> {
    pub fn write_matrix<F: Scalar>(&mut self, m: &Array2<F>) -> Result<()> {
        for &v in m.iter() {
            self.inner.write_all(&v.to_f64_lossy().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn write_vector<F: Scalar>(&mut self, v: &Array1<F>) -> Result<()> {
        for &x in v.iter() {
            self.inner.write_all(&x.to_f64_lossy().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

pub struct CheckpointReader<R: Read> {
    inner: R,
}

impl CheckpointReader<BufReader<File>> {
    /// Opens a checkpoint and parses its header line.
    pub fn open<H: DeserializeOwned>(path: impl AsRef<Path>) -> Result<(H, Self)> {
        let mut inner = BufReader::new(File::open(path)?);
        let mut header_line = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            let n = inner.read(&mut byte)?;
            if n == 0 {
                return Err(Error::Checkpoint("missing header line".into()));
            }
            if byte[0] == b'\n' {
                break;
            }
            header_line.push(byte[0]);
        }
        let header = serde_json::from_slice(&header_line)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        Ok((header, CheckpointReader { inner }))
    }
}

impl<R: Read> CheckpointReader<R> {
    pub fn read_matrix<F: Scalar>(&mut self, rows: usize, cols: usize) -> Result<Array2<F>> {
        let data = self.read_f64s(rows * cols)?;
        let data: Vec<F> = data.into_iter().map(F::from_f64_lossy).collect();
        Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| Error::Checkpoint(format!("bad matrix block: {e}")))
    }

    pub fn read_vector<F: Scalar>(&mut self, len: usize) -> Result<Array1<F>> {
        let data = self.read_f64s(len)?;
        Ok(Array1::from_vec(
            data.into_iter().map(F::from_f64_lossy).collect(),
        ))
    }

    fn read_f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let mut buf = vec![0u8; count * 8];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint("truncated parameter block".into()))?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    /// Asserts the blocks were consumed exactly.
    pub fn finish(mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(Error::Checkpoint("trailing bytes after blocks".into())),
        }
    }
}

/// Checks the schema tag a header declares.
pub fn expect_schema(got: &str, want: &str) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::Checkpoint(format!(
            "schema mismatch: expected {want:?}, found {got:?}"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use serde::Deserialize;

    #[derive(Serialize, Deserialize)]
    struct Header {
        schema: String,
        rows: usize,
        cols: usize,
    }

    #[test]
    fn roundtrip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let m = array![[1.5f64, -2.25, 0.125], [3.0, f64::MIN_POSITIVE, 9.75]];
        let v = array![0.1f64, -0.2];
        let header = Header {
            schema: "test-v1".into(),
            rows: 2,
            cols: 3,
        };
        let mut w = CheckpointWriter::create(&path, &header).unwrap();
        w.write_matrix(&m).unwrap();
        w.write_vector(&v).unwrap();
        w.finish().unwrap();

        let (h, mut r) = CheckpointReader::open::<Header>(&path).unwrap();
        expect_schema(&h.schema, "test-v1").unwrap();
        let m2: Array2<f64> = r.read_matrix(h.rows, h.cols).unwrap();
        let v2: Array1<f64> = r.read_vector(2).unwrap();
        r.finish().unwrap();
        assert_eq!(m, m2);
        assert_eq!(v, v2);
    }

    #[test]
    fn truncated_block_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("y.ckpt");
        let header = Header {
            schema: "test-v1".into(),
            rows: 4,
            cols: 4,
        };
        let mut w = CheckpointWriter::create(&path, &header).unwrap();
        w.write_vector(&array![1.0f64]).unwrap();
        w.finish().unwrap();

        let (_, mut r) = CheckpointReader::open::<Header>(&path).unwrap();
        assert!(r.read_matrix::<f64>(4, 4).is_err());
    }
}
