//! Flat views over model parameter blocks, used by checkpoints and by the
//! finite-difference test harnesses.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::num::Scalar;

pub enum BlockRef<'a, F: Scalar> {
    M(&'a Array2<F>),
    V(&'a Array1<F>),
}

impl<F: Scalar> BlockRef<'_, F> {
    pub fn len(&self) -> usize {
        match self {
            BlockRef::M(m) => m.len(),
            BlockRef::V(v) => v.len(),
        }
    }

    pub fn extend_into(&self, out: &mut Vec<f64>) {
        match self {
            BlockRef::M(m) => out.extend(m.iter().map(|v| v.to_f64_lossy())),
            BlockRef::V(v) => out.extend(v.iter().map(|v| v.to_f64_lossy())),
        }
    }
}

pub enum BlockMut<'a, F: Scalar> {
    M(&'a mut Array2<F>),
    V(&'a mut Array1<F>),
}

impl<F: Scalar> BlockMut<'_, F> {
    fn assign_from(&mut self, flat: &[f64], mut cursor: usize) -> usize {
        match self {
            BlockMut::M(m) => {
                for v in m.iter_mut() {
                    *v = F::from_f64_lossy(flat[cursor]);
                    cursor += 1;
                }
            }
            BlockMut::V(vec) => {
                for v in vec.iter_mut() {
                    *v = F::from_f64_lossy(flat[cursor]);
                    cursor += 1;
                }
            }
        }
        cursor
    }
}

pub fn flatten<F: Scalar>(blocks: &[BlockRef<'_, F>]) -> Vec<f64> {
    let mut out = Vec::new();
    for block in blocks {
        block.extend_into(&mut out);
    }
    out
}

pub fn count<F: Scalar>(blocks: &[BlockRef<'_, F>]) -> usize {
    blocks.iter().map(|b| b.len()).sum()
}

pub fn assign<F: Scalar>(mut blocks: Vec<BlockMut<'_, F>>, flat: &[f64]) -> Result<()> {
    let expected: usize = blocks
        .iter()
        .map(|b| match b {
            BlockMut::M(m) => m.len(),
            BlockMut::V(v) => v.len(),
        })
        .sum();
    if flat.len() != expected {
        return Err(Error::dim(expected, flat.len(), "flat parameters"));
    }
    let mut cursor = 0;
    for block in &mut blocks {
        cursor = block.assign_from(flat, cursor);
    }
    Ok(())
}
