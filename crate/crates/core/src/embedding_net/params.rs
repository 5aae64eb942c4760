use rand::Rng;

use super::network::plan;
use super::{ArchitectureConfig, Real};
use crate::error::{Error, Result};
use crate::seed;

/// One named parameter tensor, stored flat in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// All learnable tensors of an encoder together with the architecture they
/// belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<T> {
    pub arch: ArchitectureConfig,
    pub blocks: Vec<ParamBlock<T>>,
}

impl<T: Real> ParameterSet<T> {
    /// Assemble from explicit blocks, checking names, shapes and finiteness
    /// against `arch`.
    pub fn from_blocks(arch: ArchitectureConfig, blocks: Vec<ParamBlock<T>>) -> Result<Self> {
        let (_, specs) = plan(&arch)?;
        if specs.len() != blocks.len() {
            return Err(Error::Shape(format!(
                "architecture has {} parameter blocks, got {}",
                specs.len(),
                blocks.len()
            )));
        }
        for (spec, block) in specs.iter().zip(&blocks) {
            if spec.name != block.name || spec.shape != block.shape {
                return Err(Error::Shape(format!(
                    "expected block {} {:?}, got {} {:?}",
                    spec.name, spec.shape, block.name, block.shape
                )));
            }
            if block.data.len() != block.shape.iter().product::<usize>() {
                return Err(Error::Shape(format!(
                    "block {} holds {} values for shape {:?}",
                    block.name,
                    block.data.len(),
                    block.shape
                )));
            }
            if block.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameter block {}", block.name)));
            }
        }
        Ok(Self { arch, blocks })
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().map(|b| b.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        ParameterSet {
            arch: self.arch.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| ParamBlock {
                    name: b.name.clone(),
                    shape: b.shape.clone(),
                    data: b.data.iter().map(|&v| U::of(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    pub fn zero_gradients(&self) -> Gradients<T> {
        Gradients {
            blocks: self
                .blocks
                .iter()
                .map(|b| vec![T::zero(); b.data.len()])
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = T> + '_ {
        self.blocks.iter().flat_map(|b| b.data.iter().copied())
    }

    /// Mutable access by flat index across blocks.
    pub fn get_mut(&mut self, mut index: usize) -> Option<&mut T> {
        for block in &mut self.blocks {
            if index < block.data.len() {
                return Some(&mut block.data[index]);
            }
            index -= block.data.len();
        }
        None
    }
}

/// Gradient tensors laid out like the blocks of a [`ParameterSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub blocks: Vec<Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x = *x + y;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for v in self.blocks.iter_mut().flatten() {
            *v = *v * factor;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = T> + '_ {
        self.blocks.iter().flat_map(|b| b.iter().copied())
    }

    pub fn max_abs(&self) -> T {
        self.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

/// Fan-in scaled uniform initialization: weights ~ U(−b, b) with
/// b = √(6/fan_in) in front of a rectifier and √(3/fan_in) otherwise; biases
/// start at zero.
pub fn init_parameters<T: Real>(arch: &ArchitectureConfig, seed: u64) -> Result<ParameterSet<T>> {
    let (_, specs) = plan(arch)?;
    let mut rng = seed::rng_for(seed, &[seed::tag::INIT]);
    let blocks = specs
        .into_iter()
        .map(|spec| {
            let count = spec.shape.iter().product();
            let bound = 1.0 / (spec.fan_in as f64).sqrt();
            let data = (0..count)
                .map(|_| T::of(rng.random_range(-bound..bound)))
                .collect();
            ParamBlock {
                name: spec.name,
                shape: spec.shape,
                data,
            }
        })
        .collect();
    Ok(ParameterSet {
        arch: arch.clone(),
        blocks,
    })
}
