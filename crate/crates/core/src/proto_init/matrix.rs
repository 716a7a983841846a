use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use xpro_tensor::Tensor;

use crate::error::{Error, Result};

pub const PM_MAGIC: &[u8; 9] = b"XPRO-PM-1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    ClusterMean,
    Fallback,
    Random,
    /// Read back from a file, which does not record provenance.
    Loaded,
}

/// `PM[k][i]` prototypes of width `dim`, flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeMatrix {
    categories: usize,
    per_category: usize,
    dim: usize,
    data: Vec<f64>,
    provenance: Vec<Provenance>,
}

impl PrototypeMatrix {
    pub fn new(
        categories: usize,
        per_category: usize,
        dim: usize,
        data: Vec<f64>,
        provenance: Vec<Provenance>,
    ) -> Result<Self> {
        let rows = categories * per_category;
        if data.len() != rows * dim || provenance.len() != rows {
            return Err(Error::data(format!(
                "prototype matrix {categories}x{per_category}x{dim} got {} values and {} tags",
                data.len(),
                provenance.len()
            )));
        }
        Ok(Self {
            categories,
            per_category,
            dim,
            data,
            provenance,
        })
    }

    /// Independent `N(0, std²)` entries.
    pub fn random(categories: usize, per_category: usize, dim: usize, std: f64, seed: u64) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = categories * per_category;
        let data = (0..rows * dim).map(|_| normal.sample(&mut rng)).collect();
        Self {
            categories,
            per_category,
            dim,
            data,
            provenance: vec![Provenance::Random; rows],
        }
    }

    pub fn categories(&self) -> usize {
        self.categories
    }

    pub fn per_category(&self) -> usize {
        self.per_category
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.categories, self.per_category, self.dim]
    }

    pub fn num_prototypes(&self) -> usize {
        self.categories * self.per_category
    }

    /// Flat row index of prototype `(k, i)`.
    pub fn flat_index(&self, k: usize, i: usize) -> usize {
        k * self.per_category + i
    }

    /// `(k, i)` of a flat row index.
    pub fn split_index(&self, flat: usize) -> (usize, usize) {
        (flat / self.per_category, flat % self.per_category)
    }

    pub fn get(&self, k: usize, i: usize) -> &[f64] {
        let start = self.flat_index(k, i) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn provenance(&self, k: usize, i: usize) -> Provenance {
        self.provenance[self.flat_index(k, i)]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Share of prototypes that are cluster means.
    pub fn cluster_mean_fraction(&self) -> f64 {
        let n = self
            .provenance
            .iter()
            .filter(|&&p| p == Provenance::ClusterMean)
            .count();
        n as f64 / self.provenance.len().max(1) as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `[N^l·N^p, D]` view for the model.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.num_prototypes(), self.dim], self.data.clone())
            .expect("length is an invariant")
    }

    /// Replaces the values with a `[N^l·N^p, D]` tensor, keeping provenance.
    pub fn with_values(&self, values: &Tensor) -> Result<Self> {
        if values.shape() != [self.num_prototypes(), self.dim] {
            return Err(Error::data(format!(
                "prototype values {:?} do not fit {:?}",
                values.shape(),
                self.shape()
            )));
        }
        Ok(Self {
            data: values.data().to_vec(),
            ..self.clone()
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(PM_MAGIC)?;
        for d in self.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in &self.data {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut input = BufReader::new(File::open(path)?);
        let bad = |msg: &str| Error::data(format!("{}: {msg}", path.display()));
        let mut magic = [0u8; 9];
        input
            .read_exact(&mut magic)
            .map_err(|_| bad("file too short for header"))?;
        if &magic != PM_MAGIC {
            return Err(bad("not a prototype matrix file"));
        }
        let mut dims = [0usize; 3];
        let mut buf = [0u8; 8];
        for d in &mut dims {
            input
                .read_exact(&mut buf)
                .map_err(|_| bad("truncated header"))?;
            *d = usize::try_from(u64::from_le_bytes(buf)).map_err(|_| bad("dimension overflow"))?;
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| bad("dimension overflow"))?;
        let mut data = Vec::with_capacity(count.min(1 << 24));
        for _ in 0..count {
            input
                .read_exact(&mut buf)
                .map_err(|_| bad("truncated data"))?;
            data.push(f64::from_le_bytes(buf));
        }
        if input.read(&mut buf)? != 0 {
            return Err(bad("trailing bytes after data"));
        }
        Self::new(
            dims[0],
            dims[1],
            dims[2],
            data,
            vec![Provenance::Loaded; dims[0] * dims[1]],
        )
    }

    /// One line per prototype: `k,i,v_0,…,v_{D-1}`, with a header row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        let header: Vec<String> = ["k".to_string(), "i".to_string()]
            .into_iter()
            .chain((0..self.dim).map(|d| format!("v{d}")))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for k in 0..self.categories {
            for i in 0..self.per_category {
                let values: Vec<String> = self.get(k, i).iter().map(|v| v.to_string()).collect();
                writeln!(out, "{k},{i},{}", values.join(","))?;
            }
        }
        out.flush()?;
        Ok(())
    }
}
