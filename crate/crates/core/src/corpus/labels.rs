use serde::{Deserialize, Serialize};

/// Binary category vector `y ∈ {0,1}^{N^l}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct LabelVector(Vec<u8>);

impl LabelVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0; n])
    }

    pub fn ones(n: usize) -> Self {
        Self(vec![1; n])
    }

    pub fn from_active(n: usize, active: &[usize]) -> Self {
        let mut v = Self::zeros(n);
        for &k in active {
            v.0[k] = 1;
        }
        v
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, k: usize) -> bool {
        self.0[k] == 1
    }

    pub fn set(&mut self, k: usize, on: bool) {
        self.0[k] = u8::from(on);
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn active(&self) -> impl Iterator<Item = usize> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == 1)
            .map(|(k, _)| k)
    }

    pub fn popcount(&self) -> usize {
        self.0.iter().map(|&b| usize::from(b)).sum()
    }

    pub fn is_all_zero(&self) -> bool {
        self.popcount() == 0
    }

    /// `y_i · y_j`.
    pub fn dot(&self, other: &Self) -> usize {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(&a, &b)| usize::from(a & b))
            .sum()
    }

    /// `Σ |y_i − y_j|`.
    pub fn hamming(&self, other: &Self) -> usize {
        self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count()
    }

    /// `Σ (y_i + y_j)`.
    pub fn total(&self, other: &Self) -> usize {
        self.popcount() + other.popcount()
    }
}

impl TryFrom<Vec<u8>> for LabelVector {
    type Error = String;

    fn try_from(bits: Vec<u8>) -> Result<Self, String> {
        match bits.iter().find(|&&b| b > 1) {
            Some(b) => Err(format!("label value {b} is not 0 or 1")),
            None => Ok(Self(bits)),
        }
    }
}

impl From<LabelVector> for Vec<u8> {
    fn from(v: LabelVector) -> Self {
        v.0
    }
}
