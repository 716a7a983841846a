use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which grid cells a category imprints, and with what channel pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSignature {
    /// `(row, col)` grid cells.
    pub cells: Vec<(usize, usize)>,
    /// Added to every listed cell; length equals the channel count.
    pub pattern: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategorySpec {
    pub name: String,
    /// Sentence emitted when the category is active.
    pub finding: String,
    /// Sentence emitted otherwise.
    pub normal: String,
    /// Token whose presence in a report marks the category as active.
    pub keyword: String,
    pub signature: PatchSignature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub seed: u64,
    pub num_samples: usize,
    /// Probability that a sample has no active category.
    pub normal_probability: f64,
    /// Abnormal samples draw between 1 and this many active categories.
    pub max_active: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub channels: usize,
    pub noise_std: f64,
    pub categories: Vec<CategorySpec>,
}

const REGIONS: [&str; 14] = [
    "apex", "base", "hilum", "margin", "septum", "lobe", "vessel", "pleura", "border", "sulcus",
    "cortex", "recess", "ridge", "groove",
];
const FINDINGS: [&str; 14] = [
    "opacity",
    "nodule",
    "effusion",
    "mass",
    "lesion",
    "thickening",
    "cyst",
    "calcification",
    "edema",
    "scar",
    "density",
    "shadow",
    "fracture",
    "collapse",
];
const NORMALS: [&str; 7] = [
    "clear",
    "normal",
    "intact",
    "unremarkable",
    "stable",
    "sharp",
    "preserved",
];

impl Default for CorpusSpec {
    /// Fourteen abstract categories on a 4×4 grid with 32 channels.
    fn default() -> Self {
        let (h, w, c) = (4, 4, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0001);
        let categories = (0..REGIONS.len())
            .map(|k| {
                let first = k % (h * w);
                let second = (first + 1 + rng.random_range(0..h * w - 1)) % (h * w);
                let mut pattern = vec![0.0; c];
                for ch in sample(&mut rng, c, 4) {
                    pattern[ch] = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                }
                CategorySpec {
                    name: format!("category_{k:02}"),
                    finding: format!("{} {} .", REGIONS[k], FINDINGS[k]),
                    normal: format!("{} {} .", REGIONS[k], NORMALS[k % NORMALS.len()]),
                    keyword: FINDINGS[k].to_string(),
                    signature: PatchSignature {
                        cells: vec![(first / w, first % w), (second / w, second % w)],
                        pattern,
                    },
                }
            })
            .collect();
        Self {
            seed: 7,
            num_samples: 1000,
            normal_probability: 0.6,
            max_active: 3,
            grid_height: h,
            grid_width: w,
            channels: c,
            noise_std: 0.3,
            categories,
        }
    }
}

impl CorpusSpec {
    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.categories.is_empty() {
            problems.push("categories: at least one category is required".to_string());
        }
        if !(0.0..=1.0).contains(&self.normal_probability) {
            problems.push(format!(
                "normal_probability: {} not in [0, 1]",
                self.normal_probability
            ));
        }
        if self.max_active == 0 || self.max_active > self.categories.len().max(1) {
            problems.push(format!(
                "max_active: {} not in 1..={}",
                self.max_active,
                self.categories.len()
            ));
        }
        if self.grid_height == 0 || self.grid_width == 0 || self.channels == 0 {
            problems.push("grid_height, grid_width, channels: must be positive".to_string());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            problems.push(format!(
                "noise_std: {} is not a finite value >= 0",
                self.noise_std
            ));
        }
        for (k, cat) in self.categories.iter().enumerate() {
            let sig = &cat.signature;
            for &(r, c) in &sig.cells {
                if r >= self.grid_height || c >= self.grid_width {
                    problems.push(format!(
                        "categories[{k}].signature.cells: ({r}, {c}) outside {}x{} grid",
                        self.grid_height, self.grid_width
                    ));
                }
            }
            if sig.pattern.len() != self.channels {
                problems.push(format!(
                    "categories[{k}].signature.pattern: length {} != channels {}",
                    sig.pattern.len(),
                    self.channels
                ));
            }
            if sig.pattern.iter().any(|v| !v.is_finite()) {
                problems.push(format!(
                    "categories[{k}].signature.pattern: non-finite value"
                ));
            }
            if cat.finding.split_whitespace().next().is_none()
                || cat.normal.split_whitespace().next().is_none()
            {
                problems.push(format!("categories[{k}]: empty sentence template"));
            }
            if !cat.finding.split_whitespace().any(|w| w == cat.keyword) {
                problems.push(format!(
                    "categories[{k}].keyword: `{}` missing from its finding sentence",
                    cat.keyword
                ));
            }
            for (j, other) in self.categories.iter().enumerate() {
                let clash = other.normal.split_whitespace().any(|w| w == cat.keyword)
                    || (j != k && other.finding.split_whitespace().any(|w| w == cat.keyword));
                if clash {
                    problems.push(format!(
                        "categories[{k}].keyword: `{}` also appears in a sentence of categories[{j}]",
                        cat.keyword
                    ));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }

    /// Token count of the longest possible report, BOS and EOS included.
    pub fn max_report_len(&self) -> usize {
        2 + self
            .categories
            .iter()
            .map(|c| {
                let f = c.finding.split_whitespace().count();
                let n = c.normal.split_whitespace().count();
                f.max(n)
            })
            .sum::<usize>()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_fits() {
        let spec = CorpusSpec::default();
        spec.validate().unwrap();
        assert_eq!(spec.num_categories(), 14);
        assert_eq!(spec.max_report_len(), 44);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_cells() {
        let mut v = serde_json::to_value(CorpusSpec::default()).unwrap();
        v["colour"] = serde_json::json!(1);
        let err = CorpusSpec::from_json(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("colour"), "{err}");

        let mut spec = CorpusSpec::default();
        spec.categories[3].signature.cells.push((9, 0));
        let err = spec.validate().unwrap_err().to_string();
        assert!(err.contains("categories[3].signature.cells"), "{err}");
    }

    #[test]
    fn zero_categories_is_a_config_error() {
        let spec = CorpusSpec {
            categories: Vec::new(),
            ..CorpusSpec::default()
        };
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn keyword_must_be_unique_to_its_finding() {
        let mut spec = CorpusSpec::default();
        spec.categories[1].normal = format!("base {} .", spec.categories[0].keyword);
        assert!(spec.validate().is_err());
    }
}
