use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LabelVector, PatchGrid, Sample, Vocabulary};
use crate::error::{Error, Result};

/// One line of a dataset file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub id: String,
    pub image: PatchGrid,
    pub report: Vec<String>,
    pub labels: LabelVector,
}

impl DatasetRecord {
    pub fn from_sample(sample: &Sample, vocab: &Vocabulary) -> Result<Self> {
        Ok(Self {
            id: sample.id.clone(),
            image: sample.image.clone(),
            report: sample
                .report
                .iter()
                .map(|&t| vocab.token(t).map(str::to_string))
                .collect::<Result<_>>()?,
            labels: sample.labels.clone(),
        })
    }

    pub fn into_sample(self, vocab: &Vocabulary) -> Sample {
        Sample {
            id: self.id,
            image: self.image,
            report: self.report.iter().map(|t| vocab.id_or_unk(t)).collect(),
            labels: self.labels,
        }
    }
}

pub fn save_dataset(samples: &[Sample], vocab: &Vocabulary, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut out, &DatasetRecord::from_sample(s, vocab)?)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a dataset file; blank lines are skipped, anything else must parse.
pub fn load_dataset(path: &Path, vocab: &Vocabulary) -> Result<Vec<Sample>> {
    let reader = BufReader::new(File::open(path)?);
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let record: DatasetRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if let Some(first) = samples.first() {
            let first: &Sample = first;
            if record.labels.len() != first.labels.len() {
                return Err(parse_err(format!(
                    "{} labels, previous records have {}",
                    record.labels.len(),
                    first.labels.len()
                )));
            }
        }
        samples.push(record.into_sample(vocab));
    }
    Ok(samples)
}
