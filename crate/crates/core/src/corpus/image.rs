use serde::{Deserialize, Serialize};
use xpro_tensor::Tensor;

use crate::error::{Error, Result};

/// Patch-feature grid of `height × width` cells with `channels` floats each,
/// stored row-major as `[row][col][channel]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<Vec<f64>>>", into = "Vec<Vec<Vec<f64>>>")]
pub struct PatchGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl PatchGrid {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_data(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::data(format!(
                "grid {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_patches(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn cell_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let start = (row * self.width + col) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    /// Patch sequence `[H·W, C]` in row-major cell order.
    pub fn patches(&self) -> Tensor {
        Tensor::new(vec![self.num_patches(), self.channels], self.data.clone())
            .expect("grid data length is an invariant")
    }

    /// Horizontal mirror: columns reversed, channels untouched.
    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for r in 0..self.height {
            for c in 0..self.width {
                out.cell_mut(r, c)
                    .copy_from_slice(self.cell(r, self.width - 1 - c));
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn flip_image(image: &PatchGrid) -> PatchGrid {
    image.flip_horizontal()
}

impl TryFrom<Vec<Vec<Vec<f64>>>> for PatchGrid {
    type Error = String;

    fn try_from(rows: Vec<Vec<Vec<f64>>>) -> std::result::Result<Self, String> {
        let height = rows.len();
        let width = rows.first().map_or(0, Vec::len);
        let channels = rows.first().and_then(|r| r.first()).map_or(0, Vec::len);
        let mut data = Vec::with_capacity(height * width * channels);
        for (r, row) in rows.into_iter().enumerate() {
            if row.len() != width {
                return Err(format!(
                    "image row {r} has {} cells, expected {width}",
                    row.len()
                ));
            }
            for (c, cell) in row.into_iter().enumerate() {
                if cell.len() != channels {
                    return Err(format!(
                        "image cell ({r}, {c}) has {} channels, expected {channels}",
                        cell.len()
                    ));
                }
                data.extend(cell);
            }
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }
}

impl From<PatchGrid> for Vec<Vec<Vec<f64>>> {
    fn from(g: PatchGrid) -> Self {
        (0..g.height)
            .map(|r| (0..g.width).map(|c| g.cell(r, c).to_vec()).collect())
            .collect()
    }
}
