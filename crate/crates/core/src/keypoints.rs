use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Keypoints of one image: positions `M×3` holding `(x px, y px, score)` and
/// L2-normalized descriptors `M×C`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    positions: Tensor,
    descriptors: Tensor,
    image_size: (f32, f32),
}

pub const UNIT_NORM_TOLERANCE: f32 = 1e-5;

impl KeypointSet {
    pub fn new(positions: Tensor, descriptors: Tensor, image_size: (f32, f32)) -> Result<Self> {
        let (w, h) = image_size;
        if !(w > 0.0 && h > 0.0) {
            return Err(Error::contract(format!("image size {w}x{h} must be positive")));
        }
        if positions.shape().len() != 2 || positions.cols() != 3 {
            return Err(Error::dim("keypoints", format!("positions shape {:?}, want Mx3", positions.shape())));
        }
        if descriptors.shape().len() != 2 || descriptors.rows() != positions.rows() {
            return Err(Error::dim(
                "keypoints",
                format!("{} positions vs descriptors {:?}", positions.rows(), descriptors.shape()),
            ));
        }
        for i in 0..positions.rows() {
            let p = positions.row(i);
            if !(0.0..w).contains(&p[0]) || !(0.0..h).contains(&p[1]) {
                return Err(Error::contract(format!("keypoint {i} at ({}, {}) outside {w}x{h}", p[0], p[1])));
            }
            if !(0.0..=1.0).contains(&p[2]) {
                return Err(Error::contract(format!("keypoint {i} score {} outside [0, 1]", p[2])));
            }
            let norm = descriptors.row(i).iter().map(|v| v * v).sum::<f32>().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(Error::contract(format!("descriptor {i} has norm {norm}")));
            }
        }
        let mut positions = positions;
        let mut descriptors = descriptors;
        positions.set_requires_grad(false);
        descriptors.set_requires_grad(false);
        Ok(Self {
            positions,
            descriptors,
            image_size,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.descriptors.cols()
    }

    pub fn positions(&self) -> &Tensor {
        &self.positions
    }

    pub fn descriptors(&self) -> &Tensor {
        &self.descriptors
    }

    pub fn image_size(&self) -> (f32, f32) {
        self.image_size
    }

    pub fn xy(&self, i: usize) -> (f32, f32) {
        let p = self.positions.row(i);
        (p[0], p[1])
    }

    /// Centered, scale-normalized positions:
    /// `((x − w/2)/max(w,h), (y − h/2)/max(w,h), score)`.
    pub fn normalized_positions(&self) -> Vec<f64> {
        let (w, h) = (self.image_size.0 as f64, self.image_size.1 as f64);
        let s = w.max(h);
        self.positions
            .data()
            .chunks_exact(3)
            .flat_map(|p| [(p[0] as f64 - w / 2.0) / s, (p[1] as f64 - h / 2.0) / s, p[2] as f64])
            .collect()
    }

    /// Keypoint `perm[r]` becomes row `r`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        Ok(Self {
            positions: self.positions.select_rows(perm)?,
            descriptors: self.descriptors.select_rows(perm)?,
            image_size: self.image_size,
        })
    }
}
