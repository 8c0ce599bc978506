use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Axis-aligned box in pixel coordinates, `(x1, y1)` the min corner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BBox::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Positive-area check.
    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite());
        if !finite || self.x1 >= self.x2 || self.y1 >= self.y2 {
            return Err(Error::InvalidBox(format!("{self:?}")));
        }
        Ok(())
    }

    /// Positive area and contained in a `width x height` image.
    pub fn validate_within(&self, size: ImageSize) -> Result<()> {
        self.validate()?;
        if self.x1 < 0.0 || self.y1 < 0.0 || self.x2 > size.width || self.y2 > size.height {
            return Err(Error::InvalidBox(format!("{self:?} outside image {}x{}", size.width, size.height)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: f64,
    pub height: f64,
}

/// Normalized corners plus covered area fraction:
/// `(x1/W, y1/H, x2/W, y2/H, (y2-y1)(x2-x1)/(W H))`.
pub fn location_vector(bbox: &BBox, size: ImageSize) -> Result<[f64; 5]> {
    if !(size.width > 0.0 && size.height > 0.0) {
        return Err(Error::InvalidBox(format!("image size {}x{}", size.width, size.height)));
    }
    bbox.validate_within(size)?;
    let (w, h) = (size.width, size.height);
    Ok([bbox.x1 / w, bbox.y1 / h, bbox.x2 / w, bbox.y2 / h, bbox.area() / (w * h)])
}

/// Precomputed detector output for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionSet<S> {
    /// `[I, d_vis]` pooled region features.
    pub features: Tensor<S>,
    pub boxes: Vec<BBox>,
    /// Detector class per region.
    pub label_ids: Vec<usize>,
    /// Detector confidence per region.
    pub scores: Vec<f64>,
    pub image_size: ImageSize,
}

impl<S: Scalar> RegionSet<S> {
    pub fn new(
        features: Tensor<S>,
        boxes: Vec<BBox>,
        label_ids: Vec<usize>,
        scores: Vec<f64>,
        image_size: ImageSize,
    ) -> Result<Self> {
        let n = boxes.len();
        if n == 0 {
            return Err(Error::EmptyInput("region set".into()));
        }
        if features.shape().len() != 2 || features.rows() != n || label_ids.len() != n || scores.len() != n {
            return Err(Error::dim("region set", features.shape(), (n, label_ids.len(), scores.len())));
        }
        for b in &boxes {
            b.validate_within(image_size)?;
        }
        Ok(RegionSet { features, boxes, label_ids, scores, image_size })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// `[I, 5]` location vectors.
    pub fn locations(&self) -> Result<Tensor<S>> {
        let mut data = Vec::with_capacity(self.len() * 5);
        for b in &self.boxes {
            data.extend(location_vector(b, self.image_size)?.iter().map(|&v| S::lit(v)));
        }
        Tensor::new(vec![self.len(), 5], data)
    }

    /// Regions picked by index, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Ok(RegionSet {
            features: self.features.select_rows(indices)?,
            boxes: indices.iter().map(|&i| self.boxes[i]).collect(),
            label_ids: indices.iter().map(|&i| self.label_ids[i]).collect(),
            scores: indices.iter().map(|&i| self.scores[i]).collect(),
            image_size: self.image_size,
        })
    }

    pub fn cast<T: Scalar>(&self) -> RegionSet<T> {
        RegionSet {
            features: self.features.cast(),
            boxes: self.boxes.clone(),
            label_ids: self.label_ids.clone(),
            scores: self.scores.clone(),
            image_size: self.image_size,
        }
    }
}
