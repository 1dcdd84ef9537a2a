//! Multi-scale grids of location embeddings.
//!
//! A [`FeaturePyramid`] is one scene: `p` layers, each an `H x W` grid of
//! `D`-dimensional features stored as `f32`, plus the box each location would
//! emit. A [`Batch`] stacks the layers of several scenes into `f64` matrices
//! for training and scoring.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGeometry {
    pub height: usize,
    pub width: usize,
    pub stride: u32,
}

impl LayerGeometry {
    pub fn new(height: usize, width: usize, stride: u32) -> Self {
        Self { height, width, stride }
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Image-plane center of cell `(row, col)`.
    pub fn center(&self, row: usize, col: usize) -> (f64, f64) {
        let s = f64::from(self.stride);
        ((col as f64 + 0.5) * s, (row as f64 + 0.5) * s)
    }

    pub fn center_of(&self, index: usize) -> (f64, f64) {
        self.center(index / self.width, index % self.width)
    }

    /// Row-major indices of cells whose center lies inside `b`.
    pub fn cells_in(&self, b: &BBox) -> Vec<usize> {
        let mut out = Vec::new();
        for row in 0..self.height {
            for col in 0..self.width {
                let (x, y) = self.center(row, col);
                if b.contains(x, y) {
                    out.push(row * self.width + col);
                }
            }
        }
        out
    }
}

/// Checks that strides strictly increase and every layer is non-empty.
pub fn validate_geometry(geometry: &[LayerGeometry]) -> Result<()> {
    if geometry.is_empty() {
        return Err(Error::ShapeMismatch("pyramid needs at least one layer".into()));
    }
    if geometry.iter().any(LayerGeometry::is_empty) {
        return Err(Error::ShapeMismatch("pyramid layer with zero cells".into()));
    }
    if geometry.windows(2).any(|w| w[0].stride >= w[1].stride) {
        return Err(Error::ShapeMismatch("pyramid strides must strictly increase".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidLayer {
    pub geometry: LayerGeometry,
    features: Vec<f32>,
    boxes: Vec<[f32; 4]>,
}

impl PyramidLayer {
    pub fn new(geometry: LayerGeometry, dim: usize, features: Vec<f32>, boxes: Vec<[f32; 4]>) -> Result<Self> {
        if features.len() != geometry.len() * dim || boxes.len() != geometry.len() {
            return Err(Error::ShapeMismatch(format!(
                "layer {}x{} with D={dim} got {} features and {} boxes",
                geometry.height,
                geometry.width,
                features.len(),
                boxes.len()
            )));
        }
        if boxes.iter().any(|b| !(b[0] < b[2] && b[1] < b[3])) {
            return Err(Error::Format("malformed per-location box".into()));
        }
        Ok(Self {
            geometry,
            features,
            boxes,
        })
    }

    pub fn feature(&self, index: usize, dim: usize) -> &[f32] {
        &self.features[index * dim..(index + 1) * dim]
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn boxes(&self) -> &[[f32; 4]] {
        &self.boxes
    }

    pub fn bbox(&self, index: usize) -> BBox {
        let b = self.boxes[index];
        BBox::new(f64::from(b[0]), f64::from(b[1]), f64::from(b[2]), f64::from(b[3]))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    dim: usize,
    layers: Vec<PyramidLayer>,
}

impl FeaturePyramid {
    pub fn new(dim: usize, layers: Vec<PyramidLayer>) -> Result<Self> {
        let geometry: Vec<_> = layers.iter().map(|l| l.geometry).collect();
        validate_geometry(&geometry)?;
        for l in &layers {
            if l.features.len() != l.geometry.len() * dim {
                return Err(Error::ShapeMismatch("feature dimension mismatch".into()));
            }
        }
        Ok(Self { dim, layers })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layers(&self) -> &[PyramidLayer] {
        &self.layers
    }

    pub fn geometry(&self) -> Vec<LayerGeometry> {
        self.layers.iter().map(|l| l.geometry).collect()
    }

    pub fn num_locations(&self) -> usize {
        self.layers.iter().map(|l| l.geometry.len()).sum()
    }
}

/// Stacked layers of one or more scenes sharing a geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchLayer {
    pub geometry: LayerGeometry,
    pub scenes: usize,
    /// `scenes * H * W` rows of `dim` values, scene-major.
    pub features: Vec<f64>,
}

impl BatchLayer {
    pub fn rows(&self) -> usize {
        self.scenes * self.geometry.len()
    }

    pub fn row(&self, n: usize, dim: usize) -> &[f64] {
        &self.features[n * dim..(n + 1) * dim]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub dim: usize,
    pub layers: Vec<BatchLayer>,
}

impl Batch {
    pub fn from_pyramids(pyramids: &[&FeaturePyramid]) -> Result<Self> {
        let first = pyramids
            .first()
            .ok_or_else(|| Error::ShapeMismatch("empty batch".into()))?;
        let geometry = first.geometry();
        let dim = first.dim;
        for p in pyramids {
            if p.dim != dim || p.geometry() != geometry {
                return Err(Error::ShapeMismatch("pyramids in a batch must share geometry".into()));
            }
        }
        let layers = geometry
            .iter()
            .enumerate()
            .map(|(j, g)| {
                let mut features = Vec::with_capacity(pyramids.len() * g.len() * dim);
                for p in pyramids {
                    features.extend(p.layers[j].features.iter().map(|&v| f64::from(v)));
                }
                BatchLayer {
                    geometry: *g,
                    scenes: pyramids.len(),
                    features,
                }
            })
            .collect();
        Ok(Self { dim, layers })
    }

    pub fn from_pyramid(pyramid: &FeaturePyramid) -> Self {
        Self::from_pyramids(&[pyramid]).expect("single pyramid is a valid batch")
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn geometry(&self) -> Vec<LayerGeometry> {
        self.layers.iter().map(|l| l.geometry).collect()
    }
}
