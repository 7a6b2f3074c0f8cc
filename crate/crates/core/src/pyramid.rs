//! Multi-level feature pyramids and the row bookkeeping for flattening
//! them.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Shape of one pyramid level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl LevelShape {
    pub fn pixels(&self) -> usize {
        self.h * self.w
    }
}

/// Ordered fine-to-coarse feature maps: level n+1 has half the spatial
/// extents and double the channels of level n.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<Tensor>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::invalid("feature pyramid needs at least one level"));
        }
        for t in &levels {
            if t.rank() != 3 {
                return Err(Error::invalid(format!(
                    "pyramid level must be [C,H,W], got {:?}",
                    t.shape()
                )));
            }
        }
        for pair in levels.windows(2) {
            let (a, b) = (pair[0].shape(), pair[1].shape());
            if b[0] != 2 * a[0] || a[1] != 2 * b[1] || a[2] != 2 * b[2] {
                return Err(Error::invalid(format!(
                    "pyramid halving/doubling violated between {a:?} and {b:?}"
                )));
            }
        }
        Ok(FeaturePyramid { levels })
    }

    pub fn levels(&self) -> &[Tensor] {
        &self.levels
    }

    pub fn level(&self, n: usize) -> &Tensor {
        &self.levels[n]
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn shapes(&self) -> Vec<LevelShape> {
        self.levels
            .iter()
            .map(|t| LevelShape {
                c: t.shape()[0],
                h: t.shape()[1],
                w: t.shape()[2],
            })
            .collect()
    }
}

/// Row provenance for the flattened multi-level matrix: levels
/// concatenated in order, pixels row-major within each level.
#[derive(Clone, Debug)]
pub struct LevelIndexMap {
    shapes: Vec<LevelShape>,
    starts: Vec<usize>,
}

impl LevelIndexMap {
    pub fn new(shapes: Vec<LevelShape>) -> Self {
        let mut starts = Vec::with_capacity(shapes.len());
        let mut acc = 0;
        for s in &shapes {
            starts.push(acc);
            acc += s.pixels();
        }
        LevelIndexMap { shapes, starts }
    }

    pub fn shapes(&self) -> &[LevelShape] {
        &self.shapes
    }

    pub fn num_levels(&self) -> usize {
        self.shapes.len()
    }

    pub fn total_rows(&self) -> usize {
        self.starts.last().map_or(0, |s| s + self.shapes.last().unwrap().pixels())
    }

    /// First row of a level's block.
    pub fn level_start(&self, level: usize) -> usize {
        self.starts[level]
    }

    pub fn level_range(&self, level: usize) -> std::ops::Range<usize> {
        let s = self.starts[level];
        s..s + self.shapes[level].pixels()
    }

    /// (level, y, x) of a flattened row.
    pub fn locate(&self, row: usize) -> (usize, usize, usize) {
        let level = match self.starts.binary_search(&row) {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        let within = row - self.starts[level];
        let w = self.shapes[level].w;
        (level, within / w, within % w)
    }
}
