use crate::error::{Error, Result};

/// Point positions in scene units, with optional per-point RGB in `[0,1]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<[f32; 3]>,
    pub colors: Option<Vec<[f32; 3]>>,
}

impl PointCloud {
    pub fn new(positions: Vec<[f32; 3]>) -> Self {
        PointCloud {
            positions,
            colors: None,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.positions.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Data(format!("point {i} has a non-finite coordinate")));
        }
        if let Some(c) = &self.colors {
            if c.len() != self.positions.len() {
                return Err(Error::Data(format!(
                    "{} colors for {} points",
                    c.len(),
                    self.positions.len()
                )));
            }
        }
        Ok(())
    }

    /// Keep rows where `mask` is true, preserving order.
    pub fn filter(&self, mask: &[bool]) -> PointCloud {
        assert_eq!(mask.len(), self.len());
        let positions = self
            .positions
            .iter()
            .zip(mask)
            .filter(|(_, &k)| k)
            .map(|(p, _)| *p)
            .collect();
        let colors = self.colors.as_ref().map(|c| {
            c.iter()
                .zip(mask)
                .filter(|(_, &k)| k)
                .map(|(p, _)| *p)
                .collect()
        });
        PointCloud { positions, colors }
    }

    /// Append `other`; colours survive only when both sides carry them.
    pub fn extend(&mut self, other: &PointCloud) {
        match (&mut self.colors, &other.colors) {
            (Some(a), Some(b)) => a.extend_from_slice(b),
            (Some(a), None) => a.extend(std::iter::repeat([0.5; 3]).take(other.len())),
            _ => self.colors = None,
        }
        self.positions.extend_from_slice(&other.positions);
    }

    /// Flat `x0,y0,z0,x1,...` buffer.
    pub fn flat_positions(&self) -> Vec<f32> {
        self.positions.iter().flat_map(|p| p.iter().copied()).collect()
    }
}
