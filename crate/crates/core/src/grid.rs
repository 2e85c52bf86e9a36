//! Dense channel-major 2D arrays with optional validity masks.

use crate::error::{Error, Result};
use crate::layout::TangentPlaneSpec;

/// A `channels × height × width` array of scalars, channel-major, with an
/// optional per-pixel validity mask shared by all channels. Carries images,
/// depth maps and feature maps alike.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    pub mask: Option<Vec<bool>>,
}

impl Grid {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Grid {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
            mask: None,
        }
    }

    pub fn constant(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Grid {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
            mask: None,
        }
    }

    pub fn from_data(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
        mask: Option<Vec<bool>>,
    ) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Config(format!(
                "grid data length {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        if let Some(m) = &mask {
            if m.len() != height * width {
                return Err(Error::Config(format!(
                    "grid mask length {} does not match {height}x{width}",
                    m.len()
                )));
            }
        }
        Ok(Grid {
            channels,
            height,
            width,
            data,
            mask,
        })
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn spatial_index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    #[inline]
    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.data[channel * self.pixels() + self.spatial_index(row, col)]
    }

    #[inline]
    pub fn set(&mut self, channel: usize, row: usize, col: usize, value: f64) {
        let i = channel * self.pixels() + self.spatial_index(row, col);
        self.data[i] = value;
    }

    /// Whether a pixel is valid; grids without a mask are fully valid.
    #[inline]
    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        match &self.mask {
            Some(m) => m[self.spatial_index(row, col)],
            None => true,
        }
    }

    pub fn channel(&self, channel: usize) -> &[f64] {
        let n = self.pixels();
        &self.data[channel * n..(channel + 1) * n]
    }

    /// Per-channel (min, max) over valid pixels, or `None` when no pixel is
    /// valid.
    pub fn value_range(&self, channel: usize) -> Option<(f64, f64)> {
        let mut range: Option<(f64, f64)> = None;
        for (i, &v) in self.channel(channel).iter().enumerate() {
            let valid = self.mask.as_ref().map_or(true, |m| m[i]);
            if valid {
                range = Some(match range {
                    Some((lo, hi)) => (lo.min(v), hi.max(v)),
                    None => (v, v),
                });
            }
        }
        range
    }
}

/// The tangent patches extracted from one ERP grid: one square grid per
/// layout spec, all sharing channel count and resolution.
#[derive(Clone, Debug)]
pub struct PatchSet {
    pub specs: Vec<TangentPlaneSpec>,
    pub grids: Vec<Grid>,
}

impl PatchSet {
    pub fn new(specs: Vec<TangentPlaneSpec>, grids: Vec<Grid>) -> Result<Self> {
        if specs.len() != grids.len() {
            return Err(Error::Config(format!(
                "patch set has {} specs but {} grids",
                specs.len(),
                grids.len()
            )));
        }
        if let Some(first) = grids.first() {
            for (i, g) in grids.iter().enumerate() {
                if g.channels != first.channels
                    || g.height != g.width
                    || g.height != specs[i].resolution
                {
                    return Err(Error::Config(format!(
                        "patch grid {i} is {}x{}x{} but spec resolution is {}",
                        g.channels, g.height, g.width, specs[i].resolution
                    )));
                }
            }
        }
        Ok(PatchSet { specs, grids })
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_data_validates_lengths() {
        assert!(Grid::from_data(2, 3, 4, vec![0.0; 24], None).is_ok());
        assert!(Grid::from_data(2, 3, 4, vec![0.0; 23], None).is_err());
        assert!(Grid::from_data(1, 3, 4, vec![0.0; 12], Some(vec![true; 11])).is_err());
    }

    #[test]
    fn indexing_is_channel_major() {
        let mut g = Grid::new(2, 2, 3);
        g.set(1, 1, 2, 5.0);
        assert_eq!(g.data[1 * (2 * 3) + 1 * 3 + 2], 5.0);
        assert_eq!(g.get(1, 1, 2), 5.0);
    }
}
