//! Single-channel maps shared by the loss and metric code.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MapError {
    #[error("map data length {len} does not match {height}x{width}")]
    Length { len: usize, height: usize, width: usize },
    #[error("map dims must be positive")]
    Empty,
    #[error("map value {0} is outside [0, 1]")]
    OutOfRange(f64),
    #[error("shape mismatch: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
}

/// Real-valued map with values in `[0, 1]` (predictions, saliency maps).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ScalarMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self, MapError> {
        if height == 0 || width == 0 {
            return Err(MapError::Empty);
        }
        if data.len() != height * width {
            return Err(MapError::Length {
                len: data.len(),
                height,
                width,
            });
        }
        if let Some(&bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(MapError::OutOfRange(bad));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self, MapError> {
        Self::new(height, width, vec![value; height * width])
    }

    /// Interprets 8-bit intensities as `v / 255`.
    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self, MapError> {
        Self::new(height, width, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }

    /// `round(255 * v)` per pixel.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v * 255.0).round() as u8).collect()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn inverted(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| 1.0 - v).collect(),
        }
    }

    /// Bilinear resize (half-pixel centres), result clamped back into `[0, 1]`.
    pub fn resized(&self, height: usize, width: usize) -> Self {
        let data = crate::tensor::bilinear_resize_plane(&self.data, self.height, self.width, height, width)
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        Self { height, width, data }
    }
}

/// Binary ground-truth mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self, MapError> {
        if height == 0 || width == 0 {
            return Err(MapError::Empty);
        }
        if data.len() != height * width {
            return Err(MapError::Length {
                len: data.len(),
                height,
                width,
            });
        }
        Ok(Self { height, width, data })
    }

    /// Foreground where `byte >= threshold`.
    pub fn from_u8(height: usize, width: usize, bytes: &[u8], threshold: u8) -> Result<Self, MapError> {
        Self::new(height, width, bytes.iter().map(|&b| b >= threshold).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn at(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&g| g).count()
    }

    pub fn to_scalar(&self) -> ScalarMap {
        ScalarMap {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&g| if g { 1.0 } else { 0.0 }).collect(),
        }
    }
}

pub(crate) fn check_same_shape(a: &ScalarMap, b: &BinaryMask) -> Result<(), MapError> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(MapError::ShapeMismatch(a.height(), a.width(), b.height(), b.width()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_map_validates() {
        assert!(ScalarMap::new(2, 2, vec![0.0; 3]).is_err());
        assert!(ScalarMap::new(1, 2, vec![0.0, 1.5]).is_err());
        assert!(ScalarMap::new(0, 2, vec![]).is_err());
        assert!(ScalarMap::new(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn u8_round_trip() {
        let bytes: Vec<u8> = (0..=255).collect();
        let m = ScalarMap::from_u8(16, 16, &bytes).unwrap();
        assert_eq!(m.to_u8(), bytes);
    }

    #[test]
    fn mask_threshold() {
        let m = BinaryMask::from_u8(1, 4, &[0, 127, 128, 255], 128).unwrap();
        assert_eq!(m.data(), &[false, false, true, true]);
        assert_eq!(m.foreground_count(), 2);
    }
}
