//! The unit of generation, filtering, and classification: a pixel sequence
//! with class, text tokens, and provenance.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Real,
    Synthetic,
}

/// An F x C x H x W pixel sequence in [0,1] plus metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceClip {
    pub id: String,
    pub pixels: Tensor<f32>,
    pub class_id: usize,
    pub tokens: Vec<usize>,
    pub source: Source,
}

impl SequenceClip {
    pub fn new(
        id: impl Into<String>,
        pixels: Tensor<f32>,
        class_id: usize,
        tokens: Vec<usize>,
        source: Source,
    ) -> Result<Self> {
        let clip = SequenceClip { id: id.into(), pixels, class_id, tokens, source };
        clip.validate()?;
        Ok(clip)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixels.rank() != 4 {
            return Err(Error::input(format!(
                "clip {}: pixels must be (F,C,H,W), got {:?}",
                self.id,
                self.pixels.shape()
            )));
        }
        self.pixels.assert_finite(&format!("clip {}", self.id))?;
        if self.pixels.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::input(format!("clip {}: pixel values outside [0,1]", self.id)));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[3]
    }

    /// Borrow frame `f` as a (C,H,W) tensor.
    pub fn frame(&self, f: usize) -> Tensor<f32> {
        let (c, h, w) = (self.channels(), self.height(), self.width());
        let stride = c * h * w;
        Tensor::new(&[c, h, w], self.pixels.data()[f * stride..(f + 1) * stride].to_vec())
            .expect("frame slice")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validates_pixel_range() {
        let ok = Tensor::full(&[2, 1, 4, 4], 0.5f32);
        assert!(SequenceClip::new("a", ok, 0, vec![], Source::Real).is_ok());
        let bad = Tensor::full(&[2, 1, 4, 4], 1.5f32);
        assert!(SequenceClip::new("b", bad, 0, vec![], Source::Real).is_err());
    }

    #[test]
    fn frame_extraction() {
        let pixels = Tensor::from_fn(&[2, 1, 2, 2], |i| i as f32 / 8.0);
        let clip = SequenceClip::new("c", pixels, 1, vec![3], Source::Synthetic).unwrap();
        let f1 = clip.frame(1);
        assert_eq!(f1.shape(), &[1, 2, 2]);
        assert_eq!(f1.data(), &[0.5, 0.625, 0.75, 0.875]);
    }
}
