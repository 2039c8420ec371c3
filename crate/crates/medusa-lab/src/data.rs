//! Shared domain records: grayscale images and tokenized text reports.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Tensor;

/// Fixed-size grayscale image with pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub id: String,
    pub label: String,
    pixels: Tensor,
}

impl Image {
    pub fn new(id: impl Into<String>, label: impl Into<String>, pixels: Tensor) -> Result<Self> {
        if pixels.shape().len() != 2 {
            return Err(Error::contract(format!(
                "image pixels must be rank 2, got shape {:?}",
                pixels.shape()
            )));
        }
        pixels.validate_finite("Image::new")?;
        if pixels.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::contract("image pixels must lie in [0, 1]"));
        }
        Ok(Image {
            id: id.into(),
            label: label.into(),
            pixels,
        })
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    /// Same image content under a different pixel tensor (id and label kept).
    pub fn with_pixels(&self, pixels: Tensor) -> Result<Self> {
        Image::new(self.id.clone(), self.label.clone(), pixels)
    }
}

/// Text record: id, class label, token sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub id: String,
    pub label: String,
    pub tokens: Vec<String>,
}

impl Report {
    pub fn new(
        id: impl Into<String>,
        label: impl Into<String>,
        tokens: Vec<String>,
    ) -> Self {
        Report {
            id: id.into(),
            label: label.into(),
            tokens,
        }
    }

    /// Space-joined token text, the knowledge-base file representation.
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn from_text(id: impl Into<String>, label: impl Into<String>, text: &str) -> Self {
        Report {
            id: id.into(),
            label: label.into(),
            tokens: text.split_whitespace().map(str::to_string).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_rejects_out_of_range_pixels() {
        let t = Tensor::new(vec![2, 2], vec![0.0, 0.5, 1.0, 1.5]).unwrap();
        assert!(Image::new("a", "normal", t).is_err());
    }

    #[test]
    fn report_text_round_trips() {
        let r = Report::new("r1", "normal", vec!["lungs".into(), "clear".into()]);
        let back = Report::from_text("r1", "normal", &r.text());
        assert_eq!(r, back);
    }
}
