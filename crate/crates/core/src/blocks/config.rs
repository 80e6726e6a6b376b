use crate::error::{Error, Result};

/// Architectural hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    /// Output channels of stages 1-4.
    pub channels: [usize; 4],
    /// Fraction of channels that receive dynamic temporal aggregation.
    pub offset_ratio: f64,
    pub enable_rda: bool,
    pub enable_sme: bool,
    pub enable_cme: bool,
    /// Horizontal parts; must divide `height / 2`.
    pub parts: usize,
    pub num_classes: usize,
    /// Training clip length.
    pub frames: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 44,
            channels: [64, 128, 256, 512],
            offset_ratio: 0.25,
            enable_rda: true,
            enable_sme: true,
            enable_cme: true,
            parts: 32,
            num_classes: 1,
            frames: 30,
        }
    }
}

impl ModelConfig {
    /// Small CPU-friendly preset: 32x22 input, channels [8, 16, 32, 64].
    pub fn desk(num_classes: usize) -> Self {
        Self {
            height: 32,
            width: 22,
            channels: [8, 16, 32, 64],
            parts: 16,
            num_classes,
            frames: 12,
            ..Self::default()
        }
    }

    pub fn enable_rde(&self) -> bool {
        self.enable_sme || self.enable_cme
    }

    /// Channels routed through the offset branch for a stage whose input has
    /// `c` channels: `floor(c * r)`, tolerant of representation error in `r`.
    pub fn selected_channels(&self, c: usize) -> usize {
        (c as f64 * self.offset_ratio + 1e-9).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(2) || !self.width.is_multiple_of(2) {
            return err(format!(
                "input {}x{} must be nonzero and even in both dims",
                self.height, self.width
            ));
        }
        if self.frames == 0 || !self.frames.is_multiple_of(3) {
            return err(format!("sequence length {} must be a positive multiple of 3", self.frames));
        }
        if self.channels.contains(&0) {
            return err("stage channels must be positive".into());
        }
        if !(self.offset_ratio > 0.0 && self.offset_ratio < 1.0) {
            return err(format!("offset ratio {} outside (0, 1)", self.offset_ratio));
        }
        if self.enable_rda {
            for &c in &self.channels[..3] {
                if self.selected_channels(c) == 0 {
                    return err(format!(
                        "offset ratio {} selects no channels of a {c}-channel stage",
                        self.offset_ratio
                    ));
                }
            }
        }
        if self.parts == 0 || !(self.height / 2).is_multiple_of(self.parts) {
            return err(format!("parts {} must divide {}", self.parts, self.height / 2));
        }
        if self.num_classes == 0 {
            return err("num_classes must be positive".into());
        }
        Ok(())
    }
}
