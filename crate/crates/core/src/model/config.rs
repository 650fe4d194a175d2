//! Model hyperparameters and the text format that mirrors them.
//!
//! A config is small enough to pin in a run directory as `key = value`
//! lines; parsing starts from defaults and rejects unknown keys so a typo
//! cannot silently train the wrong architecture.

use std::fmt;

use crate::{Error, Result};

/// What the stem's coordinate gate sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoordMode {
    /// Crop-frame coordinates: (i/h, j/w) within the crop.
    Relative,
    /// Capture-frame coordinates: ((i+m)/H, (j+n)/W) for crop origin (m,n).
    Absolute,
    /// No coordinate input; the gate branch disappears entirely.
    None,
}

impl CoordMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CoordMode::Relative => "relative",
            CoordMode::Absolute => "absolute",
            CoordMode::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<CoordMode> {
        match s {
            "relative" => Ok(CoordMode::Relative),
            "absolute" => Ok(CoordMode::Absolute),
            "none" => Ok(CoordMode::None),
            other => Err(Error::Config(format!(
                "coord_mode must be absolute, relative or none, got {other:?}"
            ))),
        }
    }
}

impl fmt::Display for CoordMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Architecture description. Every field participates in the canonical text
/// form, and the parameter set is a pure function of this struct.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Feature width C of the encoder/decoder trunk.
    pub base_channels: usize,
    /// Latent width C_y written to the bitstream.
    pub latent_channels: usize,
    /// Attention/affine block pairs per stage.
    pub cimc_blocks: usize,
    /// Attention window edge in feature pixels.
    pub window: usize,
    /// Attention heads over the split half of the trunk.
    pub heads: usize,
    /// Stride-2 stages between the stem and the latent head.
    pub stages: usize,
    /// Coordinate-gated stem on/off.
    pub use_cadr: bool,
    /// Coordinate frame fed to the stem gate.
    pub coord_mode: CoordMode,
    /// Channel/window attention blocks on/off.
    pub use_csa: bool,
    /// Global color-prior modulation on/off.
    pub use_gft: bool,
    /// Local color-prior modulation on/off.
    pub use_lft: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 32,
            latent_channels: 48,
            cimc_blocks: 2,
            window: 8,
            heads: 2,
            stages: 2,
            use_cadr: true,
            coord_mode: CoordMode::Absolute,
            use_csa: true,
            use_gft: true,
            use_lft: true,
        }
    }
}

impl ModelConfig {
    /// Structural sanity independent of any particular input size.
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.base_channels % 4 != 0 {
            return Err(Error::Config(format!(
                "base_channels must be a positive multiple of 4 (channel split and final upsample), got {}",
                self.base_channels
            )));
        }
        if self.latent_channels == 0 {
            return Err(Error::Config("latent_channels must be positive".into()));
        }
        if self.cimc_blocks == 0 {
            return Err(Error::Config("cimc_blocks must be at least 1".into()));
        }
        if self.stages == 0 || self.stages > 6 {
            return Err(Error::Config(format!("stages must be in 1..=6, got {}", self.stages)));
        }
        if self.window == 0 {
            return Err(Error::Config("window must be positive".into()));
        }
        let half = self.base_channels / 2;
        if self.heads == 0 || half % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads must divide the attention width {half}, got {} heads",
                self.heads
            )));
        }
        Ok(())
    }

    /// Latent spatial dims for a RAW crop of `crop_h` x `crop_w`, checking
    /// that every stage the crop passes through has workable dims.
    pub fn latent_dims(&self, crop_h: usize, crop_w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        if crop_h == 0 || crop_w == 0 || crop_h % 2 != 0 || crop_w % 2 != 0 {
            return Err(Error::Config(format!("crop dims must be positive and even, got {crop_h}x{crop_w}")));
        }
        let (hs, ws) = (crop_h / 2, crop_w / 2);
        let div = 1usize << self.stages;
        if hs % div != 0 || ws % div != 0 {
            return Err(Error::Config(format!(
                "stacked crop {hs}x{ws} is not divisible by 2^{} for {} stride-2 stages",
                self.stages, self.stages
            )));
        }
        if self.use_csa {
            // Attention runs at hs>>s for s in 1..=stages on the way down and
            // at the mirrored resolutions (including hs itself) on the way up.
            for s in 0..=self.stages {
                let (fh, fw) = (hs >> s, ws >> s);
                if fh % self.window != 0 || fw % self.window != 0 {
                    return Err(Error::Config(format!(
                        "window {} does not divide the {fh}x{fw} feature map of a {crop_h}x{crop_w} crop",
                        self.window
                    )));
                }
            }
        }
        Ok((hs >> self.stages, ws >> self.stages))
    }

    /// Canonical `key = value` text. Field order is fixed so identical
    /// configs serialize to identical bytes.
    pub fn to_text(&self) -> String {
        format!(
            "base_channels = {}\nlatent_channels = {}\ncimc_blocks = {}\nwindow = {}\nheads = {}\nstages = {}\nuse_cadr = {}\ncoord_mode = {}\nuse_csa = {}\nuse_gft = {}\nuse_lft = {}\n",
            self.base_channels,
            self.latent_channels,
            self.cimc_blocks,
            self.window,
            self.heads,
            self.stages,
            self.use_cadr,
            self.coord_mode,
            self.use_csa,
            self.use_gft,
            self.use_lft,
        )
    }

    /// Parse `key = value` lines over the defaults. Blank lines and `#`
    /// comments are allowed; unknown or repeated keys are not.
    pub fn from_text(text: &str) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::default();
        let mut seen = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1)));
            };
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", lineno + 1)));
            }
            seen.push(key.to_string());
            match key {
                "base_channels" => cfg.base_channels = parse_usize(key, value)?,
                "latent_channels" => cfg.latent_channels = parse_usize(key, value)?,
                "cimc_blocks" => cfg.cimc_blocks = parse_usize(key, value)?,
                "window" => cfg.window = parse_usize(key, value)?,
                "heads" => cfg.heads = parse_usize(key, value)?,
                "stages" => cfg.stages = parse_usize(key, value)?,
                "use_cadr" => cfg.use_cadr = parse_bool(key, value)?,
                "coord_mode" => cfg.coord_mode = CoordMode::parse(value)?,
                "use_csa" => cfg.use_csa = parse_bool(key, value)?,
                "use_gft" => cfg.use_gft = parse_bool(key, value)?,
                "use_lft" => cfg.use_lft = parse_bool(key, value)?,
                other => return Err(Error::Config(format!("unknown key {other:?}"))),
            }
        }
        Ok(cfg)
    }

    /// True when the stem actually consumes a coordinate map.
    pub fn coord_gate_active(&self) -> bool {
        self.use_cadr && self.coord_mode != CoordMode::None
    }
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = ModelConfig::default();
        let back = ModelConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn non_default_round_trip_and_comments() {
        let cfg = ModelConfig {
            base_channels: 8,
            latent_channels: 6,
            cimc_blocks: 1,
            window: 2,
            heads: 1,
            stages: 1,
            use_cadr: false,
            coord_mode: CoordMode::None,
            use_csa: false,
            use_gft: false,
            use_lft: true,
        };
        let mut text = String::from("# comment\n\n");
        text.push_str(&cfg.to_text());
        assert_eq!(ModelConfig::from_text(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = ModelConfig::from_text("channels = 3\n").unwrap_err().to_string();
        assert!(err.contains("unknown key"), "{err}");
    }

    #[test]
    fn duplicate_key_is_an_error() {
        let err = ModelConfig::from_text("window = 8\nwindow = 4\n").unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");
    }

    #[test]
    fn bad_values_name_the_key() {
        let err = ModelConfig::from_text("use_csa = yes\n").unwrap_err().to_string();
        assert!(err.contains("use_csa"), "{err}");
        let err = ModelConfig::from_text("heads = -1\n").unwrap_err().to_string();
        assert!(err.contains("heads"), "{err}");
        let err = ModelConfig::from_text("coord_mode = polar\n").unwrap_err().to_string();
        assert!(err.contains("polar"), "{err}");
    }

    #[test]
    fn default_config_is_valid_and_sizes_a_64_crop() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.latent_dims(64, 64).unwrap(), (8, 8));
    }

    #[test]
    fn window_divisibility_is_enforced() {
        let cfg = ModelConfig::default();
        // 48x48 crop: stacked 24, halved to 12 and 6; window 8 fits none.
        let err = cfg.latent_dims(48, 48).unwrap_err().to_string();
        assert!(err.contains("window"), "{err}");
        // Without attention the same crop passes on stride grounds alone.
        let no_csa = ModelConfig { use_csa: false, ..cfg };
        assert_eq!(no_csa.latent_dims(48, 48).unwrap(), (6, 6));
    }

    #[test]
    fn structural_checks_reject_bad_widths() {
        let cfg = ModelConfig { base_channels: 6, ..ModelConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig { heads: 3, ..ModelConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig { cimc_blocks: 0, ..ModelConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn odd_crops_are_rejected() {
        let cfg = ModelConfig::default();
        assert!(cfg.latent_dims(63, 64).is_err());
        assert!(cfg.latent_dims(0, 64).is_err());
    }
}
