use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::DenoiserError;

/// Where a fusion block sits: after the bottleneck block, or after the decoder
/// block of resolution level `l` (0 = full latent resolution).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum FusionSite {
    Mid,
    Dec(usize),
}

impl fmt::Display for FusionSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FusionSite::Mid => write!(f, "mid"),
            FusionSite::Dec(l) => write!(f, "dec{l}"),
        }
    }
}

impl FromStr for FusionSite {
    type Err = DenoiserError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "mid" {
            return Ok(FusionSite::Mid);
        }
        s.strip_prefix("dec")
            .and_then(|l| l.parse().ok())
            .map(FusionSite::Dec)
            .ok_or_else(|| DenoiserError::InvalidConfig(format!("unknown fusion site {s:?}")))
    }
}

impl TryFrom<String> for FusionSite {
    type Error = DenoiserError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<FusionSite> for String {
    fn from(s: FusionSite) -> Self {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub latent_channels: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub groups: usize,
    /// Side of the square latent patches that become anchor tokens.
    pub anchor_patch: usize,
    /// Number of sinusoid frequencies in the sigma embedding.
    pub sigma_freqs: usize,
    pub emb_dim: usize,
    pub fusion_sites: Vec<FusionSite>,
    pub fusion_dropout: f32,
    pub sigma_data: f64,
    /// Subtracted from latents before they enter the network, added back to the output.
    pub data_offset: f32,
    /// Centre the noisy input and the skip path on the condition latent
    /// instead of `data_offset`, so the network predicts the change from the
    /// previous frame.
    pub skip_on_condition: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            latent_channels: 1,
            latent_height: 32,
            latent_width: 32,
            base_channels: 32,
            channel_mults: vec![1, 2, 2],
            groups: 8,
            anchor_patch: 8,
            sigma_freqs: 16,
            emb_dim: 64,
            fusion_sites: vec![FusionSite::Mid, FusionSite::Dec(2), FusionSite::Dec(1)],
            fusion_dropout: 0.0,
            sigma_data: 0.02,
            data_offset: 0.5,
            skip_on_condition: true,
        }
    }
}

impl UNetConfig {
    /// Small configuration for finite-difference checks and fast tests.
    pub fn tiny() -> Self {
        Self {
            latent_height: 8,
            latent_width: 8,
            base_channels: 4,
            channel_mults: vec![1, 2, 2],
            groups: 2,
            anchor_patch: 4,
            sigma_freqs: 4,
            emb_dim: 8,
            fusion_sites: vec![FusionSite::Mid, FusionSite::Dec(2), FusionSite::Dec(1), FusionSite::Dec(0)],
            ..Self::default()
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level]
    }

    pub fn input_channels(&self) -> usize {
        2 * self.latent_channels + 3
    }

    pub fn anchor_dim(&self) -> usize {
        self.latent_channels * self.anchor_patch * self.anchor_patch
    }

    pub fn anchor_tokens(&self) -> usize {
        (self.latent_height / self.anchor_patch) * (self.latent_width / self.anchor_patch)
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.latent_channels, self.latent_height, self.latent_width]
    }

    /// Channel count (= token dimension) of a fusion site.
    pub fn site_dim(&self, site: FusionSite) -> usize {
        match site {
            FusionSite::Mid => self.channels(self.levels() - 1),
            FusionSite::Dec(l) => self.channels(l),
        }
    }

    /// `(height, width)` of a fusion site's feature map.
    pub fn site_resolution(&self, site: FusionSite) -> (usize, usize) {
        let l = match site {
            FusionSite::Mid => self.levels() - 1,
            FusionSite::Dec(l) => l,
        };
        (self.latent_height >> l, self.latent_width >> l)
    }

    pub fn validate(&self) -> Result<(), DenoiserError> {
        let bad = |m: String| Err(DenoiserError::InvalidConfig(m));
        if self.latent_channels == 0 || self.base_channels == 0 || self.channel_mults.is_empty() {
            return bad("channel counts must be positive".into());
        }
        if self.channel_mults.contains(&0) {
            return bad("channel multipliers must be positive".into());
        }
        let div = 1 << (self.levels() - 1);
        if self.latent_height % div != 0 || self.latent_width % div != 0 || self.latent_height == 0 {
            return bad(format!(
                "latent {}x{} not divisible by {div}",
                self.latent_height, self.latent_width
            ));
        }
        if self.anchor_patch == 0
            || self.latent_height % self.anchor_patch != 0
            || self.latent_width % self.anchor_patch != 0
        {
            return bad(format!("anchor patch {} does not tile the latent", self.anchor_patch));
        }
        if self.groups == 0 || (0..self.levels()).any(|l| self.channels(l) % self.groups != 0) {
            return bad(format!("channels not divisible into {} groups", self.groups));
        }
        if self.sigma_freqs == 0 || self.emb_dim == 0 {
            return bad("embedding sizes must be positive".into());
        }
        for (i, s) in self.fusion_sites.iter().enumerate() {
            if let FusionSite::Dec(l) = s {
                if *l >= self.levels() {
                    return bad(format!("fusion site {s} beyond {} levels", self.levels()));
                }
            }
            if self.fusion_sites[..i].contains(s) {
                return bad(format!("duplicate fusion site {s}"));
            }
        }
        if !(0.0..1.0).contains(&self.fusion_dropout) {
            return bad(format!("fusion dropout {}", self.fusion_dropout));
        }
        if !(self.sigma_data > 0.0) {
            return bad(format!("sigma_data {}", self.sigma_data));
        }
        Ok(())
    }
}
