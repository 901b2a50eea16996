use crate::error::{CoreError, Result};

/// Model size presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// 128×128 training inputs, 64 coarse and 32 fine channels.
    Desk,
    /// 256 coarse and 128 fine channels.
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            _ => Err(CoreError::Parameter(format!("unknown profile {s:?}"))),
        }
    }
}

/// Positional encoding variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PeMode {
    /// Coordinates rescaled by training/testing extent ratios.
    Normalized,
    /// Raw feature-map coordinates.
    Absolute,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatcherConfig {
    pub profile: Profile,
    pub coarse_dim: usize,
    pub fine_dim: usize,
    /// Coarse and fine attention layer counts.
    pub l1: usize,
    pub l2: usize,
    pub heads: usize,
    pub fpm: bool,
    pub pe: PeMode,
    pub train_w: usize,
    pub train_h: usize,
    pub tau_s: f64,
    pub tau_c: f64,
    pub w_f: usize,
}

impl MatcherConfig {
    pub fn desk() -> Self {
        Self {
            profile: Profile::Desk,
            coarse_dim: 64,
            fine_dim: 32,
            l1: 4,
            l2: 2,
            heads: 8,
            fpm: true,
            pe: PeMode::Normalized,
            train_w: 128,
            train_h: 128,
            tau_s: 0.1,
            tau_c: 0.2,
            w_f: 5,
        }
    }

    pub fn paper() -> Self {
        Self { profile: Profile::Paper, coarse_dim: 256, fine_dim: 128, train_w: 640, train_h: 640, ..Self::desk() }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Parameter(m));
        if self.coarse_dim % 4 != 0 || self.coarse_dim == 0 {
            return bad(format!("coarse width {} must be a positive multiple of 4", self.coarse_dim));
        }
        if self.coarse_dim % self.heads != 0 || self.fine_dim % self.heads != 0 {
            return bad(format!("{} heads must divide both widths", self.heads));
        }
        if self.l1 == 0 || self.l2 == 0 {
            return bad("attention layer counts must be >= 1".into());
        }
        if self.w_f % 2 == 0 || self.w_f < 3 {
            return bad(format!("fine window {} must be odd and >= 3", self.w_f));
        }
        if !(self.tau_s > 0.0) || !(0.0..=1.0).contains(&self.tau_c) {
            return bad("temperatures out of range".into());
        }
        Ok(())
    }
}
