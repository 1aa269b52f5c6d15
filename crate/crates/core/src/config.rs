//! Pipeline configuration file (TOML). Every key is optional; missing keys
//! take their defaults. `config/default.toml` lists them all.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::EncoderConfig;
use crate::deform::WarpConfig;
use crate::error::{EgsError, Result};
use crate::refine::RefineConfig;

/// Which tracking stages run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub warp: bool,
    pub refine: bool,
    /// Optimize SH bands >= 1 of extension points after refinement.
    pub high_order_sh: bool,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            warp: true,
            refine: true,
            high_order_sh: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Seeds every stochastic component.
    pub seed: u64,
    pub stages: StageConfig,
    pub warp: WarpConfig,
    pub refine: RefineConfig,
    pub codec: EncoderConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Config = toml::from_str(text).map_err(|e| EgsError::InvalidParameter(format!("config: {e}")))?;
        cfg.set_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| EgsError::InvalidInput(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| EgsError::InvalidParameter(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.warp.seed = seed;
        self.refine.seed = seed;
        self.codec.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.warp.validate()?;
        self.refine.validate()?;
        self.codec.quant.validate()?;
        if self.codec.k_g == 0 || self.codec.k_g > 255 {
            return Err(EgsError::InvalidParameter("codec.k_g must be in 1..=255".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(Config::from_toml("").unwrap(), Config::default());
    }

    #[test]
    fn defaults_carry_the_published_constants() {
        let c = Config::default();
        assert_eq!(c.warp.num_nodes, 5000);
        assert_eq!((c.warp.omega_flow, c.warp.omega_arap, c.warp.omega_rot), (0.25, 1000.0, 1000.0));
        assert_eq!((c.warp.cycles, c.warp.iters_per_cycle), (10, 600));
        assert_eq!((c.warp.flow_decay, c.warp.reg_decay), (0.8, 0.58));
        assert_eq!((c.refine.eps_alpha, c.refine.eps_beta, c.refine.eps_gamma), (0.075, 0.225, 0.01));
        assert_eq!((c.codec.quant.mean.bits, c.codec.quant.mean.step), (16, 0.0002));
        assert_eq!((c.codec.quant.sh_dc.bits, c.codec.quant.sh_dc.step), (10, 0.001));
        assert_eq!(c.codec.quant.sh_rest_bits, 6);
    }

    #[test]
    fn overrides_and_seed_threading() {
        let c = Config::from_toml("seed = 9\n[warp]\nnum_nodes = 64\n[refine]\nmax_iterations = 3\n[codec.quant.mean]\nbits = 12\nstep = 0.001\n").unwrap();
        assert_eq!(c.warp.num_nodes, 64);
        assert_eq!(c.refine.max_iterations, 3);
        assert_eq!(c.codec.quant.mean.bits, 12);
        assert_eq!((c.warp.seed, c.refine.seed, c.codec.seed), (9, 9, 9));
    }

    #[test]
    fn bad_documents_are_rejected() {
        assert!(Config::from_toml("[warp]\nnum_nodez = 3\n").is_err());
        assert!(Config::from_toml("[refine]\neps_alpha = 0.5\neps_beta = 0.1\n").is_err());
        assert!(Config::from_toml("[warp]\nseed = 3\n").is_err());
        assert!(Config::from_toml("[codec.quant.mean]\nbits = 40\nstep = 0.1\n").is_err());
    }

    #[test]
    fn shipped_default_file_matches_defaults() {
        let text = include_str!("../../../config/default.toml");
        assert_eq!(Config::from_toml(text).unwrap(), Config::default());
    }

    #[test]
    fn serialization_round_trips() {
        let mut c = Config::default();
        c.set_seed(4);
        c.stages.warp = false;
        assert_eq!(Config::from_toml(&c.to_toml()).unwrap(), c);
    }
}
