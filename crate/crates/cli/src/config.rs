//! Run configuration: built-in defaults, overridden by a flat `key = value`
//! file, overridden by command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mmseq::toy::ToyConfig;
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub manifest: Option<PathBuf>,
    pub capacity: Option<usize>,
    pub kernel: Option<usize>,
    pub seed: Option<u64>,
    pub p_conv_mask: Option<f64>,
    pub p_conv_mask_grounding: Option<f64>,
    pub threads: Option<usize>,
    pub cap_mp: Option<f64>,
    pub toy_config: Option<PathBuf>,
}

/// Values given on the command line; `None` means not given.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Line-delimited JSON manifest of examples.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Packed sequence capacity in tokens.
    #[arg(long, global = true)]
    pub capacity: Option<usize>,
    /// Causal convolution width the padding plan targets.
    #[arg(long, global = true)]
    pub kernel: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Conversation-masking probability for ordinary examples.
    #[arg(long, global = true)]
    pub p_conv_mask: Option<f64>,
    /// Conversation-masking probability for grounding examples.
    #[arg(long, global = true)]
    pub p_conv_mask_grounding: Option<f64>,
    /// Worker threads; 1 runs everything sequentially.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Image area cap in megapixels used when counting vision tokens.
    #[arg(long, global = true)]
    pub cap_mp: Option<f64>,
    /// Toy model configuration file (flat `key = value`).
    #[arg(long, global = true)]
    pub toy_config: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub capacity: usize,
    pub kernel: usize,
    pub seed: u64,
    pub p_conv_mask: f64,
    pub p_conv_mask_grounding: f64,
    pub threads: Option<usize>,
    pub cap_mp: f64,
    pub toy: ToyConfig,
    /// Where `toy` came from; `None` means built-in defaults.
    pub toy_config: Option<PathBuf>,
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

impl RunConfig {
    pub fn resolve(flags: &Overrides) -> Result<Self> {
        let file: FileConfig = match &flags.config {
            Some(p) => read_toml(p)?,
            None => FileConfig::default(),
        };
        let toy_path = flags.toy_config.clone().or(file.toy_config);
        let toy: ToyConfig = match &toy_path {
            Some(p) => read_toml(p)?,
            None => ToyConfig::default(),
        };
        toy.validate()?;
        let cfg = RunConfig {
            manifest: flags.manifest.clone().or(file.manifest),
            capacity: flags.capacity.or(file.capacity).unwrap_or(mmseq::packer::DEFAULT_CAPACITY),
            kernel: flags.kernel.or(file.kernel).unwrap_or(toy.conv_kernel),
            seed: flags.seed.or(file.seed).unwrap_or(0),
            p_conv_mask: flags.p_conv_mask.or(file.p_conv_mask).unwrap_or(0.5),
            p_conv_mask_grounding: flags.p_conv_mask_grounding.or(file.p_conv_mask_grounding).unwrap_or(0.7),
            threads: flags.threads.or(file.threads),
            cap_mp: flags.cap_mp.or(file.cap_mp).unwrap_or(6.3),
            toy,
            toy_config: toy_path,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        for (name, p) in [("p_conv_mask", self.p_conv_mask), ("p_conv_mask_grounding", self.p_conv_mask_grounding)] {
            if !(0.0..=1.0).contains(&p) {
                bail!("{name} must lie in [0, 1], got {p}");
            }
        }
        if self.capacity == 0 {
            bail!("capacity must be at least 1");
        }
        if self.kernel == 0 {
            bail!("kernel must be at least 1");
        }
        if self.threads == Some(0) {
            bail!("threads must be at least 1");
        }
        if !(self.cap_mp > 0.0) {
            bail!("cap_mp must be positive");
        }
        Ok(())
    }

    pub fn probs(&self) -> mmseq::mask::MaskingProbs {
        mmseq::mask::MaskingProbs {
            default: self.p_conv_mask,
            grounding: self.p_conv_mask_grounding,
        }
    }

    pub fn exec(&self) -> mmseq::Exec {
        match self.threads {
            Some(1) => mmseq::Exec::Sequential,
            _ => mmseq::Exec::Parallel,
        }
    }
}
