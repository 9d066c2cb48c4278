//! Patch-token masking applied to training inputs.
//!
//! Background masking ranks patches by the mean of their channels and zeroes
//! the top `m%`; high-mean tokens of self-supervised ViT features mostly sit
//! on background. Random masking is the uniform baseline.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::FeatureMap;

static MASK_APPLICATIONS: AtomicUsize = AtomicUsize::new(0);

/// Number of [`apply_mask`] calls made by this process so far.
pub fn mask_applications() -> usize {
    MASK_APPLICATIONS.load(Ordering::SeqCst)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MaskStrategy {
    None,
    Random,
    #[default]
    Background,
}

impl FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "random" => Ok(Self::Random),
            "background" => Ok(Self::Background),
            other => Err(Error::Config(format!("unknown masking strategy `{other}`"))),
        }
    }
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Random => "random",
            Self::Background => "background",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskingConfig {
    pub strategy: MaskStrategy,
    pub m_percent: f64,
    pub seed: u64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            strategy: MaskStrategy::Background,
            m_percent: 70.0,
            seed: 0,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.m_percent) {
            return Err(Error::Config(format!(
                "mask percent {} outside [0, 100]",
                self.m_percent
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskReport {
    pub masked_indices: Vec<usize>,
    pub means: Vec<f64>,
}

impl fmt::Display for MaskReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "N {}", self.means.len())?;
        let list: Vec<String> = self.masked_indices.iter().map(usize::to_string).collect();
        writeln!(f, "masked {} [{}]", self.masked_indices.len(), list.join(" "))?;
        for (i, m) in self.means.iter().enumerate() {
            let flag = if self.masked_indices.binary_search(&i).is_ok() {
                "*"
            } else {
                ""
            };
            writeln!(f, "{i}\t{m:.6}{flag}")?;
        }
        Ok(())
    }
}

/// `round(m/100 · n)` with halves rounded up.
pub fn mask_count(n: usize, m_percent: f64) -> usize {
    let exact = m_percent * n as f64 / 100.0;
    ((exact + 0.5).floor() as usize).min(n)
}

pub fn patch_means(map: &FeatureMap) -> Vec<f64> {
    let d = map.d_feats() as f64;
    (0..map.num_patches())
        .map(|n| map.tokens().row(n).iter().sum::<f64>() / d)
        .collect()
}

/// Indices of the `round(m% · N)` largest means, ascending.
///
/// Patches are stably sorted by increasing mean and the tail is taken, so among
/// equal means the lower indices stay unmasked.
pub fn select_background_indices(means: &[f64], m_percent: f64) -> Vec<usize> {
    let count = mask_count(means.len(), m_percent);
    let mut order: Vec<usize> = (0..means.len()).collect();
    order.sort_by(|&a, &b| means[a].total_cmp(&means[b]));
    let mut tail = order.split_off(means.len() - count);
    tail.sort_unstable();
    tail
}

/// Uniform sample of `round(m% · n)` indices without replacement, ascending.
pub fn select_random_indices(n: usize, m_percent: f64, seed: u64) -> Vec<usize> {
    let count = mask_count(n, m_percent);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, n, count).into_vec();
    picked.sort_unstable();
    picked
}

/// Copy of `map` with the listed rows replaced by zero vectors.
pub fn apply_mask(map: &FeatureMap, indices: &[usize]) -> Result<FeatureMap> {
    MASK_APPLICATIONS.fetch_add(1, Ordering::SeqCst);
    let n = map.num_patches();
    let d = map.d_feats();
    let mut tokens = map.tokens().clone();
    for &i in indices {
        if i >= n {
            return Err(Error::Bounds { index: i, len: n });
        }
        tokens.data_mut()[i * d..(i + 1) * d].iter_mut().for_each(|v| *v = 0.0);
    }
    map.with_tokens(tokens)
}

/// Selects indices per `cfg` (`seed` overrides `cfg.seed` for the random strategy).
pub fn select_indices(map: &FeatureMap, cfg: &MaskingConfig, seed: u64) -> MaskReport {
    let means = patch_means(map);
    let masked_indices = match cfg.strategy {
        MaskStrategy::None => Vec::new(),
        MaskStrategy::Background => select_background_indices(&means, cfg.m_percent),
        MaskStrategy::Random => select_random_indices(means.len(), cfg.m_percent, seed),
    };
    MaskReport { masked_indices, means }
}

/// Selection followed by zeroing.
pub fn mask_features(map: &FeatureMap, cfg: &MaskingConfig, seed: u64) -> Result<(FeatureMap, MaskReport)> {
    let report = select_indices(map, cfg, seed);
    let masked = apply_mask(map, &report.masked_indices)?;
    Ok((masked, report))
}
