use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, UpdateMask};
use crate::error::{Error, Result};
use crate::networks::{Topology, BOUNDARY, DECODER, ENCODER};

/// Training pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Boundary net + decoder, image loss on the parameter path only.
    Bd,
    /// Adds the autoencoder reconstruction term.
    AeBd,
    /// Adds the clustering penalty on encoder latents.
    DcBd,
    /// Autoencoder plus nearest-neighbour lookup in parameter space.
    AeKnn,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Bd, Variant::AeBd, Variant::DcBd, Variant::AeKnn];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Bd => "bd",
            Variant::AeBd => "ae_bd",
            Variant::DcBd => "dc_bd",
            Variant::AeKnn => "ae_knn",
        }
    }

    /// Networks whose parameters this variant updates.
    pub fn update_mask(self) -> UpdateMask {
        match self {
            Variant::Bd => UpdateMask::prefixes(&[BOUNDARY, DECODER]),
            Variant::AeBd | Variant::DcBd => UpdateMask::prefixes(&[ENCODER, DECODER, BOUNDARY]),
            Variant::AeKnn => UpdateMask::prefixes(&[ENCODER, DECODER]),
        }
    }

    pub fn uses_reconstruction(self) -> bool {
        matches!(self, Variant::AeBd | Variant::DcBd | Variant::AeKnn)
    }

    pub fn uses_boundary(self) -> bool {
        !matches!(self, Variant::AeKnn)
    }

    pub fn uses_clustering(self) -> bool {
        matches!(self, Variant::DcBd)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace(['+', '-'], "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant `{s}`; valid variants: bd, ae_bd, dc_bd, ae_knn"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Weight of the reconstruction term.
    pub lambda1: f64,
    /// Weight of the clustering term.
    pub lambda2: f64,
    /// Number of k-means clusters.
    pub clusters: usize,
    pub total_iterations: usize,
    /// Iterations at which train/test error is evaluated, ascending.
    pub checkpoints: Vec<usize>,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
    /// Recompute k-means every this many iterations.
    pub kmeans_period: usize,
    /// Lloyd iterations per recompute.
    pub kmeans_max_iters: usize,
    pub topology: Topology,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::DcBd,
            lambda1: 0.1,
            lambda2: 0.01,
            clusters: 3,
            total_iterations: 5000,
            checkpoints: vec![1000, 2000, 3000, 4000, 5000],
            batch_size: 32,
            optimizer: AdamConfig::default(),
            seed: 0,
            kmeans_period: 1,
            kmeans_max_iters: 5,
            topology: Topology::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and ≥ 0, got {v}"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        if self.clusters == 0 {
            return bad("clusters must be ≥ 1".into());
        }
        if self.kmeans_period == 0 {
            return bad("kmeans_period must be ≥ 1".into());
        }
        if self.topology.latent_dim == 0 {
            return bad("latent_dim must be ≥ 1".into());
        }
        let opt = &self.optimizer;
        if !(opt.learning_rate > 0.0 && opt.epsilon > 0.0)
            || !(0.0..1.0).contains(&opt.beta1)
            || !(0.0..1.0).contains(&opt.beta2)
        {
            return bad(format!("invalid optimizer settings {opt:?}"));
        }
        if self.checkpoints.windows(2).any(|w| w[0] >= w[1]) {
            return bad("checkpoints must be strictly ascending".into());
        }
        if let Some(&c) = self
            .checkpoints
            .iter()
            .find(|&&c| c == 0 || c > self.total_iterations)
        {
            return bad(format!(
                "checkpoint {c} lies outside [1, {}]",
                self.total_iterations
            ));
        }
        Ok(())
    }
}
