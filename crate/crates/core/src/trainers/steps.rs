//! Composite loss and single optimisation steps for each variant.
//!
//! Every variant minimises one batch-mean objective
//! `(λ1·L1 + λ2·L2 + L3) / n` with only its active terms:
//!
//! * `L1 = ½‖decode(encode(V)) − V‖²` reaches encoder and decoder,
//! * `L2 = ½‖encode(V) − η*‖²` reaches the encoder only (`η*` is constant),
//! * `L3 = ½‖decode(boundary(p)) − T‖²` reaches boundary and decoder.
//!
//! The per-network routing therefore falls out of the graph; the variant's
//! update mask additionally freezes networks it never trains.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, OptimizerState, Tensor};
use crate::clustering::{nearest_center, ClusterModel};
use crate::error::{Error, Result};
use crate::networks::BdNet;
use crate::trainers::{TrainConfig, Variant};

/// Normalized parameter vectors and their target images, row-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub params: Tensor,
    pub images: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.params.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Batch-mean values of each loss term (unweighted) and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub total: f64,
}

/// Weights applied to each term; zero disables it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermWeights {
    pub l1: Option<f64>,
    pub l2: Option<f64>,
    pub l3: Option<f64>,
}

impl TermWeights {
    pub fn for_variant(variant: Variant, cfg: &TrainConfig) -> Self {
        match variant {
            Variant::Bd => Self {
                l1: None,
                l2: None,
                l3: Some(1.0),
            },
            Variant::AeBd => Self {
                l1: Some(cfg.lambda1),
                l2: None,
                l3: Some(1.0),
            },
            Variant::DcBd => Self {
                l1: Some(cfg.lambda1),
                l2: Some(cfg.lambda2),
                l3: Some(1.0),
            },
            Variant::AeKnn => Self {
                l1: Some(1.0),
                l2: None,
                l3: None,
            },
        }
    }
}

/// Records the weighted batch objective on `g` and returns its node plus term values.
pub fn build_loss(
    g: &mut Graph<'_>,
    net: &BdNet,
    batch: &Batch,
    weights: TermWeights,
    cluster: Option<&ClusterModel>,
) -> Result<(crate::autodiff::Var, LossTerms)> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::Config("empty batch".into()));
    }
    let inv_n = 1.0 / n as f64;
    let mut terms = LossTerms::default();
    let mut total: Option<crate::autodiff::Var> = None;
    let mut push = |g: &mut Graph<'_>, term: crate::autodiff::Var, w: f64| -> Result<()> {
        let scaled = g.scale(term, w * inv_n);
        total = Some(match total {
            Some(t) => g.add(t, scaled)?,
            None => scaled,
        });
        Ok(())
    };

    if weights.l1.is_some() || weights.l2.is_some() {
        let v = g.input(batch.images.clone());
        let z = net.encoder.forward(g, v)?;
        if let Some(w) = weights.l1 {
            let recon = net.decoder.forward(g, z)?;
            let target = g.constant(batch.images.clone());
            let l1 = g.sq_err(recon, target)?;
            terms.l1 = g.scalar(l1) * inv_n;
            push(g, l1, w)?;
        }
        if let Some(w) = weights.l2 {
            let model = cluster.ok_or_else(|| {
                Error::Contract("the clustering term needs a fitted cluster model".into())
            })?;
            let latents = g.value(z);
            let rows = (0..n)
                .map(|i| nearest_center(latents.row(i), model).map(|(c, _)| c.to_vec()))
                .collect::<Result<Vec<_>>>()?;
            let centers = g.constant(Tensor::from_rows(&rows)?);
            let l2 = g.sq_err(z, centers)?;
            terms.l2 = g.scalar(l2) * inv_n;
            push(g, l2, w)?;
        }
    }
    if let Some(w) = weights.l3 {
        let p = g.input(batch.params.clone());
        let zb = net.boundary.forward(g, p)?;
        let y = net.decoder.forward(g, zb)?;
        let target = g.constant(batch.images.clone());
        let l3 = g.sq_err(y, target)?;
        terms.l3 = g.scalar(l3) * inv_n;
        push(g, l3, w)?;
    }
    let total = total.ok_or_else(|| Error::Config("no active loss terms".into()))?;
    terms.total = g.scalar(total);
    Ok((total, terms))
}

/// Objective value and term breakdown for `variant` on `batch`.
pub fn composite_loss(
    net: &BdNet,
    batch: &Batch,
    cfg: &TrainConfig,
    cluster: Option<&ClusterModel>,
) -> Result<LossTerms> {
    if cfg.variant == Variant::DcBd && cluster.is_none() {
        return Err(Error::Contract("dc_bd needs a cluster model".into()));
    }
    let mut g = Graph::new(&net.store);
    let (_, terms) = build_loss(&mut g, net, batch, TermWeights::for_variant(cfg.variant, cfg), cluster)?;
    Ok(terms)
}

/// Gradients of the objective after applying the variant's update mask.
pub fn variant_gradients(
    net: &BdNet,
    batch: &Batch,
    weights: TermWeights,
    variant: Variant,
    cluster: Option<&ClusterModel>,
) -> Result<(Gradients, LossTerms)> {
    let mut g = Graph::new(&net.store);
    let (loss, terms) = build_loss(&mut g, net, batch, weights, cluster)?;
    let mut grads = g.backward(loss)?;
    grads.retain(&net.store, &variant.update_mask());
    Ok((grads, terms))
}

/// Mutable training state for one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub net: BdNet,
    pub optimizer: OptimizerState,
    pub cluster: Option<ClusterModel>,
    /// Iteration at which `cluster` was last recomputed.
    pub cluster_fitted_at: Option<usize>,
    pub kmeans_calls: usize,
    /// Completed optimisation steps.
    pub iteration: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let net = BdNet::init(config.topology.clone(), config.seed)?;
        Ok(Self::with_net(config, net))
    }

    pub fn with_net(config: TrainConfig, net: BdNet) -> Self {
        let optimizer = OptimizerState::new(&net.store, config.optimizer);
        Self {
            config,
            net,
            optimizer,
            cluster: None,
            cluster_fitted_at: None,
            kmeans_calls: 0,
            iteration: 0,
        }
    }

    fn apply(&mut self, grads: &Gradients, variant: Variant) -> Result<()> {
        self.net.store.accumulate(grads)?;
        self.optimizer.step(&mut self.net.store, &variant.update_mask())?;
        self.iteration += 1;
        Ok(())
    }

    fn run_step(&mut self, batch: &Batch, variant: Variant, cluster: Option<&ClusterModel>) -> Result<LossTerms> {
        let weights = TermWeights::for_variant(variant, &self.config);
        let (grads, terms) = variant_gradients(&self.net, batch, weights, variant, cluster)?;
        self.apply(&grads, variant)?;
        Ok(terms)
    }

    /// `y = decode(boundary(p))`, loss L3, boundary and decoder updated.
    pub fn step_bd(&mut self, batch: &Batch) -> Result<LossTerms> {
        self.run_step(batch, Variant::Bd, None)
    }

    /// Adds `λ1·L1` through encoder and decoder.
    pub fn step_ae_bd(&mut self, batch: &Batch) -> Result<LossTerms> {
        self.run_step(batch, Variant::AeBd, None)
    }

    /// Adds `λ2·L2` against the current cluster model, which must have been
    /// recomputed within the last `kmeans_period` iterations.
    pub fn step_dc_bd(&mut self, batch: &Batch) -> Result<LossTerms> {
        let fresh = match self.cluster_fitted_at {
            Some(at) => self.iteration >= at && self.iteration - at < self.config.kmeans_period,
            None => false,
        };
        if !fresh || self.cluster.is_none() {
            return Err(Error::Contract(format!(
                "stale cluster model at iteration {} (last fit {:?}, period {})",
                self.iteration, self.cluster_fitted_at, self.config.kmeans_period
            )));
        }
        let cluster = self.cluster.take();
        let result = self.run_step(batch, Variant::DcBd, cluster.as_ref());
        self.cluster = cluster;
        result
    }

    /// Reconstruction-only step used to fit the baseline autoencoder.
    pub fn step_ae(&mut self, batch: &Batch) -> Result<LossTerms> {
        self.run_step(batch, Variant::AeKnn, None)
    }

    pub fn step(&mut self, batch: &Batch) -> Result<LossTerms> {
        match self.config.variant {
            Variant::Bd => self.step_bd(batch),
            Variant::AeBd => self.step_ae_bd(batch),
            Variant::DcBd => self.step_dc_bd(batch),
            Variant::AeKnn => self.step_ae(batch),
        }
    }

    /// Whether the next step needs a k-means recompute first.
    pub fn recompute_due(&self) -> bool {
        self.config.variant.uses_clustering() && self.iteration % self.config.kmeans_period == 0
    }

    pub fn set_cluster(&mut self, model: ClusterModel) {
        self.cluster = Some(model);
        self.cluster_fitted_at = Some(self.iteration);
        self.kmeans_calls += 1;
    }
}
