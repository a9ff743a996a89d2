//! Central-difference check of every loss path and variant composite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check_with, GradCheckOptions, Tensor, UpdateMask};
use crate::clustering::ClusterModel;
use crate::doe::{IMAGE_LEN, PARAM_LEN};
use crate::error::Result;
use crate::networks::{BdNet, Topology, BOUNDARY, DECODER, ENCODER};
use crate::trainers::{build_loss, Batch, TermWeights, TrainConfig, Variant};

pub const GRAD_EPSILON: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;
const LATENT: usize = 3;
/// Elements checked per parameter tensor per seed and path.
const SAMPLE_PER_PARAM: usize = 40;
/// Bias jitter. Zero biases put pre-activations exactly on the relu kink
/// whenever a whole layer is inactive, where finite differences are meaningless.
const BIAS_JITTER: f64 = 0.1;
/// Inputs are drawn from [INPUT_FLOOR, 1): a near-zero input makes its weight
/// gradients vanish into forward-pass roundoff.
const INPUT_FLOOR: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct PathResult {
    pub path: &'static str,
    pub max_rel_error: f64,
    /// Worst error per network: encoder, decoder, boundary.
    pub per_network: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckSummary {
    pub seeds: Vec<u64>,
    pub paths: Vec<PathResult>,
    pub elements_checked: usize,
}

impl GradCheckSummary {
    pub fn max_rel_error(&self) -> f64 {
        self.paths.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn per_network(&self) -> [f64; 3] {
        let mut out = [0.0f64; 3];
        for p in &self.paths {
            for (o, v) in out.iter_mut().zip(p.per_network) {
                *o = o.max(v);
            }
        }
        out
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < GRAD_TOLERANCE
    }
}

fn paths(cfg: &TrainConfig) -> Vec<(&'static str, TermWeights, UpdateMask)> {
    let single = |l1, l2, l3| TermWeights { l1, l2, l3 };
    let variant = |v: Variant| (TermWeights::for_variant(v, cfg), v.update_mask());
    let (bd, bd_mask) = variant(Variant::Bd);
    let (ae, ae_mask) = variant(Variant::AeBd);
    let (dc, dc_mask) = variant(Variant::DcBd);
    vec![
        ("L1", single(Some(1.0), None, None), UpdateMask::All),
        ("L2", single(None, Some(1.0), None), UpdateMask::All),
        ("L3", single(None, None, Some(1.0)), UpdateMask::All),
        ("BD", bd, bd_mask),
        ("AE_BD", ae, ae_mask),
        ("DC_BD", dc, dc_mask),
    ]
}

/// Checks each path on a small random network and batch for every seed.
/// With `corrupt`, one decoder gradient entry is perturbed before comparison.
pub fn run_grad_check(seeds: &[u64], corrupt: bool) -> Result<GradCheckSummary> {
    let cfg = TrainConfig::default();
    let mut results: Vec<PathResult> = paths(&cfg)
        .iter()
        .map(|(name, _, _)| PathResult {
            path: name,
            max_rel_error: 0.0,
            per_network: [0.0; 3],
        })
        .collect();
    let mut elements = 0;
    for &seed in seeds {
        let mut net = BdNet::init(Topology::tiny(LATENT), seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(7);
        let biases: Vec<_> = net
            .store
            .ids()
            .filter(|&id| net.store.name(id).ends_with(".bias"))
            .collect();
        for id in biases {
            for b in net.store.value_mut(id).data_mut() {
                *b = rng.gen_range(-BIAS_JITTER..BIAS_JITTER);
            }
        }
        let mut uniform = |n: usize, lo: f64| (0..n).map(|_| rng.gen_range(lo..1.0)).collect::<Vec<_>>();
        // One sample per check: across a batch, per-sample gradients can cancel
        // to ~1e-8, below what ε = 1e-5 differences resolve.
        let batch = Batch {
            params: Tensor::new(vec![1, PARAM_LEN], uniform(PARAM_LEN, INPUT_FLOOR))?,
            images: Tensor::new(vec![1, IMAGE_LEN], uniform(IMAGE_LEN, INPUT_FLOOR))?,
        };
        // Centers away from the latent, so η* never coincides with z.
        let cluster = ClusterModel {
            centers: (0..2).map(|_| uniform(LATENT, -1.0)).collect(),
            assignments: Vec::new(),
            objective: 0.0,
        };

        for ((_, weights, mask), result) in paths(&cfg).into_iter().zip(results.iter_mut()) {
            let decoder_w = net.store.id(&net.decoder.weight_name(0));
            let report = grad_check_with(
                &net.store,
                GradCheckOptions {
                    epsilon: GRAD_EPSILON,
                    max_per_param: Some(SAMPLE_PER_PARAM),
                    sample_seed: seed,
                },
                &mask,
                |g| build_loss(g, &net, &batch, weights, Some(&cluster)).map(|(v, _)| v),
                |grads| {
                    if corrupt {
                        if let Some(t) = decoder_w.and_then(|id| grads.get_mut(id)) {
                            t.data_mut()[0] = t.data()[0] * 1.01 + 1e-3;
                        }
                    }
                },
            )?;
            elements += report.elements_checked;
            result.max_rel_error = result.max_rel_error.max(report.max_rel_error);
            for (slot, prefix) in result.per_network.iter_mut().zip([ENCODER, DECODER, BOUNDARY]) {
                *slot = slot.max(report.max_for_prefix(prefix));
            }
        }
    }
    Ok(GradCheckSummary {
        seeds: seeds.to_vec(),
        paths: results,
        elements_checked: elements,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_check_passes_and_corruption_is_caught() {
        let ok = run_grad_check(&[0], false).unwrap();
        assert!(ok.passed(), "{ok:?}");
        let bad = run_grad_check(&[0], true).unwrap();
        assert!(!bad.passed());
        assert!(bad.per_network()[1] > GRAD_TOLERANCE);
    }
}
