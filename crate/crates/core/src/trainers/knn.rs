//! Nearest-neighbour baseline: an autoencoder trained on images alone, a
//! frozen table of training latents, and a parameter-space lookup.

use crate::autodiff::Tensor;
use crate::clustering::squared_distance;
use crate::dataset::Dataset;
use crate::doe::PARAM_LEN;
use crate::error::{Error, Result};
use crate::networks::BdNet;
use crate::trainers::{run_training, TrainConfig, TrainReport, Variant};

/// Training parameter vectors aligned with their frozen latent codes.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStore {
    /// Dataset case index of each row, ascending.
    pub case_indices: Vec<usize>,
    pub vec_train: Vec<[f64; PARAM_LEN]>,
    /// `encode(image)` of each row at freeze time.
    pub latent_train: Tensor,
}

impl LatentStore {
    /// Encodes the images of `indices` with the current encoder.
    pub fn build(net: &BdNet, dataset: &Dataset, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Config("latent store needs at least one case".into()));
        }
        let mut case_indices = indices.to_vec();
        case_indices.sort_unstable();
        case_indices.dedup();
        let images: Vec<&[f64]> = case_indices
            .iter()
            .map(|&i| dataset.cases[i].image.as_slice())
            .collect();
        let latent_train = net.encode(&Tensor::from_rows(&images)?)?;
        let vec_train = case_indices.iter().map(|&i| dataset.input(i)).collect();
        Ok(Self {
            case_indices,
            vec_train,
            latent_train,
        })
    }

    pub fn len(&self) -> usize {
        self.case_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.case_indices.is_empty()
    }

    /// Row of the nearest stored parameter vector (Euclidean); ties go to the
    /// lowest case index.
    pub fn nearest(&self, query: &[f64; PARAM_LEN]) -> Result<usize> {
        if self.is_empty() {
            return Err(Error::Contract("latent store is empty".into()));
        }
        let mut best = (0, f64::INFINITY);
        for (row, v) in self.vec_train.iter().enumerate() {
            let d = squared_distance(query, v);
            if d < best.1 {
                best = (row, d);
            }
        }
        Ok(best.0)
    }

    pub fn latent(&self, row: usize) -> &[f64] {
        self.latent_train.row(row)
    }
}

/// Decodes the stored latent of the training case nearest to `query`.
pub fn ae_knn_predict(query: &[f64; PARAM_LEN], store: &LatentStore, net: &BdNet) -> Result<Vec<f64>> {
    let row = store.nearest(query)?;
    let z = Tensor::new(vec![1, store.latent_train.shape()[1]], store.latent(row).to_vec())?;
    Ok(net.decode(&z)?.into_data())
}

/// [`ae_knn_predict`] for many queries, decoded as one batch.
pub fn ae_knn_predict_batch(queries: &[[f64; PARAM_LEN]], store: &LatentStore, net: &BdNet) -> Result<Tensor> {
    let rows = queries
        .iter()
        .map(|q| store.nearest(q).map(|r| store.latent(r)))
        .collect::<Result<Vec<_>>>()?;
    net.decode(&Tensor::from_rows(&rows)?)
}

/// Trains the autoencoder with the reconstruction loss only, then freezes the
/// latents of every training case.
pub fn ae_knn_fit(dataset: &Dataset, config: &TrainConfig) -> Result<(BdNet, LatentStore, TrainReport)> {
    let config = TrainConfig {
        variant: Variant::AeKnn,
        ..config.clone()
    };
    let outcome = run_training(dataset, &config, |_, _| Ok(()))?;
    let store = LatentStore::build(&outcome.net, dataset, dataset.train_indices())?;
    Ok((outcome.net, store, outcome.report))
}
