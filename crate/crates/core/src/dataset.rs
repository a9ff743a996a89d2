//! Surrogate dataset: generation, normalization, train/test split and persistence.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::doe::{DoeGrid, Layer, ParamVector, StressImage, SurrogateConstants, IMAGE_LEN, PARAM_LEN};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"SBDDATA\0";
pub const DATASET_SCHEMA_VERSION: u32 = 1;
const BLOCK_LEN: usize = PARAM_LEN + IMAGE_LEN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMode {
    #[default]
    Global,
    PerLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extrema {
    pub min: f64,
    pub max: f64,
}

impl Extrema {
    fn of<'a>(values: impl IntoIterator<Item = &'a f64>) -> Self {
        values.into_iter().fold(
            Extrema {
                min: f64::INFINITY,
                max: f64::NEG_INFINITY,
            },
            |e, &v| Extrema {
                min: e.min.min(v),
                max: e.max.max(v),
            },
        )
    }

    fn merge(self, other: Extrema) -> Extrema {
        Extrema {
            min: self.min.min(other.min),
            max: self.max.max(other.max),
        }
    }

    pub fn span(&self) -> f64 {
        self.max - self.min
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub grid: DoeGrid,
    pub surrogate: SurrogateConstants,
    pub normalization: NormalizationMode,
    /// Raw (MPa) extrema over every image.
    pub global: Extrema,
    /// Raw (MPa) extrema per layer.
    pub per_layer: BTreeMap<Layer, Extrema>,
    pub seed: u64,
    pub stratified: bool,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

impl DatasetManifest {
    /// Extrema used to normalize images of `layer`.
    pub fn scale_for(&self, layer: Layer) -> Extrema {
        match self.normalization {
            NormalizationMode::Global => self.global,
            NormalizationMode::PerLayer => self.per_layer[&layer],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub params: ParamVector,
    /// Pixel values scaled to `[0, 1]`.
    pub image: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub cases: Vec<Case>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOptions {
    pub grid: DoeGrid,
    pub surrogate: SurrogateConstants,
    pub normalization: NormalizationMode,
    pub n_train: usize,
    pub seed: u64,
    pub stratified: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            grid: DoeGrid::default(),
            surrogate: SurrogateConstants::default(),
            normalization: NormalizationMode::Global,
            n_train: 1500,
            seed: 0,
            stratified: true,
        }
    }
}

/// Raw images for every DOE case, in enumeration order.
pub fn synthesize_all(grid: &DoeGrid, surrogate: &SurrogateConstants) -> Result<Vec<(ParamVector, StressImage)>> {
    grid.enumerate()?
        .into_iter()
        .map(|p| surrogate.synthesize(&p).map(|img| (p, img)))
        .collect()
}

/// Scaled images plus the global and per-layer raw extrema.
pub struct Normalized {
    pub images: Vec<Vec<f64>>,
    pub global: Extrema,
    pub per_layer: BTreeMap<Layer, Extrema>,
}

pub fn normalize_images(raw: &[StressImage], mode: NormalizationMode) -> Result<Normalized> {
    if raw.is_empty() {
        return Err(Error::Degenerate("no images to normalize".into()));
    }
    let mut per_layer: BTreeMap<Layer, Extrema> = BTreeMap::new();
    for img in raw {
        let e = Extrema::of(&img.values);
        per_layer
            .entry(img.layer)
            .and_modify(|x| *x = x.merge(e))
            .or_insert(e);
    }
    let global = per_layer
        .values()
        .copied()
        .reduce(Extrema::merge)
        .expect("at least one layer");
    if !(global.min.is_finite() && global.max.is_finite()) {
        return Err(Error::NonFinite("raw stress images".into()));
    }
    let scale_for = |layer: Layer| match mode {
        NormalizationMode::Global => global,
        NormalizationMode::PerLayer => per_layer[&layer],
    };
    for (layer, e) in per_layer.iter() {
        let s = scale_for(*layer);
        if s.span() <= 0.0 {
            return Err(Error::Degenerate(format!(
                "max == min ({}) for layer {layer}",
                e.max
            )));
        }
    }
    let images = raw
        .iter()
        .map(|img| {
            let s = scale_for(img.layer);
            img.values.iter().map(|v| (v - s.min) / s.span()).collect()
        })
        .collect();
    Ok(Normalized {
        images,
        global,
        per_layer,
    })
}

/// Seeded train/test split. With `stratified`, each layer contributes
/// `n_train / layer_count` training cases.
pub fn split_train_test(
    layers: &[Layer],
    n_train: usize,
    seed: u64,
    stratified: bool,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let total = layers.len();
    if n_train == 0 || n_train >= total {
        return Err(Error::Config(format!(
            "n_train must satisfy 0 < n_train < {total}, got {n_train}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(n_train);
    if stratified {
        let mut groups: BTreeMap<Layer, Vec<usize>> = BTreeMap::new();
        for (i, layer) in layers.iter().enumerate() {
            groups.entry(*layer).or_default().push(i);
        }
        if n_train % groups.len() != 0 {
            return Err(Error::Config(format!(
                "n_train={n_train} is not divisible by the {} layers",
                groups.len()
            )));
        }
        let per = n_train / groups.len();
        for (layer, mut idx) in groups {
            if per > idx.len() {
                return Err(Error::Config(format!(
                    "layer {layer} has {} cases, fewer than {per} requested for training",
                    idx.len()
                )));
            }
            idx.shuffle(&mut rng);
            train.extend_from_slice(&idx[..per]);
        }
    } else {
        let mut idx: Vec<usize> = (0..total).collect();
        idx.shuffle(&mut rng);
        train.extend_from_slice(&idx[..n_train]);
    }
    train.sort_unstable();
    let mut in_train = vec![false; total];
    for &i in &train {
        in_train[i] = true;
    }
    let test = (0..total).filter(|&i| !in_train[i]).collect();
    Ok((train, test))
}

impl Dataset {
    pub fn generate(opts: &GenerateOptions) -> Result<Self> {
        let raw = synthesize_all(&opts.grid, &opts.surrogate)?;
        let images: Vec<StressImage> = raw.iter().map(|(_, img)| img.clone()).collect();
        let normalized = normalize_images(&images, opts.normalization)?;
        let layers: Vec<Layer> = raw.iter().map(|(p, _)| p.layer).collect();
        let (train_indices, test_indices) =
            split_train_test(&layers, opts.n_train, opts.seed, opts.stratified)?;
        let cases = raw
            .into_iter()
            .zip(normalized.images)
            .map(|((params, _), image)| Case { params, image })
            .collect();
        Ok(Dataset {
            manifest: DatasetManifest {
                schema_version: DATASET_SCHEMA_VERSION,
                grid: opts.grid.clone(),
                surrogate: opts.surrogate.clone(),
                normalization: opts.normalization,
                global: normalized.global,
                per_layer: normalized.per_layer,
                seed: opts.seed,
                stratified: opts.stratified,
                train_indices,
                test_indices,
            },
            cases,
        })
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.manifest.train_indices
    }

    pub fn test_indices(&self) -> &[usize] {
        &self.manifest.test_indices
    }

    /// Normalized parameter vector of case `i`.
    pub fn input(&self, i: usize) -> [f64; PARAM_LEN] {
        self.cases[i]
            .params
            .normalized()
            .expect("dataset parameters were validated at generation")
    }

    /// Maps a normalized image of `layer` back to MPa.
    pub fn denormalize(&self, layer: Layer, image: &[f64]) -> Vec<f64> {
        let s = self.manifest.scale_for(layer);
        image.iter().map(|v| v * s.span() + s.min).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::with_capacity(self.cases.len() * BLOCK_LEN);
        for case in &self.cases {
            let p = &case.params;
            payload.extend_from_slice(&[
                p.emc_modulus,
                p.emc_cte,
                p.die_size,
                p.gap_size,
                p.layer.index() as f64,
            ]);
            payload.extend_from_slice(&case.image);
        }
        container::encode(DATASET_MAGIC, &self.manifest, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (manifest, payload): (DatasetManifest, Vec<f64>) =
            container::decode(bytes, DATASET_MAGIC, DATASET_SCHEMA_VERSION)?;
        if payload.len() % BLOCK_LEN != 0 {
            return Err(Error::Format(format!(
                "payload of {} values is not a whole number of {BLOCK_LEN}-value cases",
                payload.len()
            )));
        }
        let cases = payload
            .chunks_exact(BLOCK_LEN)
            .map(|b| {
                let layer = Layer::from_index(b[4] as usize)?;
                Ok(Case {
                    params: ParamVector::new(b[0], b[1], b[2], b[3], layer),
                    image: b[PARAM_LEN..].to_vec(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let n = cases.len();
        let m = &manifest;
        if m.train_indices.iter().chain(&m.test_indices).any(|&i| i >= n)
            || m.train_indices.len() + m.test_indices.len() != n
        {
            return Err(Error::Format("split indices do not cover the stored cases".into()));
        }
        Ok(Dataset { manifest, cases })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_grid() -> DoeGrid {
        DoeGrid {
            emc_modulus: vec![5.0, 30.0],
            emc_cte: vec![5.0, 20.0],
            die_size: vec![0.5, 1.8],
            gap_size: vec![0.2],
            layers: Layer::ALL.to_vec(),
        }
    }

    #[test]
    fn constant_images_are_degenerate() {
        let imgs = vec![
            StressImage {
                layer: Layer::Uf,
                values: vec![3.0; IMAGE_LEN],
            };
            2
        ];
        assert!(matches!(
            normalize_images(&imgs, NormalizationMode::Global),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn normalized_set_touches_both_bounds() {
        let raw = synthesize_all(&small_grid(), &SurrogateConstants::default()).unwrap();
        let imgs: Vec<_> = raw.into_iter().map(|(_, i)| i).collect();
        for mode in [NormalizationMode::Global, NormalizationMode::PerLayer] {
            let n = normalize_images(&imgs, mode).unwrap();
            let all = n.images.iter().flatten();
            let e = Extrema::of(all);
            assert_eq!((e.min, e.max), (0.0, 1.0));
            for e in n.per_layer.values() {
                assert!(n.global.min <= e.min && n.global.max >= e.max);
            }
            assert!(n.per_layer[&Layer::Overmold].max >= n.per_layer[&Layer::Rdl].max);
        }
    }

    #[test]
    fn default_split_sizes_and_stratification() {
        let layers: Vec<Layer> = Layer::ALL.iter().flat_map(|&l| [l; 625]).collect();
        let (train, test) = split_train_test(&layers, 1500, 3, true).unwrap();
        assert_eq!((train.len(), test.len()), (1500, 375));
        for l in Layer::ALL {
            assert_eq!(train.iter().filter(|&&i| layers[i] == l).count(), 500);
        }
        assert_eq!(split_train_test(&layers, 1500, 3, true).unwrap().0, train);
        assert_ne!(split_train_test(&layers, 1500, 4, true).unwrap().0, train);
        assert!(split_train_test(&layers, 1875, 3, true).is_err());
        assert!(split_train_test(&layers, 0, 3, true).is_err());
        assert!(split_train_test(&layers, 1501, 3, true).is_err());
        assert!(split_train_test(&layers, 1501, 3, false).is_ok());
    }

    #[test]
    fn denormalize_inverts_scaling() {
        let opts = GenerateOptions {
            grid: small_grid(),
            n_train: 12,
            ..GenerateOptions::default()
        };
        for normalization in [NormalizationMode::Global, NormalizationMode::PerLayer] {
            let ds = Dataset::generate(&GenerateOptions {
                normalization,
                ..opts.clone()
            })
            .unwrap();
            for case in &ds.cases {
                let raw = opts.surrogate.synthesize(&case.params).unwrap();
                let back = ds.denormalize(case.params.layer, &case.image);
                for (a, b) in back.iter().zip(&raw.values) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}
