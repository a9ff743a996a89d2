//! `key = value` run configuration with `[train]`, `[grid]`, `[dataset]` and
//! `[paths]` sections. Unknown sections and keys are errors.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;

use crate::dataset::{GenerateOptions, NormalizationMode};
use crate::doe::{DoeGrid, Layer};
use crate::error::{Error, Result};
use crate::trainers::{TrainConfig, Variant};

/// Shown by `--help`; every key with its default.
pub const CONFIG_HELP: &str = "\
CONFIG FILE (key = value, '#' or ';' comments; unknown keys are errors):
  [train]
    variant          = dc_bd          bd | ae_bd | dc_bd | ae_knn
    lambda1          = 0.1            reconstruction weight
    lambda2          = 0.01           clustering weight
    clusters         = 3              k-means K
    total_iterations = 5000
    checkpoints      = 1000,2000,3000,4000,5000
    batch_size       = 32
    learning_rate    = 0.001
    beta1            = 0.9
    beta2            = 0.999
    epsilon          = 1e-8
    kmeans_period    = 1              recompute k-means every N iterations
    kmeans_max_iters = 5              Lloyd iterations per recompute
    latent_dim       = 16
    encoder_hidden   = 256,64
    decoder_hidden   = 64,256
    boundary_hidden  = 32,32
  [grid]
    emc_modulus      = 5,11,17,23,30  GPa
    emc_cte          = 5,9,12,16,20   ppm/K
    die_size         = 0.5,0.8,1.2,1.5,1.8  mm
    gap_size         = 0.2,0.4,0.6,0.8,1.0  mm
    layers           = overmold,uf,rdl
  [dataset]
    n_train          = 1500
    normalization    = global         global | per_layer
    stratified       = true
  [paths]
    data             = (none)         dataset file
    out              = (none)         output directory";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub generate: GenerateOptions,
    /// Whether `[train] variant` was set explicitly.
    pub variant_set: bool,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

fn parse<T: FromStr>(section: &str, key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("[{section}] {key} = `{value}`: {e}")))
}

fn parse_list<T: FromStr>(section: &str, key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let items: Vec<&str> = value.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return Err(Error::Config(format!("[{section}] {key} needs at least one value")));
    }
    items.into_iter().map(|v| parse(section, key, v)).collect()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(format!("malformed config: {e}")))?;
        let mut cfg = RunConfig::default();
        for (section, props) in ini.iter() {
            let section = section.unwrap_or("");
            for (key, value) in props.iter() {
                cfg.set(section, key, value)?;
            }
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let g = &mut self.generate;
        match (section, key) {
            ("train", "variant") => {
                t.variant = value.parse::<Variant>()?;
                self.variant_set = true;
            }
            ("train", "lambda1") => t.lambda1 = parse(section, key, value)?,
            ("train", "lambda2") => t.lambda2 = parse(section, key, value)?,
            ("train", "clusters") => t.clusters = parse(section, key, value)?,
            ("train", "total_iterations") => t.total_iterations = parse(section, key, value)?,
            ("train", "checkpoints") => t.checkpoints = parse_list(section, key, value)?,
            ("train", "batch_size") => t.batch_size = parse(section, key, value)?,
            ("train", "learning_rate") => t.optimizer.learning_rate = parse(section, key, value)?,
            ("train", "beta1") => t.optimizer.beta1 = parse(section, key, value)?,
            ("train", "beta2") => t.optimizer.beta2 = parse(section, key, value)?,
            ("train", "epsilon") => t.optimizer.epsilon = parse(section, key, value)?,
            ("train", "kmeans_period") => t.kmeans_period = parse(section, key, value)?,
            ("train", "kmeans_max_iters") => t.kmeans_max_iters = parse(section, key, value)?,
            ("train", "latent_dim") => t.topology.latent_dim = parse(section, key, value)?,
            ("train", "encoder_hidden") => t.topology.encoder_hidden = parse_list(section, key, value)?,
            ("train", "decoder_hidden") => t.topology.decoder_hidden = parse_list(section, key, value)?,
            ("train", "boundary_hidden") => t.topology.boundary_hidden = parse_list(section, key, value)?,
            ("grid", "emc_modulus") => g.grid.emc_modulus = parse_list(section, key, value)?,
            ("grid", "emc_cte") => g.grid.emc_cte = parse_list(section, key, value)?,
            ("grid", "die_size") => g.grid.die_size = parse_list(section, key, value)?,
            ("grid", "gap_size") => g.grid.gap_size = parse_list(section, key, value)?,
            ("grid", "layers") => g.grid.layers = parse_list::<Layer>(section, key, value)?,
            ("dataset", "n_train") => g.n_train = parse(section, key, value)?,
            ("dataset", "normalization") => {
                g.normalization = match value.trim() {
                    "global" => NormalizationMode::Global,
                    "per_layer" => NormalizationMode::PerLayer,
                    other => {
                        return Err(Error::Config(format!(
                            "[dataset] normalization = `{other}`: expected global or per_layer"
                        )))
                    }
                }
            }
            ("dataset", "stratified") => g.stratified = parse(section, key, value)?,
            ("paths", "data") => self.data = Some(PathBuf::from(value.trim())),
            ("paths", "out") => self.out = Some(PathBuf::from(value.trim())),
            ("", _) => {
                return Err(Error::Config(format!(
                    "key `{key}` appears before any section header"
                )))
            }
            ("train" | "grid" | "dataset" | "paths", _) => {
                return Err(Error::Config(format!("unknown key `{key}` in [{section}]")))
            }
            _ => return Err(Error::Config(format!("unknown section [{section}]"))),
        }
        Ok(())
    }
}

/// `--levels` argument: a level count applied to every parameter, or a file
/// whose `[grid]` section lists the levels explicitly.
#[derive(Debug, Clone, PartialEq)]
pub enum Levels {
    Count(usize),
    File(PathBuf),
}

impl FromStr for Levels {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s.trim().parse() {
            Ok(n) => Levels::Count(n),
            Err(_) => Levels::File(PathBuf::from(s)),
        })
    }
}

impl Levels {
    pub fn grid(&self) -> Result<DoeGrid> {
        match self {
            Levels::Count(n) => grid_with_levels(*n),
            Levels::File(path) => Ok(RunConfig::load(path)?.generate.grid),
        }
    }
}

/// `n` evenly spaced values over `[min, max]`; `n = 1` gives the midpoint.
pub fn linspace(min: f64, max: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5 * (min + max)],
        _ => (0..n)
            .map(|i| min + (max - min) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// A grid with `levels` evenly spaced values across each parameter's range;
/// five levels reproduces the default table.
pub fn grid_with_levels(levels: usize) -> Result<DoeGrid> {
    if levels == 0 {
        return Err(Error::Config("--levels must be ≥ 1".into()));
    }
    let default = DoeGrid::default();
    if levels == default.emc_modulus.len() {
        return Ok(default);
    }
    let span = |v: &[f64]| linspace(v[0], v[v.len() - 1], levels);
    Ok(DoeGrid {
        emc_modulus: span(&default.emc_modulus),
        emc_cte: span(&default.emc_cte),
        die_size: span(&default.die_size),
        gap_size: span(&default.gap_size),
        layers: default.layers,
    })
}
