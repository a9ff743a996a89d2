use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::clustering::{kmeans_fit, ClusterModel, KmeansInit};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::mean_ssd;
use crate::networks::BdNet;
use crate::trainers::knn::{ae_knn_predict_batch, LatentStore};
use crate::trainers::{composite_loss, Batch, LossTerms, TrainConfig, Trainer, Variant};

const BATCH_STREAM: u64 = 1;
const KMEANS_STREAM: u64 = 2;

/// Train and test tensors gathered once per run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub train_set: Batch,
    pub test_set: Batch,
}

fn gather(ds: &Dataset, indices: &[usize]) -> Result<Batch> {
    let params: Vec<_> = indices.iter().map(|&i| ds.input(i)).collect();
    let images: Vec<&[f64]> = indices.iter().map(|&i| ds.cases[i].image.as_slice()).collect();
    Ok(Batch {
        params: Tensor::from_rows(&params)?,
        images: Tensor::from_rows(&images)?,
    })
}

impl Prepared {
    pub fn new(ds: &Dataset) -> Result<Self> {
        let train = ds.train_indices().to_vec();
        let test = ds.test_indices().to_vec();
        if train.is_empty() || test.is_empty() {
            return Err(Error::Config("dataset needs non-empty train and test splits".into()));
        }
        Ok(Self {
            train_set: gather(ds, &train)?,
            test_set: gather(ds, &test)?,
            train,
            test,
        })
    }

    /// Rows `positions` of the training set.
    pub fn train_batch(&self, positions: &[usize]) -> Result<Batch> {
        let params: Vec<&[f64]> = positions.iter().map(|&p| self.train_set.params.row(p)).collect();
        let images: Vec<&[f64]> = positions.iter().map(|&p| self.train_set.images.row(p)).collect();
        Ok(Batch {
            params: Tensor::from_rows(&params)?,
            images: Tensor::from_rows(&images)?,
        })
    }
}

/// Seeded mini-batches drawn without replacement; reshuffles at each epoch.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(BATCH_STREAM);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Self {
            order,
            cursor: 0,
            rng,
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let take = (size - out.len()).min(self.order.len() - self.cursor);
            out.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub iteration: usize,
    /// Mean per-pixel SSD of the parameter-path prediction over the training
    /// split; absent for the nearest-neighbour baseline.
    pub train_ssd: Option<f64>,
    /// Mean per-pixel SSD over the test split.
    pub test_ssd: f64,
    /// Mean per-pixel autoencoder reconstruction SSD over the training split.
    pub recon_ssd: Option<f64>,
    /// Variant objective and its terms over the full training split.
    pub train_loss: LossTerms,
    /// Mean mini-batch objective since the previous checkpoint.
    pub batch_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub total_seconds: f64,
    /// Time spent encoding the training set and running Lloyd iterations.
    pub kmeans_seconds: f64,
    pub eval_seconds: f64,
    /// Elapsed seconds when each checkpoint was reached.
    pub checkpoint_seconds: Vec<f64>,
}

/// Deterministic record of a training run. Wall-clock data lives in
/// `timing`, which is not part of the serialized report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: Variant,
    pub seed: u64,
    pub config: TrainConfig,
    pub kmeans_calls: usize,
    pub checkpoints: Vec<CheckpointRecord>,
    #[serde(skip)]
    pub timing: RunTiming,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum ReportLine {
    Run {
        variant: Variant,
        seed: u64,
        kmeans_calls: usize,
        config: TrainConfig,
    },
    Checkpoint(CheckpointRecord),
}

impl TrainReport {
    pub fn final_checkpoint(&self) -> Option<&CheckpointRecord> {
        self.checkpoints.last()
    }

    /// One JSON object per line: a run header, then one record per checkpoint.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = Vec::new();
        let header = ReportLine::Run {
            variant: self.variant,
            seed: self.seed,
            kmeans_calls: self.kmeans_calls,
            config: self.config.clone(),
        };
        let ser = |e: serde_json::Error| Error::Format(e.to_string());
        serde_json::to_writer(&mut out, &header).map_err(ser)?;
        out.push(b'\n');
        for c in &self.checkpoints {
            serde_json::to_writer(&mut out, &ReportLine::Checkpoint(c.clone())).map_err(ser)?;
            out.push(b'\n');
        }
        String::from_utf8(out).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let first = lines
            .next()
            .ok_or_else(|| Error::Format("empty report".into()))?;
        let parse = |l: &str| {
            serde_json::from_str::<ReportLine>(l).map_err(|e| Error::Format(format!("bad report line: {e}")))
        };
        let ReportLine::Run {
            variant,
            seed,
            kmeans_calls,
            config,
        } = parse(first)?
        else {
            return Err(Error::Format("report must start with a run record".into()));
        };
        let mut checkpoints = Vec::new();
        for l in lines {
            match parse(l)? {
                ReportLine::Checkpoint(c) => checkpoints.push(c),
                ReportLine::Run { .. } => {
                    return Err(Error::Format("more than one run record in report".into()))
                }
            }
        }
        if checkpoints.windows(2).any(|w| w[0].iteration >= w[1].iteration) {
            return Err(Error::Format("checkpoints are not in ascending order".into()));
        }
        Ok(Self {
            variant,
            seed,
            config,
            kmeans_calls,
            checkpoints,
            timing: RunTiming::default(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut text = String::new();
        for line in std::io::BufReader::new(f).lines() {
            text.push_str(&line.map_err(|e| Error::io(path, e))?);
            text.push('\n');
        }
        Self::from_jsonl(&text)
    }
}

pub struct TrainOutcome {
    pub report: TrainReport,
    pub net: BdNet,
}

/// Fits k-means on the encoder latents of the whole training split,
/// warm-starting from `previous` centers when given.
pub fn recompute_clusters(
    net: &BdNet,
    train_images: &Tensor,
    cfg: &TrainConfig,
    previous: Option<&ClusterModel>,
) -> Result<ClusterModel> {
    let latents = net.encode(train_images)?;
    let init = match previous {
        Some(m) => KmeansInit::Centers(m.centers.clone()),
        None => KmeansInit::Seed(kmeans_seed(cfg.seed)),
    };
    Ok(kmeans_fit(&latents, cfg.clusters, &init, cfg.kmeans_max_iters)?.model)
}

fn kmeans_seed(seed: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(KMEANS_STREAM);
    rand::Rng::gen(&mut rng)
}

fn evaluate(
    trainer: &Trainer,
    data: &Prepared,
    dataset: &Dataset,
    cluster: Option<&ClusterModel>,
) -> Result<(Option<f64>, f64, Option<f64>, LossTerms)> {
    let net = &trainer.net;
    let variant = trainer.config.variant;
    let pairs = |pred: &Tensor, truth: &Tensor| -> Result<f64> {
        let n = truth.shape()[0];
        mean_ssd((0..n).map(|i| (pred.row(i), truth.row(i))))
    };

    let loss = composite_loss(net, &data.train_set, &trainer.config, cluster)?;
    let recon = if variant.uses_reconstruction() {
        let z = net.encode(&data.train_set.images)?;
        Some(pairs(&net.decode(&z)?, &data.train_set.images)?)
    } else {
        None
    };
    if variant == Variant::AeKnn {
        let store = LatentStore::build(net, dataset, &data.train)?;
        let queries: Vec<_> = data.test.iter().map(|&i| dataset.input(i)).collect();
        let pred = ae_knn_predict_batch(&queries, &store, net)?;
        let test = pairs(&pred, &data.test_set.images)?;
        return Ok((None, test, recon, loss));
    }
    let train = pairs(&net.predict(&data.train_set.params)?, &data.train_set.images)?;
    let test = pairs(&net.predict(&data.test_set.params)?, &data.test_set.images)?;
    Ok((Some(train), test, recon, loss))
}

/// Runs one training job: evaluates at iteration 0 and at every checkpoint,
/// calling `on_checkpoint` with the networks at each checkpoint iteration.
pub fn run_training<F>(dataset: &Dataset, config: &TrainConfig, mut on_checkpoint: F) -> Result<TrainOutcome>
where
    F: FnMut(usize, &BdNet) -> Result<()>,
{
    config.validate()?;
    let start = Instant::now();
    let data = Prepared::new(dataset)?;
    let mut trainer = Trainer::new(config.clone())?;
    let mut sampler = BatchSampler::new(data.train.len(), config.seed);
    let mut timing = RunTiming::default();
    let mut checkpoints = Vec::with_capacity(config.checkpoints.len() + 1);
    let mut next_checkpoint = config.checkpoints.iter().copied().peekable();
    let mut batch_loss_sum = 0.0;
    let mut batch_count = 0usize;

    let refit = |trainer: &mut Trainer, timing: &mut RunTiming| -> Result<()> {
        let t0 = Instant::now();
        let model = recompute_clusters(&trainer.net, &data.train_set.images, config, trainer.cluster.as_ref())?;
        trainer.set_cluster(model);
        timing.kmeans_seconds += t0.elapsed().as_secs_f64();
        Ok(())
    };

    if config.variant.uses_clustering() {
        refit(&mut trainer, &mut timing)?;
    }
    let record = |trainer: &Trainer, timing: &mut RunTiming, batch_loss: Option<f64>| -> Result<CheckpointRecord> {
        let t0 = Instant::now();
        let (train_ssd, test_ssd, recon_ssd, train_loss) =
            evaluate(trainer, &data, dataset, trainer.cluster.as_ref())?;
        timing.eval_seconds += t0.elapsed().as_secs_f64();
        timing.checkpoint_seconds.push(start.elapsed().as_secs_f64());
        let rec = CheckpointRecord {
            iteration: trainer.iteration,
            train_ssd,
            test_ssd,
            recon_ssd,
            train_loss,
            batch_loss,
        };
        for v in [Some(rec.test_ssd), rec.train_ssd, rec.recon_ssd, Some(rec.train_loss.total)]
            .into_iter()
            .flatten()
        {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("evaluation at iteration {}", rec.iteration)));
            }
        }
        Ok(rec)
    };
    checkpoints.push(record(&trainer, &mut timing, None)?);

    while trainer.iteration < config.total_iterations {
        if trainer.recompute_due() && trainer.cluster_fitted_at != Some(trainer.iteration) {
            refit(&mut trainer, &mut timing)?;
        }
        let positions = sampler.next_batch(config.batch_size);
        let batch = data.train_batch(&positions)?;
        let terms = trainer.step(&batch)?;
        batch_loss_sum += terms.total;
        batch_count += 1;

        if next_checkpoint.peek() == Some(&trainer.iteration) {
            next_checkpoint.next();
            let mean = batch_loss_sum / batch_count as f64;
            batch_loss_sum = 0.0;
            batch_count = 0;
            checkpoints.push(record(&trainer, &mut timing, Some(mean))?);
            on_checkpoint(trainer.iteration, &trainer.net)?;
        }
    }
    timing.total_seconds = start.elapsed().as_secs_f64();

    Ok(TrainOutcome {
        report: TrainReport {
            variant: config.variant,
            seed: config.seed,
            config: config.clone(),
            kmeans_calls: trainer.kmeans_calls,
            checkpoints,
            timing,
        },
        net: trainer.net,
    })
}
