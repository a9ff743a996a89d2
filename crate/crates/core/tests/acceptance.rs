//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Runs sequentially: criterion 7 is timed.
//!
//! `cargo test --release --test acceptance` (the full-scale experiment takes
//! roughly ten minutes on one core).

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stress_bd::autodiff::{Graph, Tensor, UpdateMask};
use stress_bd::cli::gradcheck::{run_grad_check, GRAD_TOLERANCE};
use stress_bd::clustering::{kmeans_fit, squared_distance, KmeansInit};
use stress_bd::dataset::{Dataset, GenerateOptions};
use stress_bd::doe::{
    DoeGrid, Layer, ParamVector, SurrogateConstants, DIE_SIZE_RANGE, EMC_CTE_RANGE, EMC_MODULUS_RANGE,
    GAP_SIZE_RANGE,
};
use stress_bd::networks::{BdNet, ENCODER};
use stress_bd::trainers::{
    ae_knn_fit, ae_knn_predict, build_loss, recompute_clusters, run_training, BatchSampler, Prepared,
    TermWeights, TrainConfig, TrainReport, Trainer, Variant,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

type Check = fn(&Dataset) -> Outcome;

fn main() {
    let ds = Dataset::generate(&GenerateOptions::default()).expect("default dataset");
    let checks: [(&str, Check); 9] = [
        ("gradient oracle", c1_grad_check),
        ("DOE exactness", c2_doe),
        ("surrogate fidelity", c3_surrogate),
        ("k-means oracle", c4_kmeans),
        ("baseline exactness", c5_knn),
        ("variant degeneracy", c6_degeneracy),
        ("ranking reproduction", c7_ranking),
        ("training progress", c8_progress),
        ("end-to-end determinism", c9_determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let started = Instant::now();
        let o = check(&ds);
        failed += usize::from(!o.pass);
        println!(
            "criterion {}: {} {name} ({:.1}s) — {}",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            started.elapsed().as_secs_f64(),
            o.detail
        );
    }
    println!("acceptance: {}/{} passed", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn c1_grad_check(_: &Dataset) -> Outcome {
    let seeds: Vec<u64> = (0..20).collect();
    let started = Instant::now();
    let clean = run_grad_check(&seeds, false).expect("grad check");
    let secs = started.elapsed().as_secs_f64();
    let corrupt = run_grad_check(&[0], true).expect("corrupt grad check");
    outcome(
        clean.passed() && !corrupt.passed() && secs < 60.0,
        format!(
            "max rel error {:.3e} < {GRAD_TOLERANCE:e} over {} seeds / {} elements in {secs:.1}s; corrupted gradient gives {:.3e}",
            clean.max_rel_error(),
            seeds.len(),
            clean.elements_checked,
            corrupt.max_rel_error()
        ),
    )
}

fn c2_doe(ds: &Dataset) -> Outcome {
    let per_layer: Vec<usize> = Layer::ALL
        .iter()
        .map(|&l| ds.cases.iter().filter(|c| c.params.layer == l).count())
        .collect();
    let again = Dataset::generate(&GenerateOptions::default()).expect("regenerate");
    let identical = ds.to_bytes().expect("encode") == again.to_bytes().expect("encode");
    let (train, test) = (ds.train_indices().len(), ds.test_indices().len());
    outcome(
        ds.len() == 1875 && per_layer.iter().all(|&n| n == 625) && train == 1500 && test == 375 && identical,
        format!("{} cases, per layer {per_layer:?}, split {train}/{test}, regeneration bit-identical: {identical}", ds.len()),
    )
}

fn c3_surrogate(_: &Dataset) -> Outcome {
    let surrogate = SurrogateConstants::default();
    let grid = DoeGrid::default();
    let mut ordered = 0;
    let mut total = 0;
    for &e in &grid.emc_modulus {
        for &cte in &grid.emc_cte {
            for &die in &grid.die_size {
                for &gap in &grid.gap_size {
                    let var = |layer| {
                        surrogate
                            .synthesize(&ParamVector::new(e, cte, die, gap, layer))
                            .expect("synthesize")
                            .variance()
                    };
                    let (om, uf, rdl) = (var(Layer::Overmold), var(Layer::Uf), var(Layer::Rdl));
                    total += 1;
                    ordered += usize::from(om > uf && uf > rdl);
                }
            }
        }
    }

    // Raise one material parameter of a random case; every pixel must increase.
    let mut rng = ChaCha8Rng::seed_from_u64(0x3a0d17);
    let mut monotone = 0;
    let audits = 50;
    for _ in 0..audits {
        let layer = Layer::ALL[rng.gen_range(0..3)];
        let e = rng.gen_range(EMC_MODULUS_RANGE.min..EMC_MODULUS_RANGE.max);
        let cte = rng.gen_range(EMC_CTE_RANGE.min..EMC_CTE_RANGE.max);
        let die = rng.gen_range(DIE_SIZE_RANGE.min..=DIE_SIZE_RANGE.max);
        let gap = rng.gen_range(GAP_SIZE_RANGE.min..=GAP_SIZE_RANGE.max);
        let base = surrogate.synthesize(&ParamVector::new(e, cte, die, gap, layer)).expect("base");
        // Strictly above the base value, up to the range maximum.
        let e2 = EMC_MODULUS_RANGE.max - rng.gen_range(0.0..EMC_MODULUS_RANGE.max - e);
        let cte2 = EMC_CTE_RANGE.max - rng.gen_range(0.0..EMC_CTE_RANGE.max - cte);
        let up_e = surrogate.synthesize(&ParamVector::new(e2, cte, die, gap, layer)).expect("e");
        let up_cte = surrogate.synthesize(&ParamVector::new(e, cte2, die, gap, layer)).expect("cte");
        let rises = |hi: &[f64]| hi.iter().zip(&base.values).all(|(h, b)| h > b);
        monotone += usize::from(rises(&up_e.values) && rises(&up_cte.values));
    }
    outcome(
        ordered == total && total == 625 && monotone == audits,
        format!("variance Overmold > UF > RDL on {ordered}/{total} geometries; monotone in E and CTE on {monotone}/{audits} audits"),
    )
}

/// Minimum over all non-trivial two-way partitions of the within-cluster sum
/// of squares, with the centers that achieve it.
fn brute_force_two_means(points: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
    let n = points.len();
    let d = points[0].len();
    let mut best = (f64::INFINITY, Vec::new());
    // Fix point 0 in cluster 0 so each partition is visited once.
    for mask in 1..(1u32 << (n - 1)) {
        let in_one = |i: usize| i > 0 && mask & (1 << (i - 1)) != 0;
        let mut centers = vec![vec![0.0; d]; 2];
        let mut counts = [0usize; 2];
        for (i, p) in points.iter().enumerate() {
            let c = usize::from(in_one(i));
            counts[c] += 1;
            for (s, v) in centers[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        for (c, n) in centers.iter_mut().zip(counts) {
            c.iter_mut().for_each(|v| *v /= n as f64);
        }
        let sse: f64 = points
            .iter()
            .enumerate()
            .map(|(i, p)| squared_distance(p, &centers[usize::from(in_one(i))]))
            .sum();
        if sse < best.0 {
            best = (sse, centers);
        }
    }
    best
}

fn c4_kmeans(_: &Dataset) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6b6d);
    let mut instances = 0;
    let mut optimal = 0;
    let mut monotone_runs = 0;
    let mut runs = 0;
    let mut worst_gap: f64 = 0.0;
    for n in 2..=8 {
        for dim in 1..=3 {
            for _ in 0..20 {
                // Integer-valued coordinates exercise exact ties as well.
                let integer = rng.gen_bool(0.3);
                let points: Vec<Vec<f64>> = (0..n)
                    .map(|_| {
                        (0..dim)
                            .map(|_| if integer { rng.gen_range(-3i32..=3) as f64 } else { rng.gen_range(-5.0..5.0) })
                            .collect()
                    })
                    .collect();
                let tensor = Tensor::from_rows(&points).expect("points");
                let (opt, centers) = brute_force_two_means(&points);
                instances += 1;
                let fit = kmeans_fit(&tensor, 2, &KmeansInit::Centers(centers), 50).expect("fit");
                let gap = (fit.model.objective - opt).abs();
                worst_gap = worst_gap.max(gap);
                optimal += usize::from(gap <= 1e-9);
                let mut fits = vec![fit];
                for seed in 0..3 {
                    fits.push(kmeans_fit(&tensor, 2, &KmeansInit::Seed(seed), 50).expect("seeded fit"));
                }
                for f in &fits {
                    runs += 1;
                    monotone_runs += usize::from(f.objective_trace.windows(2).all(|w| w[1] <= w[0]));
                }
            }
        }
    }
    outcome(
        optimal == instances && monotone_runs == runs,
        format!(
            "optimal-init objective equals brute force on {optimal}/{instances} instances (worst gap {worst_gap:.1e}); non-increasing trace on {monotone_runs}/{runs} runs"
        ),
    )
}

fn c5_knn(ds: &Dataset) -> Outcome {
    let cfg = TrainConfig {
        total_iterations: 200,
        checkpoints: vec![200],
        ..TrainConfig::default()
    };
    let (net, store, _) = ae_knn_fit(ds, &cfg).expect("ae_knn fit");
    let mut exact = 0;
    for &i in ds.train_indices() {
        let image = Tensor::new(vec![1, ds.cases[i].image.len()], ds.cases[i].image.clone()).expect("image");
        let latent = net.encode(&image).expect("encode");
        let expected = net.decode(&latent).expect("decode");
        let got = ae_knn_predict(&ds.input(i), &store, &net).expect("predict");
        let bitwise = got.len() == expected.len()
            && got.iter().zip(expected.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        exact += usize::from(bitwise);
    }
    let n = ds.train_indices().len();
    outcome(exact == n, format!("prediction equals decode(encode(x)) bitwise on {exact}/{n} training cases"))
}

fn c6_degeneracy(ds: &Dataset) -> Outcome {
    let data = Prepared::new(ds).expect("prepare");
    let base = TrainConfig {
        seed: 11,
        ..TrainConfig::default()
    };
    let mut ae = Trainer::new(TrainConfig {
        variant: Variant::AeBd,
        ..base.clone()
    })
    .expect("ae trainer");
    let mut dc = Trainer::new(TrainConfig {
        variant: Variant::DcBd,
        lambda2: 0.0,
        ..base.clone()
    })
    .expect("dc trainer");
    let mut sampler = BatchSampler::new(data.train.len(), base.seed);
    for _ in 0..100 {
        let batch = data.train_batch(&sampler.next_batch(base.batch_size)).expect("batch");
        let cluster = recompute_clusters(&dc.net, &data.train_set.images, &dc.config, dc.cluster.as_ref()).expect("k-means");
        dc.set_cluster(cluster);
        dc.step_dc_bd(&batch).expect("dc step");
        ae.step_ae_bd(&batch).expect("ae step");
    }
    let max_diff = ae
        .net
        .store
        .ids()
        .map(|id| {
            let other = dc.net.store.get(ae.net.store.name(id)).expect("same parameters");
            ae.net.store.value(id).data().iter().zip(other.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);

    // L3 alone, unmasked and under every variant's routing, on a trained and a
    // fresh network: encoder gradients must be exactly zero.
    let batch = data.train_batch(&(0..base.batch_size).collect::<Vec<_>>()).expect("batch");
    let l3 = TermWeights {
        l1: None,
        l2: None,
        l3: Some(1.0),
    };
    let fresh = BdNet::init(base.topology.clone(), 5).expect("net");
    let mut nonzero = 0;
    let mut checked = 0;
    for net in [&ae.net, &dc.net, &fresh] {
        let mut g = Graph::new(&net.store);
        let (loss, _) = build_loss(&mut g, net, &batch, l3, None).expect("l3 loss");
        let grads = g.backward(loss).expect("backward");
        for mask in [UpdateMask::All, Variant::Bd.update_mask(), Variant::AeBd.update_mask(), Variant::DcBd.update_mask()] {
            let mut masked = grads.clone();
            masked.retain(&net.store, &mask);
            for id in net.store.ids().filter(|&id| net.store.name(id).starts_with(ENCODER)) {
                checked += 1;
                if masked.get(id).is_some_and(|t| t.data().iter().any(|&v| v != 0.0)) {
                    nonzero += 1;
                }
            }
        }
    }
    outcome(
        max_diff <= 1e-12 && nonzero == 0,
        format!("after 100 steps max |Δθ| = {max_diff:.1e}; nonzero L3 encoder gradients {nonzero}/{checked}"),
    )
}

struct Experiment {
    reports: Vec<TrainReport>,
    seconds: f64,
}

static EXPERIMENT: std::sync::OnceLock<Experiment> = std::sync::OnceLock::new();

fn experiment(ds: &Dataset) -> &'static Experiment {
    EXPERIMENT.get_or_init(|| {
        let started = Instant::now();
        let mut reports = Vec::new();
        for variant in Variant::ALL {
            for seed in 0..3 {
                let cfg = TrainConfig {
                    variant,
                    seed,
                    ..TrainConfig::default()
                };
                reports.push(run_training(ds, &cfg, |_, _| Ok(())).expect("training run").report);
            }
        }
        Experiment {
            reports,
            seconds: started.elapsed().as_secs_f64(),
        }
    })
}

fn final_test(reports: &[TrainReport], variant: Variant) -> Vec<f64> {
    reports
        .iter()
        .filter(|r| r.variant == variant)
        .map(|r| r.final_checkpoint().expect("checkpoint").test_ssd)
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn c7_ranking(ds: &Dataset) -> Outcome {
    let exp = experiment(ds);
    let [bd, ae, dc, knn] = [Variant::Bd, Variant::AeBd, Variant::DcBd, Variant::AeKnn].map(|v| final_test(&exp.reports, v));
    let (m_bd, m_ae, m_dc, m_knn) = (mean(&bd), mean(&ae), mean(&dc), mean(&knn));
    let per_seed = bd.iter().zip(&knn).all(|(b, k)| b < k);
    let dc_runs: Vec<_> = exp.reports.iter().filter(|r| r.variant == Variant::DcBd).collect();
    let share = dc_runs.iter().map(|r| r.timing.kmeans_seconds).sum::<f64>()
        / dc_runs.iter().map(|r| r.timing.total_seconds).sum::<f64>();
    outcome(
        m_dc < m_bd && m_bd < m_knn && m_dc < m_ae && per_seed && share > 0.5 && exp.seconds < 600.0,
        format!(
            "mean test SSD dc_bd {m_dc:.4e} < bd {m_bd:.4e} < ae_knn {m_knn:.4e}, ae_bd {m_ae:.4e}; bd < ae_knn every seed: {per_seed}; \
             dc_bd k-means share {:.0}%; 12 runs in {:.0}s",
            share * 100.0,
            exp.seconds
        ),
    )
}

fn c8_progress(ds: &Dataset) -> Outcome {
    let exp = experiment(ds);
    let mut worst: f64 = 0.0;
    for r in &exp.reports {
        let first = r.checkpoints.first().expect("iteration 0").train_loss.total;
        let last = r.final_checkpoint().expect("final").train_loss.total;
        worst = worst.max(last / first);
    }
    outcome(
        worst < 0.5,
        format!("worst final/initial train loss {worst:.4} over {} runs", exp.reports.len()),
    )
}

fn reproduce(dir: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_stress-bd"))
        .args(["reproduce", "--seed", "7", "--levels", "2", "--iterations", "40", "--seeds", "2", "--out"])
        .arg(dir)
        .output()
        .expect("run stress-bd")
}

fn c9_determinism(_: &Dataset) -> Outcome {
    let tmp = tempfile::tempdir().expect("tempdir");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let (ra, rb) = (reproduce(&a), reproduce(&b));
    if !ra.status.success() || !rb.status.success() {
        return outcome(false, format!("reproduce failed: {}", String::from_utf8_lossy(&ra.stderr)));
    }
    let mut files = vec!["comparison.csv".to_string(), "scatter.csv".to_string(), "dataset.sbd".to_string()];
    let listing = |sub: &str, suffix: &str| -> Vec<String> {
        let mut names: Vec<String> = std::fs::read_dir(a.join(sub))
            .map(|d| d.filter_map(|e| e.ok()).map(|e| e.file_name().to_string_lossy().into_owned()).collect())
            .unwrap_or_default();
        names.retain(|n| n.ends_with(suffix));
        names.sort();
        names.into_iter().map(|n| format!("{sub}/{n}")).collect()
    };
    let reports = listing("runs", ".report.jsonl");
    let weights = listing("runs/weights", ".weights");
    let report_count = reports.len();
    files.extend(reports);
    files.extend(weights);
    let differing: Vec<&String> = files
        .iter()
        .filter(|f| std::fs::read(a.join(f)).ok() != std::fs::read(b.join(f)).ok() || !a.join(f).exists())
        .collect();
    outcome(
        differing.is_empty() && report_count == 8,
        format!("{} files compared ({report_count} reports), differing: {differing:?}", files.len()),
    )
}
