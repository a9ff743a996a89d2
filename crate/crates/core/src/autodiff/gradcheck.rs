use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, UpdateMask, Var};
use crate::error::{Error, Result};

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Largest relative error per parameter, in store order.
    pub per_param: Vec<(String, f64)>,
    pub elements_checked: usize,
}

impl GradCheckReport {
    /// Largest error among parameters whose name starts with `prefix`.
    pub fn max_for_prefix(&self, prefix: &str) -> f64 {
        self.per_param
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, e)| *e)
            .fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Step size and element selection for a gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Check at most this many elements per parameter tensor, drawn with
    /// `sample_seed`; the first and last elements are always included.
    pub max_per_param: Option<usize>,
    pub sample_seed: u64,
}

impl GradCheckOptions {
    pub fn exhaustive(epsilon: f64) -> Self {
        Self {
            epsilon,
            max_per_param: None,
            sample_seed: 0,
        }
    }

    fn elements(&self, id: ParamId, len: usize) -> Vec<usize> {
        match self.max_per_param {
            Some(max) if len > max.max(2) => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.sample_seed);
                rng.set_stream(id.index() as u64);
                let mut picked = rand::seq::index::sample(&mut rng, len - 2, max.max(2) - 2)
                    .into_iter()
                    .map(|i| i + 1)
                    .collect::<Vec<_>>();
                picked.push(0);
                picked.push(len - 1);
                picked.sort_unstable();
                picked
            }
            _ => (0..len).collect(),
        }
    }
}

/// Compares the reverse-mode gradient of `forward` against central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε` for every parameter element.
///
/// The difference is accumulated over [`Graph::loss_terms`] so that terms the
/// perturbation does not reach cancel exactly.
///
/// Analytic gradients of parameters outside `mask` are treated as zero, so a
/// mask that drops a real gradient path shows up as a large error.
pub fn grad_check<F>(
    store: &ParamStore,
    epsilon: f64,
    mask: &UpdateMask,
    forward: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    grad_check_with(store, GradCheckOptions::exhaustive(epsilon), mask, forward, |_| {})
}

/// [`grad_check`] with element sampling and a hook that may tamper with the
/// analytic gradients before comparison (used to confirm the checker catches
/// corruption).
pub fn grad_check_with<F, H>(
    store: &ParamStore,
    options: GradCheckOptions,
    mask: &UpdateMask,
    forward: F,
    tamper: H,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
    H: FnOnce(&mut crate::autodiff::Gradients),
{
    let epsilon = options.epsilon;
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut grads = {
        let mut g = Graph::new(store);
        let loss = forward(&mut g)?;
        if !g.scalar(loss).is_finite() {
            return Err(Error::NonFinite("grad_check loss".into()));
        }
        g.backward(loss)?
    };
    grads.retain(store, mask);
    tamper(&mut grads);

    let eval = |s: &ParamStore| -> Result<Vec<f64>> {
        let mut g = Graph::new(s);
        let loss = forward(&mut g)?;
        if !g.scalar(loss).is_finite() {
            return Err(Error::NonFinite("grad_check loss".into()));
        }
        Ok(g.loss_terms(loss))
    };

    let mut probe = store.clone();
    let mut per_param = Vec::with_capacity(store.len());
    let mut elements = 0;
    for id in store.ids() {
        let mut worst: f64 = 0.0;
        for k in options.elements(id, store.value(id).len()) {
            let original = store.value(id).data()[k];
            probe.value_mut(id).data_mut()[k] = original + epsilon;
            let plus = eval(&probe)?;
            probe.value_mut(id).data_mut()[k] = original - epsilon;
            let minus = eval(&probe)?;
            probe.value_mut(id).data_mut()[k] = original;

            // Σ (plus_i − minus_i): untouched terms cancel exactly.
            let numeric = plus.iter().zip(&minus).map(|(a, b)| a - b).sum::<f64>() / (2.0 * epsilon);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[k]);
            worst = worst.max(relative_error(analytic, numeric));
            elements += 1;
        }
        per_param.push((store.name(id).to_string(), worst));
    }
    let max_rel_error = per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        per_param,
        elements_checked: elements,
    })
}
