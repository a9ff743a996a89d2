//! Encoder, decoder and boundary networks sharing one latent space.
//!
//! All three live in a single [`ParamStore`] with parameter names prefixed by
//! `encoder.`, `decoder.` and `boundary.`, so update masks can route
//! gradients per network.

use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Graph, ParamStore, Tensor, Var};
use crate::container;
use crate::doe::{IMAGE_LEN, PARAM_LEN};
use crate::error::{Error, Result};

pub const ENCODER: &str = "encoder.";
pub const DECODER: &str = "decoder.";
pub const BOUNDARY: &str = "boundary.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub boundary_hidden: Vec<usize>,
}

impl Default for Topology {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            encoder_hidden: vec![256, 64],
            decoder_hidden: vec![64, 256],
            boundary_hidden: vec![32, 32],
        }
    }
}

impl Topology {
    /// A narrow variant with the same depth, cheap enough for exhaustive
    /// finite-difference checks.
    pub fn tiny(latent_dim: usize) -> Self {
        Self {
            latent_dim,
            encoder_hidden: vec![6, 5],
            decoder_hidden: vec![5, 6],
            boundary_hidden: vec![4, 4],
        }
    }
}

/// Fully connected stack: affine + `hidden` activation per layer, `output` on the last.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub prefix: String,
    pub sizes: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
}

impl Mlp {
    pub fn new(prefix: &str, sizes: Vec<usize>, hidden: Activation, output: Activation) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?} for `{prefix}`")));
        }
        Ok(Self {
            prefix: prefix.to_string(),
            sizes,
            hidden,
            output,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("at least two sizes")
    }

    pub fn layer_count(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}{layer}.weight", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}{layer}.bias", self.prefix)
    }

    /// Adds uniformly initialized weights in `±√(6/(fan_in+fan_out))` and zero biases.
    fn register(&self, store: &mut ParamStore, rng: Option<&mut ChaCha8Rng>) -> Result<()> {
        let mut rng = rng;
        for l in 0..self.layer_count() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let weights = match rng.as_deref_mut() {
                Some(rng) => {
                    let bound = xavier_bound(fan_in, fan_out);
                    let dist = Uniform::new_inclusive(-bound, bound);
                    let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
                    Tensor::new(vec![fan_in, fan_out], data)?
                }
                None => Tensor::zeros(&[fan_in, fan_out]),
            };
            store.insert(self.weight_name(l), weights)?;
            store.insert(self.bias_name(l), Tensor::zeros(&[fan_out]))?;
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let mut h = x;
        for l in 0..self.layer_count() {
            let w = g.param_by_name(&self.weight_name(l))?;
            let b = g.param_by_name(&self.bias_name(l))?;
            h = g.affine(h, w, b)?;
            let act = if l + 1 == self.layer_count() {
                self.output
            } else {
                self.hidden
            };
            if act != Activation::Identity {
                h = g.activation(h, act)?;
            }
        }
        Ok(h)
    }
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// The three networks and their shared parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BdNet {
    pub topology: Topology,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub boundary: Mlp,
    pub store: ParamStore,
}

impl BdNet {
    fn layouts(t: &Topology) -> Result<(Mlp, Mlp, Mlp)> {
        let chain = |first: usize, hidden: &[usize], last: usize| {
            let mut v = vec![first];
            v.extend_from_slice(hidden);
            v.push(last);
            v
        };
        let encoder = Mlp::new(
            ENCODER,
            chain(IMAGE_LEN, &t.encoder_hidden, t.latent_dim),
            Activation::Relu,
            Activation::Identity,
        )?;
        let decoder = Mlp::new(
            DECODER,
            chain(t.latent_dim, &t.decoder_hidden, IMAGE_LEN),
            Activation::Relu,
            Activation::Sigmoid,
        )?;
        let boundary = Mlp::new(
            BOUNDARY,
            chain(PARAM_LEN, &t.boundary_hidden, t.latent_dim),
            Activation::Relu,
            Activation::Identity,
        )?;
        Ok((encoder, decoder, boundary))
    }

    /// Randomly initialized networks; identical seeds give identical weights.
    pub fn init(topology: Topology, seed: u64) -> Result<Self> {
        let (encoder, decoder, boundary) = Self::layouts(&topology)?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for net in [&encoder, &decoder, &boundary] {
            net.register(&mut store, Some(&mut rng))?;
        }
        Self::from_parts(topology, encoder, decoder, boundary, store)
    }

    /// All weights and biases zero.
    pub fn zeroed(topology: Topology) -> Result<Self> {
        let (encoder, decoder, boundary) = Self::layouts(&topology)?;
        let mut store = ParamStore::new();
        for net in [&encoder, &decoder, &boundary] {
            net.register(&mut store, None)?;
        }
        Self::from_parts(topology, encoder, decoder, boundary, store)
    }

    /// Assembles networks, rejecting any disagreement about the latent width
    /// or about the image and parameter sizes.
    pub fn from_parts(topology: Topology, encoder: Mlp, decoder: Mlp, boundary: Mlp, store: ParamStore) -> Result<Self> {
        let dz = topology.latent_dim;
        let checks = [
            ("encoder input", encoder.input_dim(), IMAGE_LEN),
            ("encoder output", encoder.output_dim(), dz),
            ("decoder input", decoder.input_dim(), dz),
            ("decoder output", decoder.output_dim(), IMAGE_LEN),
            ("boundary input", boundary.input_dim(), PARAM_LEN),
            ("boundary output", boundary.output_dim(), dz),
        ];
        for (what, got, want) in checks {
            if got != want {
                return Err(Error::Config(format!("{what} has width {got}, expected {want}")));
            }
        }
        for net in [&encoder, &decoder, &boundary] {
            for l in 0..net.layer_count() {
                let (i, o) = (net.sizes[l], net.sizes[l + 1]);
                let w = store
                    .get(&net.weight_name(l))
                    .ok_or_else(|| Error::Config(format!("missing `{}`", net.weight_name(l))))?;
                let b = store
                    .get(&net.bias_name(l))
                    .ok_or_else(|| Error::Config(format!("missing `{}`", net.bias_name(l))))?;
                if w.shape() != [i, o] || b.shape() != [o] {
                    return Err(Error::Shape {
                        op: "network layer",
                        left: vec![i, o],
                        right: w.shape().to_vec(),
                    });
                }
            }
        }
        Ok(Self {
            topology,
            encoder,
            decoder,
            boundary,
            store,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.topology.latent_dim
    }

    fn run(&self, net: &Mlp, input: &Tensor) -> Result<Tensor> {
        let width = input.dims2().map(|(_, c)| c);
        if width != Some(net.input_dim()) {
            return Err(Error::Shape {
                op: "network input",
                left: vec![net.input_dim()],
                right: input.shape().to_vec(),
            });
        }
        let mut g = Graph::new(&self.store);
        let x = g.input(input.clone());
        let y = net.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }

    /// Latent codes for an `n×676` batch of normalized images.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        self.run(&self.encoder, images)
    }

    /// Images in `(0,1)` for an `n×d_z` batch of latent codes.
    pub fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        self.run(&self.decoder, latents)
    }

    /// Latent codes for an `n×5` batch of normalized parameter vectors.
    pub fn boundary_map(&self, params: &Tensor) -> Result<Tensor> {
        self.run(&self.boundary, params)
    }

    /// `decode(boundary_map(params))`.
    pub fn predict(&self, params: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(&self.store);
        let x = g.input(params.clone());
        let z = self.boundary.forward(&mut g, x)?;
        let y = self.decoder.forward(&mut g, z)?;
        Ok(g.value(y).clone())
    }
}

pub const WEIGHTS_MAGIC: &[u8; 8] = b"SBDWGHT\0";
pub const WEIGHTS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub schema_version: u32,
    /// Free-form label, normally the training variant.
    pub label: String,
    pub iteration: usize,
    pub seed: u64,
    pub topology: Topology,
    pub params: Vec<(String, Vec<usize>)>,
}

/// Writes all weights in store order after a header naming each tensor.
pub fn save_checkpoint(path: &Path, net: &BdNet, label: &str, iteration: usize, seed: u64) -> Result<()> {
    let store = &net.store;
    let header = CheckpointHeader {
        schema_version: WEIGHTS_SCHEMA_VERSION,
        label: label.to_string(),
        iteration,
        seed,
        topology: net.topology.clone(),
        params: store
            .ids()
            .map(|id| (store.name(id).to_string(), store.value(id).shape().to_vec()))
            .collect(),
    };
    let payload: Vec<f64> = store
        .ids()
        .flat_map(|id| store.value(id).data().iter().copied())
        .collect();
    container::write_file(path, WEIGHTS_MAGIC, &header, &payload)
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, BdNet)> {
    let (header, payload): (CheckpointHeader, Vec<f64>) =
        container::read_file(path, WEIGHTS_MAGIC, WEIGHTS_SCHEMA_VERSION)?;
    let mut net = BdNet::zeroed(header.topology.clone())?;
    let mut offset = 0;
    for (name, shape) in &header.params {
        let id = net
            .store
            .id(name)
            .ok_or_else(|| Error::Format(format!("checkpoint tensor `{name}` not in topology")))?;
        if net.store.value(id).shape() != shape.as_slice() {
            return Err(Error::Format(format!("checkpoint tensor `{name}` has shape {shape:?}")));
        }
        let len: usize = shape.iter().product();
        let chunk = payload
            .get(offset..offset + len)
            .ok_or_else(|| Error::Format("checkpoint payload too short".into()))?;
        net.store.value_mut(id).data_mut().copy_from_slice(chunk);
        offset += len;
    }
    if offset != payload.len() || header.params.len() != net.store.len() {
        return Err(Error::Format("checkpoint does not match its topology".into()));
    }
    Ok((header, net))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, UpdateMask};

    fn sample(rows: usize, cols: usize, salt: f64) -> Tensor {
        let data = (0..rows * cols)
            .map(|i| 0.5 + 0.4 * ((i as f64 + salt) * 0.731).sin())
            .collect();
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn zero_networks() {
        let net = BdNet::zeroed(Topology::default()).unwrap();
        let z = net.encode(&sample(2, IMAGE_LEN, 0.0)).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert_eq!(z.shape(), &[2, 16]);
        let img = net.decode(&sample(1, 16, 0.0)).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.5));
        let zb = net.boundary_map(&sample(3, PARAM_LEN, 0.0)).unwrap();
        assert!(zb.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_passes_are_deterministic() {
        let net = BdNet::init(Topology::default(), 11).unwrap();
        let x = sample(2, IMAGE_LEN, 1.0);
        assert_eq!(net.encode(&x).unwrap(), net.encode(&x).unwrap());
        let p = sample(2, PARAM_LEN, 2.0);
        assert_eq!(net.predict(&p).unwrap(), net.predict(&p).unwrap());
        assert!(net.predict(&p).unwrap().data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = BdNet::init(Topology::default(), 1).unwrap();
        let b = BdNet::init(Topology::default(), 1).unwrap();
        let c = BdNet::init(Topology::default(), 2).unwrap();
        assert_eq!(a.store, b.store);
        assert_ne!(a.store, c.store);
        for net in [&a.encoder, &a.decoder, &a.boundary] {
            for l in 0..net.layer_count() {
                let bound = xavier_bound(net.sizes[l], net.sizes[l + 1]);
                let w = a.store.get(&net.weight_name(l)).unwrap();
                assert!(w.data().iter().all(|v| v.abs() <= bound));
                assert!(w.data().iter().any(|v| v.abs() > bound * 0.5));
                let b = a.store.get(&net.bias_name(l)).unwrap();
                assert!(b.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn mismatched_latent_width_is_a_constructor_error() {
        let base = BdNet::zeroed(Topology::default()).unwrap();
        let narrow = Mlp::new(DECODER, vec![8, 64, 256, IMAGE_LEN], Activation::Relu, Activation::Sigmoid).unwrap();
        let err = BdNet::from_parts(
            base.topology.clone(),
            base.encoder.clone(),
            narrow,
            base.boundary.clone(),
            base.store.clone(),
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn wrong_input_width_is_rejected() {
        let net = BdNet::zeroed(Topology::default()).unwrap();
        assert!(matches!(
            net.encode(&sample(1, 10, 0.0)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn encoder_norm_gradient_matches_finite_differences() {
        let net = BdNet::init(Topology::tiny(3), 5).unwrap();
        let x = sample(2, IMAGE_LEN, 3.0);
        let zero = Tensor::zeros(&[2, 3]);
        let report = grad_check(&net.store, 1e-5, &UpdateMask::All, |g| {
            let xi = g.input(x.clone());
            let z = net.encoder.forward(g, xi)?;
            let o = g.constant(zero.clone());
            g.sq_err(z, o)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn decoder_and_boundary_gradients_match_finite_differences() {
        let net = BdNet::init(Topology::tiny(3), 6).unwrap();
        let target = sample(2, IMAGE_LEN, 4.0);
        let z = sample(2, 3, 5.0);
        let report = grad_check(&net.store, 1e-5, &UpdateMask::All, |g| {
            let zi = g.input(z.clone());
            let y = net.decoder.forward(g, zi)?;
            let t = g.constant(target.clone());
            g.sq_err(y, t)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");

        let p = sample(2, PARAM_LEN, 6.0);
        let report = grad_check(&net.store, 1e-5, &UpdateMask::All, |g| {
            let pi = g.input(p.clone());
            let z = net.boundary.forward(g, pi)?;
            let y = net.decoder.forward(g, z)?;
            let t = g.constant(target.clone());
            g.sq_err(y, t)
        })
        .unwrap();
        assert!(report.max_for_prefix(BOUNDARY) < 1e-4, "{report:?}");
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let net = BdNet::init(Topology::tiny(4), 9).unwrap();
        save_checkpoint(&path, &net, "dc_bd", 42, 9).unwrap();
        let (header, back) = load_checkpoint(&path).unwrap();
        assert_eq!(header.iteration, 42);
        assert_eq!(header.label, "dc_bd");
        assert_eq!(back, net);
    }
}
