//! Full-factorial design of experiments over the package parameters, and the
//! analytic stress surrogate that produces one image per case.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IMAGE_WIDTH: usize = 26;
pub const IMAGE_HEIGHT: usize = 26;
pub const IMAGE_LEN: usize = IMAGE_WIDTH * IMAGE_HEIGHT;
/// Length of a normalized parameter vector.
pub const PARAM_LEN: usize = 5;

/// Interface layer a stress image is taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layer {
    Overmold,
    Uf,
    Rdl,
}

impl Layer {
    pub const ALL: [Layer; 3] = [Layer::Overmold, Layer::Uf, Layer::Rdl];

    pub fn index(self) -> usize {
        match self {
            Layer::Overmold => 0,
            Layer::Uf => 1,
            Layer::Rdl => 2,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Layer::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Config(format!("layer index {i} is not 0, 1 or 2")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Layer::Overmold => "overmold",
            Layer::Uf => "uf",
            Layer::Rdl => "rdl",
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Layer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "overmold" | "0" => Ok(Layer::Overmold),
            "uf" | "underfill" | "1" => Ok(Layer::Uf),
            "rdl" | "2" => Ok(Layer::Rdl),
            other => Err(Error::Config(format!(
                "unknown layer `{other}` (expected overmold, uf or rdl)"
            ))),
        }
    }
}

/// Closed interval a design variable may take.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    fn contains(self, v: f64) -> bool {
        v.is_finite() && v >= self.min && v <= self.max
    }

    fn unit(self, v: f64) -> f64 {
        (v - self.min) / (self.max - self.min)
    }
}

pub const EMC_MODULUS_RANGE: Range = Range::new(5.0, 30.0);
pub const EMC_CTE_RANGE: Range = Range::new(5.0, 20.0);
pub const DIE_SIZE_RANGE: Range = Range::new(0.5, 1.8);
pub const GAP_SIZE_RANGE: Range = Range::new(0.2, 1.0);

/// One simulation case: EMC modulus (GPa), EMC CTE (ppm/°C), die side (mm),
/// die-to-die gap (mm) and the layer the image is taken at.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub emc_modulus: f64,
    pub emc_cte: f64,
    pub die_size: f64,
    pub gap_size: f64,
    pub layer: Layer,
}

impl ParamVector {
    pub fn new(emc_modulus: f64, emc_cte: f64, die_size: f64, gap_size: f64, layer: Layer) -> Self {
        Self {
            emc_modulus,
            emc_cte,
            die_size,
            gap_size,
            layer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("emc_modulus", self.emc_modulus, EMC_MODULUS_RANGE),
            ("emc_cte", self.emc_cte, EMC_CTE_RANGE),
            ("die_size", self.die_size, DIE_SIZE_RANGE),
            ("gap_size", self.gap_size, GAP_SIZE_RANGE),
        ];
        for (name, v, range) in checks {
            if !range.contains(v) {
                return Err(Error::OutOfRange(name, v));
            }
        }
        Ok(())
    }

    /// Min-max scaled into `[0,1]^5`; the layer maps to `index / 2`.
    pub fn normalized(&self) -> Result<[f64; PARAM_LEN]> {
        self.validate()?;
        Ok([
            EMC_MODULUS_RANGE.unit(self.emc_modulus),
            EMC_CTE_RANGE.unit(self.emc_cte),
            DIE_SIZE_RANGE.unit(self.die_size),
            GAP_SIZE_RANGE.unit(self.gap_size),
            self.layer.index() as f64 / 2.0,
        ])
    }
}

/// Level table for the full-factorial design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoeGrid {
    pub emc_modulus: Vec<f64>,
    pub emc_cte: Vec<f64>,
    pub die_size: Vec<f64>,
    pub gap_size: Vec<f64>,
    pub layers: Vec<Layer>,
}

impl Default for DoeGrid {
    fn default() -> Self {
        Self {
            emc_modulus: vec![5.0, 11.0, 17.0, 23.0, 30.0],
            emc_cte: vec![5.0, 9.0, 12.0, 16.0, 20.0],
            die_size: vec![0.5, 0.8, 1.2, 1.5, 1.8],
            gap_size: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            layers: Layer::ALL.to_vec(),
        }
    }
}

impl DoeGrid {
    /// Number of cases per layer.
    pub fn cases_per_layer(&self) -> usize {
        self.emc_modulus.len() * self.emc_cte.len() * self.die_size.len() * self.gap_size.len()
    }

    pub fn len(&self) -> usize {
        self.cases_per_layer() * self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> Result<()> {
        let lists = [
            ("emc_modulus", &self.emc_modulus, EMC_MODULUS_RANGE),
            ("emc_cte", &self.emc_cte, EMC_CTE_RANGE),
            ("die_size", &self.die_size, DIE_SIZE_RANGE),
            ("gap_size", &self.gap_size, GAP_SIZE_RANGE),
        ];
        for (name, levels, range) in lists {
            if levels.is_empty() {
                return Err(Error::Config(format!("empty level list for `{name}`")));
            }
            if let Some(&bad) = levels.iter().find(|&&v| !range.contains(v)) {
                return Err(Error::OutOfRange(name, bad));
            }
        }
        if self.layers.is_empty() {
            return Err(Error::Config("empty level list for `layers`".into()));
        }
        Ok(())
    }

    /// Cartesian product of all levels, lexicographic in
    /// `(layer, emc_modulus, emc_cte, die_size, gap_size)`.
    pub fn enumerate(&self) -> Result<Vec<ParamVector>> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.len());
        for &layer in &self.layers {
            for &e in &self.emc_modulus {
                for &c in &self.emc_cte {
                    for &d in &self.die_size {
                        for &g in &self.gap_size {
                            out.push(ParamVector::new(e, c, d, g, layer));
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Surrogate shape constants for one layer: `σ = A·m·exp(−(δ/ℓ)²) + B·m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerConstants {
    pub amplitude: f64,
    pub length_mm: f64,
    pub far_field: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConstants {
    /// Side of the square imaged window, in mm.
    pub window_mm: f64,
    pub overmold: LayerConstants,
    pub uf: LayerConstants,
    pub rdl: LayerConstants,
}

impl Default for SurrogateConstants {
    fn default() -> Self {
        Self {
            window_mm: 5.0,
            overmold: LayerConstants {
                amplitude: 100.0,
                length_mm: 0.15,
                far_field: 10.0,
            },
            uf: LayerConstants {
                amplitude: 40.0,
                length_mm: 0.40,
                far_field: 20.0,
            },
            rdl: LayerConstants {
                amplitude: 15.0,
                length_mm: 0.80,
                far_field: 25.0,
            },
        }
    }
}

impl SurrogateConstants {
    pub fn layer(&self, layer: Layer) -> LayerConstants {
        match layer {
            Layer::Overmold => self.overmold,
            Layer::Uf => self.uf,
            Layer::Rdl => self.rdl,
        }
    }

    /// Physical `(x, y)` of a pixel center, in mm, origin at the window center.
    pub fn pixel_position(&self, row: usize, col: usize) -> (f64, f64) {
        let u = (col as f64 + 0.5) / IMAGE_WIDTH as f64;
        let v = (row as f64 + 0.5) / IMAGE_HEIGHT as f64;
        ((u - 0.5) * self.window_mm, (v - 0.5) * self.window_mm)
    }

    /// Raw stress field (MPa) for one case.
    pub fn synthesize(&self, p: &ParamVector) -> Result<StressImage> {
        p.validate()?;
        let k = self.layer(p.layer);
        let material = (p.emc_modulus / 30.0) * (p.emc_cte / 20.0);
        let mut values = Vec::with_capacity(IMAGE_LEN);
        for row in 0..IMAGE_HEIGHT {
            for col in 0..IMAGE_WIDTH {
                let (x, y) = self.pixel_position(row, col);
                let delta = die_boundary_distance(x, y, p.die_size, p.gap_size);
                let ratio = delta / k.length_mm;
                values.push(k.amplitude * material * (-ratio * ratio).exp() + k.far_field * material);
            }
        }
        Ok(StressImage {
            layer: p.layer,
            values,
        })
    }
}

/// Distance from `(x, y)` to the nearest edge of either die (zero on an edge,
/// positive inside and outside).
///
/// Dies are squares of side `die` centered at `(±(gap/2 + die/2), 0)`.
pub fn die_boundary_distance(x: f64, y: f64, die: f64, gap: f64) -> f64 {
    let half = die / 2.0;
    let offset = gap / 2.0 + half;
    [-offset, offset]
        .into_iter()
        .map(|cx| {
            let dx = (x - cx).abs() - half;
            let dy = y.abs() - half;
            if dx <= 0.0 && dy <= 0.0 {
                -dx.max(dy)
            } else {
                dx.max(0.0).hypot(dy.max(0.0))
            }
        })
        .fold(f64::INFINITY, f64::min)
}

/// A 26×26 stress field, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StressImage {
    pub layer: Layer,
    pub values: Vec<f64>,
}

impl StressImage {
    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Population variance of the pixel values.
    pub fn variance(&self) -> f64 {
        let n = self.values.len() as f64;
        let mean = self.values.iter().sum::<f64>() / n;
        self.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_has_625_cases_per_layer() {
        let cases = DoeGrid::default().enumerate().unwrap();
        assert_eq!(cases.len(), 1875);
        for layer in Layer::ALL {
            assert_eq!(cases.iter().filter(|c| c.layer == layer).count(), 625);
        }
        assert_eq!(cases[0], ParamVector::new(5.0, 5.0, 0.5, 0.2, Layer::Overmold));
        assert_eq!(cases[1].gap_size, 0.4);
        assert_eq!(cases[625].layer, Layer::Uf);
    }

    #[test]
    fn single_level_grid_gives_one_case_per_layer() {
        let grid = DoeGrid {
            emc_modulus: vec![17.0],
            emc_cte: vec![12.0],
            die_size: vec![1.2],
            gap_size: vec![0.6],
            layers: Layer::ALL.to_vec(),
        };
        assert_eq!(grid.enumerate().unwrap().len(), 3);
    }

    #[test]
    fn empty_level_list_is_rejected() {
        let grid = DoeGrid {
            die_size: vec![],
            ..DoeGrid::default()
        };
        assert!(matches!(grid.enumerate(), Err(Error::Config(_))));
    }

    #[test]
    fn normalization_examples() {
        let lo = ParamVector::new(5.0, 5.0, 0.5, 0.2, Layer::Overmold);
        assert_eq!(lo.normalized().unwrap(), [0.0; 5]);
        let hi = ParamVector::new(30.0, 20.0, 1.8, 1.0, Layer::Rdl);
        assert_eq!(hi.normalized().unwrap(), [1.0; 5]);
        let mid = ParamVector::new(17.0, 12.0, 1.2, 0.6, Layer::Uf).normalized().unwrap();
        let expected = [12.0 / 25.0, 7.0 / 15.0, 0.7 / 1.3, 0.5, 0.5];
        for (a, b) in mid.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        let bad = ParamVector::new(31.0, 12.0, 1.2, 0.6, Layer::Uf);
        assert!(matches!(bad.normalized(), Err(Error::OutOfRange("emc_modulus", _))));
    }

    #[test]
    fn boundary_distance_geometry() {
        // die 1.0, gap 0.4: right die spans x ∈ [0.2, 1.2], y ∈ [-0.5, 0.5].
        assert!(die_boundary_distance(0.2, 0.0, 1.0, 0.4).abs() < 1e-12);
        assert!((die_boundary_distance(0.7, 0.0, 1.0, 0.4) - 0.5).abs() < 1e-12);
        assert!((die_boundary_distance(0.0, 0.0, 1.0, 0.4) - 0.2).abs() < 1e-12);
        assert!((die_boundary_distance(1.5, 0.9, 1.0, 0.4) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn far_field_pixel_is_background_only() {
        let k = SurrogateConstants::default();
        let p = ParamVector::new(5.0, 5.0, 0.5, 0.2, Layer::Rdl);
        let img = k.synthesize(&p).unwrap();
        let (far_idx, _) = (0..IMAGE_LEN)
            .map(|i| {
                let (x, y) = k.pixel_position(i / IMAGE_WIDTH, i % IMAGE_WIDTH);
                (i, die_boundary_distance(x, y, p.die_size, p.gap_size))
            })
            .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
        let material = (5.0 / 30.0) * (5.0 / 20.0);
        let background = 25.0 * material;
        assert!((img.values[far_idx] - background).abs() / background < 1e-5);
    }

    #[test]
    fn overmold_peak_exceeds_rdl_peak() {
        let k = SurrogateConstants::default();
        let om = k
            .synthesize(&ParamVector::new(30.0, 20.0, 1.8, 1.0, Layer::Overmold))
            .unwrap();
        let rdl = k
            .synthesize(&ParamVector::new(30.0, 20.0, 1.8, 1.0, Layer::Rdl))
            .unwrap();
        // m = 1: overmold peaks at 100 + 10 on a die edge; RDL at 15 + 25.
        assert!(om.max() > rdl.max());
        assert!((om.max() - 110.0).abs() < 5.0);
        assert!(rdl.max() <= 40.0 + 1e-9);
    }

    #[test]
    fn synthesis_is_deterministic() {
        let k = SurrogateConstants::default();
        let p = ParamVector::new(11.0, 16.0, 0.8, 0.4, Layer::Uf);
        assert_eq!(k.synthesize(&p).unwrap(), k.synthesize(&p).unwrap());
    }
}
