//! Permeability → Darcy solve → restriction, and batch dataset generation.

use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::darcy::{restrict, solve_with_source, source_field, SourceSpec};
use crate::error::{Error, Result};
use crate::random_field::{kle_decompose, sample_xi, ExpCovSpec, Grid2D, KLExpansion};

/// Parameters of the random permeability field and the flow problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    /// Cells per side of the solve grid.
    pub grid: usize,
    /// Cells per side of the output grid.
    pub out_grid: usize,
    pub k_xi: usize,
    /// Correlation length, the same in both directions.
    pub lambda: f64,
    /// Standard deviation `s_G` of the log-permeability.
    pub sg: f64,
    pub mean: f64,
    pub rate: f64,
    pub width: f64,
}

impl Default for FieldSpec {
    fn default() -> Self {
        Self {
            grid: 64,
            out_grid: 32,
            k_xi: 50,
            lambda: 0.1,
            sg: 1.0,
            mean: 0.0,
            rate: 10.0,
            width: 0.125,
        }
    }
}

impl FieldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid < 2 || self.out_grid < 1 || self.out_grid > self.grid || !self.grid.is_multiple_of(self.out_grid) {
            return Err(Error::InvalidArgument(format!(
                "output grid {} must divide the solve grid {}",
                self.out_grid, self.grid
            )));
        }
        if self.k_xi == 0 || self.k_xi > self.grid * self.grid {
            return Err(Error::InvalidArgument(format!("KLE terms must be in 1..={}", self.grid * self.grid)));
        }
        ExpCovSpec::new(self.sg * self.sg, [self.lambda, self.lambda], self.mean)?;
        SourceSpec::new(self.rate, self.width)?;
        Ok(())
    }

    pub fn cov_spec(&self) -> Result<ExpCovSpec> {
        ExpCovSpec::new(self.sg * self.sg, [self.lambda, self.lambda], self.mean)
    }

    pub fn solve_grid(&self) -> Result<Grid2D> {
        Grid2D::square(self.grid)
    }

    pub fn output_grid(&self) -> Result<Grid2D> {
        Grid2D::square(self.out_grid)
    }
}

/// Output field of the flow problem used as a regression target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    Pressure,
    VelocityX,
    VelocityY,
}

impl Target {
    pub fn name(self) -> &'static str {
        match self {
            Target::Pressure => "p",
            Target::VelocityX => "ux",
            Target::VelocityY => "uy",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "p" => Ok(Target::Pressure),
            "ux" => Ok(Target::VelocityX),
            "uy" => Ok(Target::VelocityY),
            _ => Err(Error::InvalidArgument(format!("unknown target {s:?}, expected p, ux or uy"))),
        }
    }
}

/// One simulator run on the output grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub permeability: Vec<f64>,
    pub pressure: Vec<f64>,
    pub vel_x: Vec<f64>,
    pub vel_y: Vec<f64>,
}

impl Sample {
    pub fn field(&self, t: Target) -> &[f64] {
        match t {
            Target::Pressure => &self.pressure,
            Target::VelocityX => &self.vel_x,
            Target::VelocityY => &self.vel_y,
        }
    }
}

/// The full pipeline `ξ ↦ K ↦ (p, u) ↦ restricted fields`.
#[derive(Clone, Debug)]
pub struct Simulator {
    pub spec: FieldSpec,
    pub kle: KLExpansion,
    source: Vec<f64>,
}

impl Simulator {
    pub fn new(spec: &FieldSpec) -> Result<Self> {
        spec.validate()?;
        let grid = spec.solve_grid()?;
        let kle = kle_decompose(grid, &spec.cov_spec()?, spec.k_xi)?;
        let source = source_field(grid, &SourceSpec::new(spec.rate, spec.width)?);
        Ok(Self {
            spec: spec.clone(),
            kle,
            source,
        })
    }

    /// Solves for a given permeability field on the solve grid.
    pub fn run_field(&self, k: &[f64]) -> Result<Sample> {
        let grid = self.kle.grid;
        let sol = solve_with_source(k, grid, &self.source)?;
        let o = self.spec.out_grid;
        Ok(Sample {
            permeability: k.to_vec(),
            pressure: restrict(&sol.pressure, grid, o, o)?,
            vel_x: restrict(&sol.vel_x, grid, o, o)?,
            vel_y: restrict(&sol.vel_y, grid, o, o)?,
        })
    }

    pub fn run(&self, xi: &[f64]) -> Result<Sample> {
        self.run_field(&self.kle.permeability(xi)?)
    }
}

/// Generator for sample `index` of a seeded batch: one ChaCha stream per sample.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// `ξ` vectors of a seeded batch, one row per sample.
pub fn xi_batch(k_xi: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    (0..n).map(|i| sample_xi(k_xi, &mut sample_rng(seed, i as u64))).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `n × grid²` permeability fields.
    pub permeability: DMatrix<f64>,
    /// `n × out_grid²` fields.
    pub pressure: DMatrix<f64>,
    pub vel_x: DMatrix<f64>,
    pub vel_y: DMatrix<f64>,
}

impl Dataset {
    pub fn target(&self, t: Target) -> &DMatrix<f64> {
        match t {
            Target::Pressure => &self.pressure,
            Target::VelocityX => &self.vel_x,
            Target::VelocityY => &self.vel_y,
        }
    }
}

fn rows_to_matrix(rows: &[&[f64]]) -> DMatrix<f64> {
    let cols = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j])
}

/// Runs the simulator on `n` seeded inputs. Samples are solved in parallel
/// and assembled in index order.
pub fn generate(sim: &Simulator, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be positive".into()));
    }
    let xis = xi_batch(sim.kle.k_xi(), n, seed);
    let samples: Vec<Sample> = xis
        .par_iter()
        .enumerate()
        .map(|(i, xi)| sim.run(xi).map_err(|e| e.in_sample(i)))
        .collect::<Result<_>>()?;
    let pick = |f: fn(&Sample) -> &[f64]| rows_to_matrix(&samples.iter().map(f).collect::<Vec<_>>());
    Ok(Dataset {
        permeability: pick(|s| &s.permeability),
        pressure: pick(|s| &s.pressure),
        vel_x: pick(|s| &s.vel_x),
        vel_y: pick(|s| &s.vel_y),
    })
}
