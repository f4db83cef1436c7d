//! Seeded ensembles of the uncontrolled capacity process `C^0` on a time
//! grid, under the original measure `P` or the tilted measure used by the
//! boundary integral equation.
//!
//! `log C^0` is Gaussian with independent increments, so paths are sampled
//! from the exact per-cell law (no Euler discretization): over a cell the
//! increment has variance `int sigma_c^2` and mean
//!
//! * `-int (mu_c + sigma_c^2 / 2)` under the original measure,
//! * `+int (sigma_c^2 / 2 - mu_c)` under the tilted measure.
//!
//! The tilted drift follows from applying the measure change
//! `W = W~ + int sigma_c dt` (the exponential-martingale density) to the
//! `log C^0` dynamics; this derivation is implementer-derived and the tests
//! pin its first two moments.
//!
//! Alongside each increment the ensemble stores the within-cell minimum of
//! `log C^0`, sampled exactly from the Brownian-bridge law given the cell
//! endpoints: `min_rel = (d - sqrt(d^2 - 2 s^2 ln U)) / 2` where `d` is the
//! log increment and `s^2` the cell variance. Running suprema built from
//! these cell minima are free of grid-monitoring bias.

use std::io::Write;

use rand::distributions::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{CoreError, Result};
use crate::model::{ModelParams, PiecewiseConstant};

/// Strictly increasing knots `t_0 = 0 < t_1 < ... < t_N = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    knots: Vec<f64>,
}

impl TimeGrid {
    /// Uniform grid with `n_steps` cells on `[0, horizon]`.
    pub fn uniform(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(CoreError::domain(format!(
                "horizon = {horizon} must be finite and > 0"
            )));
        }
        if n_steps == 0 {
            return Err(CoreError::domain("n_steps must be >= 1".to_string()));
        }
        let dt = horizon / n_steps as f64;
        let mut knots: Vec<f64> = (0..=n_steps).map(|i| i as f64 * dt).collect();
        knots[n_steps] = horizon;
        Ok(Self { knots })
    }

    /// Grid from explicit knots; must start at 0 and be strictly increasing.
    pub fn from_knots(knots: Vec<f64>) -> Result<Self> {
        if knots.len() < 2 || knots[0] != 0.0 {
            return Err(CoreError::domain(
                "grid needs t_0 = 0 and at least one step".to_string(),
            ));
        }
        if knots.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(CoreError::domain(
                "grid knots must be strictly increasing".to_string(),
            ));
        }
        Ok(Self { knots })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn knot(&self, i: usize) -> f64 {
        self.knots[i]
    }

    /// Number of cells `N`.
    pub fn n_steps(&self) -> usize {
        self.knots.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        *self.knots.last().unwrap()
    }

    pub fn dt(&self, i: usize) -> f64 {
        self.knots[i + 1] - self.knots[i]
    }

    /// True when all cells have (float-)equal width.
    pub fn is_uniform(&self) -> bool {
        let dt0 = self.dt(0);
        (0..self.n_steps()).all(|i| (self.dt(i) - dt0).abs() <= 1e-12 * dt0)
    }
}

/// Probability measure the ensemble is sampled under.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Measure {
    Original,
    Tilted,
}

/// Simulation options beyond the required arguments.
#[derive(Debug, Clone, Copy, Default)]
pub struct SimulationOptions {
    /// Pair path `2j+1` with the sign-flipped increments of path `2j`.
    pub antithetic: bool,
}

/// A seeded matrix of `C^0` samples on a grid, plus the per-cell
/// Brownian-bridge minima used for exact running suprema.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    grid: TimeGrid,
    measure: Measure,
    seed: u64,
    n_paths: usize,
    antithetic: bool,
    /// Row-major `n_paths x (N + 1)`: `C^0` at each knot, `values[p][0] = 1`.
    values: Vec<f64>,
    /// Row-major `n_paths x N`: `exp(-min_rel)` per cell, `>= 1`; the cell
    /// supremum of `1 / C^0(u)` equals `bridge[p][m] / C^0(t_m)`.
    bridge: Vec<f64>,
}

/// Simulates an ensemble of `C^0` paths.
pub fn simulate_c0(
    params: &ModelParams,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    measure: Measure,
) -> Result<PathEnsemble> {
    simulate_c0_with(params, grid, n_paths, seed, measure, SimulationOptions::default())
}

/// Simulates an ensemble with explicit options.
pub fn simulate_c0_with(
    params: &ModelParams,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    measure: Measure,
    options: SimulationOptions,
) -> Result<PathEnsemble> {
    params.validate()?;
    if n_paths == 0 {
        return Err(CoreError::domain("n_paths must be >= 1".to_string()));
    }
    let t_last = grid.horizon();
    if t_last > params.horizon * (1.0 + 1e-12) {
        return Err(CoreError::domain(format!(
            "grid horizon {t_last} exceeds model horizon {}",
            params.horizon
        )));
    }

    let n = grid.n_steps();
    let sigma_sq = PiecewiseConstant::combine(&[&params.sigma_c], |v| v[0] * v[0]);

    // Exact drift accumulated to each knot and per-cell noise scale.
    let mut drift_to_knot = Vec::with_capacity(n + 1);
    for &t in grid.knots() {
        let mi = params.mu_c.integral(0.0, t);
        let vi = sigma_sq.integral(0.0, t);
        let d = match measure {
            Measure::Original => -(mi + 0.5 * vi),
            Measure::Tilted => 0.5 * vi - mi,
        };
        drift_to_knot.push(d);
    }
    let cell_sd: Vec<f64> = (0..n)
        .map(|i| sigma_sq.integral(grid.knot(i), grid.knot(i + 1)).sqrt())
        .collect();
    let cell_var: Vec<f64> = cell_sd.iter().map(|s| s * s).collect();

    let mut values = vec![0.0; n_paths * (n + 1)];
    let mut bridge = vec![0.0; n_paths * n];

    values
        .par_chunks_mut(n + 1)
        .zip(bridge.par_chunks_mut(n))
        .enumerate()
        .for_each(|(p, (row, brow))| {
            let (stream, flip) = if options.antithetic {
                (p as u64 / 2, p % 2 == 1)
            } else {
                (p as u64, false)
            };
            let mut rng = path_rng(seed, stream);
            let mut noise = 0.0;
            row[0] = 1.0;
            for i in 0..n {
                let z: f64 = rng.sample(StandardNormal);
                let z = if flip { -z } else { z };
                let u: f64 = rng.sample(Open01);
                let d_drift = drift_to_knot[i + 1] - drift_to_knot[i];
                let d_log = d_drift + cell_sd[i] * z;
                noise += cell_sd[i] * z;
                row[i + 1] = (drift_to_knot[i + 1] + noise).exp();
                // exact Brownian-bridge minimum of the cell, relative to its start
                let min_rel = 0.5 * (d_log - (d_log * d_log - 2.0 * cell_var[i] * u.ln()).sqrt());
                brow[i] = (-min_rel).exp();
            }
        });

    Ok(PathEnsemble {
        grid: grid.clone(),
        measure,
        seed,
        n_paths,
        antithetic: options.antithetic,
        values,
        bridge,
    })
}

fn path_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&stream.to_le_bytes());
    key[16..24].copy_from_slice(b"basecap\0");
    ChaCha8Rng::from_seed(key)
}

impl PathEnsemble {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn measure(&self) -> Measure {
        self.measure
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn antithetic(&self) -> bool {
        self.antithetic
    }

    /// `C^0` of path `p` at knot `i`.
    #[inline]
    pub fn value(&self, p: usize, i: usize) -> f64 {
        self.values[p * (self.grid.n_steps() + 1) + i]
    }

    /// The row of `C^0` values of path `p`.
    #[inline]
    pub fn path(&self, p: usize) -> &[f64] {
        let w = self.grid.n_steps() + 1;
        &self.values[p * w..(p + 1) * w]
    }

    /// Bridge factors (`>= 1`) of path `p`, one per cell.
    #[inline]
    pub fn bridge_factors(&self, p: usize) -> &[f64] {
        let n = self.grid.n_steps();
        &self.bridge[p * n..(p + 1) * n]
    }

    /// `C^0(t_j) / C^0(t_i)` along path `p`; equals 1 when `i == j`.
    pub fn ratio(&self, p: usize, i: usize, j: usize) -> Result<f64> {
        let n = self.grid.n_steps();
        if p >= self.n_paths || i > n || j > n {
            return Err(CoreError::domain(format!(
                "index out of range: path {p}, knots {i}, {j} (n_paths {}, N {n})",
                self.n_paths
            )));
        }
        if i > j {
            return Err(CoreError::domain(format!("need i <= j, got {i} > {j}")));
        }
        Ok(self.value(p, j) / self.value(p, i))
    }

    /// Debug dump, one row per (path, knot): `path,t,c0`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "path,t,c0")?;
        for p in 0..self.n_paths {
            for (i, &t) in self.grid.knots().iter().enumerate() {
                writeln!(w, "{p},{t},{}", self.value(p, i))?;
            }
        }
        Ok(())
    }
}
