//! Gaussian states of a few bosonic modes.
//!
//! Quadratures are ordered mode by mode, `(x_0, p_0, x_1, p_1, ...)`, and every
//! covariance entry is in vacuum units: the vacuum has covariance `I`.
//! All transforms return a new state and leave the input untouched.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};

/// Relative tolerance for the symmetry invariant.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Slack allowed below 1 for symplectic eigenvalues of a physical state.
pub const PHYSICALITY_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianState {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    mode_labels: Vec<String>,
}

/// Pure-loss channel: a beamsplitter of intensity transmission `t` mixing
/// vacuum into one mode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossChannel {
    transmission: f64,
    target_mode: usize,
}

impl LossChannel {
    pub fn new(transmission: f64, target_mode: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&transmission) {
            return invalid(format!("transmission {transmission} outside [0, 1]"));
        }
        Ok(Self { transmission, target_mode })
    }

    pub fn transmission(&self) -> f64 {
        self.transmission
    }

    pub fn target_mode(&self) -> usize {
        self.target_mode
    }
}

/// Two-mode squeezing between `mode_a` and `mode_b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SqueezeParams {
    r: f64,
    mode_a: usize,
    mode_b: usize,
}

impl SqueezeParams {
    pub fn new(r: f64, mode_a: usize, mode_b: usize) -> Result<Self> {
        if !(r >= 0.0) || !r.is_finite() {
            return invalid(format!("squeeze parameter {r} must be finite and >= 0"));
        }
        if mode_a == mode_b {
            return invalid("two-mode squeeze needs two distinct modes");
        }
        Ok(Self { r, mode_a, mode_b })
    }

    pub fn r(&self) -> f64 {
        self.r
    }
}

/// Second moments of one mode, plus its cross-covariances with every other mode.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeStats {
    pub var_x: f64,
    pub var_p: f64,
    pub cov_xp: f64,
    pub cross: Vec<CrossCovariance>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossCovariance {
    pub other_mode: usize,
    pub xx: f64,
    pub xp: f64,
    pub px: f64,
    pub pp: f64,
}

impl GaussianState {
    /// Builds a state from raw moments, checking shape, symmetry and the
    /// uncertainty principle.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, mode_labels: Vec<String>) -> Result<Self> {
        let n = mode_labels.len();
        if n == 0 {
            return invalid("a Gaussian state needs at least one mode");
        }
        if mean.len() != 2 * n || cov.nrows() != 2 * n || cov.ncols() != 2 * n {
            return invalid(format!(
                "moment shapes (mean {}, cov {}x{}) do not match {n} modes",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            ));
        }
        let state = Self { mean, cov, mode_labels };
        state.check_symmetric()?;
        let min = state
            .symplectic_eigenvalues()?
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        if min < 1.0 - PHYSICALITY_TOL {
            return Err(Error::InternalConsistency(format!(
                "covariance violates the uncertainty principle (min symplectic eigenvalue {min})"
            )));
        }
        Ok(state)
    }

    pub fn vacuum(n_modes: usize) -> Result<Self> {
        let labels = (0..n_modes).map(|k| format!("mode{k}")).collect();
        Self::vacuum_labeled(labels)
    }

    pub fn vacuum_labeled(mode_labels: Vec<String>) -> Result<Self> {
        let n = mode_labels.len();
        if n == 0 {
            return invalid("n_modes must be >= 1");
        }
        Ok(Self {
            mean: DVector::zeros(2 * n),
            cov: DMatrix::identity(2 * n, 2 * n),
            mode_labels,
        })
    }

    pub fn n_modes(&self) -> usize {
        self.mode_labels.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn mode_labels(&self) -> &[String] {
        &self.mode_labels
    }

    pub fn mode_index(&self, label: &str) -> Option<usize> {
        self.mode_labels.iter().position(|l| l == label)
    }

    fn check_mode(&self, mode: usize) -> Result<()> {
        if mode >= self.n_modes() {
            return invalid(format!("mode index {mode} out of range for {} modes", self.n_modes()));
        }
        Ok(())
    }

    fn check_symmetric(&self) -> Result<()> {
        let d = self.cov.nrows();
        for i in 0..d {
            for j in (i + 1)..d {
                let (a, b) = (self.cov[(i, j)], self.cov[(j, i)]);
                let scale = a.abs().max(b.abs()).max(1.0);
                if (a - b).abs() > SYMMETRY_TOL * scale || !a.is_finite() {
                    return Err(Error::InternalConsistency(format!(
                        "covariance not symmetric at ({i}, {j}): {a} vs {b}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Applies `r -> S r`, `cov -> S cov S^T` and re-symmetrizes.
    fn transformed(&self, s: &DMatrix<f64>) -> Self {
        let cov = s * &self.cov * s.transpose();
        let cov = (&cov + cov.transpose()) * 0.5;
        Self {
            mean: s * &self.mean,
            cov,
            mode_labels: self.mode_labels.clone(),
        }
    }

    /// Two-mode squeezer. On vacuum it produces x-anticorrelated and
    /// p-correlated arms: `cov(x_a, x_b) = -sinh 2r`, `cov(p_a, p_b) = +sinh 2r`.
    pub fn two_mode_squeeze(&self, p: SqueezeParams) -> Result<Self> {
        self.check_mode(p.mode_a)?;
        self.check_mode(p.mode_b)?;
        let d = 2 * self.n_modes();
        let (c, s) = (p.r.cosh(), p.r.sinh());
        let mut m = DMatrix::identity(d, d);
        let (a, b) = (2 * p.mode_a, 2 * p.mode_b);
        m[(a, a)] = c;
        m[(a + 1, a + 1)] = c;
        m[(b, b)] = c;
        m[(b + 1, b + 1)] = c;
        // x_a' = c x_a - s x_b, p_a' = c p_a + s p_b (and symmetrically for b)
        m[(a, b)] = -s;
        m[(a + 1, b + 1)] = s;
        m[(b, a)] = -s;
        m[(b + 1, a + 1)] = s;
        Ok(self.transformed(&m))
    }

    /// Rotates the quadratures of one mode by `phi` (counter-clockwise in the x-p plane).
    pub fn phase_rotation(&self, mode: usize, phi: f64) -> Result<Self> {
        self.check_mode(mode)?;
        let d = 2 * self.n_modes();
        let mut m = DMatrix::identity(d, d);
        let k = 2 * mode;
        let (s, c) = phi.sin_cos();
        m[(k, k)] = c;
        m[(k, k + 1)] = -s;
        m[(k + 1, k)] = s;
        m[(k + 1, k + 1)] = c;
        Ok(self.transformed(&m))
    }

    /// Shifts the quadrature means of one mode.
    pub fn displace(&self, mode: usize, dx: f64, dp: f64) -> Result<Self> {
        self.check_mode(mode)?;
        let mut out = self.clone();
        out.mean[2 * mode] += dx;
        out.mean[2 * mode + 1] += dp;
        Ok(out)
    }

    /// Pure loss: target variances `V -> t V + (1 - t)`, cross terms scale by `sqrt(t)`.
    pub fn apply_loss(&self, ch: LossChannel) -> Result<Self> {
        self.check_mode(ch.target_mode)?;
        let t = ch.transmission;
        let k = 2 * ch.target_mode;
        let g = t.sqrt();
        let mut out = self.clone();
        let d = self.cov.nrows();
        for i in [k, k + 1] {
            out.mean[i] *= g;
            for j in 0..d {
                out.cov[(i, j)] *= g;
                out.cov[(j, i)] *= g;
            }
            out.cov[(i, i)] += 1.0 - t;
        }
        out.cov = (&out.cov + out.cov.transpose()) * 0.5;
        Ok(out)
    }

    pub fn quadrature_stats(&self, mode: usize) -> Result<ModeStats> {
        self.check_mode(mode)?;
        let k = 2 * mode;
        let cross = (0..self.n_modes())
            .filter(|&o| o != mode)
            .map(|o| {
                let j = 2 * o;
                CrossCovariance {
                    other_mode: o,
                    xx: self.cov[(k, j)],
                    xp: self.cov[(k, j + 1)],
                    px: self.cov[(k + 1, j)],
                    pp: self.cov[(k + 1, j + 1)],
                }
            })
            .collect();
        Ok(ModeStats {
            var_x: self.cov[(k, k)],
            var_p: self.cov[(k + 1, k + 1)],
            cov_xp: self.cov[(k, k + 1)],
            cross,
        })
    }

    /// The N symplectic eigenvalues, ascending. They are the moduli of the
    /// eigenvalues of `i Omega cov`, each of which appears twice.
    pub fn symplectic_eigenvalues(&self) -> Result<Vec<f64>> {
        self.check_symmetric()?;
        let n = self.n_modes();
        let mut omega = DMatrix::zeros(2 * n, 2 * n);
        for k in 0..n {
            omega[(2 * k, 2 * k + 1)] = 1.0;
            omega[(2 * k + 1, 2 * k)] = -1.0;
        }
        let mut moduli: Vec<f64> = (omega * &self.cov)
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .collect();
        moduli.sort_by(f64::total_cmp);
        Ok(moduli.chunks(2).map(|pair| 0.5 * (pair[0] + pair[1])).collect())
    }

    pub fn is_physical(&self) -> bool {
        self.symplectic_eigenvalues()
            .map(|ev| ev.iter().all(|&v| v >= 1.0 - PHYSICALITY_TOL))
            .unwrap_or(false)
    }

    /// Covariance of `(x_a, p_a, x_b, p_b)` for two modes, in that order.
    pub fn two_mode_block(&self, a: usize, b: usize) -> Result<nalgebra::Matrix4<f64>> {
        self.check_mode(a)?;
        self.check_mode(b)?;
        let idx = [2 * a, 2 * a + 1, 2 * b, 2 * b + 1];
        Ok(nalgebra::Matrix4::from_fn(|i, j| self.cov[(idx[i], idx[j])]))
    }
}
