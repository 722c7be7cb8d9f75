//! Continuous reference dynamics, zero-order-hold discretization and the
//! quantized discrete-time update law.

use std::fmt::Write as _;
use std::sync::{Arc, RwLock};

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Default truncation tolerance for the matrix exponential.
pub const DEFAULT_EXPM_TOL: f64 = 1e-12;

const MAX_TAYLOR_TERMS: usize = 80;

fn inf_norm(m: &Matrix) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `e^M` by scaling and squaring around a truncated Taylor series.
///
/// The matrix is scaled by `2^-s` until its infinity norm is at most 1/2, the
/// series is summed until the next term drops below `tol * 2^-s`, and the
/// result is squared `s` times.
pub fn matrix_exponential(m: &Matrix, tol: f64) -> Result<Matrix> {
    if !m.is_square() {
        return Err(Error::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    if !(tol > 0.0) || !tol.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "exponential tolerance must be positive, got {tol}"
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix exponential input".into()));
    }
    let n = m.nrows();
    let norm = inf_norm(m);
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let scale = 2f64.powi(-squarings);
    let scaled = m * scale;
    let term_tol = tol * scale;

    let mut sum = Matrix::identity(n, n);
    let mut term = Matrix::identity(n, n);
    for k in 1..=MAX_TAYLOR_TERMS {
        term = (&term * &scaled) / k as f64;
        let term_norm = inf_norm(&term);
        sum += &term;
        if term_norm <= term_tol || term_norm <= 1e-3 * f64::EPSILON * inf_norm(&sum) {
            break;
        }
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    Ok(sum)
}

/// Closed-loop reference flow `x' = H x`.
#[derive(Debug)]
pub struct ContinuousLti {
    h: Matrix,
    // (step size bits, e^{H h})
    flow_cache: RwLock<Vec<(u64, Arc<Matrix>)>>,
}

impl Clone for ContinuousLti {
    fn clone(&self) -> Self {
        let cache = self.flow_cache.read().map(|c| c.clone()).unwrap_or_default();
        Self {
            h: self.h.clone(),
            flow_cache: RwLock::new(cache),
        }
    }
}

impl PartialEq for ContinuousLti {
    fn eq(&self, other: &Self) -> bool {
        self.h == other.h
    }
}

impl ContinuousLti {
    pub fn new(h: Matrix) -> Result<Self> {
        if !h.is_square() {
            return Err(Error::NotSquare {
                rows: h.nrows(),
                cols: h.ncols(),
            });
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("system matrix".into()));
        }
        Ok(Self {
            h,
            flow_cache: RwLock::new(Vec::new()),
        })
    }

    /// Like [`ContinuousLti::new`] but rejects matrices that are not Hurwitz.
    pub fn new_stable(h: Matrix) -> Result<Self> {
        let sys = Self::new(h)?;
        if !sys.is_stable() {
            return Err(Error::InvalidArgument(
                "system matrix is not Hurwitz".into(),
            ));
        }
        Ok(sys)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.h
    }

    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    /// All eigenvalues strictly in the open left half-plane.
    pub fn is_stable(&self) -> bool {
        let h = &self.h;
        match self.dim() {
            0 => true,
            1 => h[(0, 0)] < 0.0,
            // s^2 - tr(H) s + det(H): Hurwitz iff both coefficients are positive.
            2 => {
                let tr = h[(0, 0)] + h[(1, 1)];
                let det = h[(0, 0)] * h[(1, 1)] - h[(0, 1)] * h[(1, 0)];
                tr < 0.0 && det > 0.0
            }
            _ => h
                .clone()
                .complex_eigenvalues()
                .iter()
                .all(|ev| ev.re < 0.0),
        }
    }

    /// `e^{H h}`, computed once per step size.
    pub fn flow(&self, step: f64) -> Result<Arc<Matrix>> {
        if !(step > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "step size must be positive, got {step}"
            )));
        }
        let key = step.to_bits();
        if let Some((_, m)) = self
            .flow_cache
            .read()
            .expect("flow cache poisoned")
            .iter()
            .find(|(k, _)| *k == key)
        {
            return Ok(Arc::clone(m));
        }
        let phi = Arc::new(matrix_exponential(&(&self.h * step), DEFAULT_EXPM_TOL)?);
        let mut cache = self.flow_cache.write().expect("flow cache poisoned");
        if let Some((_, m)) = cache.iter().find(|(k, _)| *k == key) {
            return Ok(Arc::clone(m));
        }
        cache.push((key, Arc::clone(&phi)));
        Ok(phi)
    }

    /// One exact step of the reference flow: `e^{H h} x`.
    pub fn reference_step(&self, x: &Vector, step: f64) -> Result<Vector> {
        check_dim("reference_step state", self.dim(), x.len())?;
        Ok(&*self.flow(step)? * x)
    }

    /// States `x(k) = (e^{H h})^k x0` for `k = 0..=steps`.
    pub fn simulate(&self, x0: &Vector, step: f64, steps: usize) -> Result<Trajectory> {
        if steps < 1 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        check_dim("simulate_reference state", self.dim(), x0.len())?;
        let phi = self.flow(step)?;
        let mut states = Vec::with_capacity(steps + 1);
        states.push(x0.clone());
        for k in 0..steps {
            let next = &*phi * &states[k];
            states.push(next);
        }
        Trajectory::new(states, step, TrajectoryKind::Reference)
    }
}

/// Zero-order-hold discretization `(A_d, B_d)` of a continuous pair `(A, B)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizedSystem {
    pub a_d: Matrix,
    pub b_d: Matrix,
    pub h: f64,
}

impl DiscretizedSystem {
    /// Exponential of the augmented block `[[A, B], [0, 0]] h`: the top-left
    /// block is `e^{Ah}`, the top-right block is `∫_0^h e^{A(h-s)} B ds`.
    pub fn discretize(a: &Matrix, b: &Matrix, h: f64, tol: f64) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::NotSquare {
                rows: a.nrows(),
                cols: a.ncols(),
            });
        }
        check_dim("discretize input rows", a.nrows(), b.nrows())?;
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "step size must be positive, got {h}"
            )));
        }
        let n = a.nrows();
        let m = b.ncols();
        let mut aug = Matrix::zeros(n + m, n + m);
        aug.view_mut((0, 0), (n, n)).copy_from(&(a * h));
        aug.view_mut((0, n), (n, m)).copy_from(&(b * h));
        let e = matrix_exponential(&aug, tol)?;
        Ok(Self {
            a_d: e.view((0, 0), (n, n)).into_owned(),
            b_d: e.view((0, n), (n, m)).into_owned(),
            h,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.a_d.nrows()
    }

    pub fn channels(&self) -> usize {
        self.b_d.ncols()
    }

    /// `A_d x + B_d u` for a ternary input `u`.
    pub fn quantized_step(&self, x: &Vector, u: &Vector) -> Result<Vector> {
        check_dim("quantized_step state", self.state_dim(), x.len())?;
        check_dim("quantized_step input", self.channels(), u.len())?;
        if let Some((channel, &value)) = u
            .iter()
            .enumerate()
            .find(|(_, v)| **v != -1.0 && **v != 0.0 && **v != 1.0)
        {
            return Err(Error::InvalidPattern { channel, value });
        }
        Ok(&self.a_d * x + &self.b_d * u)
    }

    /// `A_d x + d` for a precomputed step direction `d = B_d u`.
    pub fn step_direction(&self, x: &Vector, d: &Vector) -> Vector {
        &self.a_d * x + d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryKind {
    Reference,
    Quantized,
}

impl TrajectoryKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TrajectoryKind::Reference => "reference",
            TrajectoryKind::Quantized => "quantized",
        }
    }
}

/// Dense state sequence sampled every `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    states: Vec<Vector>,
    h: f64,
    kind: TrajectoryKind,
}

impl Trajectory {
    pub fn new(states: Vec<Vector>, h: f64, kind: TrajectoryKind) -> Result<Self> {
        let first = states
            .first()
            .ok_or_else(|| Error::InvalidArgument("trajectory must be non-empty".into()))?;
        let n = first.len();
        for s in &states {
            check_dim("trajectory state", n, s.len())?;
        }
        Ok(Self { states, h, kind })
    }

    pub fn states(&self) -> &[Vector] {
        &self.states
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn kind(&self) -> TrajectoryKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.states[0].len()
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn last(&self) -> &Vector {
        self.states.last().expect("trajectory is non-empty")
    }

    /// CSV with header `k,t,x_0,...,x_{n-1}`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,t");
        for i in 0..self.dim() {
            let _ = write!(out, ",x_{i}");
        }
        out.push('\n');
        for (k, s) in self.states.iter().enumerate() {
            let _ = write!(out, "{k},{}", k as f64 * self.h);
            for v in s.iter() {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}
