use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, RwLock};

use super::lsmc::RegressionFit;
use crate::error::{invalid, Result};

pub type StateFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// A fitted or computed map `x -> real`.
#[derive(Clone)]
pub enum StateFunction {
    Constant(f64),
    /// One-dimensional values on a uniform grid, cubic interpolation.
    Grid(Arc<GridFunction>),
    Regression(Arc<RegressionFit>),
    Closure(StateFn),
}

impl fmt::Debug for StateFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StateFunction::Constant(c) => write!(f, "Constant({c})"),
            StateFunction::Grid(g) => write!(f, "Grid({} points)", g.values.len()),
            StateFunction::Regression(r) => write!(f, "Regression({:?})", r.basis()),
            StateFunction::Closure(_) => write!(f, "Closure"),
        }
    }
}

impl StateFunction {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            StateFunction::Constant(c) => *c,
            StateFunction::Grid(g) => g.eval(x[0]),
            StateFunction::Regression(r) => r.eval(x),
            StateFunction::Closure(f) => f(x),
        }
    }

    pub fn from_fn(f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        StateFunction::Closure(Arc::new(f))
    }

    /// Wraps `f` in a cache keyed on the exact bit pattern of `x`.
    pub fn memoized(f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        let memo = Memo {
            f: Box::new(f),
            cache: RwLock::new(HashMap::new()),
        };
        StateFunction::Closure(Arc::new(move |x| memo.get(x)))
    }
}

struct Memo {
    f: Box<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    cache: RwLock<HashMap<Vec<u64>, f64>>,
}

impl Memo {
    fn get(&self, x: &[f64]) -> f64 {
        let key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
        if let Some(v) = self.cache.read().expect("memo lock").get(&key) {
            return *v;
        }
        let v = (self.f)(x);
        self.cache.write().expect("memo lock").insert(key, v);
        v
    }
}

/// Values on `origin + k * spacing`, `k = 0..n`.
///
/// Interior points use 4-point Lagrange interpolation; outside the grid the
/// function continues linearly with the end slope.
#[derive(Debug, Clone)]
pub struct GridFunction {
    origin: f64,
    spacing: f64,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(origin: f64, spacing: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() < 4 || !(spacing > 0.0) {
            return Err(invalid("grid function needs at least 4 points and positive spacing"));
        }
        Ok(Self {
            origin,
            spacing,
            values,
        })
    }

    pub fn origin(&self) -> f64 {
        self.origin
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn abscissa(&self, k: usize) -> f64 {
        self.origin + k as f64 * self.spacing
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.values.len();
        let v = &self.values;
        let s = (x - self.origin) / self.spacing;
        if s <= 0.0 {
            return v[0] + s * (v[1] - v[0]);
        }
        let last = (n - 1) as f64;
        if s >= last {
            return v[n - 1] + (s - last) * (v[n - 1] - v[n - 2]);
        }
        let k = (s.floor() as usize).clamp(1, n - 3);
        let u = s - k as f64;
        let (a, b, c, d) = (v[k - 1], v[k], v[k + 1], v[k + 2]);
        // Nodes at u = -1, 0, 1, 2.
        let l0 = -u * (u - 1.0) * (u - 2.0) / 6.0;
        let l1 = (u + 1.0) * (u - 1.0) * (u - 2.0) / 2.0;
        let l2 = -(u + 1.0) * u * (u - 2.0) / 2.0;
        let l3 = (u + 1.0) * u * (u - 1.0) / 6.0;
        a * l0 + b * l1 + c * l2 + d * l3
    }
}
