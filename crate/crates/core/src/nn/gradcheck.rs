//! Central finite-difference gradient verification.

use rand::{Rng, SeedableRng};

use super::{Module, Tensor};

/// Gradients smaller than this are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Description of the worst coordinate.
    pub worst: String,
    pub checked: usize,
}

impl GradCheckReport {
    fn new() -> Self {
        Self {
            max_rel_error: 0.0,
            worst: String::new(),
            checked: 0,
        }
    }

    fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_error || err.is_nan() {
            self.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
            self.worst = format!("{} (analytic {analytic:e}, numeric {numeric:e})", what());
        }
    }

    pub fn merge(mut self, other: GradCheckReport) -> Self {
        self.checked += other.checked;
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares `analytic` against central differences of `f` around `x`.
pub fn grad_check(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64], eps: f64) -> GradCheckReport {
    assert_eq!(x.len(), analytic.len());
    let mut rep = GradCheckReport::new();
    let mut p = x.to_vec();
    for i in 0..x.len() {
        p[i] = x[i] + eps;
        let fp = f(&p);
        p[i] = x[i] - eps;
        let fm = f(&p);
        p[i] = x[i];
        rep.record(|| format!("coordinate {i}"), analytic[i], (fp - fm) / (2.0 * eps));
    }
    rep
}

/// Checks input and parameter gradients of a module under the scalar loss
/// `L = Σ r·forward(x)` with fixed random weights `r`. The module runs in
/// training mode throughout.
pub fn check_module(m: &mut dyn Module, x: &Tensor, eps: f64, seed: u64) -> GradCheckReport {
    check_module_sampled(m, x, eps, seed, usize::MAX)
}

/// [`check_module`] restricted to at most `per_tensor` randomly chosen
/// coordinates of the input and of each parameter tensor.
pub fn check_module_sampled(m: &mut dyn Module, x: &Tensor, eps: f64, seed: u64, per_tensor: usize) -> GradCheckReport {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let y = m.forward(x, true);
    let r = Tensor {
        shape: y.shape,
        data: (0..y.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    for p in m.params_mut() {
        p.zero_grad();
    }
    m.forward(x, true);
    let gx = m.backward(&r);
    let param_grads: Vec<Vec<f64>> = m.params().iter().map(|p| p.grad.clone()).collect();

    let loss = |m: &mut dyn Module, x: &Tensor| -> f64 {
        let y = m.forward(x, true);
        y.data.iter().zip(&r.data).map(|(a, b)| a * b).sum()
    };
    let mut pick = |n: usize| -> Vec<usize> {
        if n <= per_tensor {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, per_tensor).into_vec()
        }
    };

    let mut rep = GradCheckReport::new();
    let mut xp = x.clone();
    for i in pick(x.data.len()) {
        xp.data[i] = x.data[i] + eps;
        let fp = loss(m, &xp);
        xp.data[i] = x.data[i] - eps;
        let fm = loss(m, &xp);
        xp.data[i] = x.data[i];
        rep.record(|| format!("input[{i}]"), gx.data[i], (fp - fm) / (2.0 * eps));
    }
    for (pi, grads) in param_grads.iter().enumerate() {
        for j in pick(grads.len()) {
            let orig = m.params()[pi].value[j];
            m.params_mut()[pi].value[j] = orig + eps;
            let fp = loss(m, x);
            m.params_mut()[pi].value[j] = orig - eps;
            let fm = loss(m, x);
            m.params_mut()[pi].value[j] = orig;
            rep.record(|| format!("param{pi}[{j}]"), grads[j], (fp - fm) / (2.0 * eps));
        }
    }
    rep
}
