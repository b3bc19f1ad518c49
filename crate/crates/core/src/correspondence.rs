//! Soft correspondence between two keypoint sets.
//!
//! `solve_uot` minimizes the entropy-regularized unbalanced transport
//! objective with uniform marginals via alternating diagonal scaling, done
//! entirely in the log domain so small regularization weights cannot
//! underflow the Gibbs kernel. `geometric_weights` builds the 0/1 overlap
//! pattern under a known alignment, damped by ground probabilities on both
//! sides; multiplying it into the plan is the practical weakening step, while
//! `solve_weighted_uot` solves the weighted objective directly for
//! comparison. `correspondence_aux_residual` measures how far the
//! mass-weighted projection of each keypoint lands from its ground-truth
//! position.

use nalgebra::{DMatrix, Vector3};

use crate::error::{Error, Result};
use crate::features::{CostMatrix, KeypointSet};
use crate::geometry::RigidTransform;

/// Rows with soft-projection mass at or below this floor are flagged invalid.
pub const MASS_EPSILON: f64 = 1e-8;

/// Solver parameters: entropic weight, marginal relaxation weight, and the
/// stopping rule on the row-scaling change.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UotParams {
    pub lambda: f64,
    pub rho: f64,
    pub max_iters: usize,
    pub tolerance: f64,
}

impl Default for UotParams {
    fn default() -> Self {
        Self {
            lambda: 0.05,
            rho: 1.0,
            max_iters: 500,
            tolerance: 1e-6,
        }
    }
}

impl UotParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !(self.rho > 0.0) {
            return Err(Error::invalid("uot params", "lambda and rho must be positive"));
        }
        if self.max_iters < 1 {
            return Err(Error::invalid("uot params", "max_iters must be at least 1"));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::invalid("uot params", "tolerance must be positive"));
        }
        Ok(())
    }
}

/// Nonnegative soft-correspondence matrix together with solver diagnostics.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    values: DMatrix<f64>,
    pub converged: bool,
    pub iterations_used: usize,
}

impl TransportPlan {
    pub fn from_matrix(values: DMatrix<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(
                "transport plan",
                "entries must be finite and ≥ 0",
            ));
        }
        Ok(Self {
            values,
            converged: true,
            iterations_used: 0,
        })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }
}

/// Pairwise weights in [0, 1] combining geometric overlap and non-ground
/// probability.
#[derive(Debug, Clone)]
pub struct WeightMatrix {
    values: DMatrix<f64>,
}

impl WeightMatrix {
    pub fn from_matrix(values: DMatrix<f64>) -> Result<Self> {
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("weight matrix", "entries must be in [0,1]"));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }
}

/// Column-major log-kernel with helpers for the scaling sweeps.
struct LogKernel {
    n: usize,
    data: Vec<f64>, // entry (i, j) at j * n + i
}

impl LogKernel {
    fn from_cost(cost: &CostMatrix, lambda: f64, mask: Option<&DMatrix<f64>>) -> Self {
        let n = cost.nrows();
        let mut data = vec![0.0; n * n];
        for j in 0..n {
            for i in 0..n {
                let masked = mask.is_some_and(|m| m[(i, j)] == 0.0);
                data[j * n + i] = if masked {
                    f64::NEG_INFINITY
                } else {
                    -cost.values()[(i, j)] / lambda
                };
            }
        }
        Self { n, data }
    }

    /// log Σ_j exp(k[i][j] + beta[j])
    fn row_lse(&self, i: usize, beta: &[f64]) -> f64 {
        let mut max = f64::NEG_INFINITY;
        for j in 0..self.n {
            let v = self.data[j * self.n + i] + beta[j];
            if v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        let mut sum = 0.0;
        for j in 0..self.n {
            sum += (self.data[j * self.n + i] + beta[j] - max).exp();
        }
        max + sum.ln()
    }

    /// log Σ_i exp(k[i][j] + alpha[i])
    fn col_lse(&self, j: usize, alpha: &[f64]) -> f64 {
        let col = &self.data[j * self.n..(j + 1) * self.n];
        let mut max = f64::NEG_INFINITY;
        for (i, k) in col.iter().enumerate() {
            let v = k + alpha[i];
            if v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        let mut sum = 0.0;
        for (i, k) in col.iter().enumerate() {
            sum += (k + alpha[i] - max).exp();
        }
        max + sum.ln()
    }

    fn plan(&self, alpha: &[f64], beta: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| {
            let v = alpha[i] + self.data[j * self.n + i] + beta[j];
            if v == f64::NEG_INFINITY {
                0.0
            } else {
                v.exp()
            }
        })
    }
}

fn run_scaling(
    cost: &CostMatrix,
    mask: Option<&DMatrix<f64>>,
    params: &UotParams,
    mut trace: Option<&mut Vec<f64>>,
) -> Result<TransportPlan> {
    params.validate()?;
    if cost.nrows() != cost.ncols() {
        return Err(Error::DimensionMismatch {
            context: "uot cost matrix",
            left: cost.nrows(),
            right: cost.ncols(),
        });
    }
    let n = cost.nrows();
    if n == 0 {
        return Err(Error::Empty("uot cost matrix"));
    }

    let kernel = LogKernel::from_cost(cost, params.lambda, mask);
    let phi = params.rho / (params.rho + params.lambda);
    let log_u = -(n as f64).ln();

    let mut alpha = vec![0.0f64; n];
    let mut beta = vec![0.0f64; n];
    let mut converged = false;
    let mut iterations_used = 0;

    for sweep in 1..=params.max_iters {
        iterations_used = sweep;
        let mut delta = 0.0f64;
        for i in 0..n {
            let lse = kernel.row_lse(i, &beta);
            // Rows with no reachable column keep a neutral scaling; the plan
            // row is zero regardless.
            let new = if lse == f64::NEG_INFINITY {
                0.0
            } else {
                phi * (log_u - lse)
            };
            let d = (new - alpha[i]).abs();
            if d > delta {
                delta = d;
            }
            alpha[i] = new;
        }
        for (j, b) in beta.iter_mut().enumerate() {
            let lse = kernel.col_lse(j, &alpha);
            *b = if lse == f64::NEG_INFINITY {
                0.0
            } else {
                phi * (log_u - lse)
            };
        }
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(objective_raw(
                cost.values(),
                &kernel.plan(&alpha, &beta),
                params,
            ));
        }
        if delta < params.tolerance {
            converged = true;
            break;
        }
    }

    Ok(TransportPlan {
        values: kernel.plan(&alpha, &beta),
        converged,
        iterations_used,
    })
}

/// Solves the unbalanced transport problem
/// `min_Z Σ K_ij Z_ij + λ Σ Z_ij (log Z_ij − 1) + ρ [KL(r‖u) + KL(c‖u)]`
/// over nonnegative N×N plans, where `r`/`c` are the row/column sums and `u`
/// is the uniform vector with entries `1/N`. Non-convergence within
/// `max_iters` is reported on the plan, not as an error.
pub fn solve_uot(cost: &CostMatrix, params: &UotParams) -> Result<TransportPlan> {
    run_scaling(cost, None, params, None)
}

/// Like [`solve_uot`] but also records the objective value after every
/// scaling sweep, for convergence diagnostics.
pub fn solve_uot_traced(cost: &CostMatrix, params: &UotParams) -> Result<(TransportPlan, Vec<f64>)> {
    let mut trace = Vec::new();
    let plan = run_scaling(cost, None, params, Some(&mut trace))?;
    Ok((plan, trace))
}

fn objective_raw(cost: &DMatrix<f64>, plan: &DMatrix<f64>, params: &UotParams) -> f64 {
    let n = plan.nrows();
    let u = 1.0 / n as f64;
    let mut f = 0.0;
    for (k, z) in cost.iter().zip(plan.iter()) {
        if *z > 0.0 {
            f += k * z + params.lambda * z * (z.ln() - 1.0);
        }
    }
    let kl = |sums: Vec<f64>| -> f64 {
        sums.iter()
            .map(|&p| if p > 0.0 { p * (p / u).ln() - p + u } else { u })
            .sum()
    };
    let rows: Vec<f64> = (0..n).map(|i| plan.row(i).iter().sum()).collect();
    let cols: Vec<f64> = (0..n).map(|j| plan.column(j).iter().sum()).collect();
    f + params.rho * (kl(rows) + kl(cols))
}

/// Value of the transport objective at the given plan.
pub fn uot_objective(cost: &CostMatrix, plan: &TransportPlan, params: &UotParams) -> f64 {
    objective_raw(cost.values(), plan.values(), params)
}

/// Solves the weighted transport objective by substituting `Y = W ⊙ Z`, which
/// reduces to the plain problem restricted to the support of `W`; entries with
/// zero weight stay zero. Returns the effective plan `Y`. The default
/// pipeline path multiplies `W` into the unweighted plan instead, which keeps
/// low-weight points in play.
pub fn solve_weighted_uot(
    cost: &CostMatrix,
    weights: &WeightMatrix,
    params: &UotParams,
) -> Result<TransportPlan> {
    if weights.values().shape() != cost.values().shape() {
        return Err(Error::DimensionMismatch {
            context: "weighted uot",
            left: weights.values().nrows(),
            right: cost.nrows(),
        });
    }
    run_scaling(cost, Some(weights.values()), params, None)
}

/// Pairwise weights under a known alignment: 1 when `‖T·aᵢ − bⱼ‖` is within
/// `overlap_radius` (boundary inclusive) and 0 otherwise, scaled by
/// `(1 − g_aᵢ)(1 − g_bⱼ)` so likely-ground points lose influence.
pub fn geometric_weights(
    keys_a: &KeypointSet,
    keys_b: &KeypointSet,
    t_gt: &RigidTransform,
    overlap_radius: f64,
) -> Result<WeightMatrix> {
    if keys_a.len() != keys_b.len() {
        return Err(Error::DimensionMismatch {
            context: "geometric weights",
            left: keys_a.len(),
            right: keys_b.len(),
        });
    }
    if !(overlap_radius > 0.0) {
        return Err(Error::invalid("overlap radius", "must be positive"));
    }
    let moved: Vec<Vector3<f64>> = keys_a.positions().iter().map(|p| t_gt.apply(p)).collect();
    let values = DMatrix::from_fn(keys_a.len(), keys_b.len(), |i, j| {
        let overlap = (moved[i] - keys_b.positions()[j]).norm() <= overlap_radius;
        if overlap {
            (1.0 - keys_a.ground_prob()[i]) * (1.0 - keys_b.ground_prob()[j])
        } else {
            0.0
        }
    });
    Ok(WeightMatrix { values })
}

/// Inference-time reduction of the weights: no alignment is available, so
/// only the ground-probability factors remain.
pub fn ground_weights(keys_a: &KeypointSet, keys_b: &KeypointSet) -> Result<WeightMatrix> {
    if keys_a.len() != keys_b.len() {
        return Err(Error::DimensionMismatch {
            context: "ground weights",
            left: keys_a.len(),
            right: keys_b.len(),
        });
    }
    let values = DMatrix::from_fn(keys_a.len(), keys_b.len(), |i, j| {
        (1.0 - keys_a.ground_prob()[i]) * (1.0 - keys_b.ground_prob()[j])
    });
    Ok(WeightMatrix { values })
}

/// Elementwise product `C′ = W ⊙ C̃`. Solver diagnostics carry through.
pub fn apply_weights(plan: &TransportPlan, weights: &WeightMatrix) -> Result<TransportPlan> {
    if weights.values().shape() != plan.values().shape() {
        return Err(Error::DimensionMismatch {
            context: "apply weights",
            left: weights.values().nrows(),
            right: plan.nrows(),
        });
    }
    Ok(TransportPlan {
        values: plan.values().component_mul(weights.values()),
        converged: plan.converged,
        iterations_used: plan.iterations_used,
    })
}

/// Per-row mass-weighted projection of the plan onto the target keypoints.
#[derive(Debug, Clone)]
pub struct SoftProjection {
    pub points: Vec<Vector3<f64>>,
    pub row_mass: Vec<f64>,
    pub valid: Vec<bool>,
}

/// `projectedᵢ = Σⱼ C′ᵢⱼ bⱼ ⁄ Σⱼ C′ᵢⱼ`; rows with mass at or below
/// [`MASS_EPSILON`] are flagged invalid rather than rejected.
pub fn soft_projection(plan: &TransportPlan, keys_b: &KeypointSet) -> Result<SoftProjection> {
    if plan.ncols() != keys_b.len() {
        return Err(Error::DimensionMismatch {
            context: "soft projection",
            left: plan.ncols(),
            right: keys_b.len(),
        });
    }
    let n = plan.nrows();
    let mut points = Vec::with_capacity(n);
    let mut row_mass = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    for i in 0..n {
        let mut mass = 0.0;
        let mut acc = Vector3::zeros();
        for j in 0..plan.ncols() {
            let z = plan.values()[(i, j)];
            mass += z;
            acc += z * keys_b.positions()[j];
        }
        if mass > MASS_EPSILON {
            points.push(acc / mass);
            valid.push(true);
        } else {
            points.push(Vector3::zeros());
            valid.push(false);
        }
        row_mass.push(mass);
    }
    Ok(SoftProjection {
        points,
        row_mass,
        valid,
    })
}

/// Mean, over rows with valid projections and a positive row weight, of
/// `‖projectedᵢ − T·aᵢ‖ · maxⱼ Wᵢⱼ`. The row weight says whether point `i`
/// has any plausible partner at all; rows without one are excluded, and an
/// error is raised when none remain.
pub fn correspondence_aux_residual(
    plan: &TransportPlan,
    weights: &WeightMatrix,
    keys_a: &KeypointSet,
    keys_b: &KeypointSet,
    t_gt: &RigidTransform,
) -> Result<f64> {
    if keys_a.len() != keys_b.len() || plan.nrows() != keys_a.len() {
        return Err(Error::DimensionMismatch {
            context: "correspondence residual",
            left: plan.nrows(),
            right: keys_a.len(),
        });
    }
    if weights.values().shape() != plan.values().shape() {
        return Err(Error::DimensionMismatch {
            context: "correspondence residual weights",
            left: weights.values().nrows(),
            right: plan.nrows(),
        });
    }
    let proj = soft_projection(plan, keys_b)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..plan.nrows() {
        if !proj.valid[i] {
            continue;
        }
        let row_weight = weights
            .values()
            .row(i)
            .iter()
            .fold(0.0f64, |m, v| m.max(*v));
        if row_weight <= 0.0 {
            continue;
        }
        let target = t_gt.apply(&keys_a.positions()[i]);
        sum += (proj.points[i] - target).norm() * row_weight;
        count += 1;
    }
    if count == 0 {
        return Err(Error::UndefinedMetric(
            "correspondence residual has no valid weighted rows",
        ));
    }
    Ok(sum / count as f64)
}
