//! LQR on the lifted linear model and the closed-loop MPC driver.
//!
//! The surrogate `z' = K z + B u` is treated as a linear plant in lifted
//! coordinates. The controller lifts the measured state every step and
//! applies `u = −gain (z − z*)`; for a nonlinear input dictionary the lifted
//! input is mapped back to a physical input through a fitted projection.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{admissible, default_substeps, Rk4, System, VectorField};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{ensure_finite, Factorization, LstsqOptions};
use crate::rnn::{InputDictionary, SampledRnn};
use crate::sampling::SampledLayer;

/// Coordinates in which the state cost is expressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostSpace {
    /// Physical state; lifted as `Cᵀ Q C`.
    State,
    Lifted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqrWeights {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    space: CostSpace,
}

fn symmetric(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::InvalidArgument(alloc::format!("{what} must be square")));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return Err(Error::InvalidArgument(alloc::format!("{what} must be symmetric")));
    }
    Ok(())
}

impl LqrWeights {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>, space: CostSpace) -> Result<Self> {
        ensure_finite(&q, "state cost")?;
        ensure_finite(&r, "input cost")?;
        symmetric(&q, "state cost")?;
        symmetric(&r, "input cost")?;
        if r.nrows() == 0 || r.clone().cholesky().is_none() {
            return Err(Error::InvalidArgument("input cost must be positive definite".into()));
        }
        if q.nrows() > 0 {
            let lowest = q.clone().symmetric_eigenvalues().min();
            if lowest < -1e-12 * q.amax().max(1.0) {
                return Err(Error::InvalidArgument(
                    "state cost must be positive semidefinite".into(),
                ));
            }
        }
        Ok(Self { q, r, space })
    }

    /// `Q = q I_d`, `R = r I_m` in state coordinates.
    pub fn diagonal(state_dim: usize, q: f64, input_dim: usize, r: f64) -> Result<Self> {
        Self::new(
            DMatrix::identity(state_dim, state_dim) * q,
            DMatrix::identity(input_dim, input_dim) * r,
            CostSpace::State,
        )
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn space(&self) -> CostSpace {
        self.space
    }
}

/// Iteration used by [`dare_solve`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DareMethod {
    /// Repeated application of the Riccati map from `P₀ = Q`.
    #[default]
    FixedPoint,
    /// Structure-preserving doubling; each step squares the horizon, so
    /// slowly decaying modes converge in a few dozen steps.
    Doubling,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DareOptions {
    pub tol: f64,
    pub max_iter: usize,
    #[serde(default)]
    pub method: DareMethod,
    /// Accept `residual ≤ tol · max(1, ‖P‖_F)` instead of `residual ≤ tol`.
    #[serde(default)]
    pub relative: bool,
}

impl DareOptions {
    fn accepts(&self, residual: f64, p: &DMatrix<f64>) -> bool {
        let scale = if self.relative { p.norm().max(1.0) } else { 1.0 };
        residual <= self.tol * scale
    }
}

impl Default for DareOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 10_000,
            method: DareMethod::FixedPoint,
            relative: false,
        }
    }
}

fn solve_spd(m: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    match m.clone().cholesky() {
        Some(ch) => Ok(ch.solve(rhs)),
        None => m
            .clone()
            .lu()
            .solve(rhs)
            .ok_or_else(|| Error::InvalidArgument("singular matrix in Riccati update".into())),
    }
}

fn riccati_map(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let pa = p * a;
    let pb = p * b;
    let btpa = b.transpose() * &pa;
    let s = r + b.transpose() * &pb;
    let correction = (a.transpose() * &pb) * solve_spd(&s, &btpa)?;
    let next = q + a.transpose() * pa - correction;
    Ok((&next + next.transpose()) * 0.5)
}

fn check_riccati_dims(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<()> {
    let n = a.nrows();
    check_dim("plant matrix columns", n, a.ncols())?;
    check_dim("input matrix rows", n, b.nrows())?;
    check_dim("state cost", n, q.nrows())?;
    check_dim("state cost", n, q.ncols())?;
    check_dim("input cost", b.ncols(), r.nrows())?;
    check_dim("input cost", b.ncols(), r.ncols())
}

/// Frobenius norm of the Riccati residual `Q + AᵀPA − AᵀPB(R + BᵀPB)⁻¹BᵀPA − P`.
pub fn dare_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<f64> {
    check_riccati_dims(a, b, q, r)?;
    Ok((riccati_map(a, b, q, r, p)? - p).norm())
}

/// Stabilizing solution of the discrete algebraic Riccati equation.
///
/// The returned `P` always passes the residual check of `opts`; the doubling
/// method falls back to fixed-point refinement when its last iterate misses.
pub fn dare_solve(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    opts: DareOptions,
) -> Result<DMatrix<f64>> {
    check_riccati_dims(a, b, q, r)?;
    for (m, what) in [(a, "plant matrix"), (b, "input matrix"), (q, "state cost"), (r, "input cost")] {
        ensure_finite(m, what)?;
    }
    let (mut p, mut budget) = match opts.method {
        DareMethod::FixedPoint => (q.clone(), opts.max_iter),
        DareMethod::Doubling => doubling(a, b, q, r, opts.max_iter)?,
    };
    loop {
        let next = riccati_map(a, b, q, r, &p)?;
        let residual = (&next - &p).norm();
        if !residual.is_finite() {
            break;
        }
        if opts.accepts(residual, &p) {
            return Ok(p);
        }
        if budget == 0 {
            break;
        }
        budget -= 1;
        p = next;
    }
    Err(Error::NoConvergence {
        what: "discrete algebraic Riccati equation",
        iterations: opts.max_iter,
    })
}

/// Doubling iteration for `P`; returns the last iterate and the unused
/// iteration budget.
fn doubling(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    max_iter: usize,
) -> Result<(DMatrix<f64>, usize)> {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut ak = a.clone();
    let mut gk = b * solve_spd(r, &b.transpose())?;
    gk = (&gk + gk.transpose()) * 0.5;
    let mut hk = q.clone();
    for used in 1..=max_iter {
        let w = (&eye + &gk * &hk).lu();
        let (Some(wa), Some(wg)) = (w.solve(&ak), w.solve(&gk)) else {
            return Ok((hk, max_iter - used));
        };
        let h_next = &hk + ak.transpose() * &hk * &wa;
        let g_next = &gk + &ak * wg * ak.transpose();
        ak = &ak * wa;
        let step = (&h_next - &hk).norm();
        hk = (&h_next + h_next.transpose()) * 0.5;
        gk = (&g_next + g_next.transpose()) * 0.5;
        if !step.is_finite() {
            return Ok((hk, 0));
        }
        if step <= f64::EPSILON * hk.norm() {
            return Ok((hk, max_iter - used));
        }
    }
    Ok((hk, 0))
}

/// `(R + BᵀPB)⁻¹ BᵀPA`.
pub fn lqr_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let pb = p * b;
    let s = r + b.transpose() * &pb;
    solve_spd(&s, &(pb.transpose() * a))
}

/// Least-squares map `P` with `P G(x) ≈ x`; `samples` is `N × d_x`.
///
/// Returns `d_x × M̂`.
pub fn fit_lift_projection(
    layer: &SampledLayer,
    samples: &DMatrix<f64>,
    opts: LstsqOptions,
) -> Result<DMatrix<f64>> {
    check_dim("input samples", layer.input_dim(), samples.ncols())?;
    if samples.nrows() == 0 {
        return Err(Error::InvalidArgument("no input samples".into()));
    }
    ensure_finite(samples, "input samples")?;
    let features = layer.apply_rows(samples)?;
    let fact = Factorization::new(&features, opts)?;
    if fact.rank() == 0 {
        return Err(Error::InvalidArgument("input features have rank 0".into()));
    }
    Ok(fact.solve(samples)?.transpose())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqrController {
    gain: DMatrix<f64>,
    riccati_p: DMatrix<f64>,
    target_state: DVector<f64>,
    target_lifted: DVector<f64>,
    lift_projection: Option<DMatrix<f64>>,
    weights: LqrWeights,
}

fn lifted_state_cost(model: &SampledRnn, weights: &LqrWeights) -> Result<DMatrix<f64>> {
    match weights.space {
        CostSpace::State => {
            check_dim("state cost", model.state_dim(), weights.q.nrows())?;
            let c = model.projection();
            let lifted = c.transpose() * &weights.q * c;
            Ok((&lifted + lifted.transpose()) * 0.5)
        }
        CostSpace::Lifted => {
            check_dim("state cost", model.lifted_dim(), weights.q.nrows())?;
            Ok(weights.q.clone())
        }
    }
}

/// LQR on the lifted surrogate `(K, B)` steering towards `target`.
pub fn lqr_fit(
    model: &SampledRnn,
    weights: &LqrWeights,
    target: &[f64],
    opts: DareOptions,
) -> Result<LqrController> {
    let b = model
        .input_matrix()
        .ok_or_else(|| Error::InvalidArgument("LQR needs a controlled model".into()))?;
    check_dim("target state", model.state_dim(), target.len())?;
    let q = lifted_state_cost(model, weights)?;
    let p = dare_solve(model.koopman(), b, &q, &weights.r, opts)?;
    let gain = lqr_gain(model.koopman(), b, &weights.r, &p)?;
    Ok(LqrController {
        gain,
        riccati_p: p,
        target_state: DVector::from_column_slice(target),
        target_lifted: DVector::from_vec(model.lift(target)?),
        lift_projection: None,
        weights: weights.clone(),
    })
}

/// Orthonormal basis (`M × r`) of the feature directions the training
/// states excite: right singular vectors of `F(H)` whose singular value
/// exceeds `cutoff · σ_max`. `states` is `N × d`.
pub fn feature_subspace(model: &SampledRnn, states: &DMatrix<f64>, cutoff: f64) -> Result<DMatrix<f64>> {
    let features = model.state_dict().apply_rows(states)?;
    let fact = Factorization::new(&features, LstsqOptions::new(cutoff)?)?;
    Ok(fact.right_singular_vectors().transpose())
}

/// LQR on the Galerkin restriction `(VᵀKV, VᵀB)` of the lifted surrogate
/// to the span of `basis` (orthonormal columns). The gain acts on full
/// lifted states through `Vᵀ`.
pub fn lqr_fit_subspace(
    model: &SampledRnn,
    weights: &LqrWeights,
    target: &[f64],
    basis: &DMatrix<f64>,
    opts: DareOptions,
) -> Result<LqrController> {
    let b = model
        .input_matrix()
        .ok_or_else(|| Error::InvalidArgument("LQR needs a controlled model".into()))?;
    check_dim("target state", model.state_dim(), target.len())?;
    check_dim("subspace basis rows", model.lifted_dim(), basis.nrows())?;
    if basis.ncols() == 0 {
        return Err(Error::InvalidArgument("empty control subspace".into()));
    }
    let q = lifted_state_cost(model, weights)?;
    let vt = basis.transpose();
    let a_r = &vt * model.koopman() * basis;
    let b_r = &vt * b;
    let q_r = &vt * q * basis;
    let q_r = (&q_r + q_r.transpose()) * 0.5;
    let p_r = dare_solve(&a_r, &b_r, &q_r, &weights.r, opts)?;
    let gain = lqr_gain(&a_r, &b_r, &weights.r, &p_r)? * &vt;
    Ok(LqrController {
        gain,
        riccati_p: basis * p_r * &vt,
        target_state: DVector::from_column_slice(target),
        target_lifted: DVector::from_vec(model.lift(target)?),
        lift_projection: None,
        weights: weights.clone(),
    })
}

impl LqrController {
    /// Attach the map from lifted inputs to physical inputs.
    pub fn with_lift_projection(mut self, projection: DMatrix<f64>) -> Result<Self> {
        check_dim("lift projection columns", self.gain.nrows(), projection.ncols())?;
        ensure_finite(&projection, "lift projection")?;
        self.lift_projection = Some(projection);
        Ok(self)
    }

    pub fn gain(&self) -> &DMatrix<f64> {
        &self.gain
    }

    pub fn riccati_p(&self) -> &DMatrix<f64> {
        &self.riccati_p
    }

    pub fn target_lifted(&self) -> &DVector<f64> {
        &self.target_lifted
    }

    pub fn target_state(&self) -> &DVector<f64> {
        &self.target_state
    }

    pub fn lift_projection(&self) -> Option<&DMatrix<f64>> {
        self.lift_projection.as_ref()
    }

    pub fn weights(&self) -> &LqrWeights {
        &self.weights
    }

    /// `u = −gain (F(h) − F(h*))`.
    pub fn lifted_input(&self, model: &SampledRnn, h: &[f64]) -> Result<DVector<f64>> {
        let z = DVector::from_vec(model.lift(h)?);
        Ok(-(&self.gain * (z - &self.target_lifted)))
    }

    /// Physical input for the measured state `h`.
    pub fn control(&self, model: &SampledRnn, h: &[f64]) -> Result<DVector<f64>> {
        let u = self.lifted_input(model, h)?;
        match (model.input_dict(), &self.lift_projection) {
            (_, Some(p)) => Ok(p * u),
            (Some(InputDictionary::Identity { .. }), None) => Ok(u),
            _ => Err(Error::InvalidArgument(
                "nonlinear input dictionary needs a lift projection".into(),
            )),
        }
    }

    /// `(h − h*)ᵀ Q (h − h*) + uᵀ R u` with `u` the lifted input.
    pub fn stage_cost(&self, model: &SampledRnn, h: &[f64], u: &DVector<f64>) -> Result<f64> {
        let (state, input) = self.stage_cost_parts(model, h, u)?;
        Ok(state + input)
    }

    /// State and input terms of [`Self::stage_cost`].
    pub fn stage_cost_parts(
        &self,
        model: &SampledRnn,
        h: &[f64],
        u: &DVector<f64>,
    ) -> Result<(f64, f64)> {
        let state = match self.weights.space {
            CostSpace::State => {
                let e = DVector::from_column_slice(h) - &self.target_state;
                (e.transpose() * &self.weights.q * &e)[(0, 0)]
            }
            CostSpace::Lifted => {
                let e = DVector::from_vec(model.lift(h)?) - &self.target_lifted;
                (e.transpose() * &self.weights.q * &e)[(0, 0)]
            }
        };
        let input = (u.transpose() * &self.weights.r * u)[(0, 0)];
        Ok((state.max(0.0), input.max(0.0)))
    }
}

/// The system being controlled.
pub trait Plant {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    /// State after one control interval with `x` held constant.
    fn advance(&mut self, h: &[f64], x: &[f64]) -> Result<Vec<f64>>;
}

/// An ODE plant sampled every `dt`.
#[derive(Debug, Clone)]
pub struct OdePlant {
    system: System,
    dt: f64,
    substeps: usize,
    rk: Rk4,
}

impl OdePlant {
    pub fn new(system: System, dt: f64, substeps: Option<usize>) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument("dt must be positive".into()));
        }
        if system.input_dim() == 0 {
            return Err(Error::InvalidArgument(alloc::format!(
                "{} takes no input",
                system.name()
            )));
        }
        let substeps = substeps.unwrap_or_else(|| default_substeps(dt)).max(1);
        Ok(Self {
            rk: Rk4::new(system.state_dim()),
            system,
            dt,
            substeps,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }
}

impl Plant for OdePlant {
    fn state_dim(&self) -> usize {
        self.system.state_dim()
    }

    fn input_dim(&self) -> usize {
        self.system.input_dim()
    }

    fn advance(&mut self, h: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        check_dim("plant state", self.state_dim(), h.len())?;
        check_dim("plant input", self.input_dim(), x.len())?;
        let mut next = h.to_vec();
        self.rk.advance(&self.system, &mut next, x, self.dt, self.substeps);
        Ok(next)
    }
}

/// `h' = A h + B x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPlant {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl Plant for LinearPlant {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    fn advance(&mut self, h: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        check_dim("plant state", self.state_dim(), h.len())?;
        check_dim("plant input", self.input_dim(), x.len())?;
        let next = &self.a * DVector::from_column_slice(h) + &self.b * DVector::from_column_slice(x);
        Ok(next.iter().copied().collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MpcOptions {
    pub steps: usize,
    /// Sampling interval recorded in the trace.
    pub dt: f64,
    /// Optional box applied to every physical input component.
    #[serde(default)]
    pub clamp: Option<(f64, f64)>,
}

/// Closed-loop record. `states` has `steps + 1` rows (starting at `h0`);
/// `inputs` and `stage_costs` have one entry per step.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlTrace {
    pub times: Vec<f64>,
    pub states: DMatrix<f64>,
    pub inputs: DMatrix<f64>,
    pub stage_costs: Vec<f64>,
    pub cumulative_cost: f64,
    /// Sum of the state terms of the stage costs.
    pub state_cost: f64,
    /// Sum of the input terms of the stage costs.
    pub input_cost: f64,
}

impl ControlTrace {
    /// `‖h_t − h*‖` for every recorded state.
    pub fn target_error(&self, target: &[f64]) -> Vec<f64> {
        self.states
            .row_iter()
            .map(|row| {
                libm::sqrt(
                    row.iter()
                        .zip(target)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>(),
                )
            })
            .collect()
    }
}

/// Receding-horizon loop: measure, lift, apply the LQR law, advance the
/// true plant one interval.
pub fn mpc_run<P: Plant + ?Sized>(
    plant: &mut P,
    model: &SampledRnn,
    controller: &LqrController,
    h0: &[f64],
    opts: &MpcOptions,
) -> Result<ControlTrace> {
    let d = plant.state_dim();
    check_dim("model state dimension", d, model.state_dim())?;
    check_dim("model input dimension", plant.input_dim(), model.input_dim())?;
    check_dim("initial state", d, h0.len())?;
    if let Some((lo, hi)) = opts.clamp {
        if !(lo <= hi) {
            return Err(Error::InvalidArgument("empty input box".into()));
        }
    }
    let m = plant.input_dim();
    let mut states = DMatrix::zeros(opts.steps + 1, d);
    let mut inputs = DMatrix::zeros(opts.steps, m);
    let mut stage_costs = Vec::with_capacity(opts.steps);
    let mut h = h0.to_vec();
    states.row_mut(0).copy_from_slice(&h);
    let mut x = vec![0.0; m];
    let (mut state_cost, mut input_cost) = (0.0, 0.0);

    for t in 0..opts.steps {
        let u = controller.lifted_input(model, &h)?;
        let physical = match (model.input_dict(), controller.lift_projection()) {
            (_, Some(p)) => p * &u,
            (Some(InputDictionary::Identity { .. }), None) => u.clone(),
            _ => {
                return Err(Error::InvalidArgument(
                    "nonlinear input dictionary needs a lift projection".into(),
                ))
            }
        };
        for (slot, v) in x.iter_mut().zip(physical.iter()) {
            *slot = match opts.clamp {
                Some((lo, hi)) => v.clamp(lo, hi),
                None => *v,
            };
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("control input"));
        }
        let cost_input = match (model.input_dict(), opts.clamp) {
            (Some(InputDictionary::Identity { .. }), Some(_)) => DVector::from_column_slice(&x),
            _ => u,
        };
        let (state, input) = controller.stage_cost_parts(model, &h, &cost_input)?;
        state_cost += state;
        input_cost += input;
        stage_costs.push(state + input);
        inputs.row_mut(t).copy_from_slice(&x);
        h = plant.advance(&h, &x)?;
        if !admissible(&h) {
            return Err(Error::BlowUp { step: t + 1 });
        }
        states.row_mut(t + 1).copy_from_slice(&h);
    }

    let cumulative_cost = stage_costs.iter().sum();
    Ok(ControlTrace {
        times: (0..=opts.steps).map(|t| t as f64 * opts.dt).collect(),
        states,
        inputs,
        stage_costs,
        cumulative_cost,
        state_cost,
        input_cost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rnn::{fit_controlled, DictionarySpec, FitOptions};
    use crate::rng::{stream, Stream};
    use crate::sampling::{swim_layer, Activation, Density, SamplingConfig};
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;
    use rand::Rng;

    #[test]
    fn scalar_riccati() {
        let (a, b, q, r) = (dmatrix![0.5], dmatrix![1.0], dmatrix![1.0], dmatrix![1.0]);
        let p = dare_solve(&a, &b, &q, &r, DareOptions::default()).unwrap();
        // P² − 0.25 P − 1 = 0
        let expect = (0.25 + libm::sqrt(0.0625 + 4.0)) / 2.0;
        assert_relative_eq!(p[(0, 0)], expect, epsilon = 1e-9);
        assert_relative_eq!(p[(0, 0)], 1.1328, epsilon = 1e-4);
        let gain = lqr_gain(&a, &b, &r, &p).unwrap();
        assert_relative_eq!(gain[(0, 0)], 0.5 * expect / (1.0 + expect), epsilon = 1e-9);
        assert_relative_eq!(gain[(0, 0)], 0.2656, epsilon = 1e-4);
    }

    #[test]
    fn memoryless_plant() {
        let p = dare_solve(&dmatrix![0.0], &dmatrix![1.0], &dmatrix![3.0], &dmatrix![1.0], DareOptions::default())
            .unwrap();
        assert_eq!(p, dmatrix![3.0]);
        assert_eq!(lqr_gain(&dmatrix![0.0], &dmatrix![1.0], &dmatrix![1.0], &p).unwrap(), dmatrix![0.0]);
    }

    fn random_plant(seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut rng = stream(seed, Stream::Custom(7));
        let a = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-0.8..0.8));
        let b = DMatrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
        (a, b)
    }

    #[test]
    fn random_plant_residual_and_stability() {
        let (a, b) = random_plant(1);
        let q = DMatrix::identity(4, 4);
        let r = DMatrix::identity(2, 2);
        let p = dare_solve(&a, &b, &q, &r, DareOptions::default()).unwrap();
        assert!(dare_residual(&a, &b, &q, &r, &p).unwrap() <= 1e-10);
        let gain = lqr_gain(&a, &b, &r, &p).unwrap();
        let closed = &a - &b * gain;
        let radius = crate::linalg::eig_general(&closed)
            .unwrap()
            .iter()
            .map(|l| crate::linalg::modulus(*l))
            .fold(0.0, f64::max);
        assert!(radius < 1.0);
        let lowest = p.clone().symmetric_eigenvalues().min();
        assert!(lowest >= -1e-8);
    }

    #[test]
    fn doubling_agrees_with_fixed_point() {
        let doubling = DareOptions { method: DareMethod::Doubling, ..Default::default() };
        let p = dare_solve(&dmatrix![0.5], &dmatrix![1.0], &dmatrix![1.0], &dmatrix![1.0], doubling).unwrap();
        assert_relative_eq!(p[(0, 0)], 1.1328, epsilon = 1e-4);

        let (a, b) = random_plant(3);
        let q = DMatrix::identity(4, 4);
        let r = DMatrix::identity(2, 2) * 0.3;
        let fixed = dare_solve(&a, &b, &q, &r, DareOptions::default()).unwrap();
        let fast = dare_solve(&a, &b, &q, &r, doubling).unwrap();
        assert_relative_eq!(fixed, fast, epsilon = 1e-9);
    }

    #[test]
    fn doubling_handles_slow_modes() {
        // Marginally stable and barely actuated: fixed point needs far more
        // iterations than the budget allows.
        let a = dmatrix![0.99999, 0.0; 0.0, 0.5];
        let b = dmatrix![1e-3; 1.0];
        let q = DMatrix::identity(2, 2);
        let r = dmatrix![1.0];
        let budget = DareOptions { max_iter: 200, ..Default::default() };
        assert!(dare_solve(&a, &b, &q, &r, budget).is_err());
        let p = dare_solve(&a, &b, &q, &r, DareOptions { method: DareMethod::Doubling, ..budget }).unwrap();
        assert!(dare_residual(&a, &b, &q, &r, &p).unwrap() <= 1e-10 * p.norm().max(1.0));
    }

    #[test]
    fn relative_tolerance_scales_with_solution() {
        let big = DMatrix::identity(2, 2) * 1e6;
        let strict = DareOptions::default();
        let relative = DareOptions { relative: true, ..strict };
        assert!(!strict.accepts(1e-6, &big));
        assert!(relative.accepts(1e-6, &big));
        let small = DMatrix::identity(2, 2) * 1e-3;
        assert_eq!(strict.accepts(5e-11, &small), relative.accepts(5e-11, &small));
        assert!(!relative.accepts(2e-10, &small));
    }

    #[test]
    fn full_subspace_matches_full_lqr() {
        let (a, b) = random_plant(6);
        let model = linear_surrogate(&a, &b);
        let weights = LqrWeights::diagonal(4, 1.0, 2, 1.0).unwrap();
        let full = lqr_fit(&model, &weights, &[0.0; 4], DareOptions::default()).unwrap();
        let mut rng = stream(8, Stream::Custom(1));
        let states = DMatrix::from_fn(30, 4, |_, _| rng.random_range(-1.0..1.0));
        let basis = feature_subspace(&model, &states, 0.0).unwrap();
        assert_eq!(basis.shape(), (4, 4));
        assert_relative_eq!(basis.transpose() * &basis, DMatrix::identity(4, 4), epsilon = 1e-12);
        let sub = lqr_fit_subspace(&model, &weights, &[0.0; 4], &basis, DareOptions::default()).unwrap();
        assert_relative_eq!(sub.gain(), full.gain(), epsilon = 1e-8);
        assert_relative_eq!(sub.riccati_p(), full.riccati_p(), epsilon = 1e-8);
    }

    #[test]
    fn feature_subspace_drops_unexcited_directions() {
        let (a, b) = random_plant(7);
        let model = linear_surrogate(&a, &b);
        // States confined to the first two coordinates span a plane.
        let mut rng = stream(9, Stream::Custom(1));
        let states = DMatrix::from_fn(25, 4, |_, c| if c < 2 { rng.random_range(-1.0..1.0) } else { 0.0 });
        let basis = feature_subspace(&model, &states, 1e-10).unwrap();
        assert_eq!(basis.ncols(), 2);
        assert_relative_eq!(basis.rows(2, 2).into_owned(), DMatrix::zeros(2, 2), epsilon = 1e-12);
        let weights = LqrWeights::diagonal(4, 1.0, 2, 1.0).unwrap();
        assert!(lqr_fit_subspace(&model, &weights, &[0.0; 4], &DMatrix::zeros(4, 0), DareOptions::default()).is_err());
    }

    #[test]
    fn unstabilizable_plant_fails() {
        let a = dmatrix![1.5, 0.0; 0.0, 0.5];
        let b = dmatrix![0.0; 1.0];
        let err = dare_solve(&a, &b, &DMatrix::identity(2, 2), &dmatrix![1.0], DareOptions { max_iter: 500, ..Default::default() });
        assert!(matches!(err, Err(Error::NoConvergence { .. })));
    }

    #[test]
    fn weight_validation() {
        assert!(LqrWeights::new(dmatrix![1.0, 2.0; 0.0, 1.0], dmatrix![1.0], CostSpace::State).is_err());
        assert!(LqrWeights::new(DMatrix::identity(2, 2), dmatrix![0.0], CostSpace::State).is_err());
        assert!(LqrWeights::new(dmatrix![-1.0, 0.0; 0.0, 1.0], dmatrix![1.0], CostSpace::State).is_err());
        assert!(LqrWeights::diagonal(2, 10.0, 1, 1.0).is_ok());
    }

    fn linear_surrogate(a: &DMatrix<f64>, b: &DMatrix<f64>) -> SampledRnn {
        let mut rng = stream(2, Stream::Custom(3));
        let n = 40;
        let h = DMatrix::from_fn(a.nrows(), n, |_, _| rng.random_range(-1.0..1.0));
        let x = DMatrix::from_fn(b.ncols(), n, |_, _| rng.random_range(-1.0..1.0));
        let next = a * &h + b * &x;
        fit_controlled(
            &h,
            &next,
            &x,
            None,
            &DictionarySpec::Identity,
            &DictionarySpec::Identity,
            &FitOptions::new(0.0),
            0,
        )
        .unwrap()
    }

    #[test]
    fn identity_dictionaries_reduce_to_classical_lqr() {
        let (a, b) = random_plant(5);
        let model = linear_surrogate(&a, &b);
        let weights = LqrWeights::diagonal(4, 2.0, 2, 0.5).unwrap();
        let ctrl = lqr_fit(&model, &weights, &[0.0; 4], DareOptions::default()).unwrap();
        let p = dare_solve(&a, &b, weights.q(), weights.r(), DareOptions::default()).unwrap();
        let gain = lqr_gain(&a, &b, weights.r(), &p).unwrap();
        assert_relative_eq!(ctrl.gain(), &gain, epsilon = 1e-8);

        let h0 = [0.5, -0.3, 0.8, 0.1];
        let mut plant = LinearPlant { a: a.clone(), b: b.clone() };
        let trace = mpc_run(
            &mut plant,
            &model,
            &ctrl,
            &h0,
            &MpcOptions {
                steps: 50,
                dt: 1.0,
                clamp: None,
            },
        )
        .unwrap();
        let closed = &a - &b * &gain;
        let mut h = DVector::from_column_slice(&h0);
        for t in 1..=50 {
            h = &closed * h;
            for k in 0..4 {
                assert_relative_eq!(trace.states[(t, k)], h[k], epsilon = 1e-8);
            }
        }
        assert_eq!(trace.cumulative_cost, trace.stage_costs.iter().sum::<f64>());
        assert_relative_eq!(trace.state_cost + trace.input_cost, trace.cumulative_cost, epsilon = 1e-9);
        assert!(trace.stage_costs.iter().all(|c| *c >= 0.0));
        assert_eq!(trace.times.len(), 51);
    }

    #[test]
    fn equilibrium_start_stays_put() {
        let (a, b) = random_plant(9);
        let model = linear_surrogate(&a, &b);
        let weights = LqrWeights::diagonal(4, 1.0, 2, 1.0).unwrap();
        let ctrl = lqr_fit(&model, &weights, &[0.0; 4], DareOptions::default()).unwrap();
        assert!(ctrl.control(&model, &[0.0; 4]).unwrap().amax() < 1e-6);
        let mut plant = LinearPlant { a, b };
        let trace = mpc_run(&mut plant, &model, &ctrl, &[0.0; 4], &MpcOptions { steps: 10, dt: 0.1, clamp: None })
            .unwrap();
        assert!(trace.inputs.amax() < 1e-6);
        assert!(trace.states.amax() < 1e-6);
    }

    #[test]
    fn uncontrolled_model_rejected() {
        let h = DMatrix::identity(2, 2);
        let model = crate::rnn::fit_uncontrolled(&h, &h, None, &DictionarySpec::Identity, &FitOptions::new(0.0), 0)
            .unwrap();
        let weights = LqrWeights::diagonal(2, 1.0, 1, 1.0).unwrap();
        assert!(lqr_fit(&model, &weights, &[0.0, 0.0], DareOptions::default()).is_err());
    }

    #[test]
    fn lift_projection_examples() {
        let identity = SampledLayer::identity(2);
        let mut rng = stream(4, Stream::Custom(5));
        let samples = DMatrix::from_fn(30, 2, |_, _| rng.random_range(-3.0..3.0));
        let p = fit_lift_projection(&identity, &samples, LstsqOptions::EXACT).unwrap();
        assert_relative_eq!(p, DMatrix::identity(2, 2), epsilon = 1e-12);

        // Affine layer whose bias lies outside the weight range: an exact
        // linear left inverse exists.
        let w = dmatrix![2.0, 1.0; -1.0, 3.0; 0.0, 0.0];
        let affine = SampledLayer::from_parts(w, DVector::from_vec(vec![0.0, 0.0, 1.0]), Activation::Identity)
            .unwrap();
        let p = fit_lift_projection(&affine, &samples, LstsqOptions::EXACT).unwrap();
        for held_out in [[0.7, -2.2], [-2.9, 1.3]] {
            let back = &p * DVector::from_vec(affine.apply(&held_out).unwrap());
            assert_relative_eq!(back[0], held_out[0], epsilon = 1e-8);
            assert_relative_eq!(back[1], held_out[1], epsilon = 1e-8);
        }

        let inputs = DMatrix::from_fn(500, 1, |_, _| rng.random_range(-3.0..3.0));
        let cfg = SamplingConfig::new(32, Activation::Tanh, Density::Uniform);
        let tanh = swim_layer(&inputs, None, &cfg, &mut rng).unwrap();
        let p = fit_lift_projection(&tanh, &inputs, LstsqOptions::new(1e-12).unwrap()).unwrap();
        for _ in 0..200 {
            let x = rng.random_range(-3.0..3.0);
            let back = &p * DVector::from_vec(tanh.apply(&[x]).unwrap());
            assert!((back[0] - x).abs() <= 0.05, "round trip at {x}: {}", back[0]);
        }
    }
}
