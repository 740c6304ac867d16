//! Benchmark systems, fixed-step integration and trajectory datasets.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::{stream, Stream};

/// Any component beyond this magnitude counts as a blow-up.
pub const BLOW_UP_THRESHOLD: f64 = 1e6;
/// Internal step length used to pick a default number of RK4 substeps.
pub const DEFAULT_INTERNAL_STEP: f64 = 0.01;

/// A continuous-time vector field `ḣ = f(h, x)`.
pub trait VectorField {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    /// `x` has `input_dim()` entries; `out` and `h` have `state_dim()`.
    fn eval(&self, h: &[f64], x: &[f64], out: &mut [f64]);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum System {
    Vdp { mu: f64 },
    ForcedVdp { mu: f64 },
    Lorenz63 { sigma: f64, rho: f64, beta: f64 },
    Rossler { alpha: f64, beta: f64, kappa: f64 },
}

impl System {
    pub const fn vdp() -> Self {
        System::Vdp { mu: 1.0 }
    }

    pub const fn forced_vdp() -> Self {
        System::ForcedVdp { mu: 1.0 }
    }

    pub const fn lorenz63() -> Self {
        System::Lorenz63 {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
        }
    }

    pub const fn rossler() -> Self {
        System::Rossler {
            alpha: 0.15,
            beta: 0.2,
            kappa: 10.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            System::Vdp { .. } => "vdp",
            System::ForcedVdp { .. } => "forced_vdp",
            System::Lorenz63 { .. } => "lorenz63",
            System::Rossler { .. } => "rossler",
        }
    }

    /// Right-hand side at `h`. A missing input on the forced oscillator
    /// means zero forcing unless `strict` is set.
    pub fn rhs(&self, h: &[f64], x: Option<&[f64]>, strict: bool) -> Result<Vec<f64>> {
        check_dim("system state", self.state_dim(), h.len())?;
        let zeros = vec![0.0; self.input_dim()];
        let x = match x {
            Some(x) => {
                check_dim("system input", self.input_dim(), x.len())?;
                x
            }
            None if strict && self.input_dim() > 0 => return Err(Error::MissingInput),
            None => &zeros,
        };
        let mut out = vec![0.0; self.state_dim()];
        self.eval(h, x, &mut out);
        Ok(out)
    }
}

impl VectorField for System {
    fn state_dim(&self) -> usize {
        match self {
            System::Vdp { .. } | System::ForcedVdp { .. } => 2,
            System::Lorenz63 { .. } | System::Rossler { .. } => 3,
        }
    }

    fn input_dim(&self) -> usize {
        match self {
            System::ForcedVdp { .. } => 1,
            _ => 0,
        }
    }

    fn eval(&self, h: &[f64], x: &[f64], out: &mut [f64]) {
        match *self {
            System::Vdp { mu } => {
                out[0] = h[1];
                out[1] = mu * (1.0 - h[0] * h[0]) * h[1] - h[0];
            }
            System::ForcedVdp { mu } => {
                out[0] = h[1];
                out[1] = mu * (1.0 - h[0] * h[0]) * h[1] - h[0] + x[0];
            }
            System::Lorenz63 { sigma, rho, beta } => {
                out[0] = sigma * (h[1] - h[0]);
                out[1] = h[0] * (rho - h[2]) - h[1];
                out[2] = h[0] * h[1] - beta * h[2];
            }
            System::Rossler { alpha, beta, kappa } => {
                out[0] = -h[1] - h[2];
                out[1] = h[0] + alpha * h[1];
                out[2] = beta + h[2] * (h[0] - kappa);
            }
        }
    }
}

/// Substeps giving an internal step of about [`DEFAULT_INTERNAL_STEP`].
pub fn default_substeps(dt: f64) -> usize {
    let n = libm::round(dt / DEFAULT_INTERNAL_STEP);
    if n < 1.0 {
        1
    } else {
        n as usize
    }
}

/// Workspace for classic fourth-order Runge–Kutta steps.
#[derive(Debug, Clone)]
pub struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    pub fn new(dim: usize) -> Self {
        Self {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            tmp: vec![0.0; dim],
        }
    }

    /// Advance `h` in place by `dt` using `substeps` equal RK4 steps with
    /// the input held constant.
    pub fn advance<F: VectorField + ?Sized>(
        &mut self,
        f: &F,
        h: &mut [f64],
        x: &[f64],
        dt: f64,
        substeps: usize,
    ) {
        let step = dt / substeps as f64;
        let n = h.len();
        for _ in 0..substeps {
            f.eval(h, x, &mut self.k1);
            for i in 0..n {
                self.tmp[i] = h[i] + 0.5 * step * self.k1[i];
            }
            f.eval(&self.tmp, x, &mut self.k2);
            for i in 0..n {
                self.tmp[i] = h[i] + 0.5 * step * self.k2[i];
            }
            f.eval(&self.tmp, x, &mut self.k3);
            for i in 0..n {
                self.tmp[i] = h[i] + step * self.k3[i];
            }
            f.eval(&self.tmp, x, &mut self.k4);
            for i in 0..n {
                h[i] += step / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
            }
        }
    }
}

pub(crate) fn admissible(h: &[f64]) -> bool {
    h.iter().all(|v| v.is_finite() && v.abs() <= BLOW_UP_THRESHOLD)
}

/// One sampled trajectory.
///
/// `states` holds one snapshot per row. `inputs`, when present, holds one
/// row per transition: row `t` is the input held constant while moving from
/// snapshot `t` to `t + 1`, so it has one row fewer than `states`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: DMatrix<f64>,
    pub inputs: Option<DMatrix<f64>>,
    pub outputs: Option<DMatrix<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }

    pub fn state(&self, t: usize) -> Vec<f64> {
        self.states.row(t).iter().copied().collect()
    }

    fn validate(&self) -> Result<()> {
        let len = self.len();
        if len == 0 {
            return Err(Error::InvalidArgument("empty trajectory".into()));
        }
        check_dim("trajectory times", len, self.times.len())?;
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument(
                "trajectory times must be strictly increasing".into(),
            ));
        }
        if let Some(x) = &self.inputs {
            check_dim("trajectory input rows", len - 1, x.nrows())?;
        }
        if let Some(y) = &self.outputs {
            check_dim("trajectory output rows", len, y.nrows())?;
        }
        Ok(())
    }
}

/// Integrate `f` from `h0` on the grid `0, dt, …, t_end` with RK4.
///
/// `inputs` holds one row per output step and is held constant across it.
pub fn integrate<F: VectorField + ?Sized>(
    f: &F,
    h0: &[f64],
    t_end: f64,
    dt: f64,
    inputs: Option<&DMatrix<f64>>,
    substeps: usize,
) -> Result<Trajectory> {
    check_dim("initial state", f.state_dim(), h0.len())?;
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidArgument(alloc::format!("dt must be positive, got {dt}")));
    }
    if !(t_end >= 0.0) || !t_end.is_finite() {
        return Err(Error::InvalidArgument(alloc::format!(
            "t_end must be non-negative, got {t_end}"
        )));
    }
    if substeps == 0 {
        return Err(Error::InvalidArgument("substeps must be at least 1".into()));
    }
    let steps = libm::round(t_end / dt) as usize;
    if let Some(x) = inputs {
        check_dim("input steps", steps, x.nrows())?;
        check_dim("input dimension", f.input_dim(), x.ncols())?;
    }
    if !admissible(h0) {
        return Err(Error::BlowUp { step: 0 });
    }

    let d = f.state_dim();
    let mut states = DMatrix::zeros(steps + 1, d);
    let mut h = h0.to_vec();
    states.row_mut(0).iter_mut().zip(&h).for_each(|(s, v)| *s = *v);
    let mut x = vec![0.0; f.input_dim()];
    let mut rk = Rk4::new(d);
    for step in 0..steps {
        if let Some(inp) = inputs {
            x.iter_mut().zip(inp.row(step).iter()).for_each(|(a, b)| *a = *b);
        }
        rk.advance(f, &mut h, &x, dt, substeps);
        if !admissible(&h) {
            return Err(Error::BlowUp { step: step + 1 });
        }
        states.row_mut(step + 1).iter_mut().zip(&h).for_each(|(s, v)| *s = *v);
    }
    Ok(Trajectory {
        times: (0..=steps).map(|k| k as f64 * dt).collect(),
        states,
        inputs: inputs.cloned(),
        outputs: None,
    })
}

/// Snapshot matrices, one snapshot per column.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshots {
    /// `H`: every state except each trajectory's last (`d_h × N`).
    pub current: DMatrix<f64>,
    /// `H'`: the successor of each column of `current`.
    pub next: DMatrix<f64>,
    /// `X`: input driving each transition (`d_x × N`).
    pub inputs: Option<DMatrix<f64>>,
    /// `Y`: output observed alongside each column of `current`.
    pub outputs: Option<DMatrix<f64>>,
}

impl Snapshots {
    pub fn len(&self) -> usize {
        self.current.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.current.ncols() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub trajectories: Vec<Trajectory>,
    pub dt: f64,
    pub seed: u64,
}

impl TrajectoryDataset {
    pub fn new(trajectories: Vec<Trajectory>, dt: f64, seed: u64) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(Error::InvalidArgument("dataset has no trajectories".into()));
        }
        let d = trajectories[0].states.ncols();
        let dx = trajectories[0].inputs.as_ref().map(|x| x.ncols());
        for t in &trajectories {
            t.validate()?;
            check_dim("trajectory state dimension", d, t.states.ncols())?;
            if t.inputs.as_ref().map(|x| x.ncols()) != dx {
                return Err(Error::InvalidArgument(
                    "trajectories disagree on inputs".into(),
                ));
            }
        }
        Ok(Self {
            trajectories,
            dt,
            seed,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.trajectories[0].states.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.trajectories[0].inputs.as_ref().map_or(0, |x| x.ncols())
    }

    pub fn n_pairs(&self) -> usize {
        self.trajectories.iter().map(|t| t.len() - 1).sum()
    }

    /// All states of all trajectories stacked row-wise.
    pub fn all_states(&self) -> DMatrix<f64> {
        let rows: usize = self.trajectories.iter().map(Trajectory::len).sum();
        let mut out = DMatrix::zeros(rows, self.state_dim());
        let mut r = 0;
        for t in &self.trajectories {
            out.rows_mut(r, t.len()).copy_from(&t.states);
            r += t.len();
        }
        out
    }

    /// `(H, H', X, Y)` without pairs across trajectory boundaries.
    pub fn snapshots(&self) -> Snapshots {
        let n = self.n_pairs();
        let d = self.state_dim();
        let mut current = DMatrix::zeros(d, n);
        let mut next = DMatrix::zeros(d, n);
        let dx = self.trajectories[0].inputs.as_ref().map(|x| x.ncols());
        let dy = self.trajectories[0].outputs.as_ref().map(|y| y.ncols());
        let mut inputs = dx.map(|dx| DMatrix::zeros(dx, n));
        let mut outputs = dy.map(|dy| DMatrix::zeros(dy, n));
        let mut col = 0;
        for t in &self.trajectories {
            let pairs = t.len() - 1;
            current
                .columns_mut(col, pairs)
                .copy_from(&t.states.rows(0, pairs).transpose());
            next.columns_mut(col, pairs)
                .copy_from(&t.states.rows(1, pairs).transpose());
            if let (Some(dst), Some(src)) = (inputs.as_mut(), t.inputs.as_ref()) {
                dst.columns_mut(col, pairs).copy_from(&src.transpose());
            }
            if let (Some(dst), Some(src)) = (outputs.as_mut(), t.outputs.as_ref()) {
                dst.columns_mut(col, pairs)
                    .copy_from(&src.rows(0, pairs).transpose());
            }
            col += pairs;
        }
        Snapshots {
            current,
            next,
            inputs,
            outputs,
        }
    }

    /// Keep only the listed state coordinates (partial observation).
    pub fn select_state_dims(&self, dims: &[usize]) -> Result<Self> {
        let d = self.state_dim();
        if dims.is_empty() || dims.iter().any(|&k| k >= d) {
            return Err(Error::InvalidArgument(alloc::format!(
                "observed coordinates {dims:?} invalid for dimension {d}"
            )));
        }
        let trajectories = self
            .trajectories
            .iter()
            .map(|t| Trajectory {
                states: t.states.select_columns(dims),
                ..t.clone()
            })
            .collect();
        Ok(Self {
            trajectories,
            dt: self.dt,
            seed: self.seed,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputLaw {
    None,
    UniformRandom,
}

/// Data-generation protocol for one dataset split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub n_traj: usize,
    pub init_box: Vec<(f64, f64)>,
    pub t_end: f64,
    pub dt: f64,
    #[serde(default)]
    pub substeps: Option<usize>,
    #[serde(default = "no_input_law")]
    pub input_law: InputLaw,
    #[serde(default)]
    pub input_box: Vec<(f64, f64)>,
}

fn no_input_law() -> InputLaw {
    InputLaw::None
}

fn sample_box<R: Rng + ?Sized>(bounds: &[(f64, f64)], rng: &mut R) -> Vec<f64> {
    bounds
        .iter()
        .map(|&(lo, hi)| if hi > lo { rng.random_range(lo..hi) } else { lo })
        .collect()
}

fn validate_box(name: &str, bounds: &[(f64, f64)], dim: usize) -> Result<()> {
    if bounds.len() != dim {
        return Err(Error::InvalidArgument(alloc::format!(
            "{name} has {} intervals for dimension {dim}",
            bounds.len()
        )));
    }
    if bounds.iter().any(|&(lo, hi)| !(lo <= hi) || !lo.is_finite() || !hi.is_finite()) {
        return Err(Error::InvalidArgument(alloc::format!("{name} has an invalid interval")));
    }
    Ok(())
}

/// Sample `n_traj` trajectories with initial conditions uniform over the
/// box. Trajectory `i` draws from its own stream of `seed`, so results do
/// not depend on generation order.
pub fn generate_dataset(
    system: &System,
    config: &GenerationConfig,
    seed: u64,
) -> Result<TrajectoryDataset> {
    validate_box("init_box", &config.init_box, system.state_dim())?;
    if config.n_traj == 0 {
        return Err(Error::InvalidArgument("n_traj must be at least 1".into()));
    }
    let forced = config.input_law == InputLaw::UniformRandom;
    if forced {
        validate_box("input_box", &config.input_box, system.input_dim())?;
    }
    let substeps = config.substeps.unwrap_or_else(|| default_substeps(config.dt));
    let steps = libm::round(config.t_end / config.dt) as usize;

    let mut trajectories = Vec::with_capacity(config.n_traj);
    for i in 0..config.n_traj {
        let mut rng = stream(seed, Stream::Trajectory(i as u32));
        let h0 = sample_box(&config.init_box, &mut rng);
        let inputs = forced.then(|| {
            let mut x = DMatrix::zeros(steps, system.input_dim());
            for s in 0..steps {
                let row = sample_box(&config.input_box, &mut rng);
                x.row_mut(s).iter_mut().zip(row).for_each(|(a, b)| *a = b);
            }
            x
        });
        trajectories.push(integrate(
            system,
            &h0,
            config.t_end,
            config.dt,
            inputs.as_ref(),
            substeps,
        )?);
    }
    TrajectoryDataset::new(trajectories, config.dt, seed)
}

/// Per-coordinate affine map `v ↦ scale · v + offset` sending the observed
/// range onto `[lower, upper]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeScaler {
    pub scale: Vec<f64>,
    pub offset: Vec<f64>,
    pub lower: f64,
    pub upper: f64,
}

impl RangeScaler {
    /// Fit on `data` (`N × d`). Coordinates without spread keep scale 1 and
    /// are only shifted to the interval centre.
    pub fn fit(data: &DMatrix<f64>, lower: f64, upper: f64) -> Result<Self> {
        if !(upper > lower) {
            return Err(Error::InvalidArgument(String::from(
                "scaler target interval must have upper > lower",
            )));
        }
        if data.nrows() == 0 {
            return Err(Error::InvalidArgument("scaler fit on empty data".into()));
        }
        crate::linalg::ensure_finite(data, "scaler data")?;
        let mut scale = Vec::with_capacity(data.ncols());
        let mut offset = Vec::with_capacity(data.ncols());
        let centre = 0.5 * (lower + upper);
        for col in data.column_iter() {
            let lo = col.min();
            let hi = col.max();
            if hi > lo {
                let s = (upper - lower) / (hi - lo);
                scale.push(s);
                offset.push(lower - s * lo);
            } else {
                scale.push(1.0);
                offset.push(centre - lo);
            }
        }
        Ok(Self {
            scale,
            offset,
            lower,
            upper,
        })
    }

    pub fn fit_dataset(data: &TrajectoryDataset, lower: f64, upper: f64) -> Result<Self> {
        Self::fit(&data.all_states(), lower, upper)
    }

    pub fn dim(&self) -> usize {
        self.scale.len()
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim("scaler input", self.dim(), v.len())?;
        Ok(v.iter()
            .zip(self.scale.iter().zip(&self.offset))
            .map(|(x, (s, o))| s * x + o)
            .collect())
    }

    pub fn invert(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim("scaler input", self.dim(), v.len())?;
        Ok(v.iter()
            .zip(self.scale.iter().zip(&self.offset))
            .map(|(y, (s, o))| (y - o) / s)
            .collect())
    }

    pub fn apply_rows(&self, rows: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("scaler columns", self.dim(), rows.ncols())?;
        let mut out = rows.clone();
        for (c, mut col) in out.column_iter_mut().enumerate() {
            let (s, o) = (self.scale[c], self.offset[c]);
            col.iter_mut().for_each(|v| *v = s * *v + o);
        }
        Ok(out)
    }

    pub fn invert_rows(&self, rows: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("scaler columns", self.dim(), rows.ncols())?;
        let mut out = rows.clone();
        for (c, mut col) in out.column_iter_mut().enumerate() {
            let (s, o) = (self.scale[c], self.offset[c]);
            col.iter_mut().for_each(|v| *v = (*v - o) / s);
        }
        Ok(out)
    }

    /// Scale the states of every trajectory; inputs and outputs are untouched.
    pub fn apply_dataset(&self, data: &TrajectoryDataset) -> Result<TrajectoryDataset> {
        let trajectories = data
            .trajectories
            .iter()
            .map(|t| {
                Ok(Trajectory {
                    states: self.apply_rows(&t.states)?,
                    ..t.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrajectoryDataset {
            trajectories,
            dt: data.dt,
            seed: data.seed,
        })
    }
}
