//! Sampled recurrent networks with Koopman structure.
//!
//! A fitted [`SampledRnn`] advances the state by
//!
//! ```text
//! z' = K F(h) + B G(x),    h' = C z'
//! ```
//!
//! where `F` (width `M`) and `G` (width `M̂`) are sampled dictionaries and
//! `K`, `B`, `C` are least-squares solutions:
//!
//! ```text
//! [K, B] = F(H') [F(H); G(X)]⁺,    C = H F(H)⁺
//! ```
//!
//! Every pseudoinverse goes through [`Factorization`] with one `rcond`.
//! Rollouts project to the state space and re-lift at every step.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{admissible, RangeScaler, Snapshots};
use crate::embedding::EmbeddingMap;
use crate::error::{check_dim, Error, Result};
use crate::linalg::{eig_general, ensure_finite, Factorization, LstsqOptions};
use crate::rng::{stream, Stream};
use crate::sampling::{
    gaussian_layer, swim_layer, Activation, SampledLayer, SampledPair, SamplingConfig,
};

/// How a hidden layer is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DictionarySpec {
    /// Weights built from data pairs.
    Swim(SamplingConfig),
    /// Standard-normal weights, uniform biases.
    Gaussian { width: usize, activation: Activation },
    /// Raw coordinates.
    Identity,
}

/// `G`: either the raw input or a sampled layer on it.
#[derive(Debug, Clone, PartialEq)]
pub enum InputDictionary {
    Identity { dim: usize },
    Layer(SampledLayer),
}

impl InputDictionary {
    pub fn width(&self) -> usize {
        match self {
            InputDictionary::Identity { dim } => *dim,
            InputDictionary::Layer(l) => l.width(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            InputDictionary::Identity { dim } => *dim,
            InputDictionary::Layer(l) => l.input_dim(),
        }
    }

    pub fn layer(&self) -> Option<&SampledLayer> {
        match self {
            InputDictionary::Layer(l) => Some(l),
            InputDictionary::Identity { .. } => None,
        }
    }

    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        match self {
            InputDictionary::Identity { dim } => {
                check_dim("input", *dim, x.len())?;
                check_dim("input features", *dim, out.len())?;
                out.copy_from_slice(x);
                Ok(())
            }
            InputDictionary::Layer(l) => l.apply_into(x, out),
        }
    }

    /// `points` is `N × d_x`; the result `N × M̂`.
    pub fn apply_rows(&self, points: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            InputDictionary::Identity { dim } => {
                check_dim("input columns", *dim, points.ncols())?;
                Ok(points.clone())
            }
            InputDictionary::Layer(l) => l.apply_rows(points),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    /// `y = V h` with `V = Y H⁺`.
    FromStates,
    /// `y = V z` with `V = Y F(H)⁺`.
    FromLifted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub rcond: f64,
    /// Append a constant feature to the regressors of `K`/`B`.
    #[serde(default)]
    pub bias_in_regression: bool,
    #[serde(default = "default_output_mode")]
    pub v_mode: OutputMode,
}

fn default_output_mode() -> OutputMode {
    OutputMode::FromStates
}

impl FitOptions {
    pub fn new(rcond: f64) -> Self {
        Self {
            rcond,
            bias_in_regression: false,
            v_mode: OutputMode::FromStates,
        }
    }

    fn lstsq(&self) -> Result<LstsqOptions> {
        LstsqOptions::new(self.rcond)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMeta {
    pub rcond: f64,
    pub seed: Option<u64>,
    pub state_width: usize,
    pub input_width: usize,
    pub n_samples: usize,
    /// FNV-1a over the bit patterns of `H`, `H'` and `X`.
    pub data_hash: u64,
}

fn fnv1a(parts: &[Option<&DMatrix<f64>>]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for m in parts.iter().flatten() {
        for b in (m.nrows() as u64)
            .to_le_bytes()
            .into_iter()
            .chain((m.ncols() as u64).to_le_bytes())
            .chain(m.iter().flat_map(|v| v.to_bits().to_le_bytes()))
        {
            hash ^= u64::from(b);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    hash
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputMap {
    pub mode: OutputMode,
    pub matrix: DMatrix<f64>,
}

/// Closed-loop rollout. `states` row `t` is the state after `t + 1` steps;
/// a rollout that leaves the admissible region is cut short and reports
/// the step in `diverged_at`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub states: DMatrix<f64>,
    pub outputs: Option<DMatrix<f64>>,
    pub diverged_at: Option<usize>,
}

/// Anything that can roll a state forward in closed loop.
pub trait Forecaster {
    fn state_dim(&self) -> usize;
    /// `inputs` has one row per step for controlled models.
    fn rollout(&self, h0: &[f64], steps: usize, inputs: Option<&DMatrix<f64>>)
        -> Result<Prediction>;
}

/// Regressor matrices in snapshot-major layout (one snapshot per row).
#[derive(Debug, Clone)]
pub struct EdmdProblem<'a> {
    /// `F(H)ᵀ`, `N × M`.
    pub features: &'a DMatrix<f64>,
    /// `F(H')ᵀ`, `N × M`.
    pub next_features: &'a DMatrix<f64>,
    /// `G(X)ᵀ`, `N × M̂`.
    pub input_features: Option<&'a DMatrix<f64>>,
    /// `Hᵀ`, `N × d`.
    pub states: &'a DMatrix<f64>,
    pub bias: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdmdSolution {
    pub koopman: DMatrix<f64>,
    pub input_matrix: Option<DMatrix<f64>>,
    pub lifted_bias: Option<DVector<f64>>,
    pub projection: DMatrix<f64>,
}

fn hstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks[0].nrows();
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut c = 0;
    for b in blocks {
        out.columns_mut(c, b.ncols()).copy_from(*b);
        c += b.ncols();
    }
    out
}

/// Solve the EDMD least-squares problems for `K`, `B` and `C`.
///
/// Returns the factorization of `F(H)ᵀ` too, for follow-up solves against
/// the same regressors.
pub fn solve_edmd(
    problem: &EdmdProblem<'_>,
    opts: LstsqOptions,
) -> Result<(EdmdSolution, Factorization)> {
    let n = problem.features.nrows();
    let m = problem.features.ncols();
    check_dim("next-state feature rows", n, problem.next_features.nrows())?;
    check_dim("next-state feature columns", m, problem.next_features.ncols())?;
    check_dim("state rows", n, problem.states.nrows())?;
    if n == 0 {
        return Err(Error::InvalidArgument("no snapshot pairs to fit".into()));
    }

    let base = Factorization::new(problem.features, opts)?;
    let projection = base.solve(problem.states)?.transpose();

    let input_width = problem.input_features.map_or(0, |g| g.ncols());
    let stacked = if input_width == 0 && !problem.bias {
        None
    } else {
        let ones = DMatrix::from_element(n, usize::from(problem.bias), 1.0);
        let mut blocks = vec![problem.features];
        if let Some(g) = problem.input_features {
            check_dim("input feature rows", n, g.nrows())?;
            blocks.push(g);
        }
        blocks.push(&ones);
        let stacked = hstack(&blocks);
        if stacked.iter().all(|v| *v == 0.0) {
            return Err(Error::InvalidArgument("stacked feature matrix has rank 0".into()));
        }
        Some(Factorization::new(&stacked, opts)?)
    };
    let coeffs = stacked.as_ref().unwrap_or(&base).solve(problem.next_features)?;

    let koopman = coeffs.rows(0, m).transpose();
    let input_matrix = problem
        .input_features
        .map(|_| coeffs.rows(m, input_width).transpose());
    let lifted_bias = problem
        .bias
        .then(|| coeffs.row(m + input_width).transpose());
    Ok((
        EdmdSolution {
            koopman,
            input_matrix,
            lifted_bias,
            projection,
        },
        base,
    ))
}

fn build_layer(
    spec: &DictionarySpec,
    points: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    seed: u64,
    which: Stream,
) -> Result<SampledLayer> {
    let mut rng = stream(seed, which);
    match spec {
        DictionarySpec::Swim(cfg) => swim_layer(points, Some(targets), cfg, &mut rng),
        DictionarySpec::Gaussian { width, activation } => {
            gaussian_layer(points.ncols(), *width, *activation, &mut rng)
        }
        DictionarySpec::Identity => Ok(SampledLayer::identity(points.ncols())),
    }
}

fn build_input_dictionary(
    spec: &DictionarySpec,
    inputs: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    seed: u64,
) -> Result<InputDictionary> {
    match spec {
        DictionarySpec::Identity => Ok(InputDictionary::Identity { dim: inputs.ncols() }),
        other => Ok(InputDictionary::Layer(build_layer(
            other,
            inputs,
            targets,
            seed,
            Stream::InputLayer,
        )?)),
    }
}

fn check_snapshots(h: &DMatrix<f64>, h_next: &DMatrix<f64>) -> Result<()> {
    check_dim("successor rows", h.nrows(), h_next.nrows())?;
    check_dim("successor columns", h.ncols(), h_next.ncols())?;
    if h.ncols() == 0 {
        return Err(Error::InvalidArgument("no snapshot pairs to fit".into()));
    }
    ensure_finite(h, "states")?;
    ensure_finite(h_next, "successor states")
}

/// A fitted recurrent network. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledRnn {
    state_dict: SampledLayer,
    input_dict: Option<InputDictionary>,
    koopman: DMatrix<f64>,
    input_matrix: Option<DMatrix<f64>>,
    lifted_bias: Option<DVector<f64>>,
    projection: DMatrix<f64>,
    output: Option<OutputMap>,
    scaler: Option<RangeScaler>,
    embedding: Option<EmbeddingMap>,
    meta: FitMeta,
    // C K, C B and C k₀, cached for rollouts.
    proj_koopman: DMatrix<f64>,
    proj_input: Option<DMatrix<f64>>,
    proj_bias: Option<DVector<f64>>,
}

/// Fit an autonomous model: `K = F(H') F(H)⁺`, `C = H F(H)⁺`, `V = Y H⁺`.
///
/// `h` and `h_next` are `d × N`, `y` is `d_y × N` aligned with `h`.
pub fn fit_uncontrolled(
    h: &DMatrix<f64>,
    h_next: &DMatrix<f64>,
    y: Option<&DMatrix<f64>>,
    dictionary: &DictionarySpec,
    opts: &FitOptions,
    seed: u64,
) -> Result<SampledRnn> {
    check_snapshots(h, h_next)?;
    let rows = h.transpose();
    let targets = h_next.transpose();
    let state_dict = build_layer(dictionary, &rows, &targets, seed, Stream::StateLayer)?;
    let mut model = fit_with_dictionaries(state_dict, None, h, h_next, None, y, opts)?;
    model.meta.seed = Some(seed);
    Ok(model)
}

/// Fit a controlled model: `[K, B] = F(H') [F(H); G(X)]⁺`.
///
/// The state layer is sampled before the input layer, each from its own
/// stream of `seed`.
pub fn fit_controlled(
    h: &DMatrix<f64>,
    h_next: &DMatrix<f64>,
    x: &DMatrix<f64>,
    y: Option<&DMatrix<f64>>,
    state_dictionary: &DictionarySpec,
    input_dictionary: &DictionarySpec,
    opts: &FitOptions,
    seed: u64,
) -> Result<SampledRnn> {
    check_snapshots(h, h_next)?;
    check_dim("input columns", h.ncols(), x.ncols())?;
    let rows = h.transpose();
    let targets = h_next.transpose();
    let state_dict = build_layer(state_dictionary, &rows, &targets, seed, Stream::StateLayer)?;
    let input_dict = build_input_dictionary(input_dictionary, &x.transpose(), &targets, seed)?;
    let mut model =
        fit_with_dictionaries(state_dict, Some(input_dict), h, h_next, Some(x), y, opts)?;
    model.meta.seed = Some(seed);
    Ok(model)
}

/// Fit the outer matrices for given dictionaries.
pub fn fit_with_dictionaries(
    state_dict: SampledLayer,
    input_dict: Option<InputDictionary>,
    h: &DMatrix<f64>,
    h_next: &DMatrix<f64>,
    x: Option<&DMatrix<f64>>,
    y: Option<&DMatrix<f64>>,
    opts: &FitOptions,
) -> Result<SampledRnn> {
    check_snapshots(h, h_next)?;
    check_dim("dictionary input", h.nrows(), state_dict.input_dim())?;
    let lstsq = opts.lstsq()?;
    let n = h.ncols();
    if input_dict.is_some() != x.is_some() {
        return Err(Error::InvalidArgument(
            "inputs and input dictionary must be given together".into(),
        ));
    }

    let states = h.transpose();
    let features = state_dict.apply_rows(&states)?;
    let next_features = state_dict.apply_rows(&h_next.transpose())?;
    let input_features = match (&input_dict, x) {
        (Some(g), Some(x)) => {
            check_dim("input columns", n, x.ncols())?;
            ensure_finite(x, "inputs")?;
            Some(g.apply_rows(&x.transpose())?)
        }
        _ => None,
    };
    let (solution, base) = solve_edmd(
        &EdmdProblem {
            features: &features,
            next_features: &next_features,
            input_features: input_features.as_ref(),
            states: &states,
            bias: opts.bias_in_regression,
        },
        lstsq,
    )?;

    let output = match y {
        Some(y) => {
            check_dim("output columns", n, y.ncols())?;
            let matrix = match opts.v_mode {
                OutputMode::FromStates => {
                    Factorization::new(&states, lstsq)?.solve(&y.transpose())?.transpose()
                }
                OutputMode::FromLifted => base.solve(&y.transpose())?.transpose(),
            };
            Some(OutputMap {
                mode: opts.v_mode,
                matrix,
            })
        }
        None => None,
    };

    let meta = FitMeta {
        rcond: opts.rcond,
        seed: None,
        state_width: state_dict.width(),
        input_width: input_dict.as_ref().map_or(0, InputDictionary::width),
        n_samples: n,
        data_hash: fnv1a(&[Some(h), Some(h_next), x]),
    };
    SampledRnn::assemble(
        state_dict,
        input_dict,
        solution,
        output,
        None,
        None,
        meta,
    )
}

impl SampledRnn {
    fn assemble(
        state_dict: SampledLayer,
        input_dict: Option<InputDictionary>,
        solution: EdmdSolution,
        output: Option<OutputMap>,
        scaler: Option<RangeScaler>,
        embedding: Option<EmbeddingMap>,
        meta: FitMeta,
    ) -> Result<Self> {
        let m = state_dict.width();
        let EdmdSolution {
            koopman,
            input_matrix,
            lifted_bias,
            projection,
        } = solution;
        check_dim("Koopman rows", m, koopman.nrows())?;
        check_dim("Koopman columns", m, koopman.ncols())?;
        check_dim("projection columns", m, projection.ncols())?;
        check_dim("projection rows", state_dict.input_dim(), projection.nrows())?;
        match (&input_dict, &input_matrix) {
            (Some(g), Some(b)) => {
                check_dim("input matrix rows", m, b.nrows())?;
                check_dim("input matrix columns", g.width(), b.ncols())?;
            }
            (None, None) => {}
            _ => {
                return Err(Error::InvalidArgument(
                    "input matrix present iff input dictionary present".into(),
                ))
            }
        }
        if let Some(k0) = &lifted_bias {
            check_dim("lifted bias", m, k0.len())?;
        }
        if let Some(out) = &output {
            let expected = match out.mode {
                OutputMode::FromStates => projection.nrows(),
                OutputMode::FromLifted => m,
            };
            check_dim("output map columns", expected, out.matrix.ncols())?;
        }
        let proj_koopman = &projection * &koopman;
        let proj_input = input_matrix.as_ref().map(|b| &projection * b);
        let proj_bias = lifted_bias.as_ref().map(|k0| &projection * k0);
        Ok(Self {
            state_dict,
            input_dict,
            koopman,
            input_matrix,
            lifted_bias,
            projection,
            output,
            scaler,
            embedding,
            meta,
            proj_koopman,
            proj_input,
            proj_bias,
        })
    }

    pub fn state_dict(&self) -> &SampledLayer {
        &self.state_dict
    }

    pub fn input_dict(&self) -> Option<&InputDictionary> {
        self.input_dict.as_ref()
    }

    /// `K`.
    pub fn koopman(&self) -> &DMatrix<f64> {
        &self.koopman
    }

    /// `B`.
    pub fn input_matrix(&self) -> Option<&DMatrix<f64>> {
        self.input_matrix.as_ref()
    }

    pub fn lifted_bias(&self) -> Option<&DVector<f64>> {
        self.lifted_bias.as_ref()
    }

    /// `C`.
    pub fn projection(&self) -> &DMatrix<f64> {
        &self.projection
    }

    pub fn output(&self) -> Option<&OutputMap> {
        self.output.as_ref()
    }

    pub fn scaler(&self) -> Option<&RangeScaler> {
        self.scaler.as_ref()
    }

    pub fn embedding(&self) -> Option<&EmbeddingMap> {
        self.embedding.as_ref()
    }

    pub fn meta(&self) -> &FitMeta {
        &self.meta
    }

    pub fn lifted_dim(&self) -> usize {
        self.state_dict.width()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dict.as_ref().map_or(0, InputDictionary::input_dim)
    }

    pub fn is_controlled(&self) -> bool {
        self.input_dict.is_some()
    }

    /// Attach the normalization the training data went through.
    pub fn with_scaler(mut self, scaler: RangeScaler) -> Result<Self> {
        check_dim("scaler dimension", self.state_dim(), scaler.dim())?;
        self.scaler = Some(scaler);
        Ok(self)
    }

    /// Attach the delay/PCA map that produced the training states.
    pub fn with_embedding(mut self, map: EmbeddingMap) -> Result<Self> {
        check_dim("embedding dimension", self.state_dim(), map.state_dim())?;
        self.embedding = Some(map);
        Ok(self)
    }

    /// `F(h)`.
    pub fn lift(&self, h: &[f64]) -> Result<Vec<f64>> {
        self.state_dict.apply(h)
    }

    /// `G(x)`.
    pub fn lift_input(&self, x: &[f64]) -> Result<Vec<f64>> {
        match &self.input_dict {
            Some(g) => {
                let mut out = vec![0.0; g.width()];
                g.apply_into(x, &mut out)?;
                Ok(out)
            }
            None => Err(Error::UnexpectedInput),
        }
    }

    /// Lifted successor `K z + B u (+ k₀)` for a lifted state and lifted input.
    pub fn lifted_step(&self, z: &[f64], u: Option<&[f64]>) -> Result<Vec<f64>> {
        check_dim("lifted state", self.lifted_dim(), z.len())?;
        let mut next = &self.koopman * DVector::from_column_slice(z);
        match (&self.input_matrix, u) {
            (Some(b), Some(u)) => {
                check_dim("lifted input", b.ncols(), u.len())?;
                next += b * DVector::from_column_slice(u);
            }
            (Some(_), None) => return Err(Error::MissingInput),
            (None, Some(_)) => return Err(Error::UnexpectedInput),
            (None, None) => {}
        }
        if let Some(k0) = &self.lifted_bias {
            next += k0;
        }
        Ok(next.iter().copied().collect())
    }

    /// One step of the recurrence; returns `(h', z')`.
    pub fn step(&self, h: &[f64], x: Option<&[f64]>) -> Result<(Vec<f64>, Vec<f64>)> {
        check_dim("state", self.state_dim(), h.len())?;
        let z = self.lift(h)?;
        let u = match (x, self.is_controlled()) {
            (Some(x), true) => Some(self.lift_input(x)?),
            (Some(_), false) => return Err(Error::UnexpectedInput),
            (None, true) => return Err(Error::MissingInput),
            (None, false) => None,
        };
        let z_next = self.lifted_step(&z, u.as_deref())?;
        let h_next = &self.projection * DVector::from_column_slice(&z_next);
        Ok((h_next.iter().copied().collect(), z_next))
    }

    /// Closed-loop prediction of `steps` states after `h0`.
    pub fn predict(
        &self,
        h0: &[f64],
        steps: usize,
        inputs: Option<&DMatrix<f64>>,
    ) -> Result<Prediction> {
        let d = self.state_dim();
        check_dim("initial state", d, h0.len())?;
        if steps == 0 {
            return Err(Error::InvalidArgument("prediction horizon must be at least 1".into()));
        }
        match (inputs, self.is_controlled()) {
            (Some(x), true) => {
                check_dim("input steps", steps, x.nrows())?;
                check_dim("input dimension", self.input_dim(), x.ncols())?;
            }
            (Some(_), false) => return Err(Error::UnexpectedInput),
            (None, true) => return Err(Error::MissingInput),
            (None, false) => {}
        }

        let m = self.lifted_dim();
        let lifted_output = matches!(
            self.output,
            Some(OutputMap {
                mode: OutputMode::FromLifted,
                ..
            })
        );
        let mut states = DMatrix::zeros(steps, d);
        let mut outputs = self.output.as_ref().map(|o| DMatrix::zeros(steps, o.matrix.nrows()));
        let mut h = DVector::from_column_slice(h0);
        let mut f = vec![0.0; m];
        let mut g = vec![0.0; self.input_dict.as_ref().map_or(0, InputDictionary::width)];
        let mut x = vec![0.0; self.input_dim()];
        let mut diverged_at = None;
        let mut produced = steps;

        for t in 0..steps {
            self.state_dict.apply_into(h.as_slice(), &mut f)?;
            let fv = DVector::from_column_slice(&f);
            let mut next = &self.proj_koopman * &fv;
            let mut gv = None;
            if let (Some(dict), Some(cb), Some(inp)) = (&self.input_dict, &self.proj_input, inputs) {
                x.iter_mut().zip(inp.row(t).iter()).for_each(|(a, b)| *a = *b);
                dict.apply_into(&x, &mut g)?;
                let v = DVector::from_column_slice(&g);
                next += cb * &v;
                gv = Some(v);
            }
            if let Some(cb0) = &self.proj_bias {
                next += cb0;
            }
            if !admissible(next.as_slice()) {
                diverged_at = Some(t);
                produced = t;
                break;
            }
            states.row_mut(t).copy_from(&next.transpose());
            if let (Some(out), Some(buf)) = (&self.output, outputs.as_mut()) {
                let y = if lifted_output {
                    let mut z = &self.koopman * &fv;
                    if let (Some(b), Some(v)) = (&self.input_matrix, &gv) {
                        z += b * v;
                    }
                    if let Some(k0) = &self.lifted_bias {
                        z += k0;
                    }
                    &out.matrix * z
                } else {
                    &out.matrix * &next
                };
                buf.row_mut(t).copy_from(&y.transpose());
            }
            h = next;
        }

        if produced < steps {
            states = states.rows(0, produced).into_owned();
            outputs = outputs.map(|o| o.rows(0, produced).into_owned());
        }
        Ok(Prediction {
            states,
            outputs,
            diverged_at,
        })
    }

    /// Eigenvalues of `K`.
    pub fn koopman_eigenvalues(&self) -> Result<Vec<Complex<f64>>> {
        eig_general(&self.koopman)
    }

    pub fn state_dim(&self) -> usize {
        self.projection.nrows()
    }
}

impl Forecaster for SampledRnn {
    fn state_dim(&self) -> usize {
        SampledRnn::state_dim(self)
    }

    fn rollout(
        &self,
        h0: &[f64],
        steps: usize,
        inputs: Option<&DMatrix<f64>>,
    ) -> Result<Prediction> {
        self.predict(h0, steps, inputs)
    }
}

/// Dictionary network without Koopman factorization: the next state is
/// regressed directly, `h' = C_h F(h) + C_x G(x) (+ b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectRnn {
    state_dict: SampledLayer,
    input_dict: Option<InputDictionary>,
    state_readout: DMatrix<f64>,
    input_readout: Option<DMatrix<f64>>,
    bias: Option<DVector<f64>>,
}

impl DirectRnn {
    pub fn fit(
        snapshots: &Snapshots,
        state_dictionary: &DictionarySpec,
        input_dictionary: Option<&DictionarySpec>,
        opts: &FitOptions,
        seed: u64,
    ) -> Result<Self> {
        let (h, h_next) = (&snapshots.current, &snapshots.next);
        check_snapshots(h, h_next)?;
        let rows = h.transpose();
        let targets = h_next.transpose();
        let state_dict = build_layer(state_dictionary, &rows, &targets, seed, Stream::StateLayer)?;
        let input_dict = match (input_dictionary, &snapshots.inputs) {
            (Some(spec), Some(x)) => Some(build_input_dictionary(spec, &x.transpose(), &targets, seed)?),
            (None, None) => None,
            _ => {
                return Err(Error::InvalidArgument(
                    "inputs and input dictionary must be given together".into(),
                ))
            }
        };

        let n = h.ncols();
        let features = state_dict.apply_rows(&rows)?;
        let input_features = match (&input_dict, &snapshots.inputs) {
            (Some(g), Some(x)) => Some(g.apply_rows(&x.transpose())?),
            _ => None,
        };
        let ones = DMatrix::from_element(n, usize::from(opts.bias_in_regression), 1.0);
        let mut blocks = vec![&features];
        if let Some(g) = &input_features {
            blocks.push(g);
        }
        blocks.push(&ones);
        let coeffs = Factorization::new(&hstack(&blocks), opts.lstsq()?)?.solve(&targets)?;
        let m = state_dict.width();
        let mx = input_features.as_ref().map_or(0, |g| g.ncols());
        Ok(Self {
            state_readout: coeffs.rows(0, m).transpose(),
            input_readout: input_features.as_ref().map(|_| coeffs.rows(m, mx).transpose()),
            bias: opts
                .bias_in_regression
                .then(|| coeffs.row(m + mx).transpose()),
            state_dict,
            input_dict,
        })
    }

    pub fn state_dict(&self) -> &SampledLayer {
        &self.state_dict
    }
}

impl Forecaster for DirectRnn {
    fn state_dim(&self) -> usize {
        self.state_readout.nrows()
    }

    fn rollout(
        &self,
        h0: &[f64],
        steps: usize,
        inputs: Option<&DMatrix<f64>>,
    ) -> Result<Prediction> {
        let d = self.state_dim();
        check_dim("initial state", d, h0.len())?;
        if steps == 0 {
            return Err(Error::InvalidArgument("prediction horizon must be at least 1".into()));
        }
        if inputs.is_some() != self.input_dict.is_some() {
            return Err(if inputs.is_some() {
                Error::UnexpectedInput
            } else {
                Error::MissingInput
            });
        }
        let mut states = DMatrix::zeros(steps, d);
        let mut h = DVector::from_column_slice(h0);
        let mut f = vec![0.0; self.state_dict.width()];
        let mut g = vec![0.0; self.input_dict.as_ref().map_or(0, InputDictionary::width)];
        for t in 0..steps {
            self.state_dict.apply_into(h.as_slice(), &mut f)?;
            let mut next = &self.state_readout * DVector::from_column_slice(&f);
            if let (Some(dict), Some(cx), Some(x)) = (&self.input_dict, &self.input_readout, inputs)
            {
                let row: Vec<f64> = x.row(t).iter().copied().collect();
                dict.apply_into(&row, &mut g)?;
                next += cx * DVector::from_column_slice(&g);
            }
            if let Some(b) = &self.bias {
                next += b;
            }
            if !admissible(next.as_slice()) {
                return Ok(Prediction {
                    states: states.rows(0, t).into_owned(),
                    outputs: None,
                    diverged_at: Some(t),
                });
            }
            states.row_mut(t).copy_from(&next.transpose());
            h = next;
        }
        Ok(Prediction {
            states,
            outputs: None,
            diverged_at: None,
        })
    }
}

/// Rollouts seeded by sliding ground-truth windows.
///
/// `series` holds raw observations (`T × d`). Starting at `s = 0, P, 2P, …`
/// the window `series[s .. s+L]` is embedded, rolled out `P` steps in closed
/// loop and decoded to observations, which are concatenated. The result
/// covers indices `L, L+1, …` of `series`.
pub fn chunked_horizon_predict<F: Forecaster + ?Sized>(
    model: &F,
    map: &EmbeddingMap,
    series: &DMatrix<f64>,
    horizon: usize,
) -> Result<DMatrix<f64>> {
    let (t, d) = series.shape();
    check_dim("observation dimension", map.obs_dim, d)?;
    check_dim("model state dimension", map.state_dim(), model.state_dim())?;
    if horizon == 0 {
        return Ok(DMatrix::zeros(0, d));
    }
    let window = map.delays;
    if t < window + horizon {
        return Err(Error::InvalidArgument(alloc::format!(
            "series of length {t} shorter than window {window} plus horizon {horizon}"
        )));
    }
    let chunks = (t - window) / horizon;
    let mut out = DMatrix::zeros(chunks * horizon, d);
    for c in 0..chunks {
        let start = c * horizon;
        let z0 = map.embed_window(&series.rows(start, window).into_owned())?;
        let pred = model.rollout(&z0, horizon, None)?;
        if let Some(step) = pred.diverged_at {
            return Err(Error::BlowUp { step });
        }
        let obs = map.latest_observation(&pred.states)?;
        out.rows_mut(start, horizon).copy_from(&obs);
    }
    Ok(out)
}

pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// Dense matrix stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixDocument {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixDocument {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.transpose().iter().copied().collect(),
        }
    }

    pub fn to_matrix(&self, what: &str) -> Result<DMatrix<f64>> {
        if self.rows.checked_mul(self.cols) != Some(self.data.len()) {
            return Err(Error::Corrupt(alloc::format!(
                "{what}: {}×{} matrix with {} entries",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDocument {
    pub activation: Activation,
    pub weights: MatrixDocument,
    pub biases: Vec<f64>,
    #[serde(default)]
    pub pairs: Option<Vec<SampledPair>>,
}

impl LayerDocument {
    fn from_layer(l: &SampledLayer) -> Self {
        Self {
            activation: l.activation(),
            weights: MatrixDocument::from_matrix(l.weights()),
            biases: l.biases().iter().copied().collect(),
            pairs: l.provenance().map(<[SampledPair]>::to_vec),
        }
    }

    fn to_layer(&self, what: &str) -> Result<SampledLayer> {
        let layer = SampledLayer::from_parts(
            self.weights.to_matrix(what)?,
            DVector::from_vec(self.biases.clone()),
            self.activation,
        )
        .map_err(|e| Error::Corrupt(alloc::format!("{what}: {e}")))?;
        match &self.pairs {
            Some(p) => layer
                .with_provenance(p.clone())
                .map_err(|e| Error::Corrupt(alloc::format!("{what}: {e}"))),
            None => Ok(layer),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputDictionaryDocument {
    Identity { dim: usize },
    Layer(LayerDocument),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputDocument {
    pub mode: OutputMode,
    pub matrix: MatrixDocument,
}

/// Self-describing serialized form of a [`SampledRnn`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub schema_version: u32,
    pub state_dictionary: LayerDocument,
    pub input_dictionary: Option<InputDictionaryDocument>,
    pub koopman: MatrixDocument,
    pub input_matrix: Option<MatrixDocument>,
    pub lifted_bias: Option<Vec<f64>>,
    pub projection: MatrixDocument,
    pub output: Option<OutputDocument>,
    pub scaler: Option<RangeScaler>,
    pub embedding: Option<EmbeddingMap>,
    pub meta: FitMeta,
}

impl SampledRnn {
    pub fn to_document(&self) -> ModelDocument {
        ModelDocument {
            schema_version: MODEL_SCHEMA_VERSION,
            state_dictionary: LayerDocument::from_layer(&self.state_dict),
            input_dictionary: self.input_dict.as_ref().map(|g| match g {
                InputDictionary::Identity { dim } => InputDictionaryDocument::Identity { dim: *dim },
                InputDictionary::Layer(l) => {
                    InputDictionaryDocument::Layer(LayerDocument::from_layer(l))
                }
            }),
            koopman: MatrixDocument::from_matrix(&self.koopman),
            input_matrix: self.input_matrix.as_ref().map(MatrixDocument::from_matrix),
            lifted_bias: self.lifted_bias.as_ref().map(|b| b.iter().copied().collect()),
            projection: MatrixDocument::from_matrix(&self.projection),
            output: self.output.as_ref().map(|o| OutputDocument {
                mode: o.mode,
                matrix: MatrixDocument::from_matrix(&o.matrix),
            }),
            scaler: self.scaler.clone(),
            embedding: self.embedding.clone(),
            meta: self.meta.clone(),
        }
    }

    pub fn from_document(doc: &ModelDocument) -> Result<Self> {
        if doc.schema_version != MODEL_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: doc.schema_version,
                expected: MODEL_SCHEMA_VERSION,
            });
        }
        let state_dict = doc.state_dictionary.to_layer("state dictionary")?;
        let input_dict = match &doc.input_dictionary {
            Some(InputDictionaryDocument::Identity { dim }) => {
                Some(InputDictionary::Identity { dim: *dim })
            }
            Some(InputDictionaryDocument::Layer(l)) => {
                Some(InputDictionary::Layer(l.to_layer("input dictionary")?))
            }
            None => None,
        };
        let solution = EdmdSolution {
            koopman: doc.koopman.to_matrix("koopman")?,
            input_matrix: doc
                .input_matrix
                .as_ref()
                .map(|m| m.to_matrix("input matrix"))
                .transpose()?,
            lifted_bias: doc.lifted_bias.clone().map(DVector::from_vec),
            projection: doc.projection.to_matrix("projection")?,
        };
        let output = doc
            .output
            .as_ref()
            .map(|o| {
                Ok(OutputMap {
                    mode: o.mode,
                    matrix: o.matrix.to_matrix("output map")?,
                })
            })
            .transpose()?;
        Self::assemble(
            state_dict,
            input_dict,
            solution,
            output,
            doc.scaler.clone(),
            doc.embedding.clone(),
            doc.meta.clone(),
        )
        .map_err(|e| match e {
            Error::Corrupt(_) => e,
            other => Error::Corrupt(other.to_string()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::Density;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;

    fn linear_data(a: &DMatrix<f64>, n: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
        use rand::Rng;
        let mut rng = stream(seed, Stream::Custom(1));
        let h = DMatrix::from_fn(a.nrows(), n, |_, _| rng.random_range(-1.0..1.0));
        let next = a * &h;
        (h, next)
    }

    #[test]
    fn identity_dictionary_scalar_system() {
        let h = DMatrix::identity(2, 2);
        let next = &h * 2.0;
        let model = fit_uncontrolled(&h, &next, None, &DictionarySpec::Identity, &FitOptions::new(0.0), 0)
            .unwrap();
        assert_relative_eq!(model.koopman(), &(DMatrix::identity(2, 2) * 2.0), epsilon = 1e-14);
        // C = H F(H)⁺ = I for the identity dictionary.
        assert_relative_eq!(model.projection(), &DMatrix::identity(2, 2), epsilon = 1e-14);
        let (h1, _) = model.step(&[1.0, -3.0], None).unwrap();
        assert_relative_eq!(h1[0], 2.0, epsilon = 1e-14);
        assert_relative_eq!(h1[1], -6.0, epsilon = 1e-14);
    }

    #[test]
    fn identity_dictionary_recovers_linear_map() {
        let a = dmatrix![0.9, 0.2, 0.0; -0.1, 0.8, 0.3; 0.05, 0.0, 0.7];
        let (h, next) = linear_data(&a, 20, 4);
        let model =
            fit_uncontrolled(&h, &next, None, &DictionarySpec::Identity, &FitOptions::new(0.0), 0)
                .unwrap();
        assert_relative_eq!(model.koopman(), &a, epsilon = 1e-8);
        let h0 = [0.3, -0.7, 1.1];
        let (h1, _) = model.step(&h0, None).unwrap();
        let expect = &a * DVector::from_column_slice(&h0);
        for k in 0..3 {
            assert_relative_eq!(h1[k], expect[k], epsilon = 1e-8);
        }
        let pred = model.predict(&h0, 3, None).unwrap();
        let mut x = DVector::from_column_slice(&h0);
        for t in 0..3 {
            x = &a * x;
            for k in 0..3 {
                assert_relative_eq!(pred.states[(t, k)], x[k], epsilon = 1e-6);
            }
        }

        let eig = model.koopman_eigenvalues().unwrap();
        let reference = eig_general(&a).unwrap();
        assert_relative_eq!(
            crate::linalg::modulus(eig[0]),
            crate::linalg::modulus(reference[0]),
            epsilon = 1e-8
        );
    }

    #[test]
    fn controlled_fit_recovers_plant() {
        use rand::Rng;
        let a = dmatrix![0.9, 0.1; -0.2, 0.95];
        let b0 = dmatrix![0.0; 0.5];
        let mut rng = stream(3, Stream::Custom(2));
        let n = 30;
        let h = DMatrix::from_fn(2, n, |_, _| rng.random_range(-1.0..1.0));
        let x = DMatrix::from_fn(1, n, |_, _| rng.random_range(-1.0..1.0));
        let next = &a * &h + &b0 * &x;
        let model = fit_controlled(
            &h,
            &next,
            &x,
            None,
            &DictionarySpec::Identity,
            &DictionarySpec::Identity,
            &FitOptions::new(0.0),
            0,
        )
        .unwrap();
        assert_relative_eq!(model.koopman(), &a, epsilon = 1e-8);
        assert_relative_eq!(model.input_matrix().unwrap(), &b0, epsilon = 1e-8);

        // Zero input reduces to the autonomous part.
        let (with_zero, _) = model.step(&[0.4, 0.1], Some(&[0.0])).unwrap();
        let auto = &a * dmatrix![0.4; 0.1];
        assert_relative_eq!(with_zero[0], auto[0], epsilon = 1e-8);
        assert_relative_eq!(with_zero[1], auto[1], epsilon = 1e-8);
        assert_eq!(model.step(&[0.4, 0.1], None), Err(Error::MissingInput));
    }

    #[test]
    fn zero_inputs_match_uncontrolled_fit() {
        let a = dmatrix![0.7, 0.3; -0.3, 0.7];
        let (h, next) = linear_data(&a, 25, 8);
        let x = DMatrix::zeros(1, 25);
        let opts = FitOptions::new(1e-10);
        let auto = fit_uncontrolled(&h, &next, None, &DictionarySpec::Identity, &opts, 0).unwrap();
        let ctrl = fit_controlled(
            &h,
            &next,
            &x,
            None,
            &DictionarySpec::Identity,
            &DictionarySpec::Identity,
            &opts,
            0,
        )
        .unwrap();
        assert_relative_eq!(ctrl.koopman(), auto.koopman(), epsilon = 1e-10);
        assert!(ctrl.input_matrix().unwrap().iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn zero_dimensional_input_block_is_exactly_uncontrolled() {
        let a = dmatrix![0.7, 0.3; -0.3, 0.7];
        let (h, next) = linear_data(&a, 25, 8);
        let spec = DictionarySpec::Swim(SamplingConfig::new(6, Activation::Tanh, Density::Uniform));
        let opts = FitOptions::new(1e-12);
        let auto = fit_uncontrolled(&h, &next, None, &spec, &opts, 5).unwrap();
        let ctrl = fit_controlled(
            &h,
            &next,
            &DMatrix::zeros(0, 25),
            None,
            &spec,
            &DictionarySpec::Identity,
            &opts,
            5,
        )
        .unwrap();
        assert_eq!(ctrl.koopman(), auto.koopman());
        assert_eq!(ctrl.projection(), auto.projection());
    }

    #[test]
    fn misuse_errors() {
        let a = dmatrix![0.5, 0.0; 0.0, 0.5];
        let (h, next) = linear_data(&a, 10, 1);
        let model =
            fit_uncontrolled(&h, &next, None, &DictionarySpec::Identity, &FitOptions::new(0.0), 0)
                .unwrap();
        assert_eq!(model.step(&[1.0, 1.0], Some(&[0.0])), Err(Error::UnexpectedInput));
        assert!(model.step(&[1.0], None).is_err());
        assert!(model.predict(&[1.0, 1.0], 0, None).is_err());

        let same = DMatrix::from_element(2, 10, 0.5);
        let swim = DictionarySpec::Swim(SamplingConfig::new(3, Activation::Tanh, Density::Uniform));
        assert!(matches!(
            fit_uncontrolled(&same, &same, None, &swim, &FitOptions::new(0.0), 0),
            Err(Error::DegeneratePairs { .. })
        ));
        let wide = DictionarySpec::Swim(SamplingConfig::new(100, Activation::Tanh, Density::Uniform));
        assert!(matches!(
            fit_uncontrolled(&h, &next, None, &wide, &FitOptions::new(0.0), 0),
            Err(Error::InsufficientPairs { .. })
        ));
    }

    #[test]
    fn bias_option_captures_affine_offsets() {
        let a = dmatrix![0.8, 0.0; 0.1, 0.9];
        let (h, mut next) = linear_data(&a, 30, 6);
        for mut col in next.column_iter_mut() {
            col[0] += 0.25;
        }
        let mut opts = FitOptions::new(0.0);
        opts.bias_in_regression = true;
        let model = fit_uncontrolled(&h, &next, None, &DictionarySpec::Identity, &opts, 0).unwrap();
        assert_relative_eq!(model.koopman(), &a, epsilon = 1e-10);
        assert_relative_eq!(model.lifted_bias().unwrap()[0], 0.25, epsilon = 1e-10);
        let (h1, _) = model.step(&[0.0, 0.0], None).unwrap();
        assert_relative_eq!(h1[0], 0.25, epsilon = 1e-10);
    }

    #[test]
    fn output_maps() {
        let a = dmatrix![0.8, 0.1; -0.1, 0.8];
        let (h, next) = linear_data(&a, 30, 2);
        let v = dmatrix![1.0, 2.0];
        let y = &v * &h;
        let states = fit_uncontrolled(&h, &next, Some(&y), &DictionarySpec::Identity, &FitOptions::new(0.0), 0)
            .unwrap();
        assert_relative_eq!(&states.output().unwrap().matrix, &v, epsilon = 1e-10);
        let mut opts = FitOptions::new(0.0);
        opts.v_mode = OutputMode::FromLifted;
        let lifted =
            fit_uncontrolled(&h, &next, Some(&y), &DictionarySpec::Identity, &opts, 0).unwrap();
        let p1 = states.predict(&[0.5, 0.5], 4, None).unwrap();
        let p2 = lifted.predict(&[0.5, 0.5], 4, None).unwrap();
        assert_relative_eq!(p1.outputs.unwrap(), p2.outputs.unwrap(), epsilon = 1e-10);
    }

    #[test]
    fn diverging_rollout_is_truncated() {
        let h = DMatrix::identity(1, 1);
        let next = dmatrix![10.0];
        let model =
            fit_uncontrolled(&h, &next, None, &DictionarySpec::Identity, &FitOptions::new(0.0), 0)
                .unwrap();
        let pred = model.predict(&[1.0], 20, None).unwrap();
        assert_eq!(pred.diverged_at, Some(6));
        assert_eq!(pred.states.nrows(), 6);
    }

    #[test]
    fn document_round_trip() {
        let a = dmatrix![0.9, 0.1; -0.1, 0.9];
        let (h, next) = linear_data(&a, 40, 3);
        let spec = DictionarySpec::Swim(SamplingConfig::new(8, Activation::Tanh, Density::GradientWeighted));
        let model = fit_uncontrolled(&h, &next, None, &spec, &FitOptions::new(1e-10), 9).unwrap();
        let back = SampledRnn::from_document(&model.to_document()).unwrap();
        assert_eq!(back, model);

        let mut doc = model.to_document();
        doc.schema_version = 99;
        assert!(matches!(SampledRnn::from_document(&doc), Err(Error::SchemaVersion { .. })));
        let mut doc = model.to_document();
        doc.koopman.data.pop();
        assert!(matches!(SampledRnn::from_document(&doc), Err(Error::Corrupt(_))));
        let mut doc = model.to_document();
        doc.projection = MatrixDocument::from_matrix(&DMatrix::zeros(2, 3));
        assert!(matches!(SampledRnn::from_document(&doc), Err(Error::Corrupt(_))));
    }

    struct Hold;

    impl Forecaster for Hold {
        fn state_dim(&self) -> usize {
            2
        }
        fn rollout(&self, h0: &[f64], steps: usize, _: Option<&DMatrix<f64>>) -> Result<Prediction> {
            Ok(Prediction {
                states: DMatrix::from_fn(steps, 2, |_, k| h0[k]),
                outputs: None,
                diverged_at: None,
            })
        }
    }

    #[test]
    fn chunked_prediction_counts() {
        let map = EmbeddingMap {
            delays: 2,
            obs_dim: 1,
            pca: None,
        };
        let series = dmatrix![1.0; 2.0; 3.0; 4.0];
        let pred = chunked_horizon_predict(&Hold, &map, &series, 1).unwrap();
        // Holding the window repeats its newest value.
        assert_eq!(pred, dmatrix![2.0; 3.0]);
        assert_eq!(chunked_horizon_predict(&Hold, &map, &series, 0).unwrap().nrows(), 0);
        assert!(chunked_horizon_predict(&Hold, &map, &series, 3).is_err());

        let constant = DMatrix::from_element(20, 1, 0.7);
        let pred = chunked_horizon_predict(&Hold, &map, &constant, 3).unwrap();
        assert_eq!(pred.nrows(), 18);
        assert!(pred.iter().all(|v| *v == 0.7));
    }
}
