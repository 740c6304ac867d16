//! File formats: trajectory CSV with a JSON sidecar, model JSON, control
//! traces and diagnostic tables.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sampled_rnn_core::control::ControlTrace;
use sampled_rnn_core::dynamics::{Trajectory, TrajectoryDataset};
use sampled_rnn_core::rnn::{ModelDocument, SampledRnn};
use sampled_rnn_core::sampling::SampledPair;
use sampled_rnn_core::{Complex, DMatrix};

use crate::error::{Error, Result};

/// Sidecar written next to every trajectory CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub dt: f64,
    pub seed: u64,
    pub n_traj: usize,
    pub state_dim: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    /// Delay windows are stored oldest observation first.
    #[serde(default)]
    pub window_orientation: Option<String>,
}

pub fn meta_path(csv: &Path) -> PathBuf {
    csv.with_extension("meta.json")
}

pub(crate) fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
        }
        _ => Ok(()),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    create_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    create_parent(path)?;
    csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))
}

fn numbered(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (1..=n).map(move |k| format!("{prefix}{k}"))
}

/// `traj_id,t,h1..hd[,x1..xm][,y1..yk]`; the input cells of each
/// trajectory's last row are empty.
pub fn write_dataset(path: &Path, data: &TrajectoryDataset) -> Result<()> {
    write_dataset_with(path, data, None)
}

pub fn write_dataset_with(
    path: &Path,
    data: &TrajectoryDataset,
    window_orientation: Option<&str>,
) -> Result<()> {
    let d = data.state_dim();
    let m = data.input_dim();
    let k = data
        .trajectories
        .first()
        .and_then(|t| t.outputs.as_ref())
        .map_or(0, |y| y.ncols());
    let mut w = writer(path)?;
    let header: Vec<String> = ["traj_id".to_string(), "t".to_string()]
        .into_iter()
        .chain(numbered("h", d))
        .chain(numbered("x", m))
        .chain(numbered("y", k))
        .collect();
    w.write_record(&header).map_err(|e| Error::csv(path, e))?;
    for (id, traj) in data.trajectories.iter().enumerate() {
        for t in 0..traj.len() {
            let mut row = vec![id.to_string(), traj.times[t].to_string()];
            row.extend(traj.states.row(t).iter().map(f64::to_string));
            if let Some(x) = &traj.inputs {
                if t + 1 < traj.len() {
                    row.extend(x.row(t).iter().map(f64::to_string));
                } else {
                    row.extend(std::iter::repeat_n(String::new(), m));
                }
            }
            if let Some(y) = &traj.outputs {
                row.extend(y.row(t).iter().map(f64::to_string));
            }
            w.write_record(&row).map_err(|e| Error::csv(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    write_json(
        &meta_path(path),
        &DatasetMeta {
            dt: data.dt,
            seed: data.seed,
            n_traj: data.trajectories.len(),
            state_dim: d,
            input_dim: m,
            output_dim: k,
            window_orientation: window_orientation.map(str::to_string),
        },
    )
}

pub fn read_dataset(path: &Path) -> Result<TrajectoryDataset> {
    let meta: DatasetMeta = read_json(&meta_path(path))?;
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let width = 2 + meta.state_dim + meta.input_dim + meta.output_dim;
    let headers = r.headers().map_err(|e| Error::csv(path, e))?;
    if headers.len() != width {
        return Err(Error::Format(format!(
            "{}: {} columns, sidecar implies {width}",
            path.display(),
            headers.len()
        )));
    }

    #[derive(Default)]
    struct Rows {
        times: Vec<f64>,
        h: Vec<f64>,
        x: Vec<f64>,
        y: Vec<f64>,
    }
    let mut groups: Vec<Rows> = Vec::new();
    let parse = |s: &str, line: u64| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|_| Error::Format(format!("{}:{line}: bad number {s:?}", path.display())))
    };
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let id: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("{}:{line}: bad trajectory id", path.display())))?;
        if id == groups.len() {
            groups.push(Rows::default());
        } else if id + 1 != groups.len() {
            return Err(Error::Format(format!(
                "{}:{line}: trajectory ids must be contiguous and ascending",
                path.display()
            )));
        }
        let g = groups.last_mut().expect("pushed above");
        g.times.push(parse(&rec[1], line)?);
        for c in 0..meta.state_dim {
            g.h.push(parse(&rec[2 + c], line)?);
        }
        let x_cells: Vec<&str> = (0..meta.input_dim).map(|c| &rec[2 + meta.state_dim + c]).collect();
        if x_cells.iter().all(|c| !c.trim().is_empty()) {
            for c in x_cells {
                g.x.push(parse(c, line)?);
            }
        }
        for c in 0..meta.output_dim {
            g.y.push(parse(&rec[2 + meta.state_dim + meta.input_dim + c], line)?);
        }
    }

    let trajectories = groups
        .into_iter()
        .map(|g| {
            let n = g.times.len();
            let inputs = (meta.input_dim > 0).then(|| {
                DMatrix::from_row_slice(g.x.len() / meta.input_dim, meta.input_dim, &g.x)
            });
            let outputs = (meta.output_dim > 0)
                .then(|| DMatrix::from_row_slice(n, meta.output_dim, &g.y));
            Trajectory {
                states: DMatrix::from_row_slice(n, meta.state_dim, &g.h),
                times: g.times,
                inputs,
                outputs,
            }
        })
        .collect();
    Ok(TrajectoryDataset::new(trajectories, meta.dt, meta.seed)?)
}

pub fn model_to_json(model: &SampledRnn) -> String {
    let mut text =
        serde_json::to_string_pretty(&model.to_document()).expect("model documents serialize");
    text.push('\n');
    text
}

pub fn save_model(path: &Path, model: &SampledRnn) -> Result<()> {
    create_parent(path)?;
    fs::write(path, model_to_json(model)).map_err(|e| Error::io(path, e))
}

/// Parses and validates the whole document before building the model.
pub fn load_model(path: &Path) -> Result<SampledRnn> {
    let doc: ModelDocument = read_json(path)?;
    SampledRnn::from_document(&doc).map_err(|e| {
        Error::Format(format!("{}: {e}", path.display()))
    })
}

/// `t,h1..hd,u1..um,stage_cost`; the final state has no input or cost.
pub fn write_trace(path: &Path, trace: &ControlTrace) -> Result<()> {
    let d = trace.states.ncols();
    let m = trace.inputs.ncols();
    let mut w = writer(path)?;
    let header: Vec<String> = ["t".to_string()]
        .into_iter()
        .chain(numbered("h", d))
        .chain(numbered("u", m))
        .chain(["stage_cost".to_string()])
        .collect();
    w.write_record(&header).map_err(|e| Error::csv(path, e))?;
    for t in 0..trace.states.nrows() {
        let mut row = vec![trace.times[t].to_string()];
        row.extend(trace.states.row(t).iter().map(f64::to_string));
        if t < trace.inputs.nrows() {
            row.extend(trace.inputs.row(t).iter().map(f64::to_string));
            row.push(trace.stage_costs[t].to_string());
        } else {
            row.extend(std::iter::repeat_n(String::new(), m + 1));
        }
        w.write_record(&row).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `re,im,modulus`, one row per eigenvalue.
pub fn write_eigenvalues(path: &Path, eigenvalues: &[Complex<f64>]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["re", "im", "modulus"]).map_err(|e| Error::csv(path, e))?;
    for l in eigenvalues {
        w.write_record([l.re.to_string(), l.im.to_string(), l.norm().to_string()])
            .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `neuron,i,j,from1..fromd,to1..tod`.
pub fn write_pairs(path: &Path, pairs: &[SampledPair]) -> Result<()> {
    let d = pairs.first().map_or(0, |p| p.from.len());
    let mut w = writer(path)?;
    let header: Vec<String> = ["neuron".to_string(), "i".to_string(), "j".to_string()]
        .into_iter()
        .chain(numbered("from", d))
        .chain(numbered("to", d))
        .collect();
    w.write_record(&header).map_err(|e| Error::csv(path, e))?;
    for (n, p) in pairs.iter().enumerate() {
        let row: Vec<String> = [n.to_string(), p.i.to_string(), p.j.to_string()]
            .into_iter()
            .chain(p.from.iter().map(f64::to_string))
            .chain(p.to.iter().map(f64::to_string))
            .collect();
        w.write_record(&row).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read numeric columns of a headed CSV into a matrix.
pub fn read_matrix(path: &Path) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let headers: Vec<String> = r
        .headers()
        .map_err(|e| Error::csv(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        for cell in rec.iter() {
            data.push(cell.trim().parse::<f64>().map_err(|_| {
                Error::Format(format!("{}: bad number {cell:?}", path.display()))
            })?);
        }
        rows += 1;
    }
    Ok((headers.clone(), DMatrix::from_row_slice(rows, headers.len(), &data)))
}
