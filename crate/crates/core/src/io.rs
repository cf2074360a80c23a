//! File formats: trajectory CSV and binary, diagnostics and posterior CSV,
//! checkpoints.
//!
//! All text output uses the shortest decimal form that parses back to the
//! same `f64`.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{Dims, FilterState, ModelBundle, OnlineFilter, StepDiagnostics, TrainConfig};
use crate::generative::ObsKind;
use crate::numeric::{AdamState, DiagGaussian};
use crate::recognition::Activation;
use crate::simulate::Trajectory;

pub const TRAJECTORY_MAGIC: [u8; 8] = *b"VJFTRAJ\0";
pub const TRAJECTORY_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 64;
pub const CHECKPOINT_FORMAT: &str = "vjf-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

fn numbered(prefix: &str, count: usize) -> impl Iterator<Item = String> + '_ {
    (1..=count).map(move |i| format!("{prefix}_{i}"))
}

/// Writes a header row and one record per row of numbers.
pub fn write_table<W: Write>(out: W, header: &[String], rows: impl IntoIterator<Item = Vec<f64>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for row in rows {
        if row.len() != header.len() {
            return Err(Error::Shape {
                context: "table row",
                expected: header.len(),
                got: row.len(),
            });
        }
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a numeric table, returning the header and a `rows x columns` matrix.
pub fn read_table<R: Read>(input: R) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    let mut values = Vec::new();
    let mut rows = 0;
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        for (field, name) in rec.iter().zip(&header) {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Format(format!("row {}: column `{name}` is not a number: {field:?}", line + 1)))?;
            values.push(v);
        }
        rows += 1;
    }
    Ok((header.clone(), DMatrix::from_row_slice(rows, header.len(), &values)))
}

pub fn trajectory_header(m: usize, n: usize, p: usize) -> Vec<String> {
    std::iter::once("t".to_owned())
        .chain(numbered("x", m))
        .chain(numbered("y", n))
        .chain(numbered("u", p))
        .collect()
}

/// Columns `t, x_1..x_m, y_1..y_n, u_1..u_p`.
pub fn write_trajectory_csv<W: Write>(out: W, traj: &Trajectory) -> Result<()> {
    let (m, n, p) = (traj.latents.ncols(), traj.observations.ncols(), traj.inputs.ncols());
    check_rows(traj)?;
    let rows = (0..traj.len()).map(|t| {
        let mut row = Vec::with_capacity(1 + m + n + p);
        row.push(t as f64);
        row.extend(traj.latents.row(t).iter());
        row.extend(traj.observations.row(t).iter());
        row.extend(traj.inputs.row(t).iter());
        row
    });
    write_table(out, &trajectory_header(m, n, p), rows)
}

/// Inverse of [`write_trajectory_csv`]. `dt` is not stored in the CSV.
pub fn read_trajectory_csv<R: Read>(input: R, dt: f64) -> Result<Trajectory> {
    let (header, table) = read_table(input)?;
    let count = |prefix: &str| header.iter().filter(|h| h.starts_with(prefix)).count();
    let (m, n, p) = (count("x_"), count("y_"), count("u_"));
    if header != trajectory_header(m, n, p) {
        return Err(Error::Format(format!("unexpected trajectory header: {}", header.join(","))));
    }
    let t = table.nrows();
    for (i, v) in table.column(0).iter().enumerate() {
        if *v != i as f64 {
            return Err(Error::Format(format!("row {}: expected t = {i}, got {v}", i + 1)));
        }
    }
    Ok(Trajectory {
        latents: table.view((0, 1), (t, m)).into_owned(),
        observations: table.view((0, 1 + m), (t, n)).into_owned(),
        inputs: table.view((0, 1 + m + n), (t, p)).into_owned(),
        dt,
    })
}

fn check_rows(traj: &Trajectory) -> Result<()> {
    let t = traj.latents.nrows();
    for (what, rows) in [("observations", traj.observations.nrows()), ("inputs", traj.inputs.nrows())] {
        if rows != t {
            return Err(Error::Format(format!("trajectory {what} have {rows} rows, latents have {t}")));
        }
    }
    Ok(())
}

/// Little-endian binary trajectory: a 64-byte header (magic, version, `T`,
/// `m`, `n`, `p`, `dt`) followed by row-major `[x | y | u]` rows of `f64`.
pub fn write_trajectory_bin<W: Write>(mut out: W, traj: &Trajectory) -> Result<()> {
    check_rows(traj)?;
    let mut header = [0u8; HEADER_LEN];
    header[0..8].copy_from_slice(&TRAJECTORY_MAGIC);
    header[8..12].copy_from_slice(&TRAJECTORY_VERSION.to_le_bytes());
    let dims = [traj.len(), traj.latents.ncols(), traj.observations.ncols(), traj.inputs.ncols()];
    for (i, d) in dims.iter().enumerate() {
        header[16 + 8 * i..24 + 8 * i].copy_from_slice(&(*d as u64).to_le_bytes());
    }
    header[48..56].copy_from_slice(&traj.dt.to_le_bytes());
    out.write_all(&header)?;
    let mut buf = Vec::with_capacity(8 * traj.len() * (dims[1] + dims[2] + dims[3]));
    for t in 0..traj.len() {
        for v in traj.latents.row(t).iter().chain(traj.observations.row(t).iter()).chain(traj.inputs.row(t).iter()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_trajectory_bin<R: Read>(mut input: R) -> Result<Trajectory> {
    let mut header = [0u8; HEADER_LEN];
    input.read_exact(&mut header)?;
    if header[0..8] != TRAJECTORY_MAGIC {
        return Err(Error::Format("not a binary trajectory file".into()));
    }
    let version = u32::from_le_bytes(header[8..12].try_into().unwrap());
    if version != TRAJECTORY_VERSION {
        return Err(Error::Format(format!("unsupported trajectory version {version}")));
    }
    let dim = |i: usize| u64::from_le_bytes(header[16 + 8 * i..24 + 8 * i].try_into().unwrap()) as usize;
    let (t, m, n, p) = (dim(0), dim(1), dim(2), dim(3));
    let dt = f64::from_le_bytes(header[48..56].try_into().unwrap());
    let width = m + n + p;
    let len = t
        .checked_mul(width)
        .and_then(|v| v.checked_mul(8))
        .ok_or_else(|| Error::Format("trajectory dimensions overflow".into()))?;
    let mut body = Vec::new();
    input.read_to_end(&mut body)?;
    if body.len() != len {
        return Err(Error::Format(format!("expected {len} data bytes, found {}", body.len())));
    }
    let values: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let table = DMatrix::from_row_slice(t, width, &values);
    Ok(Trajectory {
        latents: table.columns(0, m).into_owned(),
        observations: table.columns(m, n).into_owned(),
        inputs: table.columns(m + n, p).into_owned(),
        dt,
    })
}

pub const DIAGNOSTICS_HEADER: [&str; 6] = ["t", "recon_ll", "dyn_ll", "entropy", "elbo", "wall_ms"];

pub fn write_diagnostics_csv<W: Write>(out: W, diagnostics: &[StepDiagnostics]) -> Result<()> {
    let header: Vec<String> = DIAGNOSTICS_HEADER.iter().map(|s| s.to_string()).collect();
    let rows = diagnostics.iter().enumerate().map(|(t, d)| {
        vec![t as f64, d.reconstruction_ll, d.dynamics_ll, d.entropy, d.objective, d.wall_time * 1e3]
    });
    write_table(out, &header, rows)
}

/// Reads the diagnostics back; the penalty column is not stored and is
/// recovered as `recon + dyn + entropy - elbo`.
pub fn read_diagnostics_csv<R: Read>(input: R) -> Result<Vec<StepDiagnostics>> {
    let (header, table) = read_table(input)?;
    if header != DIAGNOSTICS_HEADER {
        return Err(Error::Format(format!("unexpected diagnostics header: {}", header.join(","))));
    }
    Ok(table
        .row_iter()
        .map(|r| StepDiagnostics {
            reconstruction_ll: r[1],
            dynamics_ll: r[2],
            entropy: r[3],
            penalty: r[1] + r[2] + r[3] - r[4],
            objective: r[4],
            wall_time: r[5] / 1e3,
        })
        .collect())
}

/// Columns `t, mu_1..mu_m, s_1..s_m`.
pub fn write_posterior_csv<W: Write>(out: W, posteriors: &[DiagGaussian]) -> Result<()> {
    let m = posteriors.first().map_or(0, DiagGaussian::dim);
    let header: Vec<String> = std::iter::once("t".to_owned())
        .chain(numbered("mu", m))
        .chain(numbered("s", m))
        .collect();
    let rows = posteriors.iter().enumerate().map(|(t, q)| {
        std::iter::once(t as f64)
            .chain(q.mean.iter().copied())
            .chain(q.variance.iter().copied())
            .collect()
    });
    write_table(out, &header, rows)
}

/// Columns `t, x_1..x_m` from a `T x m` matrix.
pub fn write_latents_csv<W: Write>(out: W, prefix: &str, x: &DMatrix<f64>) -> Result<()> {
    let header: Vec<String> = std::iter::once("t".to_owned()).chain(numbered(prefix, x.ncols())).collect();
    let rows = x.row_iter().enumerate().map(|(t, r)| std::iter::once(t as f64).chain(r.iter().copied()).collect());
    write_table(out, &header, rows)
}

/// Everything needed to resume an [`OnlineFilter`] bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub dims: Dims,
    pub kind: ObsKind,
    pub activation: Activation,
    pub params: Vec<f64>,
    pub adam_first: Vec<f64>,
    pub adam_second: Vec<f64>,
    pub adam_steps: u64,
    pub config: TrainConfig,
    pub passes: u64,
    /// Last posterior of each sequence, so filtering can continue.
    #[serde(default)]
    pub states: Vec<SavedState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SavedState {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub step_index: u64,
}

impl From<&FilterState> for SavedState {
    fn from(s: &FilterState) -> Self {
        Self {
            mean: s.posterior.mean.as_slice().to_vec(),
            variance: s.posterior.variance.as_slice().to_vec(),
            step_index: s.step_index,
        }
    }
}

impl SavedState {
    pub fn to_state(&self) -> Result<FilterState> {
        Ok(FilterState {
            posterior: DiagGaussian::new(self.mean.clone().into(), self.variance.clone().into())?,
            step_index: self.step_index,
        })
    }
}

impl Checkpoint {
    pub fn from_filter(filter: &OnlineFilter, states: &[FilterState]) -> Self {
        let b = &filter.bundle;
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            dims: b.dims(),
            kind: b.observation.kind,
            activation: b.recognition.activation,
            params: b.to_flat(),
            adam_first: filter.optimizer.first_moment.clone(),
            adam_second: filter.optimizer.second_moment.clone(),
            adam_steps: filter.optimizer.step_count,
            config: filter.config.clone(),
            passes: filter.passes(),
            states: states.iter().map(SavedState::from).collect(),
        }
    }

    pub fn bundle(&self) -> Result<ModelBundle> {
        self.dims.validate()?;
        let mut b = ModelBundle::zeros(self.dims, self.kind, self.activation);
        b.set_from_flat(&self.params)?;
        b.validate()?;
        Ok(b)
    }

    pub fn to_filter(&self) -> Result<OnlineFilter> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let bundle = self.bundle()?;
        let mut optimizer = AdamState::new(bundle.n_params(), self.config.adam);
        if self.adam_first.len() != optimizer.len() || self.adam_second.len() != optimizer.len() {
            return Err(Error::Format("optimizer moments do not match the parameter count".into()));
        }
        optimizer.first_moment.clone_from(&self.adam_first);
        optimizer.second_moment.clone_from(&self.adam_second);
        optimizer.step_count = self.adam_steps;
        OnlineFilter::from_parts(bundle, optimizer, self.config.clone(), self.passes)
    }

    pub fn to_json(&self) -> Result<String> {
        if !self.params.iter().chain(&self.adam_first).chain(&self.adam_second).all(|v| v.is_finite()) {
            return Err(Error::NonFinite { component: "checkpoint" });
        }
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
