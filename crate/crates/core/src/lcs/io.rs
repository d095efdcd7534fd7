//! Text formats: LCS parameters as versioned JSON, trajectories as CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::modes::ModeSignature;
use super::params::{Block, LcsDims, LcsParams, LcsParts};
use super::sim::Trajectory;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const PARAMS_KIND: &str = "lcs_params";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixBlock {
    pub rows: usize,
    pub cols: usize,
    /// row-major
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsDocument {
    pub schema_version: u32,
    pub kind: String,
    pub dims: LcsDims,
    pub blocks: BTreeMap<String, MatrixBlock>,
}

impl ParamsDocument {
    pub fn from_params(theta: &LcsParams) -> Self {
        let dims = theta.dims();
        let blocks = Block::ALL
            .iter()
            .map(|&b| {
                let (rows, cols) = b.shape(dims);
                let data = theta.parts().block_row_major(b, dims);
                (b.name().to_string(), MatrixBlock { rows, cols, data })
            })
            .collect();
        Self {
            schema_version: SCHEMA_VERSION,
            kind: PARAMS_KIND.to_string(),
            dims,
            blocks,
        }
    }

    pub fn into_params(self, path: &str) -> Result<LcsParams> {
        check_header(path, self.schema_version, &self.kind, PARAMS_KIND)?;
        let dims = self.dims;
        let mut parts = LcsParts::zeros(dims);
        for b in Block::ALL {
            let block = self.blocks.get(b.name()).ok_or_else(|| Error::Parse {
                path: path.to_string(),
                message: format!("missing block `{}`", b.name()),
            })?;
            let (rows, cols) = b.shape(dims);
            if block.rows != rows || block.cols != cols || block.data.len() != rows * cols {
                return Err(Error::Parse {
                    path: path.to_string(),
                    message: format!(
                        "block `{}` is {}x{} with {} entries, expected {rows}x{cols}",
                        b.name(),
                        block.rows,
                        block.cols,
                        block.data.len()
                    ),
                });
            }
            parts.set_block_row_major(b, dims, &block.data);
        }
        if let Some(extra) = self.blocks.keys().find(|k| !Block::ALL.iter().any(|b| b.name() == k.as_str())) {
            return Err(Error::Parse {
                path: path.to_string(),
                message: format!("unknown block `{extra}`"),
            });
        }
        LcsParams::new(parts)
    }
}

pub(crate) fn check_header(path: &str, version: u32, kind: &str, expected_kind: &str) -> Result<()> {
    if version != SCHEMA_VERSION {
        return Err(Error::Schema {
            path: path.to_string(),
            expected: format!("schema_version {SCHEMA_VERSION}"),
            found: format!("schema_version {version}"),
        });
    }
    if kind != expected_kind {
        return Err(Error::Schema {
            path: path.to_string(),
            expected: format!("kind {expected_kind}"),
            found: format!("kind {kind}"),
        });
    }
    Ok(())
}

pub fn params_to_json(theta: &LcsParams) -> String {
    serde_json::to_string_pretty(&ParamsDocument::from_params(theta)).expect("params serialize")
}

pub fn params_from_json(text: &str, path: &str) -> Result<LcsParams> {
    let doc: ParamsDocument = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: path.to_string(),
        message: e.to_string(),
    })?;
    doc.into_params(path)
}

pub fn write_params(theta: &LcsParams, path: &Path) -> Result<()> {
    std::fs::write(path, params_to_json(theta) + "\n")?;
    Ok(())
}

pub fn read_params(path: &Path) -> Result<LcsParams> {
    let text = std::fs::read_to_string(path)?;
    params_from_json(&text, &path.display().to_string())
}

/// CSV with columns `t, x0.., u0.., lam0.., signature`; the final state row has empty input cells.
pub fn trajectory_to_csv(traj: &Trajectory) -> String {
    let n = traj.states[0].len();
    let m = traj.inputs.first().map_or(0, |u| u.len());
    let r = traj.lambdas.first().map_or(0, |l| l.len());
    let mut out = String::from("# schema_version=1 kind=trajectory\nt");
    for i in 0..n {
        write!(out, ",x{i}").unwrap();
    }
    for i in 0..m {
        write!(out, ",u{i}").unwrap();
    }
    for i in 0..r {
        write!(out, ",lam{i}").unwrap();
    }
    out.push_str(",signature\n");
    for (t, x) in traj.states.iter().enumerate() {
        write!(out, "{t}").unwrap();
        for v in x.iter() {
            write!(out, ",{v:e}").unwrap();
        }
        if t < traj.horizon() {
            for v in traj.inputs[t].iter().chain(traj.lambdas[t].iter()) {
                write!(out, ",{v:e}").unwrap();
            }
            writeln!(out, ",{}", traj.signatures[t]).unwrap();
        } else {
            out.push_str(&",".repeat(m + r + 1));
            out.push('\n');
        }
    }
    out
}

/// Inverse of [`trajectory_to_csv`] given the dimensions.
pub fn trajectory_from_csv(text: &str, dims: LcsDims) -> Result<Trajectory> {
    let parse_err = |message: String| Error::Parse {
        path: "trajectory csv".into(),
        message,
    };
    let LcsDims { n, m, r } = dims;
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header = lines.next().ok_or_else(|| parse_err("empty file".into()))?;
    let width = 1 + n + m + r + 1;
    if header.split(',').count() != width {
        return Err(parse_err(format!("header has {} columns, expected {width}", header.split(',').count())));
    }
    let mut states = Vec::new();
    let mut inputs = Vec::new();
    let mut lambdas = Vec::new();
    let mut signatures = Vec::new();
    for (row, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != width {
            return Err(parse_err(format!("row {row} has {} cells", cells.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| parse_err(format!("row {row}: {e}")));
        let x = cells[1..1 + n].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
        states.push(DVector::from_vec(x));
        if cells[1 + n].is_empty() {
            break;
        }
        let u = cells[1 + n..1 + n + m].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
        let l = cells[1 + n + m..1 + n + m + r].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
        inputs.push(DVector::from_vec(u));
        lambdas.push(DVector::from_vec(l));
        let sig = ModeSignature::from_hex(cells[width - 1]).ok_or_else(|| parse_err(format!("row {row}: bad signature")))?;
        signatures.push(sig);
    }
    let traj = Trajectory {
        states,
        inputs,
        lambdas,
        signatures,
    };
    if !traj.is_consistent() || traj.states.is_empty() {
        return Err(parse_err("inconsistent trajectory lengths".into()));
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lcs::sim::lcs_rollout;
    use nalgebra::DMatrix;

    fn sample() -> LcsParams {
        let dims = LcsDims::new(2, 1, 2);
        let mut parts = LcsParts::zeros(dims);
        parts.a = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, -0.2, 0.8]);
        parts.b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        parts.c = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, -1.0]);
        parts.lcp_d = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        parts.g = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.3, 1.0]);
        parts.h = DMatrix::from_row_slice(2, 2, &[0.0, 0.4, 0.0, 0.0]);
        parts.lcp_c = DVector::from_vec(vec![0.1, -0.3]);
        LcsParams::new(parts).unwrap()
    }

    #[test]
    fn params_json_roundtrip_is_exact() {
        let theta = sample();
        let back = params_from_json(&params_to_json(&theta), "mem").unwrap();
        assert_eq!(back, theta);
    }

    #[test]
    fn schema_version_checked() {
        let text = params_to_json(&sample()).replace("\"schema_version\": 1", "\"schema_version\": 7");
        assert!(matches!(params_from_json(&text, "mem"), Err(Error::Schema { .. })));
        assert!(matches!(params_from_json("{not json", "mem"), Err(Error::Parse { .. })));
    }

    #[test]
    fn trajectory_csv_roundtrip() {
        let theta = sample();
        let us: Vec<_> = (0..4).map(|k| DVector::from_element(1, k as f64 - 1.5)).collect();
        let traj = lcs_rollout(&theta, &DVector::from_vec(vec![1.0, -2.0]), &us).unwrap();
        let back = trajectory_from_csv(&trajectory_to_csv(&traj), theta.dims()).unwrap();
        assert_eq!(back, traj);
    }
}
