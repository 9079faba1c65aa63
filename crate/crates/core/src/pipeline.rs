//! Batch drivers shared by the command-line tool and the integration tests.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::dataset::DatasetRecord;
use crate::grid::HighResGrid;
use crate::net::Network;
use crate::operator::{DenseOperator, LinearOperator};
use crate::scene::{ForwardModel, SceneConfig, SparseScene};
use crate::solvers::{admm_solve, ista_solve, SolveReport, SolverConfig};
use crate::train::Example;
use crate::{Error, Result};

/// Classical reconstruction method.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Ista,
    Admm,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ista => "ista",
            Method::Admm => "admm",
        }
    }

    pub fn run(
        self,
        op: &dyn LinearOperator,
        y: &[f64],
        cfg: &SolverConfig,
    ) -> Result<SolveReport> {
        match self {
            Method::Ista => ista_solve(op, y, cfg),
            Method::Admm => admm_solve(op, y, cfg),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ista" => Ok(Method::Ista),
            "admm" => Ok(Method::Admm),
            other => Err(Error::InvalidParameter(format!(
                "unknown method {other:?} (expected ista or admm)"
            ))),
        }
    }
}

/// Dense system matrix of the forward model, shared by the classical solvers.
pub fn system_operator(scene: &SceneConfig) -> Result<DenseOperator> {
    DenseOperator::materialize(&ForwardModel::new(scene.clone())?)
}

/// Runs a classical solver on every record, in parallel, preserving order.
pub fn solve_records(
    method: Method,
    op: &DenseOperator,
    records: &[DatasetRecord],
    cfg: &SolverConfig,
) -> Result<Vec<SolveReport>> {
    cfg.validate()?;
    records
        .par_iter()
        .map(|r| method.run(op, r.measurement.as_slice(), cfg))
        .collect()
}

/// Turns solver estimates into high-resolution grids.
pub fn reports_to_grids(reports: &[SolveReport], scene: &SceneConfig) -> Result<Vec<HighResGrid>> {
    let (rows, cols) = scene.high_res_dims();
    reports
        .iter()
        .map(|r| HighResGrid::from_vec(rows, cols, r.estimate.clone()))
        .collect()
}

/// Network reconstructions for every record, in parallel, preserving order.
pub fn predict_records(net: &Network, records: &[DatasetRecord]) -> Result<Vec<HighResGrid>> {
    records
        .par_iter()
        .map(|r| net.predict(&r.measurement))
        .collect()
}

/// Training pairs (measurement, embedded ground truth).
pub fn examples(records: &[DatasetRecord], scene: &SceneConfig) -> Result<Vec<Example>> {
    records
        .iter()
        .map(|r| {
            Ok(Example {
                y: r.measurement.clone(),
                truth: r.truth(scene)?,
            })
        })
        .collect()
}

/// Ground-truth scenes of a record set.
pub fn truths(records: &[DatasetRecord]) -> Vec<SparseScene> {
    records.iter().map(|r| r.scene.clone()).collect()
}
