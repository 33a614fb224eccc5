//! Versioned JSON documents written by the commands.

use std::path::Path;

use qfm_core::criteria::CriteriaReport;
use qfm_core::diagnostics::ParameterDiagnostics;
use qfm_core::qcor::Strength;
use qfm_core::{McmcConfig, ModelSpec, RngStream, SigmaUpdate};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::io::read_json_value;

pub const SCHEMA_VERSION: &str = "1.0";
const SCHEMA_MAJOR: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q50: f64,
    pub q975: f64,
    /// Split R̂; null with fewer than 4 draws per chain or zero within-chain spread.
    pub psrf: Option<f64>,
    pub ess: f64,
}

/// Posterior-mean variance decompositions in percent. Rows are variables;
/// columns are the factors followed by the total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DvTable {
    pub columns: Vec<String>,
    pub dv: Vec<Vec<f64>>,
    pub dv_mod: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSummary {
    pub stream: RngStream,
    pub stored_draws: usize,
    /// Post burn-in acceptance of each σ_j move (1 for Gibbs).
    pub acceptance: Vec<f64>,
    pub proposal_sd: Vec<f64>,
    pub tuning_converged: bool,
    pub nonfinite_rejections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub schema_version: String,
    pub family: String,
    pub model: ModelSpec,
    pub mcmc: McmcConfig,
    pub sigma_update: SigmaUpdate,
    pub parameters: Vec<ParameterSummary>,
    pub variance_decomposition: DvTable,
    pub chains: Vec<ChainSummary>,
    pub max_psrf: Option<f64>,
    pub criteria: CriteriaReport,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcorRow {
    pub tau: f64,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
    pub negative_fraction: f64,
    pub band: Strength,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCurve {
    /// 1-based column indices.
    pub x: usize,
    pub y: usize,
    pub estimates: Vec<QcorRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcorReport {
    pub schema_version: String,
    pub mcmc: McmcConfig,
    pub grid: Vec<f64>,
    pub weak_below: f64,
    pub strong_from: f64,
    pub pairs: Vec<PairCurve>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsDocument {
    pub schema_version: String,
    pub max_psrf: Option<f64>,
    pub parameters: Vec<ParameterDiagnostics>,
}

/// Accepts any `1.x` version string.
pub fn check_schema(doc: &serde_json::Value, path: &Path) -> CliResult<()> {
    let version = doc
        .get("schema_version")
        .and_then(|v| v.as_str())
        .ok_or_else(|| CliError::Data(format!("{}: missing schema_version", path.display())))?;
    let major = version.split('.').next().unwrap_or_default();
    if major != SCHEMA_MAJOR {
        return Err(CliError::Data(format!(
            "{}: schema version {version} is not supported (expected {SCHEMA_MAJOR}.x)",
            path.display()
        )));
    }
    Ok(())
}

/// Read a versioned document, rejecting unknown major versions.
pub fn read_versioned<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let doc = read_json_value(path)?;
    check_schema(&doc, path)?;
    serde_json::from_value(doc).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}
