use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use qfm_core::criteria::{criteria_report, CROSS_FAMILY_WARNING};
use qfm_core::diagnostics::{diagnose, diagnose_traces, DiagnosticsReport, TraceSummary};
use qfm_core::model::variance_decomposition;
use qfm_core::qcor::{qcor_curve, STRONG_FROM, WEAK_BELOW};
use qfm_core::sampler::fit;
use qfm_core::synthetic::{gen_case1, gen_case2, ScenarioConfig};
use qfm_core::{McmcConfig, ModelSpec, PosteriorSample, RngStream, Tau, ValidSpec};

use crate::args::{Command, McmcArgs, Scenario};
use crate::config::{parse_tau_list, RunConfig};
use crate::error::{CliError, CliResult};
use crate::io::{ensure_dir, fmt_f64, read_data, read_draws, write_data, write_draws, write_json, DrawRow};
use crate::summary::*;

/// Stream for posterior-predictive replicates, clear of the chain streams.
const CRITERIA_STREAM: u64 = 1 << 40;

const DEFAULT_TAU: f64 = 0.5;
const DEFAULT_K: usize = 1;
const DEFAULT_QCOR_GRID: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 0.9];

/// Run a parsed command. Returns the files written.
pub fn run(command: Command) -> CliResult<Vec<PathBuf>> {
    match command {
        Command::Simulate { scenario, n, seed, config, out } => simulate(scenario, n, seed, load(config)?, &out),
        Command::Fit { data, tau, k, mcmc, store_latent, replicates, config, out } => {
            let cfg = load(config)?;
            let opts = FitOptions {
                tau,
                k,
                store_latent: store_latent || cfg.store_latent.unwrap_or(false),
                replicates: replicates.or(cfg.replicates),
            };
            cmd_fit(&data, &opts, &mcmc, &cfg, &out)
        }
        Command::Qcor { data, tau, pairs, mcmc, config, out } => cmd_qcor(&data, tau.as_deref(), &pairs, &mcmc, &load(config)?, &out),
        Command::Compare { summaries, out } => cmd_compare(&summaries, &out),
        Command::Diagnose { fit, out } => cmd_diagnose(&fit, &out),
    }
}

fn load(path: Option<PathBuf>) -> CliResult<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), |p| RunConfig::load(&p))
}

/// Desk or paper profile, then the config file, then flags.
pub fn resolve_mcmc(args: &McmcArgs, cfg: &RunConfig) -> CliResult<McmcConfig> {
    let mut c = if args.paper_protocol || cfg.paper_protocol.unwrap_or(false) {
        McmcConfig::paper_protocol()
    } else {
        McmcConfig::desk()
    };
    if let Some(o) = &cfg.mcmc {
        o.apply(&mut c);
    }
    if let Some(v) = args.iters {
        c.iterations = v;
    }
    if let Some(v) = args.burnin {
        c.burn_in = v;
    }
    if let Some(v) = args.thin {
        c.thin = v;
    }
    if let Some(v) = args.chains {
        c.chains = v;
    }
    if let Some(v) = args.seed {
        c.seed = v;
    }
    c.validate()?;
    Ok(c)
}

pub fn simulate(
    scenario: Option<Scenario>,
    n: Option<usize>,
    seed: Option<u64>,
    cfg: RunConfig,
    out: &Path,
) -> CliResult<Vec<PathBuf>> {
    let scenario = match (scenario, cfg.scenario) {
        (Some(s), _) => {
            let (n, seed) = (n.unwrap_or(150), seed.unwrap_or(1));
            match s {
                Scenario::Case1 => ScenarioConfig::Case1 { n, seed },
                Scenario::Case2 => ScenarioConfig::Case2 { n, seed },
            }
        }
        (None, Some(mut s)) => {
            match &mut s {
                ScenarioConfig::Case1 { n: cn, seed: cs } | ScenarioConfig::Case2 { n: cn, seed: cs } => {
                    *cn = n.unwrap_or(*cn);
                    *cs = seed.unwrap_or(*cs);
                }
                ScenarioConfig::Qfm { spec, seed: cs, .. } => {
                    if let Some(n) = n {
                        spec.n = n;
                    }
                    *cs = seed.unwrap_or(*cs);
                }
            }
            s
        }
        (None, None) => return Err(CliError::Config("simulate needs --scenario or a scenario in --config".into())),
    };
    let data = match scenario {
        ScenarioConfig::Case1 { n, seed } => gen_case1(n, seed),
        ScenarioConfig::Case2 { n, seed } => gen_case2(n, seed),
        ref qfm => qfm.generate(),
    }
    .map_err(|e| CliError::Config(e.to_string()))?;
    ensure_dir(out)?;
    let path = out.join("data.csv");
    write_data(&path, &data)?;
    Ok(vec![path])
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    pub tau: Option<f64>,
    pub k: Option<usize>,
    pub store_latent: bool,
    pub replicates: Option<usize>,
}

fn single_tau(flag: Option<f64>, cfg: &RunConfig) -> CliResult<f64> {
    if let Some(t) = flag {
        return Ok(t);
    }
    match cfg.tau.as_ref().map(|t| t.values()) {
        None => Ok(DEFAULT_TAU),
        Some(v) if v.len() == 1 => Ok(v[0]),
        Some(v) => Err(CliError::Config(format!("fit takes one quantile level, the config lists {}", v.len()))),
    }
}

fn check_columns(data: &DMatrix<f64>, cfg: &RunConfig) -> CliResult<()> {
    match cfg.p {
        Some(p) if p != data.ncols() => {
            Err(CliError::Data(format!("the config expects {p} variables, the data have {}", data.ncols())))
        }
        _ => Ok(()),
    }
}

pub fn cmd_fit(data_path: &Path, opts: &FitOptions, mcmc: &McmcArgs, cfg: &RunConfig, out: &Path) -> CliResult<Vec<PathBuf>> {
    let config = resolve_mcmc(mcmc, cfg)?;
    let tau = single_tau(opts.tau, cfg)?;
    let k = opts.k.or(cfg.k).unwrap_or(DEFAULT_K);
    let data = read_data(data_path)?;
    check_columns(&data, cfg)?;
    let spec = ModelSpec::new(data.nrows(), data.ncols(), k, tau)
        .with_priors(cfg.priors.unwrap_or_default())
        .validate()?;
    config.sigma_update.resolve(spec.tau())?;
    ensure_dir(out)?;

    let sample = fit(&data, &spec, &config)?;
    let summary = fit_summary(&sample, &data, &spec, &config, opts.replicates)?;

    let draws_path = out.join("draws.csv");
    write_draws(&draws_path, draw_rows(&sample, opts.store_latent))?;
    let summary_path = out.join("summary.json");
    write_json(&summary_path, &summary)?;
    Ok(vec![draws_path, summary_path])
}

fn draw_rows(sample: &PosteriorSample, latent: bool) -> impl Iterator<Item = DrawRow> + '_ {
    sample.chains.iter().enumerate().flat_map(move |(c, chain)| {
        chain.draws.iter().zip(&chain.iterations).flat_map(move |(s, &iter)| {
            let (n, p, k) = s.dims();
            let row = |param: String, value: f64| DrawRow { chain: c + 1, iter, param, value };
            let mut rows = Vec::new();
            for j in 0..p {
                for l in 0..k.min(j + 1) {
                    rows.push(row(format!("beta[{},{}]", j + 1, l + 1), s.beta[(j, l)]));
                }
            }
            for j in 0..p {
                rows.push(row(format!("sigma[{}]", j + 1), s.sigma[j]));
            }
            if latent {
                for i in 0..n {
                    for l in 0..k {
                        rows.push(row(format!("f[{},{}]", i + 1, l + 1), s.f[(i, l)]));
                    }
                }
                for i in 0..n {
                    rows.push(row(format!("w[{}]", i + 1), s.w[i]));
                }
            }
            rows
        })
    })
}

fn table(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn finite_psrf(r: Option<f64>) -> Option<f64> {
    r.filter(|v| v.is_finite())
}

pub fn fit_summary(
    sample: &PosteriorSample,
    data: &DMatrix<f64>,
    spec: &ValidSpec,
    config: &McmcConfig,
    replicates: Option<usize>,
) -> CliResult<FitSummary> {
    let tau = spec.tau();
    let report = diagnose(sample, tau, false)?;
    let mut warnings = Vec::new();
    let parameters = report
        .parameters
        .iter()
        .map(|d| {
            let t = TraceSummary::of(&pooled_trace(sample, &d.name, tau)?);
            if d.psrf.is_some_and(f64::is_infinite) {
                warnings.push(format!("{}: zero within-chain variance, split R-hat undefined", d.name));
            }
            Ok(ParameterSummary {
                name: d.name.clone(),
                mean: t.mean,
                sd: t.sd,
                q025: t.q025,
                q50: t.q50,
                q975: t.q975,
                psrf: finite_psrf(d.psrf),
                ess: d.ess,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let max_psrf = report.max_psrf();
    if let Some(r) = max_psrf.filter(|r| *r >= 1.1) {
        warnings.push(format!("largest split R-hat is {r:.3}; chains may not have converged"));
    }
    for (c, chain) in sample.chains.iter().enumerate() {
        if !chain.tuning_converged {
            warnings.push(format!("chain {}: proposal tuning ended outside the target band", c + 1));
        }
    }

    let mut rng = RngStream::new(config.seed, CRITERIA_STREAM).rng();
    let criteria = criteria_report(sample, data, spec, replicates, &mut rng)?;
    warnings.extend(criteria.warnings.iter().cloned());

    let k = spec.k;
    let mut columns: Vec<String> = (1..=k).map(|l| format!("factor{l}")).collect();
    columns.push("total".into());
    Ok(FitSummary {
        schema_version: SCHEMA_VERSION.into(),
        family: criteria.family.clone(),
        model: *spec.spec(),
        mcmc: config.clone(),
        sigma_update: config.sigma_update.resolve(tau)?,
        parameters,
        variance_decomposition: DvTable {
            columns,
            dv: table(&sample.variance_decomposition_mean(tau, false)?),
            dv_mod: table(&sample.variance_decomposition_mean(tau, true)?),
        },
        chains: sample
            .chains
            .iter()
            .map(|c| ChainSummary {
                stream: c.stream,
                stored_draws: c.draws.len(),
                acceptance: c.acceptance.clone(),
                proposal_sd: c.proposal_sd.clone(),
                tuning_converged: c.tuning_converged,
                nonfinite_rejections: c.nonfinite_rejections,
            })
            .collect(),
        max_psrf: finite_psrf(max_psrf),
        criteria,
        warnings,
    })
}

fn pooled_trace(sample: &PosteriorSample, name: &str, tau: Tau) -> CliResult<Vec<f64>> {
    let bad = || CliError::Numerical(format!("unknown parameter {name}"));
    if let Some(ix) = index_of(name, "beta[") {
        Ok(sample.draws().map(|s| s.beta[(ix[0], ix[1])]).collect())
    } else if let Some(ix) = index_of(name, "sigma[") {
        Ok(sample.draws().map(|s| s.sigma[ix[0]]).collect())
    } else if let Some(ix) = index_of(name, "dv[") {
        sample
            .draws()
            .map(|s| Ok(variance_decomposition(&s.beta, &s.sigma, tau, false)?[(ix[0], s.beta.ncols())]))
            .collect()
    } else {
        Err(bad())
    }
}

fn parse_pair(s: &str, p: usize) -> CliResult<(usize, usize)> {
    let bad = || CliError::Config(format!("pair '{s}' is not of the form i,j with distinct columns in 1..={p}"));
    let (a, b) = s.split_once(',').ok_or_else(bad)?;
    let pair = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
    check_pair(pair, p).map_err(|_| bad())?;
    Ok(pair)
}

fn check_pair((a, b): (usize, usize), p: usize) -> CliResult<()> {
    if a == 0 || b == 0 || a > p || b > p || a == b {
        return Err(CliError::Config(format!("pair ({a},{b}) is not two distinct columns in 1..={p}")));
    }
    Ok(())
}

pub fn cmd_qcor(
    data_path: &Path,
    tau: Option<&str>,
    pairs: &[String],
    mcmc: &McmcArgs,
    cfg: &RunConfig,
    out: &Path,
) -> CliResult<Vec<PathBuf>> {
    let config = resolve_mcmc(mcmc, cfg)?;
    let grid_values = match (tau, &cfg.tau) {
        (Some(s), _) => parse_tau_list(s)?,
        (None, Some(t)) => t.values(),
        (None, None) => DEFAULT_QCOR_GRID.to_vec(),
    };
    let grid = grid_values.iter().map(|&t| Tau::new(t)).collect::<qfm_core::Result<Vec<_>>>()?;
    let data = read_data(data_path)?;
    check_columns(&data, cfg)?;
    let p = data.ncols();
    if p < 2 {
        return Err(CliError::Data("quantile correlation needs at least two columns".into()));
    }
    let pairs: Vec<(usize, usize)> = if !pairs.is_empty() {
        pairs.iter().map(|s| parse_pair(s, p)).collect::<CliResult<_>>()?
    } else if let Some(list) = &cfg.pairs {
        list.iter().try_for_each(|&pr| check_pair(pr, p))?;
        list.clone()
    } else {
        (1..=p).flat_map(|a| ((a + 1)..=p).map(move |b| (a, b))).collect()
    };
    let priors = cfg.priors.unwrap_or_default();
    let root = RngStream::new(config.seed, 0);
    let mut curves = Vec::with_capacity(pairs.len());
    for (i, &(a, b)) in pairs.iter().enumerate() {
        let x: Vec<f64> = data.column(a - 1).iter().copied().collect();
        let y: Vec<f64> = data.column(b - 1).iter().copied().collect();
        let curve = qcor_curve(&x, &y, &grid, &priors, &config, root.derive(i as u64))?;
        curves.push(PairCurve {
            x: a,
            y: b,
            estimates: curve
                .estimates
                .into_iter()
                .map(|e| QcorRow {
                    tau: e.tau,
                    mean: e.mean,
                    lower: e.lower,
                    upper: e.upper,
                    negative_fraction: e.negative_fraction,
                    band: e.band,
                })
                .collect(),
        });
    }
    let report = QcorReport {
        schema_version: SCHEMA_VERSION.into(),
        mcmc: config,
        grid: grid_values,
        weak_below: WEAK_BELOW,
        strong_from: STRONG_FROM,
        pairs: curves,
    };
    ensure_dir(out)?;
    let path = out.join("qcor.json");
    write_json(&path, &report)?;
    Ok(vec![path])
}

const CRITERIA_COLUMNS: [&str; 7] = ["icomp", "aic", "bic", "bic_star", "rps", "mae", "mse"];

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub source: String,
    pub family: String,
    pub tau: f64,
    pub k: usize,
    /// In [`CRITERIA_COLUMNS`] order; `None` when undefined.
    pub values: [Option<f64>; 7],
    pub minimal_in: Vec<&'static str>,
}

/// Rows with per-column minima flagged, plus any warnings.
pub fn compare_rows(summaries: &[(String, FitSummary)]) -> CliResult<(Vec<CompareRow>, Vec<String>)> {
    if summaries.len() < 2 {
        return Err(CliError::Config(format!("compare needs at least two summaries, got {}", summaries.len())));
    }
    let mut rows: Vec<CompareRow> = summaries
        .iter()
        .map(|(source, s)| {
            let c = &s.criteria;
            CompareRow {
                source: source.clone(),
                family: s.family.clone(),
                tau: c.tau,
                k: c.k,
                values: [Some(c.icomp), Some(c.aic), Some(c.bic), c.bic_star, Some(c.rps), Some(c.mae), Some(c.mse)],
                minimal_in: Vec::new(),
            }
        })
        .collect();
    for (col, name) in CRITERIA_COLUMNS.iter().enumerate() {
        let min = rows.iter().filter_map(|r| r.values[col]).min_by(f64::total_cmp);
        if let Some(min) = min {
            for r in rows.iter_mut().filter(|r| r.values[col] == Some(min)) {
                r.minimal_in.push(name);
            }
        }
    }
    let mut warnings = Vec::new();
    if rows.iter().any(|r| r.family != rows[0].family) {
        warnings.push(CROSS_FAMILY_WARNING.to_string());
    }
    Ok((rows, warnings))
}

pub fn cmd_compare(inputs: &[PathBuf], out: &Path) -> CliResult<Vec<PathBuf>> {
    if inputs.len() < 2 {
        return Err(CliError::Config(format!("compare needs at least two summaries, got {}", inputs.len())));
    }
    let summaries = inputs
        .iter()
        .map(|p| Ok((p.display().to_string(), read_versioned::<FitSummary>(p)?)))
        .collect::<CliResult<Vec<_>>>()?;
    let (rows, warnings) = compare_rows(&summaries)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    ensure_dir(out)?;
    let path = out.join("criteria.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut header = vec!["source", "family", "tau", "k"];
    header.extend(CRITERIA_COLUMNS);
    header.push("minimal_in");
    let io = |e: csv::Error| CliError::Data(format!("{}: {e}", path.display()));
    w.write_record(&header).map_err(io)?;
    for r in &rows {
        let mut rec = vec![r.source.clone(), r.family.clone(), fmt_f64(r.tau), r.k.to_string()];
        rec.extend(r.values.iter().map(|v| v.map(fmt_f64).unwrap_or_default()));
        rec.push(r.minimal_in.join(";"));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    Ok(vec![path])
}

/// Traces per parameter from a long-format draws file, in first-seen order.
pub fn traces_from_draws(rows: &[DrawRow]) -> Vec<(String, Vec<Vec<f64>>)> {
    let mut order: Vec<String> = Vec::new();
    let mut by_param: BTreeMap<&str, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for r in rows {
        let chains = by_param.entry(&r.param).or_default();
        if chains.is_empty() {
            order.push(r.param.clone());
        }
        chains.entry(r.chain).or_default().push(r.value);
    }
    order
        .into_iter()
        .map(|name| {
            let chains = by_param.remove(name.as_str()).unwrap_or_default().into_values().collect();
            (name, chains)
        })
        .collect()
}

fn index_of(name: &str, prefix: &str) -> Option<Vec<usize>> {
    let inner = name.strip_prefix(prefix)?.strip_suffix(']')?;
    inner.split(',').map(|v| v.parse::<usize>().ok().filter(|&i| i > 0).map(|i| i - 1)).collect()
}

/// Per-draw variance-decomposition totals rebuilt from the loadings and scales.
fn dv_traces(rows: &[DrawRow], p: usize, k: usize, tau: Tau) -> CliResult<Vec<(String, Vec<Vec<f64>>)>> {
    let mut states: BTreeMap<(usize, usize), (DMatrix<f64>, DVector<f64>)> = BTreeMap::new();
    for r in rows {
        let entry = || (DMatrix::zeros(p, k), DVector::zeros(p));
        if let Some(ix) = index_of(&r.param, "beta[") {
            if ix.len() != 2 || ix[0] >= p || ix[1] >= k {
                return Err(CliError::Data(format!("draw parameter {} is outside the fitted model", r.param)));
            }
            states.entry((r.chain, r.iter)).or_insert_with(entry).0[(ix[0], ix[1])] = r.value;
        } else if let Some(ix) = index_of(&r.param, "sigma[") {
            if ix.len() != 1 || ix[0] >= p {
                return Err(CliError::Data(format!("draw parameter {} is outside the fitted model", r.param)));
            }
            states.entry((r.chain, r.iter)).or_insert_with(entry).1[ix[0]] = r.value;
        }
    }
    let mut per_var: Vec<BTreeMap<usize, Vec<f64>>> = vec![BTreeMap::new(); p];
    for ((chain, _), (beta, sigma)) in &states {
        let dv = variance_decomposition(beta, sigma, tau, false)?;
        for (j, acc) in per_var.iter_mut().enumerate() {
            acc.entry(*chain).or_default().push(dv[(j, k)]);
        }
    }
    Ok(per_var
        .into_iter()
        .enumerate()
        .map(|(j, chains)| (format!("dv[{}]", j + 1), chains.into_values().collect()))
        .collect())
}

pub fn diagnostics_from_draws(rows: &[DrawRow], model: &ModelSpec) -> CliResult<DiagnosticsReport> {
    let tau = Tau::new(model.tau)?;
    let mut traces: Vec<(String, Vec<Vec<f64>>, bool)> = traces_from_draws(rows)
        .into_iter()
        .map(|(name, chains)| {
            let latent = name.starts_with("f[") || name.starts_with("w[");
            (name, chains, latent)
        })
        .collect();
    let dv = dv_traces(rows, model.p, model.k, tau)?;
    let at = traces.iter().position(|t| t.2).unwrap_or(traces.len());
    traces.splice(at..at, dv.into_iter().map(|(n, c)| (n, c, false)));
    Ok(diagnose_traces(traces)?)
}

pub fn cmd_diagnose(fit_dir: &Path, out: &Path) -> CliResult<Vec<PathBuf>> {
    let summary: FitSummary = read_versioned(&fit_dir.join("summary.json"))?;
    let rows = read_draws(&fit_dir.join("draws.csv"))?;
    if rows.is_empty() {
        return Err(CliError::Data(format!("{}: no draws", fit_dir.join("draws.csv").display())));
    }
    let report = diagnostics_from_draws(&rows, &summary.model)?;
    let doc = DiagnosticsDocument {
        schema_version: SCHEMA_VERSION.into(),
        max_psrf: finite_psrf(report.max_psrf()),
        parameters: report.parameters,
    };
    ensure_dir(out)?;
    let path = out.join("diagnostics.json");
    write_json(&path, &doc)?;
    Ok(vec![path])
}
