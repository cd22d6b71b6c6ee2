//! TOML config schema for the `simulate` and `estimate` subcommands.
//!
//! ## Purpose
//!
//! Declares the on-disk config layout, parses and validates it, and converts
//! it into the library's typed job descriptions ([`crate::simulation::SimConfig`],
//! [`EstimateJob`]). Rule-consistency problems (kernel orders or bandwidth
//! exponents that deviate from the dimension rules) are collected as
//! violations: hard errors by default, downgraded to warnings when the
//! config sets `override = true`.
//!
//! ## Design notes
//!
//! - Each bandwidth slot is a small table: `{ value = 0.1 }` for a literal,
//!   `{ a = 0.05 }` for the rule h = a·n^(−1/e) with the exponent derived
//!   from the dimensions and kernel orders, or `{ a = 0.05, exponent = "1/9" }`
//!   to pin the exponent explicitly.
//! - `[estimate]` bandwidth rules need the sample size, which is only known
//!   after the data CSV is read; the request is therefore resolved lazily
//!   via [`PlanRequest::resolve`].
//! - Unknown keys are rejected everywhere (`deny_unknown_fields`) so typos
//!   fail loudly instead of silently using defaults.
//!
//! ## Invariants
//!
//! - A successfully loaded job never carries an empty estimator list, an
//!   empty grid request, or duplicate estimators.
//! - Violations are either all surfaced as one config error (default) or
//!   all returned as warnings (`override = true`); they are never dropped.
//!
//! ## Non-goals
//!
//! No environment-variable expansion, no config merging or includes.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use serde::Deserialize;

use crate::cli::CliFailure;
use crate::estimators::EstimatorId;
use crate::firststage::BasisSpec;
use crate::kernels::KernelFamily;
use crate::simulation::{
    bandwidth_rule, default_grid_points, BandwidthPlan, BandwidthRole, BandwidthSpec,
    DirectionPolicy, KernelOrders, ModelId, SimConfig,
};

/// Top-level config file: one section per subcommand.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    simulate: Option<SimulateSection>,
    estimate: Option<EstimateSection>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum ModelField {
    Number(u8),
    Name(String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateSection {
    model: ModelField,
    n: usize,
    replications: usize,
    seed: u64,
    grid: Option<Vec<f64>>,
    estimators: Option<Vec<String>>,
    direction_policy: Option<String>,
    clip: Option<f64>,
    max_dropped: Option<usize>,
    #[serde(default, rename = "override")]
    override_rules: bool,
    orders: Option<OrdersSection>,
    bandwidths: BandwidthsSection,
    family: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct OrdersSection {
    s1: usize,
    s2: usize,
    s4: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BandwidthsSection {
    h1: RawBandwidthToml,
    h2: RawBandwidthToml,
    h4: RawBandwidthToml,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBandwidthToml {
    value: Option<f64>,
    a: Option<f64>,
    exponent: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EstimateSection {
    csv: String,
    y: String,
    d: String,
    x: Vec<String>,
    x1: Vec<String>,
    estimators: Vec<String>,
    #[serde(default)]
    leave_one_out: bool,
    clip: Option<f64>,
    #[serde(default, rename = "override")]
    override_rules: bool,
    grid: Option<GridSection>,
    bandwidths: BandwidthsSection,
    orders: Option<OrdersSection>,
    family: Option<String>,
    bases: Option<BasesSection>,
    directions: Option<DirectionsSection>,
    propensity_basis: Option<Vec<String>>,
    #[serde(default)]
    plot_data: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridSection {
    points: Option<GridPoints>,
    quantiles: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum GridPoints {
    Scalar(Vec<f64>),
    Vector(Vec<Vec<f64>>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BasesSection {
    arm1: Vec<String>,
    arm0: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DirectionsSection {
    method: Option<String>,
    beta1: Option<Vec<Vec<f64>>>,
    beta0: Option<Vec<Vec<f64>>>,
    r1: Option<usize>,
    r0: Option<usize>,
}

/// One bandwidth slot as requested by the config.
#[derive(Debug, Clone, Copy, PartialEq)]
enum RawBandwidth {
    Value(f64),
    Baseline { a: f64, exponent: Option<(u32, u32)> },
}

impl RawBandwidth {
    fn from_toml(name: &str, raw: &RawBandwidthToml) -> Result<Self, CliFailure> {
        match (raw.value, raw.a, raw.exponent.as_deref()) {
            (Some(v), None, None) => Ok(RawBandwidth::Value(v)),
            (None, Some(a), exp) => Ok(RawBandwidth::Baseline {
                a,
                exponent: exp.map(|e| parse_exponent(name, e)).transpose()?,
            }),
            (Some(_), Some(_), _) => Err(CliFailure::config(format!(
                "bandwidth `{name}` sets both `value` and `a`; pick one form"
            ))),
            (Some(_), None, Some(_)) => Err(CliFailure::config(format!(
                "bandwidth `{name}` combines `value` with `exponent`; exponents apply to `a` rules"
            ))),
            (None, None, _) => Err(CliFailure::config(format!(
                "bandwidth `{name}` needs either `value` or `a`"
            ))),
        }
    }
}

/// Parse an exponent string like "1/9" into (numerator, denominator).
fn parse_exponent(name: &str, text: &str) -> Result<(u32, u32), CliFailure> {
    let err = || {
        CliFailure::config(format!(
            "bandwidth `{name}` has malformed exponent `{text}`; expected `num/den` like \"1/9\""
        ))
    };
    let (num, den) = text.trim().split_once('/').ok_or_else(err)?;
    let num: u32 = num.trim().parse().map_err(|_| err())?;
    let den: u32 = den.trim().parse().map_err(|_| err())?;
    if num == 0 || den == 0 {
        return Err(err());
    }
    Ok((num, den))
}

pub(crate) fn parse_family(text: Option<&str>) -> Result<KernelFamily, CliFailure> {
    match text {
        None => Ok(KernelFamily::GaussianDerived),
        Some(s) => match s.to_ascii_lowercase().as_str() {
            "gaussian" => Ok(KernelFamily::GaussianDerived),
            "compact" => Ok(KernelFamily::CompactPolynomial),
            other => Err(CliFailure::config(format!(
                "unknown kernel family `{other}`; expected \"gaussian\" or \"compact\""
            ))),
        },
    }
}

fn parse_estimators(names: &[String]) -> Result<Vec<EstimatorId>, CliFailure> {
    if names.len() == 1 && names[0].eq_ignore_ascii_case("all") {
        return Ok(EstimatorId::ALL.to_vec());
    }
    names
        .iter()
        .map(|name| {
            EstimatorId::from_str(name)
                .map_err(|e| CliFailure::config(format!("bad estimator `{name}`: {e}")))
        })
        .collect()
}

/// A deferred bandwidth-plan request: raw slots plus orders, resolvable once
/// the problem dimensions and sample size are known.
#[derive(Debug, Clone)]
pub struct PlanRequest {
    specs: [RawBandwidth; 3],
    orders: Option<KernelOrders>,
    family: KernelFamily,
}

impl PlanRequest {
    fn from_sections(
        bandwidths: &BandwidthsSection,
        orders: Option<&OrdersSection>,
        family: Option<&str>,
    ) -> Result<Self, CliFailure> {
        Ok(PlanRequest {
            specs: [
                RawBandwidth::from_toml("h1", &bandwidths.h1)?,
                RawBandwidth::from_toml("h2", &bandwidths.h2)?,
                RawBandwidth::from_toml("h4", &bandwidths.h4)?,
            ],
            orders: orders.map(|o| KernelOrders { s1: o.s1, s2: o.s2, s4: o.s4 }),
            family: parse_family(family)?,
        })
    }

    /// Resolve to a concrete plan for dimensions (k, p, r_max) and sample
    /// size n. Returns the plan together with rule-consistency violations
    /// (empty when the request follows the dimension rules).
    pub fn resolve(
        &self,
        n: usize,
        k: usize,
        p: usize,
        r_max: usize,
    ) -> Result<(BandwidthPlan, Vec<String>), CliFailure> {
        let defaults = KernelOrders::defaults(p, r_max);
        let orders = self.orders.unwrap_or(defaults);
        let mut violations = Vec::new();
        if orders != defaults {
            violations.push(format!(
                "kernel orders (s1,s2,s4)=({},{},{}) differ from the dimension rule ({},{},{}) \
                 (s2 rounds p={p} up to even, s1 = s2 + 2, s4 rounds r_max={r_max} up to even)",
                orders.s1, orders.s2, orders.s4, defaults.s1, defaults.s2, defaults.s4
            ));
        }
        if orders.s2 < p {
            violations.push(format!(
                "stage-one kernel order s2={} is below the covariate dimension p={p}; \
                 the stage-one bias conditions assume s2 >= p",
                orders.s2
            ));
        }
        let roles = [BandwidthRole::H1, BandwidthRole::H2, BandwidthRole::H4];
        let names = ["h1", "h2", "h4"];
        let rule_text = [
            format!("1/(k + 2*s1) with k={k}"),
            format!("1/(p + s2) with p={p}"),
            format!("1/(r_max + s4) with r_max={r_max}"),
        ];
        let mut specs = [BandwidthSpec::Explicit(1.0); 3];
        for i in 0..3 {
            specs[i] = match self.specs[i] {
                RawBandwidth::Value(v) => BandwidthSpec::Explicit(v),
                RawBandwidth::Baseline { a, exponent } => {
                    let (_, derived) = bandwidth_rule(roles[i], a, n, k, p, r_max, &orders)
                        .map_err(|e| CliFailure::config(e.to_string()))?;
                    let exponent = match exponent {
                        None => derived,
                        Some(given) => {
                            if given != derived {
                                violations.push(format!(
                                    "{} exponent {}/{} differs from the rate rule {} = {}/{} \
                                     for the configured orders",
                                    names[i], given.0, given.1, rule_text[i], derived.0, derived.1
                                ));
                            }
                            given
                        }
                    };
                    BandwidthSpec::Rule { a, exponent }
                }
            };
        }
        let plan = BandwidthPlan::from_specs(n, specs, orders)
            .map_err(|e| CliFailure::config(e.to_string()))?
            .with_family(self.family);
        Ok((plan, violations))
    }
}

/// Gate rule violations on the `override` flag: error without it, warnings
/// with it.
pub fn gate_violations(
    violations: Vec<String>,
    override_rules: bool,
) -> Result<Vec<String>, CliFailure> {
    if violations.is_empty() || override_rules {
        Ok(violations)
    } else {
        Err(CliFailure::config(format!(
            "plan deviates from the dimension rules ({}); set `override = true` to run anyway",
            violations.join("; ")
        )))
    }
}

/// A fully validated `simulate` job.
#[derive(Debug, Clone)]
pub struct SimulateJob {
    pub config: SimConfig,
    pub max_dropped: usize,
    pub warnings: Vec<String>,
}

/// Parse and validate a `simulate` config from TOML text.
pub fn simulate_from_str(text: &str) -> Result<SimulateJob, CliFailure> {
    let file: ConfigFile = toml::from_str(text)
        .map_err(|e| CliFailure::config(format!("config parse error: {e}")))?;
    let section = file
        .simulate
        .ok_or_else(|| CliFailure::config("config has no [simulate] section"))?;

    let model = match &section.model {
        ModelField::Number(v) => ModelId::from_str(&v.to_string()),
        ModelField::Name(s) => ModelId::from_str(s),
    }
    .map_err(|e| CliFailure::config(e.to_string()))?;

    let request = PlanRequest::from_sections(
        &section.bandwidths,
        section.orders.as_ref(),
        section.family.as_deref(),
    )?;
    let (plan, violations) =
        request.resolve(section.n, 1, model.covariate_dim(), model.r_max())?;
    let warnings = gate_violations(violations, section.override_rules)?;

    let estimators = match &section.estimators {
        None => EstimatorId::ALL.to_vec(),
        Some(names) => parse_estimators(names)?,
    };
    let direction_policy = match section.direction_policy.as_deref() {
        None => DirectionPolicy::Known,
        Some(s) => DirectionPolicy::from_str(s).map_err(|e| CliFailure::config(e.to_string()))?,
    };

    let config = SimConfig {
        model,
        n: section.n,
        replications: section.replications,
        grid: section.grid.unwrap_or_else(default_grid_points),
        plan,
        estimators,
        direction_policy,
        clip: section.clip,
        seed: section.seed,
    };
    config
        .validate()
        .map_err(|e| CliFailure::config(e.to_string()))?;
    Ok(SimulateJob {
        config,
        max_dropped: section.max_dropped.unwrap_or(0),
        warnings,
    })
}

/// Load a `simulate` config from a file.
pub fn load_simulate(path: &Path) -> Result<SimulateJob, CliFailure> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliFailure::config(format!("cannot read config `{}`: {e}", path.display()))
    })?;
    simulate_from_str(&text)
}

/// Grid request for `estimate`: explicit points or an interior-quantile
/// count over scalar X₁.
#[derive(Debug, Clone, PartialEq)]
pub enum GridSpec {
    Points(Vec<Vec<f64>>),
    Quantiles(usize),
}

/// Direction request for SRCATE on external data.
#[derive(Debug, Clone)]
pub enum DirectionsRequest {
    /// Known projection matrices, stored p×r (columns are directions).
    Known { beta1: Array2<f64>, beta0: Array2<f64> },
    /// Estimate rank-0/1 directions from each arm.
    IndexLs { r1: usize, r0: usize },
}

/// Column roles mapping CSV headers into the sample matrix.
#[derive(Debug, Clone)]
pub struct Roles {
    pub y: String,
    pub d: String,
    pub x: Vec<String>,
    pub x1: Vec<String>,
}

/// A validated `estimate` job; the bandwidth plan stays a request until the
/// data reveal n.
#[derive(Debug, Clone)]
pub struct EstimateJob {
    pub csv: PathBuf,
    pub roles: Roles,
    pub estimators: Vec<EstimatorId>,
    pub leave_one_out: bool,
    pub clip: Option<f64>,
    pub override_rules: bool,
    pub grid: GridSpec,
    pub plan: PlanRequest,
    pub bases: Option<(BasisSpec, BasisSpec)>,
    pub directions: Option<DirectionsRequest>,
    pub propensity_basis: Option<BasisSpec>,
    pub plot_data: bool,
}

impl EstimateJob {
    /// Covariate dimension implied by the roles.
    pub fn p(&self) -> usize {
        self.roles.x.len()
    }

    /// Conditioning dimension implied by the roles.
    pub fn k(&self) -> usize {
        self.roles.x1.len()
    }

    /// Largest requested index rank (1 when SRCATE is not requested).
    pub fn r_max(&self) -> usize {
        match &self.directions {
            Some(DirectionsRequest::Known { beta1, beta0 }) => {
                beta1.ncols().max(beta0.ncols()).max(1)
            }
            Some(DirectionsRequest::IndexLs { r1, r0 }) => (*r1).max(*r0).max(1),
            None => 1,
        }
    }
}

fn beta_from_rows(name: &str, rows: &[Vec<f64>], p: usize) -> Result<Array2<f64>, CliFailure> {
    let r = rows.len();
    let mut beta = Array2::zeros((p, r));
    for (j, row) in rows.iter().enumerate() {
        if row.len() != p {
            return Err(CliFailure::config(format!(
                "direction row {} of `{name}` has {} entries, expected p = {p}",
                j + 1,
                row.len()
            )));
        }
        for (i, v) in row.iter().enumerate() {
            beta[(i, j)] = *v;
        }
    }
    Ok(beta)
}

/// Parse and validate an `estimate` config from TOML text.
pub fn estimate_from_str(text: &str) -> Result<EstimateJob, CliFailure> {
    let file: ConfigFile = toml::from_str(text)
        .map_err(|e| CliFailure::config(format!("config parse error: {e}")))?;
    let section = file
        .estimate
        .ok_or_else(|| CliFailure::config("config has no [estimate] section"))?;

    if section.x.is_empty() {
        return Err(CliFailure::config("`x` must name at least one covariate column"));
    }
    if section.x1.is_empty() {
        return Err(CliFailure::config("`x1` must name at least one conditioning column"));
    }
    for (i, a) in section.x.iter().enumerate() {
        if section.x[i + 1..].contains(a) {
            return Err(CliFailure::config(format!("duplicate covariate column `{a}` in `x`")));
        }
    }
    for name in &section.x1 {
        if !section.x.contains(name) {
            return Err(CliFailure::config(format!(
                "`x1` column `{name}` is not listed in `x`; conditioning covariates must be a \
                 subset of the covariates"
            )));
        }
    }
    let p = section.x.len();

    let estimators = parse_estimators(&section.estimators)?;
    if estimators.is_empty() {
        return Err(CliFailure::config("`estimators` must not be empty"));
    }
    for id in &estimators {
        if matches!(id, EstimatorId::Orcate | EstimatorId::Ocate) {
            return Err(CliFailure::config(format!(
                "estimator `{id}` needs the data-generating oracle (true effect or true \
                 propensity); it is available in `simulate` only"
            )));
        }
    }

    let grid = match &section.grid {
        None => GridSpec::Quantiles(40),
        Some(gs) => match (&gs.points, gs.quantiles) {
            (Some(_), Some(_)) => {
                return Err(CliFailure::config(
                    "grid sets both `points` and `quantiles`; pick one",
                ))
            }
            (None, None) => GridSpec::Quantiles(40),
            (None, Some(q)) => {
                if q == 0 {
                    return Err(CliFailure::config("`quantiles` must be at least 1"));
                }
                GridSpec::Quantiles(q)
            }
            (Some(points), None) => {
                let rows = match points {
                    GridPoints::Scalar(v) => v.iter().map(|&x| vec![x]).collect::<Vec<_>>(),
                    GridPoints::Vector(v) => v.clone(),
                };
                if rows.is_empty() {
                    return Err(CliFailure::config("grid `points` must not be empty"));
                }
                GridSpec::Points(rows)
            }
        },
    };

    let bases = match &section.bases {
        None => None,
        Some(bs) => {
            let arm1 = BasisSpec::parse(&bs.arm1)
                .map_err(|e| CliFailure::config(format!("bases.arm1: {e}")))?;
            let arm0 = BasisSpec::parse(&bs.arm0)
                .map_err(|e| CliFailure::config(format!("bases.arm0: {e}")))?;
            for (name, basis) in [("arm1", &arm1), ("arm0", &arm0)] {
                if let Some(max) = basis.max_coord() {
                    if max >= p {
                        return Err(CliFailure::config(format!(
                            "bases.{name} references coordinate x{} but only {p} covariates \
                             are listed in `x`",
                            max + 1
                        )));
                    }
                }
            }
            Some((arm1, arm0))
        }
    };
    if estimators.contains(&EstimatorId::Prcate) && bases.is_none() {
        return Err(CliFailure::config(
            "estimator `prcate` needs a [estimate.bases] section with `arm1` and `arm0` term lists",
        ));
    }

    let directions = match &section.directions {
        None => None,
        Some(ds) => {
            let method = ds.method.as_deref().unwrap_or("known");
            match method.to_ascii_lowercase().as_str() {
                "known" => {
                    let beta1_rows = ds.beta1.as_ref().ok_or_else(|| {
                        CliFailure::config("directions method \"known\" needs `beta1`")
                    })?;
                    let beta0_rows = ds.beta0.as_ref().ok_or_else(|| {
                        CliFailure::config("directions method \"known\" needs `beta0`")
                    })?;
                    if ds.r1.is_some() || ds.r0.is_some() {
                        return Err(CliFailure::config(
                            "directions method \"known\" takes matrices, not ranks `r1`/`r0`",
                        ));
                    }
                    Some(DirectionsRequest::Known {
                        beta1: beta_from_rows("beta1", beta1_rows, p)?,
                        beta0: beta_from_rows("beta0", beta0_rows, p)?,
                    })
                }
                "index-ls" | "index_ls" => {
                    if ds.beta1.is_some() || ds.beta0.is_some() {
                        return Err(CliFailure::config(
                            "directions method \"index-ls\" takes ranks `r1`/`r0`, not matrices",
                        ));
                    }
                    let r1 = ds.r1.unwrap_or(1);
                    let r0 = ds.r0.unwrap_or(1);
                    for (name, r) in [("r1", r1), ("r0", r0)] {
                        if r > 1 {
                            return Err(CliFailure::config(format!(
                                "index-ls direction estimation supports rank 0 or 1; `{name}` = {r}"
                            )));
                        }
                    }
                    Some(DirectionsRequest::IndexLs { r1, r0 })
                }
                other => Err(CliFailure::config(format!(
                    "unknown directions method `{other}`; expected \"known\" or \"index-ls\""
                )))?,
            }
        }
    };
    if estimators.contains(&EstimatorId::Srcate) && directions.is_none() {
        return Err(CliFailure::config(
            "estimator `srcate` needs a [estimate.directions] section (known matrices or index-ls ranks)",
        ));
    }

    let propensity_basis = match &section.propensity_basis {
        None => None,
        Some(terms) => {
            let basis = BasisSpec::parse(terms)
                .map_err(|e| CliFailure::config(format!("propensity_basis: {e}")))?;
            if let Some(max) = basis.max_coord() {
                if max >= p {
                    return Err(CliFailure::config(format!(
                        "propensity_basis references coordinate x{} but only {p} covariates are \
                         listed in `x`",
                        max + 1
                    )));
                }
            }
            Some(basis)
        }
    };

    let plan = PlanRequest::from_sections(
        &section.bandwidths,
        section.orders.as_ref(),
        section.family.as_deref(),
    )?;

    Ok(EstimateJob {
        csv: PathBuf::from(&section.csv),
        roles: Roles {
            y: section.y.clone(),
            d: section.d.clone(),
            x: section.x.clone(),
            x1: section.x1.clone(),
        },
        estimators,
        leave_one_out: section.leave_one_out,
        clip: section.clip,
        override_rules: section.override_rules,
        grid,
        plan,
        bases,
        directions,
        propensity_basis,
        plot_data: section.plot_data,
    })
}

/// Load an `estimate` config from a file. Relative `csv` paths resolve
/// against the config file's directory.
pub fn load_estimate(path: &Path) -> Result<EstimateJob, CliFailure> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliFailure::config(format!("cannot read config `{}`: {e}", path.display()))
    })?;
    let mut job = estimate_from_str(&text)?;
    if job.csv.is_relative() {
        if let Some(dir) = path.parent() {
            job.csv = dir.join(&job.csv);
        }
    }
    Ok(job)
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GridSpec::Points(rows) => write!(f, "{} explicit points", rows.len()),
            GridSpec::Quantiles(q) => write!(f, "{q} interior quantile points"),
        }
    }
}
