//! Experiment runner: configuration, subcommands and reproducible outputs.
//!
//! A run is fully described by a [`RunConfig`]. Each subcommand has its own
//! default configuration; a user file overrides any subset of it. The
//! resolved configuration is written back as `run.toml`, and its SHA-256
//! heads every output file, so `--config out/run.toml` reproduces a run.

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::arnold_model::{ModelError, ModelParams};
use crate::chart::{build_chart, ChartError, LeafChart};
use crate::diffusion::{self, BallConfig, ChainConfig, DiffusionError, ShadowConfig};
use crate::graph_lab::{run_lambda_lemma, Check, GraphError, LambdaLemmaConfig};
use crate::melnikov::{self, MelnikovError};
use crate::nhim::{self, DomainBox, LeafKind, NhimError};
use crate::pendulum_oracle::{saddle_frame, separatrix_r1};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nhim(#[from] NhimError),
    #[error(transparent)]
    Chart(#[from] ChartError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Melnikov(#[from] MelnikovError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Grown unstable manifold of the pendulum saddle against the closed-form separatrix.
    PendulumCheck,
    /// Graph-transform iteration of a transverse disk with every asserted inequality.
    LambdaLemma,
    /// Melnikov profile against direct gap measurements and a transverse zero.
    Melnikov,
    /// Transition chain of tori with verified heteroclinic connections.
    Chain,
    /// Shadowing orbit with ball containment and drift report.
    Diffuse,
}

impl Command {
    pub const ALL: [Command; 5] = [Command::PendulumCheck, Command::LambdaLemma, Command::Melnikov, Command::Chain, Command::Diffuse];

    pub fn name(self) -> &'static str {
        match self {
            Command::PendulumCheck => "pendulum-check",
            Command::LambdaLemma => "lambda-lemma",
            Command::Melnikov => "melnikov",
            Command::Chain => "chain",
            Command::Diffuse => "diffuse",
        }
    }

    pub fn from_name(s: &str) -> Option<Command> {
        Command::ALL.into_iter().find(|c| c.name() == s)
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub epsilon: f64,
    pub mu: f64,
    /// Integrator steps per period (power of two).
    pub steps: usize,
    /// Splitting order, 2 or 4.
    pub order: u8,
}

impl ModelSection {
    pub fn params(&self) -> Result<ModelParams, CliError> {
        Ok(ModelParams::new(self.epsilon, self.mu, self.steps, self.order)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChartSection {
    /// Polynomial order of the conjugacy.
    pub order: usize,
    /// Radius ς of the hyperbolic box.
    pub varsigma: f64,
    /// Largest accepted straightening defect.
    pub tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PendulumSection {
    pub theta_min: f64,
    pub theta_max: f64,
    pub leaf_order: usize,
    pub grow_steps: usize,
    /// Largest spacing between consecutive grown samples.
    pub spacing: f64,
    pub tol: f64,
    /// Relative tolerance on the saddle multipliers.
    pub multiplier_tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaSection {
    pub p0: [f64; 2],
    pub s0_frac: f64,
    pub x1: [f64; 2],
    pub x2: [f64; 2],
    pub s1: f64,
    pub s2: f64,
    pub u1: f64,
    pub nodes: usize,
    pub n_max: usize,
    pub q: u32,
    pub fit_window: [usize; 2],
    pub push_m: Vec<usize>,
    /// Bound the (m, U)-graph distance must fall below by N_max.
    pub push_tol: f64,
}

impl LambdaSection {
    fn to_config(&self) -> LambdaLemmaConfig {
        LambdaLemmaConfig {
            p0: self.p0,
            s0_frac: self.s0_frac,
            x1: self.x1,
            x2: self.x2,
            s1: self.s1,
            s2: self.s2,
            u1: self.u1,
            nodes: self.nodes,
            n_max: self.n_max,
            q: self.q,
            fit_window: (self.fit_window[0], self.fit_window[1]),
            push_m: self.push_m.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MelnikovSection {
    pub omega: f64,
    /// Number of equally spaced phases θ₂⁰ in [0, 2π).
    pub phases: usize,
    /// Relative agreement of gap/μ with the profile, against its sup norm.
    pub profile_tol: f64,
    /// Perturbation sizes for the first-order scaling check, decreasing.
    pub richardson_mu: Vec<f64>,
    pub richardson_tol: f64,
    /// Largest admissible gap at μ = 0.
    pub zero_mu_tol: f64,
    pub residual_tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSection {
    /// Target frequencies, increasing.
    pub omegas: Vec<f64>,
    pub min_dwell: i64,
    pub max_dwell: i64,
    pub samples: usize,
    pub accept_fraction: f64,
    pub residual_tol: f64,
    pub max_links: usize,
}

impl ChainSection {
    fn to_config(&self) -> ChainConfig {
        ChainConfig {
            min_dwell: self.min_dwell,
            max_dwell: self.max_dwell,
            samples: self.samples,
            accept_fraction: self.accept_fraction,
            residual_tol: self.residual_tol,
            max_links: self.max_links,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffuseSection {
    /// Radius ϱ of the torus neighbourhoods.
    pub rho: f64,
    pub max_iterates: usize,
    pub tail: usize,
    /// Boundary samples per link.
    pub samples: usize,
    /// Samples of the composed map from B₀.
    pub composed_samples: usize,
    /// Working precision of the orbit trace in bits; 0 selects the ball chain's.
    pub precision: u32,
    /// Whether to repeat the trace at twice the precision.
    pub audit: bool,
    pub audit_tol: f64,
}

/// Complete description of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub model: ModelSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chart: Option<ChartSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pendulum: Option<PendulumSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_lemma: Option<LambdaSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub melnikov: Option<MelnikovSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain: Option<ChainSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diffuse: Option<DiffuseSection>,
}

fn chain_section(omegas: Vec<f64>) -> ChainSection {
    let c = ChainConfig::default();
    ChainSection {
        omegas,
        min_dwell: c.min_dwell,
        max_dwell: c.max_dwell,
        samples: c.samples,
        accept_fraction: c.accept_fraction,
        residual_tol: c.residual_tol,
        max_links: c.max_links,
    }
}

impl RunConfig {
    /// The default configuration of a subcommand.
    pub fn default_for(cmd: Command) -> RunConfig {
        let model = |epsilon, mu, steps| ModelSection { epsilon, mu, steps, order: 4 };
        let mut c = RunConfig {
            command: cmd.name().into(),
            seed: 7,
            model: model(0.25, 0.0, 2048),
            chart: None,
            pendulum: None,
            lambda_lemma: None,
            melnikov: None,
            chain: None,
            diffuse: None,
        };
        match cmd {
            Command::PendulumCheck => {
                c.pendulum = Some(PendulumSection { theta_min: 0.1, theta_max: PI, leaf_order: 10, grow_steps: 3, spacing: 1e-3, tol: 1e-6, multiplier_tol: 1e-9 });
            }
            Command::LambdaLemma => {
                let d = LambdaLemmaConfig::default();
                c.model = model(1.0, 0.0, 256);
                c.chart = Some(ChartSection { order: 3, varsigma: 0.2, tol: 1e-3 });
                c.lambda_lemma = Some(LambdaSection {
                    p0: d.p0,
                    s0_frac: d.s0_frac,
                    x1: d.x1,
                    x2: d.x2,
                    s1: d.s1,
                    s2: d.s2,
                    u1: d.u1,
                    nodes: d.nodes,
                    n_max: d.n_max,
                    q: d.q,
                    fit_window: [d.fit_window.0, d.fit_window.1],
                    push_m: d.push_m,
                    push_tol: 1e-3,
                });
            }
            Command::Melnikov => {
                c.model = model(0.25, 1e-3, 256);
                c.melnikov = Some(MelnikovSection {
                    omega: 0.5,
                    phases: 16,
                    profile_tol: 0.1,
                    richardson_mu: vec![1e-3, 5e-4, 2.5e-4],
                    richardson_tol: 0.2,
                    zero_mu_tol: 1e-8,
                    residual_tol: 1e-6,
                });
            }
            Command::Chain => {
                c.model = model(0.25, 5e-3, 128);
                c.chain = Some(chain_section(vec![0.45, 0.5]));
            }
            Command::Diffuse => {
                let b = BallConfig::default();
                c.model = model(0.25, 5e-3, 128);
                c.chart = Some(ChartSection { order: 8, varsigma: 0.2, tol: 1e-6 });
                c.chain = Some(chain_section(vec![0.45, 0.5, 0.55]));
                c.diffuse = Some(DiffuseSection {
                    rho: b.rho,
                    max_iterates: b.max_iterates,
                    tail: b.tail,
                    samples: 64,
                    composed_samples: 8,
                    precision: 0,
                    audit: true,
                    audit_tol: 2e-3,
                });
            }
        }
        c
    }

    pub fn command(&self) -> Result<Command, CliError> {
        Command::from_name(&self.command).ok_or_else(|| CliError::Config(format!("unknown command `{}`", self.command)))
    }

    /// Canonical text form; the manifest hash is taken over these bytes.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn manifest_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

fn merge(base: &mut toml::Table, user: toml::Table, path: &str) -> Result<(), CliError> {
    for (k, v) in user {
        let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
        match (base.get_mut(&k), v) {
            (None, _) => return Err(CliError::Config(format!("unknown key `{key}`"))),
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u, &key)?,
            (Some(toml::Value::Table(_)), _) => return Err(CliError::Config(format!("`{key}` must be a section"))),
            (Some(_), toml::Value::Table(_)) => return Err(CliError::Config(format!("`{key}` is not a section"))),
            (Some(slot), v) => *slot = v,
        }
    }
    Ok(())
}

/// Layers a user config (if any) and the command-line overrides over the
/// command's defaults, then validates the result.
pub fn resolve_config(cmd: Command, text: Option<&str>, precision: Option<u32>, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let base_cfg = RunConfig::default_for(cmd);
    let mut base = toml::Table::try_from(&base_cfg).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(text) = text {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        if let Some(c) = user.get("command") {
            if c.as_str() != Some(cmd.name()) {
                return Err(CliError::Config(format!("config is for command {c}, not `{cmd}`")));
            }
        }
        merge(&mut base, user, "")?;
    }
    let mut cfg: RunConfig = toml::Value::Table(base).try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    if let Some(s) = seed {
        if s > i64::MAX as u64 {
            return Err(CliError::Config(format!("seed {s} exceeds {}", i64::MAX)));
        }
        cfg.seed = s;
    }
    if let Some(p) = precision {
        match cfg.diffuse.as_mut() {
            Some(d) => d.precision = p,
            None => return Err(CliError::Config(format!("--precision does not apply to `{cmd}`"))),
        }
    }
    validate(cmd, &cfg)?;
    Ok(cfg)
}

fn validate(cmd: Command, cfg: &RunConfig) -> Result<(), CliError> {
    cfg.model.params()?;
    let bad = |m: &str| Err(CliError::Config(m.into()));
    match cmd {
        Command::PendulumCheck if cfg.model.mu != 0.0 => return bad("pendulum-check requires mu = 0"),
        Command::Diffuse if cfg.model.mu == 0.0 => return bad("drift impossible at mu = 0: the tori carry no heteroclinic connections"),
        _ => {}
    }
    if let Some(c) = &cfg.chain {
        if c.omegas.is_empty() {
            return bad("chain.omegas is empty");
        }
        if c.omegas.windows(2).any(|w| !(w[1] > w[0])) {
            return bad("chain.omegas must be strictly increasing");
        }
    }
    if let Some(m) = &cfg.melnikov {
        if m.phases == 0 {
            return bad("melnikov.phases must be positive");
        }
        if m.richardson_mu.len() < 2 || m.richardson_mu.iter().any(|&x| !(x > 0.0)) {
            return bad("melnikov.richardson_mu needs at least two positive values");
        }
    }
    if let Some(l) = &cfg.lambda_lemma {
        if l.nodes < 3 || l.nodes % 2 == 0 {
            return bad("lambda_lemma.nodes must be odd and at least 3");
        }
    }
    Ok(())
}

/// One output file; `body` excludes the manifest line.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputFile {
    pub name: String,
    pub body: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub hash: String,
    pub files: Vec<OutputFile>,
    pub checks: Vec<Check>,
}

impl RunOutput {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::ok)
    }

    /// File contents as written, manifest line included.
    pub fn contents(&self, f: &OutputFile) -> String {
        if f.name.ends_with(".json") {
            // keep the file valid JSON: the hash is its first member
            let rest = f.body.trim_start().strip_prefix('{').unwrap_or(&f.body);
            let sep = if rest.trim_start().starts_with('}') { "" } else { "," };
            format!("{{\"manifest_sha256\": \"{}\"{sep}{rest}", self.hash)
        } else {
            format!("# manifest sha256:{}\n{}", self.hash, f.body)
        }
    }

    pub fn file(&self, name: &str) -> Option<String> {
        self.files.iter().find(|f| f.name == name).map(|f| self.contents(f))
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir)?;
        for f in &self.files {
            std::fs::write(dir.join(&f.name), self.contents(f))?;
        }
        Ok(())
    }
}

/// Decimal with 17 significant digits.
fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn checks_csv(checks: &[Check]) -> String {
    let mut s = String::from("check,margin,status\n");
    for c in checks {
        s.push_str(&format!("{},{},{}\n", c.name.replace(',', ";"), num(c.margin), if c.ok() { "PASS" } else { "FAIL" }));
    }
    s
}

fn checks_json(checks: &[Check]) -> Value {
    Value::Array(checks.iter().map(|c| json!({"name": c.name, "margin": c.margin, "pass": c.ok()})).collect())
}

fn check(name: impl Into<String>, margin: f64) -> Check {
    Check { name: name.into(), margin }
}

fn section<'a, T>(s: &'a Option<T>, name: &str) -> Result<&'a T, CliError> {
    s.as_ref().ok_or_else(|| CliError::Config(format!("missing section [{name}]")))
}

/// Runs the configured command and collects its outputs in memory.
pub fn execute(cfg: &RunConfig) -> Result<RunOutput, CliError> {
    let cmd = cfg.command()?;
    validate(cmd, cfg)?;
    let (mut files, checks, summary) = match cmd {
        Command::PendulumCheck => pendulum_check(cfg)?,
        Command::LambdaLemma => lambda_lemma(cfg)?,
        Command::Melnikov => melnikov_cmd(cfg)?,
        Command::Chain => chain_cmd(cfg)?,
        Command::Diffuse => diffuse_cmd(cfg)?,
    };
    let doc = json!({
        "command": cmd.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "passed": checks.iter().all(Check::ok),
        "checks": checks_json(&checks),
        "result": summary,
    });
    files.push(OutputFile { name: format!("{}.json", cmd.name()), body: serde_json::to_string_pretty(&doc).expect("json") + "\n" });
    files.push(OutputFile { name: "checks.csv".into(), body: checks_csv(&checks) });
    files.push(OutputFile { name: "run.toml".into(), body: cfg.to_toml() });
    Ok(RunOutput { hash: cfg.manifest_hash(), files, checks })
}

type Produced = (Vec<OutputFile>, Vec<Check>, Value);

fn pendulum_check(cfg: &RunConfig) -> Result<Produced, CliError> {
    let pc = section(&cfg.pendulum, "pendulum")?;
    let params = cfg.model.params()?;
    let eps = params.epsilon;
    let model = crate::arnold_model::Model::new(&params, &0.0);
    let unstable = nhim::local_leaf(&model, 0.0, 0.0, LeafKind::Unstable, pc.leaf_order)?;
    let stable = nhim::local_leaf(&model, 0.0, 0.0, LeafKind::Stable, pc.leaf_order)?;
    let lam = unstable.multiplier;
    let n = pc.grow_steps;
    let grown = nhim::grow_leaf(&model, &unstable, n, (0.05 / lam.powi(n as i32), 0.5), pc.spacing, &DomainBox::default())?;
    let mut csv = String::from("theta1,r1,r1_oracle,residual\n");
    let mut worst = 0.0f64;
    let mut rows = 0usize;
    for p in &grown.samples {
        if p.theta1 >= pc.theta_min && p.theta1 <= pc.theta_max {
            let want = separatrix_r1(p.theta1, eps);
            let d = (p.r1 - want).abs();
            worst = worst.max(d);
            rows += 1;
            csv.push_str(&format!("{},{},{},{}\n", num(p.theta1), num(p.r1), num(want), num(d)));
        }
    }
    let (mu_u, mu_s) = saddle_frame(eps).multipliers;
    let err_u = (lam / mu_u - 1.0).abs();
    let err_s = (stable.multiplier / mu_s - 1.0).abs();
    let checks = vec![
        check("separatrix residual", pc.tol - worst),
        check("unstable multiplier", pc.multiplier_tol - err_u),
        check("stable multiplier", pc.multiplier_tol - err_s),
    ];
    let summary = json!({
        "samples": rows,
        "max_residual": worst,
        "unstable_multiplier": lam,
        "stable_multiplier": stable.multiplier,
        "oracle_multipliers": [mu_u, mu_s],
    });
    Ok((vec![OutputFile { name: "pendulum-check.csv".into(), body: csv }], checks, summary))
}

fn lambda_lemma(cfg: &RunConfig) -> Result<Produced, CliError> {
    let ls = section(&cfg.lambda_lemma, "lambda_lemma")?;
    let cs = section(&cfg.chart, "chart")?;
    let params = cfg.model.params()?;
    let chart = build_chart(&params, cs.order, cs.varsigma, cs.tol)?;
    let rep = run_lambda_lemma(chart.as_dyn(), &ls.to_config())?;
    let mut csv = String::from("n,sup_s,xi_prime,d_c1,c0,c0_envelope,image_radius,h_margin,ginv_margin,chi_margin,xi_margin,resolution");
    for m in &ls.push_m {
        csv.push_str(&format!(",push_m{m}"));
    }
    csv.push('\n');
    for r in &rep.rows {
        let vals = [r.sup_s, r.xi_prime, r.d_c1, r.c0, r.c0_envelope, r.image_radius, r.h_margin, r.ginv_margin, r.chi_margin, r.xi_margin, r.resolution];
        csv.push_str(&r.n.to_string());
        for v in vals.iter().chain(&r.push) {
            csv.push(',');
            csv.push_str(&num(*v));
        }
        csv.push('\n');
    }
    let mut checks = rep.checks.clone();
    if let Some(last) = rep.rows.last() {
        for (i, m) in ls.push_m.iter().enumerate() {
            checks.push(check(format!("(m={m}) graph distance below {:e}", ls.push_tol), ls.push_tol - last.push[i]));
        }
    }
    let h = &rep.constants;
    let summary = json!({
        "constants": {
            "lambda": h.lambda, "lambda_bar": h.lambda_bar, "c1": h.c1, "c2": h.c2, "q": h.q, "nu": h.nu,
            "eps_nu": h.eps_nu, "eta": h.eta, "delta_tilde": h.delta_tilde, "delta": h.delta,
            "alpha_tilde": h.alpha_tilde, "beta": h.beta, "kappa": h.kappa, "varsigma": h.varsigma,
        },
        "chart_tol": rep.chart_tol,
        "fit_slope": rep.slope,
        "rate_bound": h.lambda_bar.ln() + 0.05,
        "iterations": rep.rows.len().saturating_sub(1),
        "graph_error": rep.graph_error,
    });
    Ok((vec![OutputFile { name: "lambda-lemma.csv".into(), body: csv }], checks, summary))
}

fn melnikov_cmd(cfg: &RunConfig) -> Result<Produced, CliError> {
    let ms = section(&cfg.melnikov, "melnikov")?;
    let params = cfg.model.params()?;
    let grid: Vec<f64> = (0..ms.phases).map(|i| 2.0 * PI * i as f64 / ms.phases as f64).collect();
    let prof = melnikov::melnikov_profile(ms.omega, &params, &grid, params.mu > 0.0)?;
    let mut checks = vec![];
    let sup = prof.reduced.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let i_max = (0..grid.len()).max_by(|&a, &b| prof.reduced[a].abs().total_cmp(&prof.reduced[b].abs())).unwrap_or(0);
    let phase = grid[i_max];
    let mut summary = json!({"omega": ms.omega, "mu": params.mu, "profile_sup": sup, "zeros": prof.zeros.iter().map(|z| z.0).collect::<Vec<_>>()});
    if params.mu > 0.0 {
        let dev = prof.oracle_values.iter().zip(&prof.reduced).map(|(g, r)| (g / params.mu - r).abs()).fold(0.0, f64::max);
        checks.push(check("gap/mu matches profile", ms.profile_tol - dev / sup));
        let h = melnikov::find_heteroclinic(ms.omega, &params, None)?;
        let worst = h.stable_residual.max(h.unstable_residual);
        checks.push(check("transverse zero slope", h.slope.abs() - melnikov::transversality_floor(params.epsilon)));
        checks.push(check("zero membership residuals", ms.residual_tol - worst));
        summary["profile_deviation"] = json!(dev / sup);
        summary["heteroclinic"] = json!({
            "phase": h.phase, "slope": h.slope, "melnikov_slope": h.melnikov_slope,
            "c": [h.c.theta1, h.c.r1, h.c.theta2, h.c.r2],
            "stable_residual": h.stable_residual, "unstable_residual": h.unstable_residual,
        });
    }
    let gaps = ms
        .richardson_mu
        .iter()
        .map(|&m| melnikov::manifold_gap_oracle(ms.omega, phase, &params.with_mu(m)).map(|g| g.gap))
        .collect::<Result<Vec<_>, _>>()?;
    let mut worst_ratio = 0.0f64;
    let mut ratios = vec![];
    for (w, g) in ms.richardson_mu.windows(2).zip(gaps.windows(2)) {
        let r = (g[0] / g[1]) / (w[0] / w[1]);
        ratios.push(r);
        worst_ratio = worst_ratio.max((r - 1.0).abs());
    }
    checks.push(check("first-order scaling in mu", ms.richardson_tol - worst_ratio));
    let g0 = melnikov::manifold_gap_oracle(ms.omega, phase, &params.with_mu(0.0))?.gap;
    checks.push(check("gap vanishes at mu = 0", ms.zero_mu_tol - g0.abs()));
    summary["richardson"] = json!({"phase": phase, "mu": ms.richardson_mu, "gaps": gaps, "normalized_ratios": ratios});
    summary["zero_mu_gap"] = json!(g0);
    Ok((vec![OutputFile { name: "melnikov.csv".into(), body: melnikov::profile_csv(&prof) }], checks, summary))
}

fn chain_csv(chain: &diffusion::TransitionChain) -> String {
    let mut s = String::from("k,omega,omega_next,a_theta2,a_r2,b_theta2,b_r2,c_theta1,c_r1,c_theta2,c_r2,slope,dwell,stable_residual,unstable_residual\n");
    for (k, n) in chain.nodes.iter().enumerate() {
        let v = [n.torus.omega, chain.omegas[k + 1], n.a[0], n.a[1], n.b_next[0], n.b_next[1], n.c.theta1, n.c.r1, n.c.theta2, n.c.r2, n.slope];
        s.push_str(&k.to_string());
        for x in v {
            s.push(',');
            s.push_str(&num(x));
        }
        s.push_str(&format!(",{},{},{}\n", n.dwell, num(n.stable_residual), num(n.unstable_residual)));
    }
    s
}

fn chain_checks(chain: &diffusion::TransitionChain, tol: f64) -> Vec<Check> {
    let worst = chain.nodes.iter().map(|n| n.stable_residual.max(n.unstable_residual)).fold(0.0, f64::max);
    let reached = chain.omegas.last().copied().unwrap_or(f64::NAN) - chain.targets.last().copied().unwrap_or(f64::NAN);
    vec![check("heteroclinic membership residuals", tol - worst), check("chain reaches the last target", reached + f64::EPSILON)]
}

fn chain_json(chain: &diffusion::TransitionChain) -> Value {
    json!({
        "targets": chain.targets,
        "omegas": chain.omegas,
        "target_indices": chain.target_indices(),
        "reach": chain.reach,
        "links": chain.nodes.len(),
        "dwells": chain.nodes.iter().map(|n| n.dwell).collect::<Vec<_>>(),
        "slopes": chain.nodes.iter().map(|n| n.slope).collect::<Vec<_>>(),
    })
}

fn chain_cmd(cfg: &RunConfig) -> Result<Produced, CliError> {
    let cs = section(&cfg.chain, "chain")?;
    let params = cfg.model.params()?;
    let chain = diffusion::build_chain(&cs.omegas, &params, &cs.to_config())?;
    let checks = chain_checks(&chain, cs.residual_tol);
    Ok((vec![OutputFile { name: "chain.csv".into(), body: chain_csv(&chain) }], checks, chain_json(&chain)))
}

fn diffuse_cmd(cfg: &RunConfig) -> Result<Produced, CliError> {
    let cs = section(&cfg.chain, "chain")?;
    let ds = section(&cfg.diffuse, "diffuse")?;
    let ch = section(&cfg.chart, "chart")?;
    let params = cfg.model.params()?;
    let chain = diffusion::build_chain(&cs.omegas, &params, &cs.to_config())?;
    let chart = LeafChart::build(&params, ch.order, ch.varsigma)?;
    let shadow = diffusion::shadow_orbit(&chain, &params, &chart, &ShadowConfig::default())?;
    let bc = diffusion::chain_balls(&chain, shadow, &params, &chart, &BallConfig { rho: ds.rho, max_iterates: ds.max_iterates, tail: ds.tail })?;
    let ver = diffusion::verify_balls(&bc, &params, ds.samples, ds.composed_samples, cfg.seed);
    let prec = if ds.precision == 0 { bc.precision } else { ds.precision };
    let rep = diffusion::extract_orbit(&bc, &chain, &params, prec)?;
    let span = cs.omegas.last().unwrap() - cs.omegas[0];
    let need = span - 2.0 * ds.rho;
    let worst_visit = rep.visited.iter().map(|v| v.closest).fold(0.0, f64::max);
    let mut checks = vec![
        check(format!("ball containment ({} samples per link)", ds.samples), ver.margins.iter().copied().fold(f64::INFINITY, f64::min)),
        check("composed containment", ver.composed_margin),
        check("orbit visits every target neighbourhood", ds.rho - worst_visit),
        check("r2 range >= span - 2 rho", rep.r2_range() - need),
        check("target visits in order", if rep.monotone { 1.0 } else { -1.0 }),
        check("heteroclinic membership residuals", chain_checks(&chain, cs.residual_tol)[0].margin),
    ];
    let mut audit = Value::Null;
    if ds.audit {
        let hi = diffusion::extract_orbit(&bc, &chain, &params, 2 * prec)?;
        let d = (hi.r2_range() - rep.r2_range()).abs();
        checks.push(check("r2 range stable under doubled precision", ds.audit_tol - d));
        audit = json!({"precision": 2 * prec, "r2_range": hi.r2_range(), "difference": d});
    }
    let mut balls = String::from("k,omega,step,iterates,log2_radius,linear_margin,verify_margin,torus_distance,center_offset\n");
    for (k, b) in bc.balls.iter().enumerate() {
        let q = bc.iterates.get(k).map(|q| q.to_string()).unwrap_or_default();
        let opt = |v: Option<&f64>| v.map(|x| num(*x)).unwrap_or_default();
        balls.push_str(&format!(
            "{k},{},{},{q},{},{},{},{},{}\n",
            num(bc.omegas[k]),
            bc.steps[k],
            num(b.radius.clone().log2().to_f64()),
            opt(bc.linear_margins.get(k)),
            opt(ver.margins.get(k)),
            num(bc.torus_distance[k]),
            num(bc.center_offsets[k]),
        ));
    }
    let visits = |v: &[diffusion::Visit]| Value::Array(v.iter().map(|v| json!({"omega": v.omega, "closest": v.closest, "step": v.step, "first_within": v.first_within})).collect());
    let summary = json!({
        "chain": chain_json(&chain),
        "rho": bc.rho,
        "iterates": bc.iterates,
        "total_iterates": bc.total_iterates(),
        "ball_precision": bc.precision,
        "shadow_precision": bc.shadow.precision,
        "trace_precision": prec,
        "linear_margins": bc.linear_margins,
        "verify_margins": ver.margins,
        "composed_margin": ver.composed_margin,
        "seed": ver.seed,
        "r2_range": rep.r2_range(),
        "r2_min": rep.r2_min,
        "r2_max": rep.r2_max,
        "required_range": need,
        "visits": visits(&rep.visited),
        "chain_visits": visits(&rep.chain_visits),
        "audit": audit,
    });
    let files = vec![OutputFile { name: "orbit.csv".into(), body: diffusion::orbit_csv(&rep) }, OutputFile { name: "balls.csv".into(), body: balls }];
    Ok((files, checks, summary))
}

#[derive(Debug, Parser)]
#[command(name = "nhlab", version, about = "λ-lemma and transition-chain experiments for Arnold's Hamiltonian")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Sectioned key-value config overriding the command's defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Trace precision in bits (diffuse).
    #[arg(long, global = true)]
    pub precision: Option<u32>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

/// Exit status: 0 when every check passes, 2 when one fails, 1 on error.
pub fn run(cli: &Cli) -> i32 {
    let go = || -> Result<RunOutput, CliError> {
        let text = cli.config.as_ref().map(std::fs::read_to_string).transpose()?;
        let cfg = resolve_config(cli.command, text.as_deref(), cli.precision, cli.seed)?;
        let out = execute(&cfg)?;
        out.write(&cli.out)?;
        Ok(out)
    };
    match go() {
        Ok(out) => {
            for c in &out.checks {
                println!("{} {}: margin {:e}", if c.ok() { "PASS" } else { "FAIL" }, c.name, c.margin);
            }
            println!("manifest sha256:{}", out.hash);
            if out.passed() {
                0
            } else {
                2
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
