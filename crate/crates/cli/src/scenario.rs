//! Scenario configs: TOML sections per module, parse-time hypothesis gates,
//! and `--set key=value` overrides applied before deserialization.

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

use zvonkin::families;
use zvonkin::holder::{DriftSpec, HolderExponents};
use zvonkin::kernel::DiffusionCoefficient;

fn d_terms() -> usize {
    8
}
fn d_amplitude() -> f64 {
    1.0
}
fn d_seed() -> u64 {
    1
}
fn d_wavenumber() -> f64 {
    1.0
}
fn d_growth_coeff() -> f64 {
    0.3
}
fn d_omega() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct DriftSection {
    /// one of: zero, sinusoid, lacunary, growth, rot2d, perp_lacunary
    pub family: String,
    /// spatial dimension; rot2d / perp_lacunary force 2, lacunary / growth force 1
    #[serde(default = "one")]
    pub dim: usize,
    #[serde(default = "d_terms")]
    pub terms: usize,
    #[serde(default = "d_amplitude")]
    pub amplitude: f64,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_wavenumber")]
    pub wavenumber: f64,
    #[serde(default = "d_growth_coeff")]
    pub growth_coeff: f64,
    #[serde(default = "d_omega")]
    pub omega: f64,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct ExponentSection {
    pub q: f64,
    pub alpha: f64,
    #[serde(default)]
    pub theta: Option<f64>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct SigmaSection {
    /// "identity" or "scalar"
    #[serde(default = "identity_kind")]
    pub kind: String,
    #[serde(default = "d_amplitude")]
    pub scale: f64,
}

fn identity_kind() -> String {
    "identity".into()
}

impl Default for SigmaSection {
    fn default() -> Self {
        SigmaSection { kind: identity_kind(), scale: 1.0 }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct GridSection {
    /// half-extent L of the solver box [-L, L]^d
    pub half_extent: f64,
    /// node spacing h
    pub spacing: f64,
    /// terminal time T
    pub t_end: f64,
    /// number of time steps M
    pub time_steps: usize,
    /// reflecting cap for simulated paths (defaults to the box half-extent)
    #[serde(default)]
    pub box_half_extent: Option<f64>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct SolverSection {
    #[serde(default = "d_lambda0")]
    pub lambda0: f64,
    #[serde(default = "d_lambda_max")]
    pub lambda_max: f64,
    /// gradient-certificate target for the tuner, in (0, 1)
    #[serde(default = "d_target")]
    pub target: f64,
    #[serde(default = "d_tol")]
    pub tol: f64,
    #[serde(default = "d_max_iters")]
    pub max_iters: usize,
}

fn d_lambda0() -> f64 {
    4.0
}
fn d_lambda_max() -> f64 {
    65536.0
}
fn d_target() -> f64 {
    0.5
}
fn d_tol() -> f64 {
    1e-11
}
fn d_max_iters() -> usize {
    80
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection {
            lambda0: d_lambda0(),
            lambda_max: d_lambda_max(),
            target: d_target(),
            tol: d_tol(),
            max_iters: d_max_iters(),
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct McSection {
    pub seed: u64,
    /// base Brownian resolution of the noise stream
    pub base_steps: usize,
    /// Monte Carlo repetitions per start point
    pub n_paths: usize,
    /// Euler steps across the full window (must divide base_steps)
    pub n_steps: usize,
    /// start points; padded with zeros to the drift dimension
    #[serde(default = "d_starts")]
    pub starts: Vec<Vec<f64>>,
}

fn d_starts() -> Vec<Vec<f64>> {
    vec![vec![0.0]]
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
pub struct FeatureSection {
    #[serde(default)]
    pub transport: bool,
    #[serde(default)]
    pub stability: bool,
    #[serde(default)]
    pub holder_fits: bool,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct TransportSection {
    /// half-extent of the transport output grid
    #[serde(default = "d_thalf")]
    pub half_extent: f64,
    #[serde(default = "d_tspacing")]
    pub spacing: f64,
    /// noise coarsening factor for the inverse characteristics
    #[serde(default = "two")]
    pub coarsen: usize,
    #[serde(default = "four")]
    pub n_paths: usize,
    /// bump radius of the initial datum
    #[serde(default = "d_radius")]
    pub radius: f64,
    /// conservation exponent r (0 means +infinity)
    #[serde(default = "two_f")]
    pub r: f64,
}

fn d_thalf() -> f64 {
    2.0
}
fn d_tspacing() -> f64 {
    1.0 / 16.0
}
fn two() -> usize {
    2
}
fn four() -> usize {
    4
}
fn d_radius() -> f64 {
    1.25
}
fn two_f() -> f64 {
    2.0
}

impl Default for TransportSection {
    fn default() -> Self {
        TransportSection {
            half_extent: d_thalf(),
            spacing: d_tspacing(),
            coarsen: two(),
            n_paths: four(),
            radius: d_radius(),
            r: two_f(),
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct StabilitySection {
    #[serde(default = "d_ns")]
    pub ns: Vec<f64>,
    #[serde(default = "d_nref")]
    pub n_ref: f64,
}

fn d_ns() -> Vec<f64> {
    vec![4.0, 8.0, 16.0, 32.0]
}
fn d_nref() -> f64 {
    64.0
}

impl Default for StabilitySection {
    fn default() -> Self {
        StabilitySection { ns: d_ns(), n_ref: d_nref() }
    }
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
pub struct OutputSection {
    #[serde(default)]
    pub dir: Option<String>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct Scenario {
    pub name: String,
    pub drift: DriftSection,
    pub exponents: ExponentSection,
    #[serde(default)]
    pub sigma: SigmaSection,
    pub grid: GridSection,
    #[serde(default)]
    pub solver: SolverSection,
    pub mc: McSection,
    #[serde(default)]
    pub features: FeatureSection,
    #[serde(default)]
    pub transport: TransportSection,
    #[serde(default)]
    pub stability: StabilitySection,
    #[serde(default)]
    pub output: OutputSection,
}

impl Scenario {
    /// Loads a config file, applies `--set key=value` overrides (dotted
    /// paths into the TOML tree), then validates every hypothesis gate.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Scenario> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut table: toml::Table = text.parse().context("parsing config TOML")?;
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        let scenario: Scenario =
            toml::Value::Table(table).try_into().context("deserializing scenario")?;
        scenario.validate()?;
        Ok(scenario)
    }

    /// Exponent gates; mirrors the hypotheses the pipeline relies on.
    pub fn validate(&self) -> Result<()> {
        let expo = self.exponents()?;
        if self.features.transport || self.features.stability {
            expo.require_transport_window()
                .map_err(|e| anyhow!("{e}"))?;
        }
        if !(self.solver.target > 0.0 && self.solver.target < 1.0) {
            bail!("solver.target must lie in (0, 1), got {}", self.solver.target);
        }
        if self.mc.n_steps == 0 || self.mc.base_steps % self.mc.n_steps != 0 {
            bail!(
                "mc.n_steps must divide mc.base_steps, got {} / {}",
                self.mc.n_steps,
                self.mc.base_steps
            );
        }
        if self.sigma.kind != "identity" && self.sigma.kind != "scalar" {
            bail!("sigma.kind must be 'identity' or 'scalar', got {}", self.sigma.kind);
        }
        if self.features.transport && (self.sigma.kind != "identity" && self.sigma.scale != 1.0) {
            bail!("the transport feature requires unit diffusion");
        }
        self.drift()?; // family name + dimension consistency
        Ok(())
    }

    pub fn exponents(&self) -> Result<HolderExponents> {
        HolderExponents::new(self.exponents.q, self.exponents.alpha, self.exponents.theta)
            .map_err(|e| anyhow!("{e}"))
    }

    pub fn drift(&self) -> Result<DriftSpec> {
        let expo = self.exponents()?;
        let d = &self.drift;
        let spec = match d.family.as_str() {
            "zero" => families::zero(d.dim, expo),
            "sinusoid" => families::sinusoid(d.dim, expo, d.amplitude, d.wavenumber),
            "lacunary" => families::lacunary(expo, d.terms, d.amplitude, d.seed),
            "growth" => families::growth(expo, d.terms, d.amplitude, d.growth_coeff, d.seed),
            "rot2d" => families::rot2d(expo, d.omega),
            "perp_lacunary" => families::perp_lacunary(expo, d.terms, d.amplitude, d.seed),
            other => bail!(
                "unknown drift family '{other}' (expected zero, sinusoid, lacunary, growth, rot2d, perp_lacunary)"
            ),
        };
        if spec.dim != d.dim && d.dim != 1 {
            bail!("drift family {} is {}-dimensional, config says {}", d.family, spec.dim, d.dim);
        }
        Ok(spec)
    }

    pub fn sigma(&self, dim: usize) -> DiffusionCoefficient {
        match self.sigma.kind.as_str() {
            "scalar" => DiffusionCoefficient::scalar(dim, self.sigma.scale),
            _ => DiffusionCoefficient::identity(dim),
        }
    }

    pub fn box_half_extent(&self) -> f64 {
        self.grid.box_half_extent.unwrap_or(self.grid.half_extent)
    }

    /// Start points padded to MAX_DIM, one per configured start.
    pub fn starts(&self, dim: usize) -> Vec<zvonkin::grid::Pt> {
        self.mc
            .starts
            .iter()
            .map(|s| {
                let mut p = zvonkin::grid::zero_pt();
                for (a, v) in s.iter().take(dim).enumerate() {
                    p[a] = *v;
                }
                p
            })
            .collect()
    }

    /// Canonical TOML of the effective (post-override) scenario; hashed into
    /// the manifest and written next to the results for reproducibility.
    pub fn effective_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("serializing effective scenario")
    }
}

/// Applies one `section.key=value` override into the parsed TOML tree.
/// Values are parsed as TOML scalars, falling back to a bare string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("override '{spec}' is not of the form key=value"))?;
    let value = parse_scalar(raw.trim());
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.is_empty() || keys.iter().any(|k| k.is_empty()) {
        bail!("override '{spec}' has an empty key path");
    }
    let mut node = table;
    for k in &keys[..keys.len() - 1] {
        node = node
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| anyhow!("override '{spec}': '{k}' is not a table"))?;
    }
    node.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

fn parse_scalar(raw: &str) -> toml::Value {
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    // bracketed values (arrays) go through the TOML parser
    if raw.starts_with('[') {
        if let Ok(t) = format!("v = {raw}").parse::<toml::Table>() {
            if let Some(v) = t.get("v") {
                return v.clone();
            }
        }
    }
    toml::Value::String(raw.to_string())
}
