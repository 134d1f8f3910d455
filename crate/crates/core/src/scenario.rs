//! Static simulation world: map, sites, cells, antennas, radio grid and the
//! propagation/service parameters every emulator reads.
//!
//! Scenario documents are JSON. [`load_scenario`] fills defaults, normalizes
//! azimuths and validates; [`serialize_scenario`] writes a document that loads
//! back to an identical value.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::channel::TapProfile;

pub type CellId = u32;
pub type SiteId = u32;

/// Subcarrier spacing of the RE grid in Hz.
pub const SUBCARRIER_SPACING_HZ: f64 = 15_000.0;
/// Thermal noise density in dBm/Hz.
pub const THERMAL_NOISE_DBM_HZ: f64 = -174.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("malformed scenario document: {0}")]
    Parse(String),
    #[error("invalid field `{field}`: {message}")]
    Validation { field: String, message: String },
}

impl ScenarioError {
    pub fn field(&self) -> Option<&str> {
        match self {
            ScenarioError::Validation { field, .. } => Some(field),
            ScenarioError::Parse(_) => None,
        }
    }
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Validation {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Rect {
    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn clamp(&self, x: f64, y: f64) -> (f64, f64) {
        (
            x.clamp(self.x_min, self.x_max),
            y.clamp(self.y_min, self.y_max),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SitePosition {
    pub x: f64,
    pub y: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteConfig {
    pub site_id: SiteId,
    pub position: SitePosition,
    pub cells: Vec<CellConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellConfig {
    pub cell_id: CellId,
    /// Transmit power per resource element, dBm.
    #[serde(default = "default_tx_power_per_re")]
    pub tx_power_per_re: f64,
    #[serde(default)]
    pub antenna: AntennaConfig,
}

fn default_tx_power_per_re() -> f64 {
    18.0
}

/// The four tunable beam parameters plus the on/off switch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AntennaConfig {
    pub h_beamwidth: f64,
    pub v_beamwidth: f64,
    pub azimuth: f64,
    pub downtilt: f64,
    #[serde(default = "yes")]
    pub active: bool,
}

fn yes() -> bool {
    true
}

impl Default for AntennaConfig {
    fn default() -> Self {
        AntennaConfig {
            h_beamwidth: 65.0,
            v_beamwidth: 10.0,
            azimuth: 0.0,
            downtilt: 6.0,
            active: true,
        }
    }
}

/// Wraps an angle in degrees into `[0, 360)`.
pub fn normalize_azimuth(deg: f64) -> f64 {
    let a = deg.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if a >= 360.0 {
        0.0
    } else {
        a
    }
}

impl AntennaConfig {
    pub fn normalized(mut self) -> Self {
        self.azimuth = normalize_azimuth(self.azimuth);
        self
    }

    pub fn validate(&self, path: &str) -> Result<(), ScenarioError> {
        for (name, v) in [
            ("h_beamwidth", self.h_beamwidth),
            ("v_beamwidth", self.v_beamwidth),
        ] {
            if !(v > 0.0 && v <= 180.0) {
                return Err(invalid(
                    format!("{path}.{name}"),
                    format!("{v} not in (0, 180]"),
                ));
            }
        }
        if !(0.0..360.0).contains(&self.azimuth) {
            return Err(invalid(
                format!("{path}.azimuth"),
                format!("{} not in [0, 360)", self.azimuth),
            ));
        }
        if !(-90.0..=90.0).contains(&self.downtilt) {
            return Err(invalid(
                format!("{path}.downtilt"),
                format!("{} not in [-90, 90]", self.downtilt),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceType {
    FullBuffer,
    FileDownload,
    Streaming,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceProfile {
    pub service_type: ServiceType,
    /// Session initiations per second per user.
    pub arrival_rate: f64,
    /// Bytes for file downloads, bits/s for streaming, ignored for full buffer.
    #[serde(default)]
    pub demand: f64,
    /// Streaming session length in seconds.
    #[serde(default = "default_session_seconds")]
    pub session_seconds: f64,
}

fn default_session_seconds() -> f64 {
    60.0
}

impl ServiceProfile {
    /// Bits a freshly initiated session asks for; `None` means unbounded.
    pub fn initial_demand_bits(&self) -> Option<f64> {
        match self.service_type {
            ServiceType::FullBuffer => None,
            ServiceType::FileDownload => Some(self.demand * 8.0),
            ServiceType::Streaming => Some(self.demand * self.session_seconds),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationParams {
    /// Path loss at 1 m, dB. Defaults to `32.4 + 20 log10(carrier_freq)`.
    pub pl_ref: f64,
    #[serde(default = "default_pl_exponent")]
    pub pl_exponent: f64,
    #[serde(default = "default_shadow_sigma")]
    pub shadow_sigma: f64,
    #[serde(default = "default_shadow_corr_dist")]
    pub shadow_corr_dist: f64,
    #[serde(default = "default_max_antenna_gain")]
    pub max_antenna_gain: f64,
    #[serde(default = "default_front_back_ratio")]
    pub front_back_ratio: f64,
}

fn default_pl_exponent() -> f64 {
    3.7
}
fn default_shadow_sigma() -> f64 {
    8.0
}
fn default_shadow_corr_dist() -> f64 {
    50.0
}
fn default_max_antenna_gain() -> f64 {
    8.0
}
fn default_front_back_ratio() -> f64 {
    30.0
}

/// Reference loss at 1 m for a carrier in GHz.
pub fn reference_loss_db(carrier_freq_ghz: f64) -> f64 {
    32.4 + 20.0 * carrier_freq_ghz.log10()
}

impl PropagationParams {
    pub fn for_carrier(carrier_freq_ghz: f64) -> Self {
        PropagationParams {
            pl_ref: reference_loss_db(carrier_freq_ghz),
            pl_exponent: default_pl_exponent(),
            shadow_sigma: default_shadow_sigma(),
            shadow_corr_dist: default_shadow_corr_dist(),
            max_antenna_gain: default_max_antenna_gain(),
            front_back_ratio: default_front_back_ratio(),
        }
    }

    fn validate(&self) -> Result<(), ScenarioError> {
        if !self.pl_ref.is_finite() {
            return Err(invalid("propagation.pl_ref", "must be finite"));
        }
        if !(self.pl_exponent > 0.0) {
            return Err(invalid("propagation.pl_exponent", "must be > 0"));
        }
        if !(self.shadow_sigma >= 0.0) {
            return Err(invalid("propagation.shadow_sigma", "must be >= 0"));
        }
        if !(self.shadow_corr_dist > 0.0) {
            return Err(invalid("propagation.shadow_corr_dist", "must be > 0"));
        }
        if !self.max_antenna_gain.is_finite() {
            return Err(invalid("propagation.max_antenna_gain", "must be finite"));
        }
        if !(self.front_back_ratio >= 0.0) {
            return Err(invalid("propagation.front_back_ratio", "must be >= 0"));
        }
        Ok(())
    }
}

/// Permitted values for each beam parameter. Lists are non-empty and
/// strictly increasing; construction enforces it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamGridDoc", into = "ParamGridDoc")]
pub struct ParamGrid {
    h_beamwidth: Vec<f64>,
    v_beamwidth: Vec<f64>,
    azimuth: Vec<f64>,
    downtilt: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ParamGridDoc {
    h_beamwidth: Vec<f64>,
    v_beamwidth: Vec<f64>,
    azimuth: Vec<f64>,
    downtilt: Vec<f64>,
}

impl TryFrom<ParamGridDoc> for ParamGrid {
    type Error = ScenarioError;

    fn try_from(d: ParamGridDoc) -> Result<Self, Self::Error> {
        ParamGrid::new(d.h_beamwidth, d.v_beamwidth, d.azimuth, d.downtilt)
    }
}

impl From<ParamGrid> for ParamGridDoc {
    fn from(g: ParamGrid) -> Self {
        ParamGridDoc {
            h_beamwidth: g.h_beamwidth,
            v_beamwidth: g.v_beamwidth,
            azimuth: g.azimuth,
            downtilt: g.downtilt,
        }
    }
}

const GRID_TOLERANCE: f64 = 1e-9;

impl ParamGrid {
    pub fn new(
        h_beamwidth: Vec<f64>,
        v_beamwidth: Vec<f64>,
        azimuth: Vec<f64>,
        downtilt: Vec<f64>,
    ) -> Result<Self, ScenarioError> {
        let lists = [
            ("h_beamwidth", &h_beamwidth),
            ("v_beamwidth", &v_beamwidth),
            ("azimuth", &azimuth),
            ("downtilt", &downtilt),
        ];
        for (name, list) in lists {
            let field = format!("param_grid.{name}");
            if list.is_empty() {
                return Err(invalid(field, "empty value list"));
            }
            if list.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(invalid(field, "values must be strictly increasing"));
            }
            let ok = match name {
                "h_beamwidth" | "v_beamwidth" => list.iter().all(|&v| v > 0.0 && v <= 180.0),
                "azimuth" => list.iter().all(|v| (0.0..360.0).contains(v)),
                _ => list.iter().all(|v| (-90.0..=90.0).contains(v)),
            };
            if !ok {
                return Err(invalid(field, "value outside the antenna parameter range"));
            }
        }
        Ok(ParamGrid {
            h_beamwidth,
            v_beamwidth,
            azimuth,
            downtilt,
        })
    }

    pub fn h_beamwidth(&self) -> &[f64] {
        &self.h_beamwidth
    }
    pub fn v_beamwidth(&self) -> &[f64] {
        &self.v_beamwidth
    }
    pub fn azimuth(&self) -> &[f64] {
        &self.azimuth
    }
    pub fn downtilt(&self) -> &[f64] {
        &self.downtilt
    }
}

impl Default for ParamGrid {
    fn default() -> Self {
        ParamGrid::new(
            vec![30.0, 45.0, 65.0, 90.0, 120.0],
            vec![6.0, 10.0, 15.0, 25.0],
            (0..72).map(|i| i as f64 * 5.0).collect(),
            (-2..=15).map(|i| i as f64).collect(),
        )
        .expect("default grid is valid")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffGridParam {
    pub parameter: String,
    pub value: f64,
    pub nearest: f64,
}

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
#[error("antenna configuration off grid: {}", describe_off_grid(.offending))]
pub struct OffGridError {
    pub offending: Vec<OffGridParam>,
}

fn describe_off_grid(params: &[OffGridParam]) -> String {
    params
        .iter()
        .map(|p| format!("{}={} (nearest {})", p.parameter, p.value, p.nearest))
        .collect::<Vec<_>>()
        .join(", ")
}

fn nearest(list: &[f64], v: f64) -> f64 {
    list.iter()
        .copied()
        .min_by(|a, b| (a - v).abs().total_cmp(&(b - v).abs()))
        .expect("grid lists are non-empty")
}

/// Accepts `cfg` unchanged iff every beam parameter is a grid member.
pub fn validate_antenna(
    cfg: AntennaConfig,
    grid: &ParamGrid,
) -> Result<AntennaConfig, OffGridError> {
    let checks = [
        ("h_beamwidth", cfg.h_beamwidth, grid.h_beamwidth()),
        ("v_beamwidth", cfg.v_beamwidth, grid.v_beamwidth()),
        ("azimuth", cfg.azimuth, grid.azimuth()),
        ("downtilt", cfg.downtilt, grid.downtilt()),
    ];
    let offending: Vec<OffGridParam> = checks
        .into_iter()
        .filter_map(|(name, v, list)| {
            let near = nearest(list, v);
            ((near - v).abs() > GRID_TOLERANCE).then(|| OffGridParam {
                parameter: name.to_string(),
                value: v,
                nearest: near,
            })
        })
        .collect();
    if offending.is_empty() {
        Ok(cfg)
    } else {
        Err(OffGridError { offending })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageThresholds {
    pub rsrp_dbm: f64,
    pub sinr_db: f64,
}

impl Default for CoverageThresholds {
    fn default() -> Self {
        CoverageThresholds {
            rsrp_dbm: -110.0,
            sinr_db: -6.0,
        }
    }
}

/// Logistic BLER curve parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlerCurve {
    pub midpoint_db: f64,
    pub width_db: f64,
}

impl Default for BlerCurve {
    fn default() -> Self {
        BlerCurve {
            midpoint_db: 0.0,
            width_db: 1.0,
        }
    }
}

/// Caps that keep a single request from exhausting the host.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceLimits {
    pub max_users: usize,
    /// Upper bound on users x cells x ticks for one run.
    pub max_link_ticks: u64,
    /// Upper bound on an exported RE-grid dataset, bytes.
    pub max_payload_bytes: u64,
}

impl Default for ResourceLimits {
    fn default() -> Self {
        ResourceLimits {
            max_users: 100_000,
            max_link_ticks: 50_000_000,
            max_payload_bytes: 512 * 1024 * 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub map_bounds: Rect,
    pub sites: Vec<SiteConfig>,
    /// Carrier frequency, GHz.
    pub carrier_freq: f64,
    /// Channel bandwidth, MHz.
    pub bandwidth: f64,
    #[serde(default = "default_num_rbs")]
    pub num_rbs: usize,
    #[serde(default = "default_subcarriers_per_rb")]
    pub subcarriers_per_rb: usize,
    /// Receiver noise figure, dB.
    #[serde(default = "default_noise_figure")]
    pub noise_figure: f64,
    pub propagation: PropagationParams,
    #[serde(default = "default_service_profiles")]
    pub service_profiles: Vec<ServiceProfile>,
    /// Simulation tick, seconds.
    #[serde(default = "default_tick")]
    pub tick: f64,
    /// KPI reporting interval, seconds.
    #[serde(default = "default_report_interval")]
    pub report_interval: f64,
    #[serde(default = "default_ue_height")]
    pub ue_height: f64,
    #[serde(default = "default_tx_ports")]
    pub tx_ports: usize,
    #[serde(default = "default_rx_ports")]
    pub rx_ports: usize,
    #[serde(default)]
    pub tap_profile: TapProfile,
    #[serde(default)]
    pub coverage: CoverageThresholds,
    #[serde(default)]
    pub bler: BlerCurve,
    #[serde(default)]
    pub param_grid: ParamGrid,
    #[serde(default)]
    pub limits: ResourceLimits,
}

fn default_num_rbs() -> usize {
    52
}
fn default_subcarriers_per_rb() -> usize {
    12
}
fn default_noise_figure() -> f64 {
    7.0
}
fn default_service_profiles() -> Vec<ServiceProfile> {
    vec![ServiceProfile {
        service_type: ServiceType::FullBuffer,
        arrival_rate: 1.0,
        demand: 0.0,
        session_seconds: default_session_seconds(),
    }]
}
fn default_tick() -> f64 {
    1.0
}
fn default_report_interval() -> f64 {
    300.0
}
fn default_ue_height() -> f64 {
    1.5
}
fn default_tx_ports() -> usize {
    4
}
fn default_rx_ports() -> usize {
    2
}

fn is_integer_multiple(value: f64, step: f64) -> bool {
    let ratio = value / step;
    ratio >= 1.0 - 1e-9 && (ratio - ratio.round()).abs() <= 1e-9 * ratio.max(1.0)
}

impl Scenario {
    pub fn num_re(&self) -> usize {
        self.num_rbs * self.subcarriers_per_rb
    }

    /// Thermal noise per RE including the noise figure, dBm.
    pub fn noise_per_re_dbm(&self) -> f64 {
        THERMAL_NOISE_DBM_HZ + 10.0 * SUBCARRIER_SPACING_HZ.log10() + self.noise_figure
    }

    pub fn rb_bandwidth_hz(&self) -> f64 {
        self.subcarriers_per_rb as f64 * SUBCARRIER_SPACING_HZ
    }

    pub fn cells(&self) -> impl Iterator<Item = (&SiteConfig, &CellConfig)> {
        self.sites
            .iter()
            .flat_map(|s| s.cells.iter().map(move |c| (s, c)))
    }

    /// Cell ids in ascending order.
    pub fn cell_ids(&self) -> Vec<CellId> {
        let mut ids: Vec<CellId> = self.cells().map(|(_, c)| c.cell_id).collect();
        ids.sort_unstable();
        ids
    }

    pub fn cell(&self, id: CellId) -> Option<(&SiteConfig, &CellConfig)> {
        self.cells().find(|(_, c)| c.cell_id == id)
    }

    pub fn cell_mut(&mut self, id: CellId) -> Option<&mut CellConfig> {
        self.sites
            .iter_mut()
            .flat_map(|s| s.cells.iter_mut())
            .find(|c| c.cell_id == id)
    }

    pub fn num_cells(&self) -> usize {
        self.sites.iter().map(|s| s.cells.len()).sum()
    }

    /// Checks every invariant. Does not normalize.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let b = &self.map_bounds;
        if !(b.width() > 0.0 && b.height() > 0.0) {
            return Err(invalid("map_bounds", "must have positive area"));
        }
        if !(self.carrier_freq > 0.0) {
            return Err(invalid("carrier_freq", "must be > 0"));
        }
        if !(self.bandwidth > 0.0) {
            return Err(invalid("bandwidth", "must be > 0"));
        }
        if self.num_rbs < 1 {
            return Err(invalid("num_rbs", "must be >= 1"));
        }
        if self.subcarriers_per_rb < 1 {
            return Err(invalid("subcarriers_per_rb", "must be >= 1"));
        }
        let occupied_mhz = self.num_rbs as f64 * self.rb_bandwidth_hz() / 1e6;
        if occupied_mhz > self.bandwidth + 1e-9 {
            return Err(invalid(
                "num_rbs",
                format!(
                    "{occupied_mhz} MHz occupied exceeds bandwidth {} MHz",
                    self.bandwidth
                ),
            ));
        }
        if !self.noise_figure.is_finite() {
            return Err(invalid("noise_figure", "must be finite"));
        }
        if !(self.tick > 0.0) {
            return Err(invalid("tick", "must be > 0"));
        }
        if !is_integer_multiple(self.report_interval, self.tick) {
            return Err(invalid(
                "report_interval",
                "must be an integer multiple of tick",
            ));
        }
        if !(self.ue_height > 0.0) {
            return Err(invalid("ue_height", "must be > 0"));
        }
        if self.tx_ports < 1 {
            return Err(invalid("tx_ports", "must be >= 1"));
        }
        if self.rx_ports < 1 {
            return Err(invalid("rx_ports", "must be >= 1"));
        }
        self.propagation.validate()?;
        self.tap_profile
            .validate()
            .map_err(|m| invalid("tap_profile", m))?;
        for (i, p) in self.service_profiles.iter().enumerate() {
            if !(p.arrival_rate >= 0.0 && p.arrival_rate.is_finite()) {
                return Err(invalid(
                    format!("service_profiles[{i}].arrival_rate"),
                    "must be >= 0",
                ));
            }
            if p.service_type != ServiceType::FullBuffer && !(p.demand > 0.0) {
                return Err(invalid(
                    format!("service_profiles[{i}].demand"),
                    "must be > 0",
                ));
            }
            if p.service_type == ServiceType::Streaming && !(p.session_seconds > 0.0) {
                return Err(invalid(
                    format!("service_profiles[{i}].session_seconds"),
                    "must be > 0",
                ));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for (si, site) in self.sites.iter().enumerate() {
            let p = &site.position;
            if !b.contains(p.x, p.y) {
                return Err(invalid(
                    format!("sites[{si}].position"),
                    "outside map_bounds",
                ));
            }
            if !(p.height > 0.0) {
                return Err(invalid(
                    format!("sites[{si}].position.height"),
                    "must be > 0",
                ));
            }
            for (ci, cell) in site.cells.iter().enumerate() {
                let path = format!("sites[{si}].cells[{ci}]");
                if !seen.insert(cell.cell_id) {
                    return Err(invalid(format!("{path}.cell_id"), "duplicate cell_id"));
                }
                if !cell.tx_power_per_re.is_finite() {
                    return Err(invalid(format!("{path}.tx_power_per_re"), "must be finite"));
                }
                cell.antenna.validate(&format!("{path}.antenna"))?;
            }
        }
        Ok(())
    }

    fn normalize(&mut self) {
        for cell in self.sites.iter_mut().flat_map(|s| s.cells.iter_mut()) {
            cell.antenna = cell.antenna.normalized();
        }
        self.tap_profile.normalize();
    }
}

/// Parses, fills defaults, normalizes and validates a scenario document.
pub fn load_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let mut doc: Value =
        serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    let obj = doc
        .as_object_mut()
        .ok_or_else(|| ScenarioError::Parse("top level must be an object".into()))?;
    let carrier = obj.get("carrier_freq").and_then(Value::as_f64);
    let prop = obj
        .entry("propagation")
        .or_insert_with(|| Value::Object(Default::default()));
    if let Some(p) = prop.as_object_mut() {
        if !p.contains_key("pl_ref") {
            match carrier {
                Some(f) if f > 0.0 => {
                    p.insert("pl_ref".into(), reference_loss_db(f).into());
                }
                _ => return Err(invalid("carrier_freq", "must be > 0")),
            }
        }
    }
    let mut scenario: Scenario =
        serde_json::from_value(doc).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    scenario.normalize();
    scenario.validate()?;
    Ok(scenario)
}

pub fn serialize_scenario(scenario: &Scenario) -> String {
    serde_json::to_string_pretty(scenario).expect("scenario serialization is infallible")
}

/// Hexagonal demo layout: sites on a hex spiral around the origin with
/// `sectors` cells each. Cell ids run `0..sites*sectors`.
pub fn demo_scenario(sites: usize, sectors: usize, isd: f64) -> Scenario {
    let positions = hex_spiral(sites, isd);
    let margin = isd.max(1000.0);
    let (mut x0, mut y0, mut x1, mut y1) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for &(x, y) in &positions {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    let carrier = 3.5;
    let site_configs = positions
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| SiteConfig {
            site_id: i as SiteId,
            position: SitePosition { x, y, height: 25.0 },
            cells: (0..sectors)
                .map(|s| CellConfig {
                    cell_id: (i * sectors + s) as CellId,
                    tx_power_per_re: default_tx_power_per_re(),
                    antenna: AntennaConfig {
                        azimuth: if sectors == 1 {
                            0.0
                        } else {
                            normalize_azimuth(30.0 + 360.0 * s as f64 / sectors as f64)
                        },
                        ..AntennaConfig::default()
                    },
                })
                .collect(),
        })
        .collect();
    let mut scenario = Scenario {
        map_bounds: Rect {
            x_min: x0 - margin,
            y_min: y0 - margin,
            x_max: x1 + margin,
            y_max: y1 + margin,
        },
        sites: site_configs,
        carrier_freq: carrier,
        bandwidth: 10.0,
        num_rbs: default_num_rbs(),
        subcarriers_per_rb: default_subcarriers_per_rb(),
        noise_figure: default_noise_figure(),
        propagation: PropagationParams::for_carrier(carrier),
        service_profiles: default_service_profiles(),
        tick: default_tick(),
        report_interval: default_report_interval(),
        ue_height: default_ue_height(),
        tx_ports: default_tx_ports(),
        rx_ports: default_rx_ports(),
        tap_profile: TapProfile::default(),
        coverage: CoverageThresholds::default(),
        bler: BlerCurve::default(),
        param_grid: ParamGrid::default(),
        limits: ResourceLimits::default(),
    };
    scenario.normalize();
    scenario
}

fn hex_spiral(n: usize, isd: f64) -> Vec<(f64, f64)> {
    // axial directions around a ring
    const DIRS: [(i64, i64); 6] = [(1, 0), (0, 1), (-1, 1), (-1, 0), (0, -1), (1, -1)];
    let mut out = vec![(0i64, 0i64)];
    let mut ring = 1;
    while out.len() < n {
        let (mut q, mut r) = (DIRS[4].0 * ring, DIRS[4].1 * ring);
        for dir in DIRS {
            for _ in 0..ring {
                out.push((q, r));
                q += dir.0;
                r += dir.1;
            }
        }
        ring += 1;
    }
    out.truncate(n);
    out.into_iter()
        .map(|(q, r)| {
            let x = isd * (q as f64 + r as f64 / 2.0);
            let y = isd * (r as f64 * 3f64.sqrt() / 2.0);
            (x, y)
        })
        .collect()
}
