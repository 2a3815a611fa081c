//! Layered pipeline configuration: built-in defaults, then JSON files in
//! order, then `key.path=value` overrides. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use scanfeat_core::bench::Thresholds;
use scanfeat_core::features::ExtractConfig;
use scanfeat_core::handcrafted::HandcraftedConfig;
use scanfeat_core::mapping::{LmConfig, SlamConfig};
use scanfeat_core::pairgen::{PairSelectionConfig, SyntheticRanges};
use scanfeat_core::register::{IcpConfig, RansacConfig};
use scanfeat_core::simlidar::ScannerSpec;
use scanfeat_net::{NetworkConfig, TrainConfig};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub simulate: SimulateConfig,
    pub pairgen: PairgenConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub features: FeatureConfig,
    pub registration: RegistrationConfig,
    pub slam: SlamSection,
    pub bench: Thresholds,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            simulate: SimulateConfig::default(),
            pairgen: PairgenConfig::default(),
            network: NetworkConfig::toy(),
            train: TrainConfig::default(),
            features: FeatureConfig::default(),
            registration: RegistrationConfig::default(),
            slam: SlamSection::default(),
            bench: Thresholds::default(),
        }
    }
}

/// A named preset (`os1-64`, `os0-128`) or a full scanner description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScannerChoice {
    Preset(String),
    Custom(ScannerSpec),
}

impl ScannerChoice {
    pub fn resolve(&self) -> Result<ScannerSpec, CliError> {
        match self {
            Self::Preset(name) => {
                ScannerSpec::preset(name).ok_or_else(|| CliError::Config(format!("unknown scanner preset {name:?}")))
            }
            Self::Custom(spec) => Ok(spec.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub scanner: ScannerChoice,
    /// `courtyard` or a path to a scene JSON file.
    pub scene: String,
    pub trajectory: TrajectoryConfig,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            scanner: ScannerChoice::Preset("os1-64".into()),
            scene: "courtyard".into(),
            trajectory: TrajectoryConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    /// JSON list of `[x, y, z, yaw_deg]` waypoints; the square loop when absent.
    pub waypoints: Option<String>,
    pub side: f64,
    pub height: f64,
    pub seconds_per_side: f64,
    /// Interpolated poses per waypoint segment.
    pub steps: usize,
    /// Drop the last pose when it repeats the first.
    pub drop_closing_pose: bool,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            waypoints: None,
            side: 8.0,
            height: 0.0,
            seconds_per_side: 10.0,
            steps: 10,
            drop_closing_pose: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    Synthetic,
    Real,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairgenConfig {
    pub mode: PairMode,
    pub selection: PairSelectionConfig,
    pub anchor_stride: usize,
    pub synthetic: SyntheticRanges,
    pub synthetic_per_scan: usize,
}

impl Default for PairgenConfig {
    fn default() -> Self {
        Self {
            mode: PairMode::Both,
            selection: PairSelectionConfig::default(),
            anchor_stride: 10,
            synthetic: SyntheticRanges::default(),
            synthetic_per_scan: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub extract: ExtractConfig,
    /// Used when no network weights are given.
    pub handcrafted: HandcraftedConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub ransac: RansacConfig,
    pub icp: Option<IcpConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlamSection {
    /// Also set by `slam --loop-closure`.
    pub loop_closure: bool,
    pub vocabulary_size: usize,
    pub tau_h: f64,
    pub min_index_gap: usize,
    pub min_loop_inliers: usize,
    pub lm: LmConfig,
}

impl Default for SlamSection {
    fn default() -> Self {
        let s = SlamConfig::default();
        Self {
            loop_closure: false,
            vocabulary_size: s.vocabulary_size,
            tau_h: s.tau_h,
            min_index_gap: s.min_index_gap,
            min_loop_inliers: s.min_loop_inliers,
            lm: s.lm,
        }
    }
}

impl PipelineConfig {
    /// Defaults, then each file, then each `key.path=value` override.
    pub fn load(files: &[impl AsRef<Path>], overrides: &[String]) -> Result<Self, CliError> {
        let mut value = serde_json::to_value(Self::default()).expect("defaults serialize");
        for f in files {
            let path = f.as_ref();
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
            let layer: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            if !layer.is_object() {
                return Err(CliError::Config(format!("{}: top level must be an object", path.display())));
            }
            merge(&mut value, layer);
        }
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override {o:?} is not key=value")))?;
            // bare words are taken as strings
            let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut value, key, v)?;
        }
        let cfg: Self = serde_json::from_value(value.clone()).map_err(|e| CliError::Config(e.to_string()))?;
        // keys the typed config dropped are unknown
        let resolved = serde_json::to_value(&cfg).expect("config serializes");
        if let Some(k) = unknown_key(&value, &resolved, "") {
            return Err(CliError::Config(format!("unknown key {k:?}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.simulate.scanner.resolve()?.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.network.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.pairgen.selection.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let t = &self.simulate.trajectory;
        if t.steps == 0 || !(t.side > 0.0) {
            return bad("trajectory needs steps > 0 and side > 0".into());
        }
        let e = &self.features.extract;
        if !(0.0..1.0).contains(&e.score_threshold) {
            return bad(format!("score_threshold {} outside [0, 1)", e.score_threshold));
        }
        let th = &self.bench;
        if !(th.tau1 > 0.0 && th.tau3 > 0.0 && (0.0..1.0).contains(&th.tau2)) {
            return bad("bench thresholds need tau1, tau3 > 0 and tau2 in [0, 1)".into());
        }
        if self.registration.ransac.iterations == 0 || !(self.registration.ransac.inlier_dist > 0.0) {
            return bad("RANSAC needs iterations > 0 and inlier_dist > 0".into());
        }
        if !(self.train.learning_rate > 0.0) || self.train.crop_height == 0 || self.train.crop_width == 0 {
            return bad("train needs a positive learning rate and crop size".into());
        }
        if self.slam.vocabulary_size == 0 || !(self.slam.tau_h > 0.0) {
            return bad("slam needs vocabulary_size > 0 and tau_h > 0".into());
        }
        Ok(())
    }

    /// Mapping parameters assembled from the registration and slam sections.
    pub fn slam_config(&self) -> SlamConfig {
        SlamConfig {
            ransac: RansacConfig {
                seed: self.seed,
                ..self.registration.ransac
            },
            icp: self.registration.icp,
            loop_closure: self.slam.loop_closure,
            vocabulary_size: self.slam.vocabulary_size,
            tau_h: self.slam.tau_h,
            min_index_gap: self.slam.min_index_gap,
            min_loop_inliers: self.slam.min_loop_inliers,
            lm: self.slam.lm,
            seed: self.seed,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

fn merge(base: &mut Value, layer: Value) {
    match (base, layer) {
        (Value::Object(b), Value::Object(l)) => {
            for (k, v) in l {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, l) => *b = l,
    }
}

fn set_path(root: &mut Value, key: &str, v: Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key {key:?}")));
    }
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        if cur.is_null() {
            *cur = Value::Object(Map::new());
        }
        cur = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("override {key:?} descends into a non-object")))?
            .entry(p.to_string())
            .or_insert(Value::Null);
    }
    if cur.is_null() {
        *cur = Value::Object(Map::new());
    }
    let obj = cur
        .as_object_mut()
        .ok_or_else(|| CliError::Config(format!("override {key:?} descends into a non-object")))?;
    obj.insert(parts[parts.len() - 1].to_string(), v);
    Ok(())
}

fn unknown_key(given: &Value, resolved: &Value, prefix: &str) -> Option<String> {
    let (Value::Object(g), Value::Object(r)) = (given, resolved) else {
        return None;
    };
    for (k, v) in g {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match r.get(k) {
            None => return Some(path),
            Some(rv) => {
                if let Some(bad) = unknown_key(v, rv, &path) {
                    return Some(bad);
                }
            }
        }
    }
    None
}
