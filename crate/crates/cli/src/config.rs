//! Layered configuration file. Each table is merged key by key over the
//! library defaults, so a file only needs the values it changes.

use std::fs;
use std::path::Path;

use anyhow::Result;
use cso_unmix::dista::ModelConfig;
use cso_unmix::imaging::SensorConfig;
use cso_unmix::pipeline::IstaSettings;
use cso_unmix::scenegen::{rayleigh_unit, DatasetConfig, PlacementRegion};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::invalid;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    sensor: Option<Value>,
    #[serde(default)]
    dataset: Option<Value>,
    #[serde(default)]
    model: Option<Value>,
    #[serde(default)]
    pub solver: SolverFile,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverFile {
    pub lambda: Option<f64>,
    pub max_iters: Option<usize>,
    pub stop_tol: Option<f64>,
}

impl SolverFile {
    pub fn ista_settings(&self) -> IstaSettings {
        let d = IstaSettings::default();
        IstaSettings {
            max_iters: self.max_iters.unwrap_or(d.max_iters),
            stop_tol: self.stop_tol.unwrap_or(d.stop_tol),
        }
    }
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let is_json = path.extension().is_some_and(|e| e == "json");
        let parsed = if is_json {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|e| invalid(format!("{}: {e}", path.display())))
    }

    pub fn sensor(&self) -> Result<SensorConfig> {
        merged("sensor", SensorConfig::default(), self.sensor.as_ref())
    }

    /// Dataset defaults follow the sensor: minimum separation and placement
    /// region are derived from it unless the file sets them.
    pub fn dataset(&self, sensor: &SensorConfig) -> Result<DatasetConfig> {
        let base = DatasetConfig {
            min_separation: 0.52 * rayleigh_unit(sensor.sigma_psf),
            placement_region: PlacementRegion::central_pixel(sensor),
            ..DatasetConfig::default()
        };
        merged("dataset", base, self.dataset.as_ref())
    }

    pub fn model(&self) -> Result<ModelConfig> {
        merged("model", ModelConfig::default(), self.model.as_ref())
    }
}

fn merged<T: Serialize + DeserializeOwned>(table: &str, base: T, over: Option<&Value>) -> Result<T> {
    let Some(over) = over else {
        return Ok(base);
    };
    let mut value = serde_json::to_value(base)?;
    let (Value::Object(dst), Value::Object(src)) = (&mut value, over) else {
        return Err(invalid(format!("[{table}] must be a table")));
    };
    for (k, v) in src {
        if !dst.contains_key(k) {
            return Err(invalid(format!("unknown key {k:?} in [{table}]")));
        }
        dst.insert(k.clone(), v.clone());
    }
    serde_json::from_value(value).map_err(|e| invalid(format!("[{table}]: {e}")))
}
