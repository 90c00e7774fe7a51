//! Pipeline configuration: every tunable of every stage, overridable by a
//! flat `key = value` file, by `LFDEPTH_*` environment variables, and by
//! CLI flags (flags take precedence over env, env over file, file over
//! defaults).

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::cpm::CpmParams;
use crate::descriptor::DescriptorParams;
use crate::error::{Error, Result};
use crate::flowfilter::DtParams;
use crate::fusion::RefineParams;
use crate::lightfield::{parse_param_file, LoadOptions};

/// Which rows (or columns) of the matrix of views feed the pipeline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum AxisSelection {
    Center,
    All,
    List(Vec<usize>),
}

impl AxisSelection {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "center" => Ok(AxisSelection::Center),
            "all" => Ok(AxisSelection::All),
            "" | "none" => Ok(AxisSelection::List(vec![])),
            list => {
                let idx = list
                    .split(',')
                    .map(|t| {
                        t.trim()
                            .parse()
                            .map_err(|_| Error::Config(format!("bad axis index '{t}'")))
                    })
                    .collect::<Result<Vec<usize>>>()?;
                Ok(AxisSelection::List(idx))
            }
        }
    }

    /// Concrete indices given the axis extent.
    pub fn resolve(&self, extent: usize) -> Vec<usize> {
        match self {
            AxisSelection::Center => vec![extent / 2],
            AxisSelection::All => (0..extent).collect(),
            AxisSelection::List(v) => v.iter().copied().filter(|&i| i < extent).collect(),
        }
    }
}

impl std::fmt::Display for AxisSelection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AxisSelection::Center => write!(f, "center"),
            AxisSelection::All => write!(f, "all"),
            AxisSelection::List(v) => {
                let s: Vec<String> = v.iter().map(|i| i.to_string()).collect();
                write!(f, "{}", s.join(","))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Config {
    // Coarse-to-fine matching.
    pub pyramid_levels: usize,
    pub eta: f64,
    pub patch_radius: usize,
    pub seed_spacing: usize,
    pub cpm_iterations: usize,
    /// 0 = search the full image extent per level.
    pub max_search_radius: f64,
    pub tau_fb: f64,
    pub sigma_c: f64,
    pub subpixel: bool,
    // Descriptors.
    pub descriptor_sigma: f64,
    pub descriptor_clamp: f64,
    // Volumetric filtering.
    pub sigma_s: f64,
    pub sigma_r: f64,
    pub sigma_a: f64,
    pub dt_iterations: usize,
    // Variational refinement.
    pub lambda: f64,
    pub kappa: f64,
    pub refine_epsilon: f64,
    pub fixed_point_iterations: usize,
    pub inner_iterations: usize,
    pub refine_tolerance: f64,
    pub alpha_sigma_s: f64,
    pub alpha_sigma_r: f64,
    // Volume selection.
    pub rows: AxisSelection,
    pub cols: AxisSelection,
    // Execution.
    pub rng_seed: u64,
    pub threads: usize,
    // Evaluation.
    pub eval_boundary_band: usize,
    // Point clouds.
    pub dense_cloud: bool,
    pub dedup_voxel: f64,
    // Dataset layout.
    pub view_pattern: String,
    pub param_file: String,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            pyramid_levels: 5,
            eta: 0.5,
            patch_radius: 1,
            seed_spacing: 3,
            cpm_iterations: 6,
            max_search_radius: 0.0,
            tau_fb: 1.5,
            sigma_c: 1.0,
            subpixel: true,
            descriptor_sigma: 8.0,
            descriptor_clamp: 0.2,
            sigma_s: 30.0,
            sigma_r: 0.08,
            sigma_a: 0.8,
            dt_iterations: 3,
            lambda: 1.0,
            kappa: 5.0,
            refine_epsilon: 1e-3,
            fixed_point_iterations: 1,
            inner_iterations: 100,
            refine_tolerance: 1e-6,
            alpha_sigma_s: 5.0,
            alpha_sigma_r: 0.08,
            rows: AxisSelection::Center,
            cols: AxisSelection::Center,
            rng_seed: 0,
            threads: 0,
            eval_boundary_band: 16,
            dense_cloud: true,
            dedup_voxel: 0.0,
            view_pattern: LoadOptions::default().view_pattern,
            param_file: LoadOptions::default().param_file,
        }
    }
}

macro_rules! parse_into {
    ($field:expr, $value:expr, $key:expr) => {
        $field = $value
            .parse()
            .map_err(|_| Error::Config(format!("bad value '{}' for key '{}'", $value, $key)))?
    };
}

impl Config {
    /// Apply one `key = value` override.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "pyramid_levels" => parse_into!(self.pyramid_levels, value, key),
            "eta" => parse_into!(self.eta, value, key),
            "patch_radius" => parse_into!(self.patch_radius, value, key),
            "seed_spacing" => parse_into!(self.seed_spacing, value, key),
            "cpm_iterations" => parse_into!(self.cpm_iterations, value, key),
            "max_search_radius" => parse_into!(self.max_search_radius, value, key),
            "tau_fb" => parse_into!(self.tau_fb, value, key),
            "sigma_c" => parse_into!(self.sigma_c, value, key),
            "subpixel" => parse_into!(self.subpixel, value, key),
            "descriptor_sigma" => parse_into!(self.descriptor_sigma, value, key),
            "descriptor_clamp" => parse_into!(self.descriptor_clamp, value, key),
            "sigma_s" => parse_into!(self.sigma_s, value, key),
            "sigma_r" => parse_into!(self.sigma_r, value, key),
            "sigma_a" => parse_into!(self.sigma_a, value, key),
            "dt_iterations" => parse_into!(self.dt_iterations, value, key),
            "lambda" => parse_into!(self.lambda, value, key),
            "kappa" => parse_into!(self.kappa, value, key),
            "refine_epsilon" => parse_into!(self.refine_epsilon, value, key),
            "fixed_point_iterations" => parse_into!(self.fixed_point_iterations, value, key),
            "inner_iterations" => parse_into!(self.inner_iterations, value, key),
            "refine_tolerance" => parse_into!(self.refine_tolerance, value, key),
            "alpha_sigma_s" => parse_into!(self.alpha_sigma_s, value, key),
            "alpha_sigma_r" => parse_into!(self.alpha_sigma_r, value, key),
            "rows" => self.rows = AxisSelection::parse(value)?,
            "cols" => self.cols = AxisSelection::parse(value)?,
            "rng_seed" => parse_into!(self.rng_seed, value, key),
            "threads" => parse_into!(self.threads, value, key),
            "eval_boundary_band" => parse_into!(self.eval_boundary_band, value, key),
            "dense_cloud" => parse_into!(self.dense_cloud, value, key),
            "dedup_voxel" => parse_into!(self.dedup_voxel, value, key),
            "view_pattern" => self.view_pattern = value.to_string(),
            "param_file" => self.param_file = value.to_string(),
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Overlay a flat `key = value` config file.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (k, v) in parse_param_file(&text) {
            self.apply_kv(&k, &v)?;
        }
        Ok(())
    }

    /// Overlay `LFDEPTH_<KEY>` environment variables.
    pub fn apply_env(&mut self) -> Result<()> {
        for (k, v) in std::env::vars() {
            if let Some(key) = k.strip_prefix("LFDEPTH_") {
                self.apply_kv(&key.to_ascii_lowercase(), &v)?;
            }
        }
        Ok(())
    }

    /// Flat diff-friendly snapshot of every field.
    pub fn to_flat_text(&self) -> String {
        let json = serde_json::to_value(self).expect("config serializes");
        let mut map = BTreeMap::new();
        if let serde_json::Value::Object(obj) = json {
            for (k, v) in obj {
                let rendered = match v {
                    serde_json::Value::String(s) => s,
                    serde_json::Value::Object(_) | serde_json::Value::Array(_) => {
                        // AxisSelection serializes structurally; render its
                        // textual form instead.
                        if k == "rows" {
                            self.rows.to_string()
                        } else if k == "cols" {
                            self.cols.to_string()
                        } else {
                            v.to_string()
                        }
                    }
                    other => other.to_string(),
                };
                map.insert(k, rendered);
            }
        }
        let mut out = String::new();
        for (k, v) in map {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn descriptor_params(&self) -> DescriptorParams {
        DescriptorParams { sigma: self.descriptor_sigma, clamp: self.descriptor_clamp as f32 }
    }

    /// Matching parameters; `levels` may be clamped by the pipeline when the
    /// views are too small for the configured pyramid depth.
    pub fn cpm_params(&self, levels: usize, rng_seed: u64) -> CpmParams {
        CpmParams {
            levels,
            eta: self.eta,
            seed_spacing: self.seed_spacing,
            iterations: self.cpm_iterations,
            patch_radius: self.patch_radius,
            max_search_radius: if self.max_search_radius > 0.0 {
                Some(self.max_search_radius)
            } else {
                None
            },
            tau_fb: self.tau_fb,
            sigma_c: self.sigma_c,
            subpixel: self.subpixel,
            epipolar: true,
            descriptor: self.descriptor_params(),
            rng_seed,
        }
    }

    pub fn dt_params(&self) -> DtParams {
        DtParams {
            sigma_s: self.sigma_s,
            sigma_r: self.sigma_r,
            sigma_a: self.sigma_a,
            iterations: self.dt_iterations,
        }
    }

    pub fn refine_params(&self) -> RefineParams {
        RefineParams {
            lambda: self.lambda,
            kappa: self.kappa,
            epsilon: self.refine_epsilon,
            fixed_point_iterations: self.fixed_point_iterations,
            inner_iterations: self.inner_iterations,
            tolerance: self.refine_tolerance,
            alpha_sigma_s: self.alpha_sigma_s,
            alpha_sigma_r: self.alpha_sigma_r,
        }
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            view_pattern: self.view_pattern.clone(),
            param_file: self.param_file.clone(),
            ..LoadOptions::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_stated_values() {
        let c = Config::default();
        assert_eq!(c.pyramid_levels, 5);
        assert_eq!(c.eta, 0.5);
        assert_eq!(c.patch_radius, 1); // 3x3 patch
        assert_eq!(c.kappa, 5.0);
        assert_eq!(c.rows, AxisSelection::Center);
    }

    #[test]
    fn kv_overrides() {
        let mut c = Config::default();
        c.apply_kv("eta", "0.6").unwrap();
        c.apply_kv("rows", "1,3,5").unwrap();
        c.apply_kv("subpixel", "false").unwrap();
        assert_eq!(c.eta, 0.6);
        assert_eq!(c.rows, AxisSelection::List(vec![1, 3, 5]));
        assert!(!c.subpixel);
        assert!(c.apply_kv("nonsense", "1").is_err());
        assert!(c.apply_kv("eta", "abc").is_err());
    }

    #[test]
    fn file_overlay() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.txt");
        std::fs::write(&path, "# comment\nsigma_s = 12.5\ncols = all\n").unwrap();
        let mut c = Config::default();
        c.apply_file(&path).unwrap();
        assert_eq!(c.sigma_s, 12.5);
        assert_eq!(c.cols, AxisSelection::All);
    }

    #[test]
    fn selection_resolution() {
        assert_eq!(AxisSelection::Center.resolve(9), vec![4]);
        assert_eq!(AxisSelection::All.resolve(3), vec![0, 1, 2]);
        assert_eq!(AxisSelection::List(vec![1, 7, 99]).resolve(8), vec![1, 7]);
    }

    #[test]
    fn flat_text_is_sorted_and_complete() {
        let text = Config::default().to_flat_text();
        assert!(text.contains("pyramid_levels = 5"));
        assert!(text.contains("rows = center"));
        let lines: Vec<&str> = text.lines().collect();
        let mut sorted = lines.clone();
        sorted.sort();
        assert_eq!(lines, sorted);
    }
}
