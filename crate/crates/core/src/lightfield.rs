//! Light field container and loader for HCI-style directories: an S x T grid
//! of rectified PNG views plus a plain-text key-value parameter file.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{Image, ImageRef};

/// Camera intrinsics shared by all views, plus the baseline between
/// neighbouring camera positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    /// Focal length in pixels.
    pub focal_length_px: f64,
    /// World units per unit angular step.
    pub baseline: f64,
    /// Principal point (cx, cy) in pixels.
    pub principal_point: (f64, f64),
}

impl Calibration {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal_length_px > 0.0) || !self.focal_length_px.is_finite() {
            return Err(Error::Calibration(format!(
                "focal length must be positive, got {}",
                self.focal_length_px
            )));
        }
        if !(self.baseline > 0.0) || !self.baseline.is_finite() {
            return Err(Error::Calibration(format!(
                "baseline must be positive, got {}",
                self.baseline
            )));
        }
        Ok(())
    }
}

/// Calibrated matrix of rectified RGB views. Views are indexed by (s, t)
/// with s varying along matrix rows; storage order is row-major over (t, s).
#[derive(Debug, Clone)]
pub struct LightField {
    views: Vec<ImageRef>,
    angular_size: (usize, usize),
    spatial_size: (usize, usize),
    pub calib: Calibration,
}

impl LightField {
    pub fn new(views: Vec<Image>, angular_size: (usize, usize), calib: Calibration) -> Result<Self> {
        let (s_count, t_count) = angular_size;
        if s_count < 2 && t_count < 2 {
            return Err(Error::Structure(format!(
                "angular grid {s_count}x{t_count} has no axis usable for flow"
            )));
        }
        if views.len() != s_count * t_count {
            return Err(Error::Structure(format!(
                "{} views supplied for a {}x{} grid",
                views.len(),
                s_count,
                t_count
            )));
        }
        let (w, h) = (views[0].width(), views[0].height());
        for (i, v) in views.iter().enumerate() {
            if v.width() != w || v.height() != h {
                return Err(Error::Structure(format!(
                    "view {i} is {}x{}, expected {w}x{h}",
                    v.width(),
                    v.height()
                )));
            }
            if v.channels() != 3 {
                return Err(Error::Structure(format!(
                    "view {i} has {} channels, expected 3",
                    v.channels()
                )));
            }
            if v.data().iter().any(|&s| !(0.0..=1.0).contains(&s)) {
                return Err(Error::Structure(format!("view {i} has samples outside [0,1]")));
            }
        }
        calib.validate()?;
        Ok(LightField {
            views: views.into_iter().map(Arc::new).collect(),
            angular_size,
            spatial_size: (w, h),
            calib,
        })
    }

    /// Angular grid size (S, T): S views per row, T views per column.
    pub fn angular_size(&self) -> (usize, usize) {
        self.angular_size
    }

    pub fn spatial_size(&self) -> (usize, usize) {
        self.spatial_size
    }

    pub fn view(&self, s: usize, t: usize) -> &ImageRef {
        &self.views[t * self.angular_size.0 + s]
    }

    pub fn views(&self) -> &[ImageRef] {
        &self.views
    }
}

/// Directory layout knobs for [`load_hci`]. Defaults match the public HCI
/// benchmark layout.
#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// View filename pattern with an `{index}` placeholder (optionally
    /// zero-padded as `{index:03}`); the index is row-major over (t, s).
    pub view_pattern: String,
    pub param_file: String,
    pub focal_length_key: String,
    pub sensor_width_key: String,
    pub baseline_key: String,
    pub cams_x_key: String,
    pub cams_y_key: String,
    /// Optional declared image width for validation against the PNGs.
    pub image_width_key: String,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            view_pattern: "input_Cam{index:03}.png".into(),
            param_file: "parameters.cfg".into(),
            focal_length_key: "focal_length_mm".into(),
            sensor_width_key: "sensor_size_mm".into(),
            baseline_key: "baseline_mm".into(),
            cams_x_key: "num_cams_x".into(),
            cams_y_key: "num_cams_y".into(),
            image_width_key: "image_resolution_x_px".into(),
        }
    }
}

fn expand_pattern(pattern: &str, index: usize) -> Result<String> {
    let start = pattern
        .find("{index")
        .ok_or_else(|| Error::Config(format!("view pattern '{pattern}' lacks {{index}}")))?;
    let end = pattern[start..]
        .find('}')
        .map(|e| start + e)
        .ok_or_else(|| Error::Config(format!("view pattern '{pattern}' has unclosed brace")))?;
    let spec = &pattern[start + 6..end];
    let formatted = if let Some(width) = spec.strip_prefix(":0") {
        let width: usize = width
            .parse()
            .map_err(|_| Error::Config(format!("bad pad width in pattern '{pattern}'")))?;
        format!("{index:0width$}")
    } else if spec.is_empty() {
        format!("{index}")
    } else {
        return Err(Error::Config(format!("unsupported index format '{spec}'")));
    };
    Ok(format!("{}{}{}", &pattern[..start], formatted, &pattern[end + 1..]))
}

/// Parse a flat `key = value` file, ignoring blank lines, `[section]`
/// headers and `#`/`;`/`//` comments.
pub fn parse_param_file(text: &str) -> HashMap<String, String> {
    let mut map = HashMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty()
            || line.starts_with('#')
            || line.starts_with(';')
            || line.starts_with("//")
            || line.starts_with('[')
        {
            continue;
        }
        if let Some((k, v)) = line.split_once('=') {
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    map
}

fn param_f64(params: &HashMap<String, String>, key: &str) -> Result<f64> {
    params
        .get(key)
        .ok_or_else(|| Error::Calibration(format!("missing parameter '{key}'")))?
        .parse()
        .map_err(|_| Error::Calibration(format!("unreadable parameter '{key}'")))
}

fn param_usize(params: &HashMap<String, String>, key: &str) -> Result<usize> {
    params
        .get(key)
        .ok_or_else(|| Error::Structure(format!("missing parameter '{key}'")))?
        .parse()
        .map_err(|_| Error::Structure(format!("unreadable parameter '{key}'")))
}

/// Load an HCI-style light-field directory: S x T PNG views named by a
/// single linear index plus a parameter file. The physical focal length is
/// converted to pixels as `focal * width_px / sensor_width`.
pub fn load_hci(dir: &Path, opts: &LoadOptions) -> Result<LightField> {
    let param_path = dir.join(&opts.param_file);
    let text = std::fs::read_to_string(&param_path).map_err(|e| {
        Error::Structure(format!("cannot read {}: {e}", param_path.display()))
    })?;
    let params = parse_param_file(&text);

    let s_count = param_usize(&params, &opts.cams_x_key)?;
    let t_count = param_usize(&params, &opts.cams_y_key)?;
    let focal = param_f64(&params, &opts.focal_length_key)?;
    let sensor_width = param_f64(&params, &opts.sensor_width_key)?;
    let baseline = param_f64(&params, &opts.baseline_key)?;
    if sensor_width <= 0.0 {
        return Err(Error::Calibration(format!("sensor width {sensor_width} must be positive")));
    }

    let paths: Vec<_> = (0..s_count * t_count)
        .map(|i| expand_pattern(&opts.view_pattern, i).map(|name| dir.join(name)))
        .collect::<Result<_>>()?;
    for p in &paths {
        if !p.exists() {
            return Err(Error::Structure(format!(
                "missing view {} for declared {}x{} grid",
                p.display(),
                s_count,
                t_count
            )));
        }
    }
    let views: Vec<Image> = paths
        .par_iter()
        .map(|p| Image::load_png(p))
        .collect::<Result<_>>()?;

    let width_px = views[0].width();
    if let Some(declared) = params.get(&opts.image_width_key) {
        let declared: usize = declared
            .parse()
            .map_err(|_| Error::Structure(format!("unreadable '{}'", opts.image_width_key)))?;
        if declared != width_px {
            return Err(Error::Structure(format!(
                "declared width {declared} != actual width {width_px}"
            )));
        }
    }

    let focal_length_px = focal * width_px as f64 / sensor_width;
    let calib = Calibration {
        focal_length_px,
        baseline,
        principal_point: ((width_px as f64 - 1.0) / 2.0, (views[0].height() as f64 - 1.0) / 2.0),
    };
    LightField::new(views, (s_count, t_count), calib)
}
