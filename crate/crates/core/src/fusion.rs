//! Aggregation of per-pair disparity estimates into one map: registration
//! to the center view, weighted median fusion, and a one-step variational
//! refinement, followed by the disparity-to-depth conversion.

use std::time::Instant;

use rayon::prelude::*;

use crate::config::Config;
use crate::cpm::{self, SparseMatchSet};
use crate::error::{Error, Result};
use crate::flowfilter::{self, DtParams, FlowVolume};
use crate::image::{Image, ImageRef};
use crate::lightfield::LightField;
use crate::maps::{disparity_to_depth, DepthMap, DisparityMap, Grid};
use crate::volume::{extract_volume, Axis};

/// Where a registered estimate came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub axis: Axis,
    pub fixed_index: usize,
    pub pair_index: usize,
}

/// Disparity estimates registered to a common view, with per-pixel weights.
#[derive(Debug, Clone)]
pub struct EstimateStack {
    pub maps: Vec<DisparityMap>,
    pub weights: Vec<Grid>,
    pub provenance: Vec<Provenance>,
}

impl EstimateStack {
    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn merge(&mut self, other: EstimateStack) {
        self.maps.extend(other.maps);
        self.weights.extend(other.weights);
        self.provenance.extend(other.provenance);
    }

    /// Valid, positively-weighted estimates at one pixel.
    pub fn estimates_at(&self, x: usize, y: usize) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.maps.len());
        for (m, w) in self.maps.iter().zip(&self.weights) {
            if let Some(v) = m.at(x, y) {
                let wt = w.at(x, y);
                if wt > 0.0 {
                    out.push((v, wt));
                }
            }
        }
        out
    }
}

/// Convert each pairwise flow of a volume into a disparity map registered to
/// the volume's `center_index` view, walking pixel positions along the
/// accumulated flow. Pixels whose walk leaves the image become invalid.
pub fn register_to_center(
    vol: &FlowVolume,
    center_index: usize,
    axis: Axis,
    fixed_index: usize,
) -> Result<EstimateStack> {
    let n_views = vol.guides.len();
    if center_index >= n_views {
        return Err(Error::Index(format!(
            "center index {center_index} outside volume of {n_views} views"
        )));
    }
    let pairs = vol.flows.len();
    let (w, h) = (vol.flows[0].width, vol.flows[0].height);
    let wmax = (w - 1) as f64;

    let mut maps = Vec::with_capacity(pairs);
    let mut weights = Vec::with_capacity(pairs);
    let mut provenance = Vec::with_capacity(pairs);
    for n in 0..pairs {
        let mut map = DisparityMap::invalid(w, h);
        let mut wgt = Grid::zeros(w, h);
        for y in 0..h {
            for x in 0..w {
                // Walk from the center view to pair n's source view.
                let mut px = x as f64;
                let mut ok = true;
                if n >= center_index {
                    for m in center_index..n {
                        px += vol.flows[m].sample_bilinear(px, y as f64);
                        if !(0.0..=wmax).contains(&px) {
                            ok = false;
                            break;
                        }
                    }
                } else {
                    for m in (n..center_index).rev() {
                        px -= vol.flows[m].sample_bilinear(px, y as f64);
                        if !(0.0..=wmax).contains(&px) {
                            ok = false;
                            break;
                        }
                    }
                }
                if ok {
                    map.set(x, y, vol.flows[n].sample_bilinear(px, y as f64));
                    wgt.set(x, y, vol.confidences[n].sample_bilinear(px, y as f64).max(0.0));
                }
            }
        }
        maps.push(map);
        weights.push(wgt);
        provenance.push(Provenance { axis, fixed_index, pair_index: n });
    }
    Ok(EstimateStack { maps, weights, provenance })
}

/// Lower weighted median: smallest value whose cumulative weight reaches
/// half the total.
fn weighted_median(entries: &mut Vec<(f64, f64)>) -> Option<f64> {
    if entries.is_empty() {
        return None;
    }
    entries.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let total: f64 = entries.iter().map(|e| e.1).sum();
    if total <= 0.0 {
        return None;
    }
    let mut acc = 0.0;
    for &(v, w) in entries.iter() {
        acc += w;
        if acc >= 0.5 * total {
            return Some(v);
        }
    }
    Some(entries.last().unwrap().0)
}

/// Per-pixel weighted median across the stack, then one 3x3 spatial median
/// pass over the result (valid pixels only).
pub fn median_fuse(stack: &EstimateStack) -> Result<DisparityMap> {
    if stack.is_empty() {
        return Err(Error::NoData("empty estimate stack".into()));
    }
    let (w, h) = (stack.maps[0].width, stack.maps[0].height);
    for m in &stack.maps {
        if m.width != w || m.height != h {
            return Err(Error::Structure("estimate stack maps differ in size".into()));
        }
    }
    let mut fused = DisparityMap::invalid(w, h);
    let mut entries = Vec::new();
    for y in 0..h {
        for x in 0..w {
            entries.clear();
            entries.extend(stack.estimates_at(x, y));
            if let Some(v) = weighted_median(&mut entries) {
                fused.set(x, y, v);
            }
        }
    }

    // Spatial 3x3 median over the valid field.
    let mut out = DisparityMap::invalid(w, h);
    let mut window = Vec::with_capacity(9);
    for y in 0..h {
        for x in 0..w {
            if !fused.valid[y * w + x] {
                continue;
            }
            window.clear();
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let nx = x as i64 + dx;
                    let ny = y as i64 + dy;
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    if let Some(v) = fused.at(nx as usize, ny as usize) {
                        window.push(v);
                    }
                }
            }
            window.sort_by(|a, b| a.partial_cmp(b).unwrap());
            out.set(x, y, window[(window.len() - 1) / 2]);
        }
    }
    Ok(out)
}

/// Robust-penalty refinement controls. `kappa` steers the edge-sensitive
/// smoothness weight `alpha = exp(-kappa * |grad of guided init|)`.
#[derive(Debug, Clone, Copy)]
pub struct RefineParams {
    pub lambda: f64,
    pub kappa: f64,
    pub epsilon: f64,
    pub fixed_point_iterations: usize,
    pub inner_iterations: usize,
    pub tolerance: f64,
    pub alpha_sigma_s: f64,
    pub alpha_sigma_r: f64,
}

impl Default for RefineParams {
    fn default() -> Self {
        RefineParams {
            lambda: 1.0,
            kappa: 5.0,
            epsilon: 1e-3,
            fixed_point_iterations: 1,
            inner_iterations: 100,
            tolerance: 1e-6,
            alpha_sigma_s: 5.0,
            alpha_sigma_r: 0.08,
        }
    }
}

/// Refinement result; `converged` is false when the linear solver exhausted
/// its iteration budget (the best iterate is still returned).
#[derive(Debug, Clone)]
pub struct Refined {
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
    pub converged: bool,
    pub energy_initial: f64,
    pub energy_final: f64,
}

fn robust(s2: f64, eps: f64) -> f64 {
    (s2 + eps * eps).sqrt()
}

fn robust_deriv(s2: f64, eps: f64) -> f64 {
    0.5 / (s2 + eps * eps).sqrt()
}

/// Discrete energy: sum of robust data fidelity plus alpha-weighted robust
/// gradient magnitude (forward differences, missing neighbours contribute
/// zero gradient).
fn refine_energy(
    z: &[f64],
    z0: &[f64],
    valid: &[bool],
    alpha: &[f64],
    w: usize,
    h: usize,
    p: &RefineParams,
) -> f64 {
    let mut e = 0.0;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !valid[i] {
                continue;
            }
            let d = z[i] - z0[i];
            e += robust(d * d, p.epsilon);
            let gx = if x + 1 < w && valid[i + 1] { z[i + 1] - z[i] } else { 0.0 };
            let gy = if y + 1 < h && valid[i + w] { z[i + w] - z[i] } else { 0.0 };
            e += p.lambda * alpha[i] * robust(gx * gx + gy * gy, p.epsilon);
        }
    }
    e
}

/// Edge-sensitivity weights from the gradient of the init map smoothed by
/// the guide image's edges.
fn alpha_map(
    z0: &[f64],
    valid: &[bool],
    guide: &Image,
    p: &RefineParams,
) -> Result<Vec<f64>> {
    let (w, h) = (guide.width(), guide.height());
    let mut values = Grid::zeros(w, h);
    let mut weights = Grid::zeros(w, h);
    for i in 0..w * h {
        if valid[i] {
            values.data[i] = z0[i];
            weights.data[i] = 1.0;
        }
    }
    let smooth = flowfilter::guided_filter(
        &values,
        &weights,
        guide,
        p.alpha_sigma_s,
        p.alpha_sigma_r,
        1,
    )?;
    let mut alpha = vec![1.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let xm = x.saturating_sub(1);
            let xp = (x + 1).min(w - 1);
            let ym = y.saturating_sub(1);
            let yp = (y + 1).min(h - 1);
            let gx = 0.5 * (smooth.at(xp, y) - smooth.at(xm, y));
            let gy = 0.5 * (smooth.at(x, yp) - smooth.at(x, ym));
            alpha[y * w + x] = (-p.kappa * (gx * gx + gy * gy).sqrt()).exp();
        }
    }
    Ok(alpha)
}

/// One-step lagged-nonlinearity minimization of
/// `E(z) = sum psi((z - z0)^2) + lambda * sum alpha * psi(|grad z|^2)`
/// around `z0`: the robust penalties are linearized at the current iterate
/// and the resulting quadratic is relaxed by Gauss-Seidel sweeps, which
/// never increase the true energy.
pub fn refine_scalar_field(
    z0: &[f64],
    valid: &[bool],
    guide: &Image,
    p: &RefineParams,
) -> Result<Refined> {
    let (w, h) = (guide.width(), guide.height());
    if z0.len() != w * h || valid.len() != w * h {
        return Err(Error::Structure("refine input does not match guide size".into()));
    }
    if p.lambda == 0.0 {
        // Pure fidelity: the init is the exact minimizer.
        let e = refine_energy(z0, z0, valid, &vec![1.0; w * h], w, h, p);
        return Ok(Refined {
            values: z0.to_vec(),
            valid: valid.to_vec(),
            converged: true,
            energy_initial: e,
            energy_final: e,
        });
    }
    let alpha = alpha_map(z0, valid, guide, p)?;
    let energy_initial = refine_energy(z0, z0, valid, &alpha, w, h, p);

    let mut z = z0.to_vec();
    let wd = robust_deriv(0.0, p.epsilon);
    let mut converged = false;
    for _ in 0..p.fixed_point_iterations.max(1) {
        // Lagged smoothness weights at the current iterate.
        let mut ws = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if !valid[i] {
                    continue;
                }
                let gx = if x + 1 < w && valid[i + 1] { z[i + 1] - z[i] } else { 0.0 };
                let gy = if y + 1 < h && valid[i + w] { z[i + w] - z[i] } else { 0.0 };
                ws[i] = alpha[i] * robust_deriv(gx * gx + gy * gy, p.epsilon);
            }
        }
        converged = false;
        for _ in 0..p.inner_iterations {
            let mut max_delta = 0.0f64;
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    if !valid[i] {
                        continue;
                    }
                    let mut num = wd * z0[i];
                    let mut den = wd;
                    if x + 1 < w && valid[i + 1] {
                        let c = p.lambda * ws[i];
                        num += c * z[i + 1];
                        den += c;
                    }
                    if x > 0 && valid[i - 1] {
                        let c = p.lambda * ws[i - 1];
                        num += c * z[i - 1];
                        den += c;
                    }
                    if y + 1 < h && valid[i + w] {
                        let c = p.lambda * ws[i];
                        num += c * z[i + w];
                        den += c;
                    }
                    if y > 0 && valid[i - w] {
                        let c = p.lambda * ws[i - w];
                        num += c * z[i - w];
                        den += c;
                    }
                    let znew = num / den;
                    max_delta = max_delta.max((znew - z[i]).abs());
                    z[i] = znew;
                }
            }
            if max_delta < p.tolerance {
                converged = true;
                break;
            }
        }
    }

    let mut energy_final = refine_energy(&z, z0, valid, &alpha, w, h, p);
    if energy_final > energy_initial {
        // Floating-point safeguard: never hand back a worse iterate.
        z.copy_from_slice(z0);
        energy_final = energy_initial;
    }
    Ok(Refined { values: z, valid: valid.to_vec(), converged, energy_initial, energy_final })
}

/// Variational refinement of a depth map against the center view.
pub fn variational_refine(
    z_init: &DepthMap,
    center_view: &Image,
    params: &RefineParams,
) -> Result<(DepthMap, Refined)> {
    let zeroed: Vec<f64> =
        z_init.values.iter().zip(&z_init.valid).map(|(&v, &ok)| if ok { v } else { 0.0 }).collect();
    let refined = refine_scalar_field(&zeroed, &z_init.valid, center_view, params)?;
    let mut out = DepthMap::invalid(z_init.width, z_init.height);
    for y in 0..z_init.height {
        for x in 0..z_init.width {
            let i = y * z_init.width + x;
            if refined.valid[i] {
                out.set(x, y, refined.values[i]);
            }
        }
    }
    Ok((out, refined))
}

/// Refinement of a disparity map (the pipeline refines in disparity space,
/// where the variable is bounded, and converts to depth afterwards).
pub fn refine_disparity(
    d_init: &DisparityMap,
    center_view: &Image,
    params: &RefineParams,
) -> Result<(DisparityMap, Refined)> {
    let zeroed: Vec<f64> =
        d_init.values.iter().zip(&d_init.valid).map(|(&v, &ok)| if ok { v } else { 0.0 }).collect();
    let refined = refine_scalar_field(&zeroed, &d_init.valid, center_view, params)?;
    let mut out = DisparityMap::invalid(d_init.width, d_init.height);
    for y in 0..d_init.height {
        for x in 0..d_init.width {
            let i = y * d_init.width + x;
            if refined.valid[i] {
                out.set(x, y, refined.values[i]);
            }
        }
    }
    Ok((out, refined))
}

/// Wall-clock seconds per pipeline stage.
#[derive(Debug, Clone, Copy, Default, serde::Serialize)]
pub struct StageTimings {
    pub matching: f64,
    pub filtering: f64,
    pub fusion: f64,
    pub refinement: f64,
    pub total: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct PipelineStats {
    pub rng_seed: u64,
    pub timings: StageTimings,
    pub pyramid_levels_used: usize,
    pub volumes: usize,
    pub estimates: usize,
    pub refine_converged: bool,
    pub valid_fraction: f64,
}

/// Full pipeline output.
#[derive(Debug, Clone)]
pub struct DepthEstimate {
    /// Final disparity (median-fused then refined); consistent with `depth`.
    pub disparity: DisparityMap,
    /// Median-fused disparity before refinement.
    pub fused_disparity: DisparityMap,
    pub depth: DepthMap,
    pub stats: PipelineStats,
}

/// Dense flows for one processed volume (exposed for flow debugging).
#[derive(Debug, Clone)]
pub struct VolumeFlows {
    pub axis: Axis,
    pub fixed_index: usize,
    /// Sparse surviving matches per pair, in the flow frame (transposed for
    /// column volumes).
    pub sparse: Vec<SparseMatchSet>,
    pub flow: FlowVolume,
}

/// The (axis, fixed_index) volumes selected by a config, given the angular
/// grid. Rows come first, then columns.
pub fn select_volumes(config: &Config, s_count: usize, t_count: usize) -> Vec<(Axis, usize)> {
    let mut out = Vec::new();
    if s_count >= 2 {
        for t in config.rows.resolve(t_count) {
            out.push((Axis::Row, t));
        }
    }
    if t_count >= 2 {
        for s in config.cols.resolve(s_count) {
            out.push((Axis::Column, s));
        }
    }
    out
}

/// Views of one volume in the flow frame: column volumes are transposed so
/// the traversed axis always displaces horizontally.
fn flow_frame_views(lf: &LightField, axis: Axis, fixed_index: usize) -> Result<Vec<ImageRef>> {
    let vol = extract_volume(lf, axis, fixed_index)?;
    Ok(match axis {
        Axis::Row => vol.images,
        Axis::Column => vol
            .images
            .iter()
            .map(|im| std::sync::Arc::new(im.transpose()))
            .collect(),
    })
}

/// Matching outputs of one volume, before volumetric filtering.
#[derive(Debug, Clone)]
pub struct VolumeMatches {
    pub axis: Axis,
    pub fixed_index: usize,
    pub views: Vec<ImageRef>,
    pub sparse: Vec<SparseMatchSet>,
    pub confidences: Vec<Grid>,
}

/// Coarse-to-fine matching over all consecutive pairs of one volume.
/// Each pair draws its RNG stream from the config seed, the volume ordinal
/// and the pair index, so results do not depend on scheduling.
pub fn match_volume(
    lf: &LightField,
    axis: Axis,
    fixed_index: usize,
    volume_ordinal: u64,
    levels: usize,
    config: &Config,
) -> Result<VolumeMatches> {
    let views = flow_frame_views(lf, axis, fixed_index)?;
    let pairs: Vec<(SparseMatchSet, Grid)> = (0..views.len() - 1)
        .into_par_iter()
        .map(|n| {
            let params =
                config.cpm_params(levels, config.rng_seed ^ (volume_ordinal * 4096 + n as u64));
            let pm = cpm::cpm_match_pair(&views[n], &views[n + 1], &params)?;
            let conf = cpm::flow_confidence(&pm.fwd, &pm.bwd_full, config.sigma_c);
            Ok((pm.fwd, conf))
        })
        .collect::<Result<_>>()?;
    let (sparse, confidences): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    Ok(VolumeMatches { axis, fixed_index, views, sparse, confidences })
}

fn filter_volume(vm: VolumeMatches, config: &Config) -> Result<VolumeFlows> {
    let flow =
        flowfilter::feature_flow(&vm.views, &vm.sparse, &vm.confidences, &config.dt_params())?;
    Ok(VolumeFlows { axis: vm.axis, fixed_index: vm.fixed_index, sparse: vm.sparse, flow })
}

/// Run matching and volumetric filtering for one volume.
pub fn process_volume(
    lf: &LightField,
    axis: Axis,
    fixed_index: usize,
    volume_ordinal: u64,
    levels: usize,
    config: &Config,
) -> Result<VolumeFlows> {
    let vm = match_volume(lf, axis, fixed_index, volume_ordinal, levels, config)?;
    filter_volume(vm, config)
}

/// Registered estimates of one volume, warped into the global center view's
/// frame (column-volume maps are transposed back; off-center volumes are
/// shifted along the fixed axis using their own disparity).
fn register_volume(
    vf: &VolumeFlows,
    lf: &LightField,
) -> Result<EstimateStack> {
    let (s_count, t_count) = lf.angular_size();
    let center_in_volume = vf.flow.guides.len() / 2;
    let mut stack = register_to_center(&vf.flow, center_in_volume, vf.axis, vf.fixed_index)?;

    // Back to image orientation for column volumes.
    if vf.axis == Axis::Column {
        for m in &mut stack.maps {
            *m = m.transpose();
        }
        for w in &mut stack.weights {
            *w = w.transpose();
        }
    }

    // Off-center volumes live in a view displaced along the fixed axis;
    // pull them into the global center view along their own disparity.
    let offset_steps = match vf.axis {
        Axis::Row => vf.fixed_index as f64 - (t_count / 2) as f64,
        Axis::Column => vf.fixed_index as f64 - (s_count / 2) as f64,
    };
    if offset_steps != 0.0 {
        for k in 0..stack.maps.len() {
            let (m, w) = warp_along_fixed_axis(&stack.maps[k], &stack.weights[k], vf.axis, offset_steps);
            stack.maps[k] = m;
            stack.weights[k] = w;
        }
    }
    Ok(stack)
}

/// Gather a disparity map from a view displaced by `steps` along the fixed
/// axis into the center view, using the map's own disparity as the
/// displacement field (two fixed-point rounds).
fn warp_along_fixed_axis(
    map: &DisparityMap,
    weight: &Grid,
    axis: Axis,
    steps: f64,
) -> (DisparityMap, Grid) {
    let (w, h) = (map.width, map.height);
    let mut out = DisparityMap::invalid(w, h);
    let mut out_w = Grid::zeros(w, h);
    let sample = |px: f64, py: f64| -> Option<f64> {
        let xi = px.round() as i64;
        let yi = py.round() as i64;
        if xi < 0 || yi < 0 || xi >= w as i64 || yi >= h as i64 {
            return None;
        }
        map.at(xi as usize, yi as usize)
    };
    for y in 0..h {
        for x in 0..w {
            let mut d = match sample(x as f64, y as f64) {
                Some(d) => d,
                None => continue,
            };
            let mut src = (x as f64, y as f64);
            for _ in 0..2 {
                src = match axis {
                    // Row volume at t-offset `steps`: content shifts in y.
                    Axis::Row => (x as f64, y as f64 + d * steps),
                    Axis::Column => (x as f64 + d * steps, y as f64),
                };
                d = match sample(src.0, src.1) {
                    Some(d) => d,
                    None => {
                        d = f64::NAN;
                        break;
                    }
                };
            }
            if d.is_finite() {
                out.set(x, y, d);
                let xi = src.0.round().clamp(0.0, (w - 1) as f64) as usize;
                let yi = src.1.round().clamp(0.0, (h - 1) as f64) as usize;
                out_w.set(x, y, weight.at(xi, yi));
            }
        }
    }
    (out, out_w)
}

/// Full pipeline: volumes -> matching -> volumetric filtering ->
/// registration -> median fusion -> variational refinement -> depth.
pub fn estimate_depth(lf: &LightField, config: &Config) -> Result<DepthEstimate> {
    let t_start = Instant::now();
    let (s_count, t_count) = lf.angular_size();
    let (w, h) = lf.spatial_size();

    let volumes = select_volumes(config, s_count, t_count);
    if volumes.is_empty() {
        return Err(Error::Structure(format!(
            "no volume with N >= 2 views on a {s_count}x{t_count} grid with rows={} cols={}",
            config.rows, config.cols
        )));
    }
    let levels = cpm::max_usable_levels(w.min(h), w.min(h), config.pyramid_levels, config.eta);
    if levels == 0 {
        return Err(Error::Size(format!(
            "{w}x{h} views are smaller than the descriptor support"
        )));
    }

    let t0 = Instant::now();
    let matched: Vec<VolumeMatches> = volumes
        .par_iter()
        .enumerate()
        .map(|(i, &(axis, fixed))| match_volume(lf, axis, fixed, i as u64, levels, config))
        .collect::<Result<_>>()?;
    let matching = t0.elapsed().as_secs_f64();

    let t0b = Instant::now();
    let volume_flows: Vec<VolumeFlows> = matched
        .into_par_iter()
        .map(|vm| filter_volume(vm, config))
        .collect::<Result<_>>()?;
    let filtering = t0b.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let mut stack = EstimateStack { maps: vec![], weights: vec![], provenance: vec![] };
    for vf in &volume_flows {
        stack.merge(register_volume(vf, lf)?);
    }
    let fused = median_fuse(&stack)?;
    let fusion_seconds = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    let center_view = lf.view(s_count / 2, t_count / 2).clone();
    let (disparity, refined) = refine_disparity(&fused, &center_view, &config.refine_params())?;
    let refinement = t2.elapsed().as_secs_f64();

    let depth = disparity_to_depth(&disparity, &lf.calib);
    let total = t_start.elapsed().as_secs_f64();

    let stats = PipelineStats {
        rng_seed: config.rng_seed,
        timings: StageTimings { matching, filtering, fusion: fusion_seconds, refinement, total },
        pyramid_levels_used: levels,
        volumes: volume_flows.len(),
        estimates: stack.maps.len(),
        refine_converged: refined.converged,
        valid_fraction: disparity.valid_fraction(),
    };

    Ok(DepthEstimate { disparity, fused_disparity: fused, depth, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn flat_guide(w: usize, h: usize) -> Image {
        Image::new(w, h, 3, vec![0.5; w * h * 3]).unwrap()
    }

    fn constant_volume(n: usize, w: usize, h: usize, u: f64) -> FlowVolume {
        let guide = Arc::new(flat_guide(w, h));
        FlowVolume {
            flows: vec![Grid::filled(w, h, u); n - 1],
            confidences: vec![Grid::filled(w, h, 1.0); n - 1],
            guides: vec![guide; n],
        }
    }

    #[test]
    fn register_constant_volume() {
        let vol = constant_volume(5, 24, 16, 1.25);
        let stack = register_to_center(&vol, 2, Axis::Row, 0).unwrap();
        assert_eq!(stack.maps.len(), 4);
        for m in &stack.maps {
            // Interior pixels all carry the constant; far-border pixels may
            // walk out of bounds.
            for y in 0..16 {
                for x in 8..16 {
                    assert!((m.at(x, y).unwrap() - 1.25).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn register_two_view_volume_is_the_flow() {
        let mut vol = constant_volume(2, 12, 8, 0.0);
        for (i, v) in vol.flows[0].data.iter_mut().enumerate() {
            *v = (i % 7) as f64 * 0.3 - 1.0;
        }
        let stack = register_to_center(&vol, 0, Axis::Row, 0).unwrap();
        assert_eq!(stack.maps.len(), 1);
        for y in 0..8 {
            for x in 0..12 {
                assert_eq!(stack.maps[0].at(x, y).unwrap(), vol.flows[0].at(x, y));
            }
        }
    }

    fn stack_of(values: &[&[f64]], weights: &[&[f64]], w: usize, h: usize) -> EstimateStack {
        let maps = values
            .iter()
            .map(|v| DisparityMap::from_values(w, h, v.to_vec()).unwrap())
            .collect();
        let wgts = weights
            .iter()
            .map(|v| Grid { width: w, height: h, data: v.to_vec() })
            .collect();
        let provenance = values
            .iter()
            .enumerate()
            .map(|(i, _)| Provenance { axis: Axis::Row, fixed_index: 0, pair_index: i })
            .collect();
        EstimateStack { maps, weights: wgts, provenance }
    }

    #[test]
    fn median_of_identical_estimates() {
        let vals = vec![2.5; 6];
        let wts = vec![1.0; 6];
        let stack = stack_of(&[&vals, &vals, &vals], &[&wts, &wts, &wts], 3, 2);
        let fused = median_fuse(&stack).unwrap();
        for i in 0..6 {
            assert_eq!(fused.values[i], 2.5);
        }
    }

    #[test]
    fn median_rejects_single_outlier() {
        let w = 3;
        let h = 1;
        let a = vec![1.0; 3];
        let b = vec![1.0; 3];
        let c = vec![9.0; 3];
        let wts = vec![1.0; 3];
        let stack = stack_of(&[&a, &b, &c], &[&wts, &wts, &wts], w, h);
        let fused = median_fuse(&stack).unwrap();
        for i in 0..3 {
            assert_eq!(fused.values[i], 1.0);
        }
    }

    #[test]
    fn weighted_median_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(777);
        for _ in 0..200 {
            let n = rng.gen_range(1..=5);
            let mut entries: Vec<(f64, f64)> = (0..n)
                .map(|_| (rng.gen_range(-4.0..4.0), rng.gen_range(0.01..2.0)))
                .collect();
            // Brute force: sort, walk cumulative weights.
            let mut sorted = entries.clone();
            sorted.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
            let total: f64 = sorted.iter().map(|e| e.1).sum();
            let mut acc = 0.0;
            let mut expect = sorted.last().unwrap().0;
            for &(v, wt) in &sorted {
                acc += wt;
                if acc >= 0.5 * total {
                    expect = v;
                    break;
                }
            }
            assert_eq!(weighted_median(&mut entries), Some(expect));
        }
    }

    #[test]
    fn empty_stack_is_no_data() {
        let stack = EstimateStack { maps: vec![], weights: vec![], provenance: vec![] };
        match median_fuse(&stack) {
            Err(Error::NoData(_)) => {}
            other => panic!("expected NoDataError, got {other:?}"),
        }
    }

    #[test]
    fn fused_value_within_estimate_hull() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let (w, h) = (6, 5);
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            (0..w * h).map(|_| rng.gen_range(-2.0..2.0)).collect()
        };
        let (a, b, c) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let wts: Vec<f64> = (0..w * h).map(|_| rng.gen_range(0.1..1.0)).collect();
        let stack = stack_of(&[&a, &b, &c], &[&wts, &wts, &wts], w, h);
        let fused = median_fuse(&stack).unwrap();
        // The spatial median pass keeps values inside the hull of the
        // original per-pixel estimates over the 3x3 neighbourhood.
        for y in 0..h {
            for x in 0..w {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let nx = x as i64 + dx;
                        let ny = y as i64 + dy;
                        if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            continue;
                        }
                        let i = (ny as usize) * w + nx as usize;
                        for m in [&a, &b, &c] {
                            lo = lo.min(m[i]);
                            hi = hi.max(m[i]);
                        }
                    }
                }
                let v = fused.at(x, y).unwrap();
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    fn step_map(w: usize, h: usize, edge: usize, lo: f64, hi: f64) -> Vec<f64> {
        let mut z = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                z[y * w + x] = if x < edge { lo } else { hi };
            }
        }
        z
    }

    fn edge_guide(w: usize, h: usize, edge: usize) -> Image {
        let mut img = Image::zeros(w, h, 3);
        for y in 0..h {
            for x in 0..w {
                let v = if x < edge { 0.2 } else { 0.8 };
                img.set_pixel(x, y, &[v, v, v]);
            }
        }
        img
    }

    #[test]
    fn lambda_zero_is_identity() {
        let (w, h) = (20, 14);
        let z0 = step_map(w, h, 10, 0.0, 1.0);
        let valid = vec![true; w * h];
        let p = RefineParams { lambda: 0.0, ..RefineParams::default() };
        let out = refine_scalar_field(&z0, &valid, &edge_guide(w, h, 10), &p).unwrap();
        assert_eq!(out.values, z0);
        assert_eq!(out.energy_initial, out.energy_final);
    }

    #[test]
    fn constant_init_is_fixed_point() {
        let (w, h) = (16, 12);
        let z0 = vec![1.5; w * h];
        let valid = vec![true; w * h];
        let out =
            refine_scalar_field(&z0, &valid, &flat_guide(w, h), &RefineParams::default()).unwrap();
        for &v in &out.values {
            assert_eq!(v, 1.5);
        }
        assert!(out.energy_final <= out.energy_initial);
    }

    #[test]
    fn noisy_step_improves_without_moving_the_edge() {
        use rand::{Rng, SeedableRng};
        let (w, h) = (48, 32);
        let edge = 24;
        let clean = step_map(w, h, edge, 0.0, 1.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut z0 = clean.clone();
        for v in &mut z0 {
            *v += rng.gen_range(-1.0..1.0) * 0.05 * 3.0f64.sqrt(); // sigma ~ 0.05
        }
        let valid = vec![true; w * h];
        let guide = edge_guide(w, h, edge);
        let out = refine_scalar_field(&z0, &valid, &guide, &RefineParams::default()).unwrap();
        assert!(out.energy_final <= out.energy_initial);

        let rms = |z: &[f64]| {
            (z.iter().zip(&clean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                / z.len() as f64)
                .sqrt()
        };
        assert!(
            rms(&out.values) < rms(&z0),
            "refinement must reduce RMS: {} -> {}",
            rms(&z0),
            rms(&out.values)
        );
        // Edge localization per row: position of the largest jump.
        for y in 0..h {
            let row = &out.values[y * w..(y + 1) * w];
            let mut best = 0;
            let mut best_jump = 0.0;
            for x in 1..w {
                let j = (row[x] - row[x - 1]).abs();
                if j > best_jump {
                    best_jump = j;
                    best = x;
                }
            }
            assert!(
                (best as i64 - edge as i64).abs() <= 1,
                "row {y}: edge at {best}, expected {edge}"
            );
        }
    }

    #[test]
    fn energy_decreases_on_random_maps() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        for case in 0..5 {
            let (w, h) = (20, 15);
            let z0: Vec<f64> = (0..w * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let valid: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(0.9)).collect();
            let guide = flat_guide(w, h);
            let out =
                refine_scalar_field(&z0, &valid, &guide, &RefineParams::default()).unwrap();
            assert!(
                out.energy_final <= out.energy_initial,
                "case {case}: energy {} -> {}",
                out.energy_initial,
                out.energy_final
            );
        }
    }

    #[test]
    fn alpha_is_one_on_flat_init() {
        let (w, h) = (14, 10);
        let z0 = vec![0.7; w * h];
        let valid = vec![true; w * h];
        let alpha = alpha_map(&z0, &valid, &flat_guide(w, h), &RefineParams::default()).unwrap();
        for &a in &alpha {
            assert!((a - 1.0).abs() < 1e-12);
        }
    }
}
