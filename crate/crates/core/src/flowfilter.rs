//! Edge-aware volumetric filtering of sparse flow seeds.
//!
//! All passes are normalized convolutions built on the recursive domain
//! transform: signal x weight and weight are filtered identically and
//! divided at the end, so confidence-weighted sparse seeds densify
//! correctly. The link weight between neighbouring samples is
//! `a^dt` with `a = exp(-sqrt(2) / sigma)` and domain distance
//! `dt = 1 + (sigma / sigma_r) * |guide step|_1`; one forward and one
//! backward recursive pass realize the full geodesic kernel.
//!
//! The angular pass runs the same recursion across the flow maps of a
//! volume, following each pixel's disparity path, which pulls the per-pair
//! estimates toward a single consistent answer.

use crate::cpm::SparseMatchSet;
use crate::error::{Error, Result};
use crate::image::{Image, ImageRef};
use crate::maps::Grid;

/// Kernel widths for the three filtering dimensions.
#[derive(Debug, Clone, Copy)]
pub struct DtParams {
    /// Spatial width in pixels.
    pub sigma_s: f64,
    /// Range width in color units (on [0,1] channels).
    pub sigma_r: f64,
    /// Angular width in views.
    pub sigma_a: f64,
    /// Interleaved spatial/angular rounds.
    pub iterations: usize,
}

impl Default for DtParams {
    fn default() -> Self {
        DtParams { sigma_s: 30.0, sigma_r: 0.08, sigma_a: 0.8, iterations: 3 }
    }
}

impl DtParams {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_s <= 0.0 || self.sigma_r <= 0.0 || self.sigma_a <= 0.0 {
            return Err(Error::Config("domain-transform widths must be positive".into()));
        }
        if self.iterations < 1 {
            return Err(Error::Config("domain-transform needs at least one iteration".into()));
        }
        Ok(())
    }

    /// Per-iteration spatial width, shrinking so the cascade of recursive
    /// passes approximates one kernel of width `sigma_s`.
    pub fn sigma_for_iteration(&self, i: usize) -> f64 {
        let n = self.iterations as i32;
        self.sigma_s * 3.0f64.sqrt() * 2.0f64.powi(n - i as i32)
            / (4.0f64.powi(n) - 1.0).sqrt()
    }
}

/// In-place forward+backward recursive accumulation over one sequence:
/// `out[i] = sum_j (prod of links between j and i) * values[j]`.
/// `links[m]` couples samples m and m+1; `scratch` must hold n elements.
fn accumulate(values: &mut [f64], links: &[f64], scratch: &mut [f64]) {
    let n = values.len();
    debug_assert_eq!(links.len(), n.saturating_sub(1));
    if n <= 1 {
        return;
    }
    // Backward chain into scratch.
    scratch[n - 1] = values[n - 1];
    for i in (0..n - 1).rev() {
        scratch[i] = values[i] + links[i] * scratch[i + 1];
    }
    // Forward chain in place, then add the strictly-later contributions.
    for i in 1..n {
        values[i] += links[i - 1] * values[i - 1];
    }
    for i in 0..n - 1 {
        values[i] += links[i] * scratch[i + 1];
    }
}

fn link_from_guide_step(diff_l1: f64, sigma: f64, sigma_r: f64) -> f64 {
    let a = (-std::f64::consts::SQRT_2 / sigma).exp();
    a.powf(1.0 + (sigma / sigma_r) * diff_l1)
}

/// Confidence-weighted edge-aware smoothing of a 1D signal: the recursive
/// domain transform applied to signal x weight and weight, then divided.
/// Every output sample is a convex combination of positively-weighted
/// inputs.
pub fn domain_transform_1d(
    signal: &[f64],
    weights: &[f64],
    guide: &[f64],
    sigma_s: f64,
    sigma_r: f64,
) -> Result<Vec<f64>> {
    let n = signal.len();
    if n == 0 || weights.len() != n || guide.len() != n {
        return Err(Error::Structure("signal, weights and guide lengths must match".into()));
    }
    if weights.iter().all(|&w| w == 0.0) {
        return Err(Error::NoData("all-zero weights".into()));
    }
    let links: Vec<f64> = (1..n)
        .map(|i| link_from_guide_step((guide[i] - guide[i - 1]).abs(), sigma_s, sigma_r))
        .collect();
    let mut num: Vec<f64> = signal.iter().zip(weights).map(|(&s, &w)| s * w).collect();
    let mut den = weights.to_vec();
    let mut scratch = vec![0.0; n];
    accumulate(&mut num, &links, &mut scratch);
    accumulate(&mut den, &links, &mut scratch);
    Ok(num.iter().zip(&den).map(|(&a, &b)| if b > 0.0 { a / b } else { 0.0 }).collect())
}

/// Link weights between horizontally adjacent pixels; entry (x, y) couples
/// (x-1, y) and (x, y), column 0 unused.
fn horizontal_links(guide: &Image, sigma: f64, sigma_r: f64) -> Grid {
    let (w, h) = (guide.width(), guide.height());
    let a = (-std::f64::consts::SQRT_2 / sigma).exp();
    let ratio = sigma / sigma_r;
    let mut out = Grid::zeros(w, h);
    for y in 0..h {
        for x in 1..w {
            let p = guide.pixel(x, y);
            let q = guide.pixel(x - 1, y);
            let mut diff = 0.0f64;
            for c in 0..guide.channels() {
                diff += (p[c] as f64 - q[c] as f64).abs();
            }
            out.set(x, y, a.powf(1.0 + ratio * diff));
        }
    }
    out
}

fn vertical_links(guide: &Image, sigma: f64, sigma_r: f64) -> Grid {
    let (w, h) = (guide.width(), guide.height());
    let a = (-std::f64::consts::SQRT_2 / sigma).exp();
    let ratio = sigma / sigma_r;
    let mut out = Grid::zeros(w, h);
    for y in 1..h {
        for x in 0..w {
            let p = guide.pixel(x, y);
            let q = guide.pixel(x, y - 1);
            let mut diff = 0.0f64;
            for c in 0..guide.channels() {
                diff += (p[c] as f64 - q[c] as f64).abs();
            }
            out.set(x, y, a.powf(1.0 + ratio * diff));
        }
    }
    out
}

fn horizontal_pass(plane: &mut Grid, links: &Grid) {
    let (w, h) = (plane.width, plane.height);
    let mut scratch = vec![0.0; w];
    for y in 0..h {
        let row = &mut plane.data[y * w..(y + 1) * w];
        let l = &links.data[y * w + 1..(y + 1) * w];
        accumulate(row, l, &mut scratch);
    }
}

fn vertical_pass(plane: &mut Grid, links: &Grid) {
    let (w, h) = (plane.width, plane.height);
    let mut col = vec![0.0; h];
    let mut l = vec![0.0; h.saturating_sub(1)];
    let mut scratch = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = plane.data[y * w + x];
        }
        for y in 1..h {
            l[y - 1] = links.data[y * w + x];
        }
        accumulate(&mut col, &l, &mut scratch);
        for y in 0..h {
            plane.data[y * w + x] = col[y];
        }
    }
}

/// One spatial round (horizontal then vertical) applied consistently to a
/// set of planes sharing one guide.
fn spatial_round(planes: &mut [&mut Grid], guide: &Image, sigma: f64, sigma_r: f64) {
    let hl = horizontal_links(guide, sigma, sigma_r);
    for p in planes.iter_mut() {
        horizontal_pass(p, &hl);
    }
    let vl = vertical_links(guide, sigma, sigma_r);
    for p in planes.iter_mut() {
        vertical_pass(p, &vl);
    }
}

/// Weighted edge-aware smoothing of a 2D scalar field: iterated
/// horizontal/vertical normalized convolution guided by a color image.
/// Zero-weight samples are interpolated from positively-weighted ones.
pub fn guided_filter(
    values: &Grid,
    weights: &Grid,
    guide: &Image,
    sigma_s: f64,
    sigma_r: f64,
    iterations: usize,
) -> Result<Grid> {
    let params = DtParams { sigma_s, sigma_r, sigma_a: 1.0, iterations };
    params.validate()?;
    if weights.data.iter().all(|&w| w == 0.0) {
        return Err(Error::NoData("all-zero weights".into()));
    }
    let (w, h) = (values.width, values.height);
    let mut num = values.clone();
    for (v, c) in num.data.iter_mut().zip(&weights.data) {
        *v *= c;
    }
    let mut den = weights.clone();
    for i in 1..=iterations {
        let sigma = params.sigma_for_iteration(i);
        spatial_round(&mut [&mut num, &mut den], guide, sigma, sigma_r);
    }
    let mut out = Grid::zeros(w, h);
    for i in 0..w * h {
        out.data[i] = if den.data[i] > 0.0 { num.data[i] / den.data[i] } else { 0.0 };
    }
    Ok(out)
}

/// Diffuse sparse matches into a dense flow map by iterated edge-aware
/// normalized convolution, weighting each seed by its confidence.
pub fn densify_spatial(
    sparse: &SparseMatchSet,
    confidence: &Grid,
    guide: &Image,
    params: &DtParams,
) -> Result<Grid> {
    params.validate()?;
    let (w, h) = (guide.width(), guide.height());
    let mut values = Grid::zeros(w, h);
    let mut weights = Grid::zeros(w, h);
    let mut total = 0.0;
    for m in &sparse.matches {
        let c = confidence.at(m.x as usize, m.y as usize);
        values.set(m.x as usize, m.y as usize, m.u);
        weights.set(m.x as usize, m.y as usize, c);
        total += c;
    }
    if total <= 0.0 {
        return Err(Error::NoData("no positively-weighted seeds to densify".into()));
    }
    guided_filter(&values, &weights, guide, params.sigma_s, params.sigma_r, params.iterations)
}

/// Dense per-pair flows over a spatio-angular volume. `flows[n]` registers
/// view n to view n+1 (u component along the traversed axis); guides are
/// the N views in traversal order.
#[derive(Debug, Clone)]
pub struct FlowVolume {
    pub flows: Vec<Grid>,
    pub confidences: Vec<Grid>,
    pub guides: Vec<ImageRef>,
}

impl FlowVolume {
    fn validate(&self) -> Result<()> {
        if self.guides.len() < 2 || self.flows.len() != self.guides.len() - 1 {
            return Err(Error::Structure(format!(
                "flow volume with {} guides and {} flows",
                self.guides.len(),
                self.flows.len()
            )));
        }
        if self.confidences.len() != self.flows.len() {
            return Err(Error::Structure("one confidence map per flow required".into()));
        }
        Ok(())
    }
}

/// State for the recursive pass along the angular axis: per pair, a set of
/// planes filtered with shared link weights that follow the disparity path.
struct AngularPlanes<'a> {
    planes: Vec<Vec<Grid>>,
    ratios: &'a [Grid],
    guides: &'a [ImageRef],
}

fn angular_link(
    guides: &[ImageRef],
    from: usize,
    to: usize,
    x: usize,
    y: usize,
    src_x: f64,
    sigma_a: f64,
    sigma_r: f64,
) -> f64 {
    let diff = Image::l1_color_diff(&guides[from], x, y, &guides[to], src_x, y as f64);
    link_from_guide_step(diff, sigma_a, sigma_r)
}

/// One forward + backward recursive sweep across the pairs of a volume.
/// Pixel (x, y) of pair n couples to (x - d, y) of pair n-1 and
/// (x + d, y) of pair n+1, where d is the current flow at (x, y);
/// out-of-bounds warps contribute zero weight.
fn angular_sweep(state: &mut AngularPlanes<'_>, sigma_a: f64, sigma_r: f64) {
    let pairs = state.planes.len();
    if pairs < 2 {
        return;
    }
    let nplanes = state.planes[0].len();
    let (w, h) = (state.planes[0][0].width, state.planes[0][0].height);
    let wmax = (w - 1) as f64;

    // Forward accumulation (from lower pair indices).
    let mut fwd: Vec<Vec<Grid>> = Vec::with_capacity(pairs);
    fwd.push(state.planes[0].clone());
    for n in 1..pairs {
        let mut acc: Vec<Grid> = state.planes[n].clone();
        for y in 0..h {
            for x in 0..w {
                let d = state.ratios[n].at(x, y);
                let src = x as f64 - d;
                if !(0.0..=wmax).contains(&src) {
                    continue;
                }
                let wgt = angular_link(state.guides, n, n - 1, x, y, src, sigma_a, sigma_r);
                for p in 0..nplanes {
                    let v = fwd[n - 1][p].sample_bilinear(src, y as f64);
                    acc[p].data[y * w + x] += wgt * v;
                }
            }
        }
        fwd.push(acc);
    }

    // Backward accumulation, merged in place: out = fwd + bwd - own.
    let mut bwd_prev: Vec<Grid> = state.planes[pairs - 1].clone();
    for n in (0..pairs - 1).rev() {
        let mut bwd_cur: Vec<Grid> = state.planes[n].clone();
        for y in 0..h {
            for x in 0..w {
                let d = state.ratios[n].at(x, y);
                let src = x as f64 + d;
                if !(0.0..=wmax).contains(&src) {
                    continue;
                }
                let wgt = angular_link(state.guides, n, n + 1, x, y, src, sigma_a, sigma_r);
                for p in 0..nplanes {
                    let v = bwd_prev[p].sample_bilinear(src, y as f64);
                    bwd_cur[p].data[y * w + x] += wgt * v;
                }
            }
        }
        for p in 0..nplanes {
            for i in 0..w * h {
                fwd[n][p].data[i] += bwd_cur[p].data[i] - state.planes[n][p].data[i];
            }
        }
        bwd_prev = bwd_cur;
    }
    state.planes = fwd;
}

/// Re-filter already-dense flows along the angular dimension only: each
/// flow becomes a confidence-weighted blend of itself and its angular
/// neighbours sampled along the disparity path.
pub fn propagate_angular(vol: &FlowVolume, params: &DtParams) -> Result<FlowVolume> {
    params.validate()?;
    vol.validate()?;
    let pairs = vol.flows.len();
    if pairs == 1 {
        return Ok(vol.clone());
    }
    let planes: Vec<Vec<Grid>> = (0..pairs)
        .map(|n| {
            let mut num = vol.flows[n].clone();
            for (v, c) in num.data.iter_mut().zip(&vol.confidences[n].data) {
                *v *= c;
            }
            vec![num, vol.confidences[n].clone()]
        })
        .collect();
    let ratios: Vec<Grid> = vol.flows.clone();
    let mut state = AngularPlanes { planes, ratios: &ratios, guides: &vol.guides };
    angular_sweep(&mut state, params.sigma_a, params.sigma_r);

    let mut out = vol.clone();
    for n in 0..pairs {
        let num = &state.planes[n][0];
        let den = &state.planes[n][1];
        for i in 0..num.data.len() {
            if den.data[i] > 0.0 {
                out.flows[n].data[i] = num.data[i] / den.data[i];
            }
        }
    }
    Ok(out)
}

/// Full volumetric filtering stage: embed each pair's sparse seeds, then run
/// `iterations` rounds of horizontal, vertical and angular passes over the
/// shared (signal x weight, weight) planes, dividing once at the end.
/// Returns dense flows and densified confidences.
pub fn feature_flow(
    guides: &[ImageRef],
    sparse: &[SparseMatchSet],
    confidences: &[Grid],
    params: &DtParams,
) -> Result<FlowVolume> {
    params.validate()?;
    if guides.len() < 2 || sparse.len() != guides.len() - 1 || confidences.len() != sparse.len() {
        return Err(Error::Structure(format!(
            "feature flow needs N guides, N-1 sparse sets and confidences; got {}, {}, {}",
            guides.len(),
            sparse.len(),
            confidences.len()
        )));
    }
    let (w, h) = (guides[0].width(), guides[0].height());
    let pairs = sparse.len();

    // Planes per pair: [flow * conf, conf, conf * conf]; the third densifies
    // the confidence itself for downstream fusion weights.
    let mut planes: Vec<Vec<Grid>> = Vec::with_capacity(pairs);
    for n in 0..pairs {
        let mut num = Grid::zeros(w, h);
        let mut den = Grid::zeros(w, h);
        let mut numc = Grid::zeros(w, h);
        let mut total = 0.0;
        for m in &sparse[n].matches {
            let c = confidences[n].at(m.x as usize, m.y as usize);
            num.set(m.x as usize, m.y as usize, m.u * c);
            den.set(m.x as usize, m.y as usize, c);
            numc.set(m.x as usize, m.y as usize, c * c);
            total += c;
        }
        if total <= 0.0 {
            return Err(Error::NoData(format!("pair {n} has no positively-weighted seeds")));
        }
        planes.push(vec![num, den, numc]);
    }

    for i in 1..=params.iterations {
        let sigma = params.sigma_for_iteration(i);
        for (n, pl) in planes.iter_mut().enumerate() {
            let [num, den, numc] = &mut pl[..] else { unreachable!() };
            spatial_round(&mut [num, den, numc], &guides[n], sigma, params.sigma_r);
        }
        // Current flow estimates steer the angular warp.
        let ratios: Vec<Grid> = planes
            .iter()
            .map(|pl| {
                let mut r = Grid::zeros(w, h);
                for i in 0..w * h {
                    if pl[1].data[i] > 0.0 {
                        r.data[i] = pl[0].data[i] / pl[1].data[i];
                    }
                }
                r
            })
            .collect();
        let mut state = AngularPlanes { planes, ratios: &ratios, guides };
        angular_sweep(&mut state, params.sigma_a, params.sigma_r);
        planes = state.planes;
    }

    let mut flows = Vec::with_capacity(pairs);
    let mut confs = Vec::with_capacity(pairs);
    for pl in &planes {
        let mut f = Grid::zeros(w, h);
        let mut c = Grid::zeros(w, h);
        for i in 0..w * h {
            if pl[1].data[i] > 0.0 {
                f.data[i] = pl[0].data[i] / pl[1].data[i];
                c.data[i] = (pl[2].data[i] / pl[1].data[i]).clamp(0.0, 1.0);
            }
        }
        flows.push(f);
        confs.push(c);
    }
    Ok(FlowVolume { flows, confidences: confs, guides: guides.to_vec() })
}
