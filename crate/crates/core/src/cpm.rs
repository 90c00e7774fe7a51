//! Coarse-to-fine patch matching: sparse correspondences between a pair of
//! rectified views, searched on a seed grid with neighbor propagation and
//! shrinking random search, refined level by level down an image pyramid.
//! For rectified light-field views the search is restricted to the
//! (horizontal) epipolar line.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::descriptor::{self, DescriptorField, DescriptorParams, SUPPORT};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::maps::Grid;

/// Image pyramid; `levels[0]` is the original image and each subsequent
/// level shrinks both dimensions by the factor (ceil rounding).
#[derive(Debug, Clone)]
pub struct Pyramid {
    pub levels: Vec<Image>,
    pub factor: f64,
}

/// Largest level count `k' <= k` whose coarsest level still fits the
/// descriptor support. Returns 0 if even the original image is too small.
pub fn max_usable_levels(width: usize, height: usize, k: usize, eta: f64) -> usize {
    let (mut w, mut h) = (width, height);
    let mut usable = 0;
    for level in 0..k {
        if w < SUPPORT || h < SUPPORT {
            break;
        }
        usable = level + 1;
        w = (w as f64 * eta).ceil() as usize;
        h = (h as f64 * eta).ceil() as usize;
    }
    usable
}

/// Build a `k`-level pyramid with downsampling factor `eta`, low-pass
/// prefiltering before each bilinear resample.
pub fn build_pyramid(img: &Image, k: usize, eta: f64) -> Result<Pyramid> {
    if k < 1 {
        return Err(Error::Config("pyramid needs at least one level".into()));
    }
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::Config(format!("downsampling factor {eta} outside (0, 1)")));
    }
    if max_usable_levels(img.width(), img.height(), k, eta) < k {
        return Err(Error::Size(format!(
            "{}x{} image cannot hold {k} pyramid levels above the {SUPPORT}px descriptor support",
            img.width(),
            img.height()
        )));
    }
    let mut levels = vec![img.clone()];
    let sigma = 0.5 * (1.0 / (eta * eta) - 1.0).sqrt();
    for _ in 1..k {
        let prev = levels.last().unwrap();
        let nw = (prev.width() as f64 * eta).ceil() as usize;
        let nh = (prev.height() as f64 * eta).ceil() as usize;
        let blurred = prev.gaussian_blur(sigma);
        let sx = prev.width() as f64 / nw as f64;
        let sy = prev.height() as f64 / nh as f64;
        let mut out = Image::zeros(nw, nh, prev.channels());
        for y in 0..nh {
            for x in 0..nw {
                let ix = (x as f64 + 0.5) * sx - 0.5;
                let iy = (y as f64 + 0.5) * sy - 0.5;
                for c in 0..prev.channels() {
                    let v = blurred.sample_bilinear(ix, iy, c) as f32;
                    let i = (y * nw + x) * prev.channels() + c;
                    out.data_mut()[i] = v;
                }
            }
        }
        levels.push(out);
    }
    Ok(Pyramid { levels, factor: eta })
}

/// Regular seed lattice over an image.
#[derive(Debug, Clone)]
pub struct SeedGrid {
    pub width: usize,
    pub height: usize,
    pub spacing: usize,
    pub margin: usize,
    pub nx: usize,
    pub ny: usize,
    pub positions: Vec<(u32, u32)>,
}

impl SeedGrid {
    pub fn new(width: usize, height: usize, spacing: usize) -> Result<Self> {
        let margin = 2usize;
        if spacing == 0 || width < 2 * margin + 1 || height < 2 * margin + 1 {
            return Err(Error::Size(format!(
                "image {width}x{height} too small for seed grid with spacing {spacing}"
            )));
        }
        let nx = (width - 2 * margin - 1) / spacing + 1;
        let ny = (height - 2 * margin - 1) / spacing + 1;
        let mut positions = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                positions.push(((margin + i * spacing) as u32, (margin + j * spacing) as u32));
            }
        }
        Ok(SeedGrid { width, height, spacing, margin, nx, ny, positions })
    }

    /// Same lattice with positions scaled into a coarser level's frame.
    pub fn scaled(&self, width: usize, height: usize) -> SeedGrid {
        let fx = width as f64 / self.width as f64;
        let fy = height as f64 / self.height as f64;
        let positions = self
            .positions
            .iter()
            .map(|&(x, y)| {
                (
                    ((x as f64 * fx).round() as usize).min(width - 1) as u32,
                    ((y as f64 * fy).round() as usize).min(height - 1) as u32,
                )
            })
            .collect();
        SeedGrid {
            width,
            height,
            spacing: ((self.spacing as f64 * fx).round() as usize).max(1),
            margin: self.margin,
            nx: self.nx,
            ny: self.ny,
            positions,
        }
    }

    /// Index of the lattice seed nearest to an arbitrary position.
    pub fn nearest_index(&self, x: f64, y: f64) -> usize {
        let i = ((x - self.margin as f64) / self.spacing as f64).round() as i64;
        let j = ((y - self.margin as f64) / self.spacing as f64).round() as i64;
        let i = i.clamp(0, self.nx as i64 - 1) as usize;
        let j = j.clamp(0, self.ny as i64 - 1) as usize;
        j * self.nx + i
    }
}

/// One seed's correspondence: target = (x + u, y + v).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparseMatch {
    pub x: u32,
    pub y: u32,
    pub u: f64,
    pub v: f64,
    pub cost: f64,
}

/// Matches for (a subset of) a seed grid.
#[derive(Debug, Clone)]
pub struct SparseMatchSet {
    pub width: usize,
    pub height: usize,
    pub spacing: usize,
    pub margin: usize,
    pub nx: usize,
    pub ny: usize,
    pub matches: Vec<SparseMatch>,
}

impl SparseMatchSet {
    /// True when the set still carries one match per lattice seed.
    pub fn is_grid_complete(&self) -> bool {
        self.matches.len() == self.nx * self.ny
    }

    /// Grid lookup of the match whose seed is nearest to a position.
    /// Requires a grid-complete set.
    pub fn nearest(&self, x: f64, y: f64) -> &SparseMatch {
        debug_assert!(self.is_grid_complete());
        let i = ((x - self.margin as f64) / self.spacing as f64).round() as i64;
        let j = ((y - self.margin as f64) / self.spacing as f64).round() as i64;
        let i = i.clamp(0, self.nx as i64 - 1) as usize;
        let j = j.clamp(0, self.ny as i64 - 1) as usize;
        &self.matches[j * self.nx + i]
    }

    /// Plain-text dump, one line per seed: `x y u v cost confidence`.
    pub fn dump(&self, confidence: Option<&Grid>) -> String {
        let mut out = String::new();
        for m in &self.matches {
            let c = confidence
                .map(|g| g.at(m.x as usize, m.y as usize))
                .unwrap_or(0.0);
            out.push_str(&format!("{} {} {} {} {} {}\n", m.x, m.y, m.u, m.v, m.cost, c));
        }
        out
    }
}

/// Search-space controls for one matching level.
#[derive(Debug, Clone, Copy)]
pub struct SearchParams {
    /// Restrict candidates to the horizontal epipolar line (v = 0).
    pub epipolar: bool,
    /// Bound on |u| (and |v| off the epipolar line); also the initial
    /// random-search radius.
    pub window_radius: f64,
    /// Alternating propagation scans per level.
    pub iterations: usize,
    /// Descriptor patch radius (1 = 3x3 patch).
    pub patch_radius: usize,
    pub rng_seed: u64,
}

/// SAD between the descriptor patches centered on `p1` and `p2`; patch
/// samples are clamped at image borders.
pub fn match_cost(
    d1: &DescriptorField,
    p1: (i64, i64),
    d2: &DescriptorField,
    p2: (i64, i64),
    patch_radius: usize,
) -> f64 {
    debug_assert_eq!(d1.dim, d2.dim);
    let r = patch_radius as i64;
    let mut cost = 0.0f64;
    for dy in -r..=r {
        for dx in -r..=r {
            let q1x = (p1.0 + dx).clamp(0, d1.width as i64 - 1) as usize;
            let q1y = (p1.1 + dy).clamp(0, d1.height as i64 - 1) as usize;
            let q2x = (p2.0 + dx).clamp(0, d2.width as i64 - 1) as usize;
            let q2y = (p2.1 + dy).clamp(0, d2.height as i64 - 1) as usize;
            let a = d1.desc(q1x, q1y);
            let b = d2.desc(q2x, q2y);
            for i in 0..d1.dim {
                cost += (a[i] - b[i]).abs() as f64;
            }
        }
    }
    cost
}

struct SeedState {
    x: u32,
    y: u32,
    u: f64,
    v: f64,
    cost: f64,
}

fn try_candidate(
    state: &mut SeedState,
    u: f64,
    v: f64,
    d1: &DescriptorField,
    d2: &DescriptorField,
    p: &SearchParams,
) {
    if u.abs() > p.window_radius || v.abs() > p.window_radius {
        return;
    }
    let tx = state.x as i64 + u as i64;
    let ty = state.y as i64 + v as i64;
    if tx < 0 || ty < 0 || tx >= d2.width as i64 || ty >= d2.height as i64 {
        return;
    }
    let cost = match_cost(d1, (state.x as i64, state.y as i64), d2, (tx, ty), p.patch_radius);
    if cost < state.cost {
        state.u = u;
        state.v = v;
        state.cost = cost;
    }
}

/// One level of patch matching over a seed grid. `init` must hold one match
/// per seed (costs are re-evaluated against this level's descriptors);
/// `None` draws a random initialization inside the search window. Returned
/// per-seed costs never exceed the initialization costs.
pub fn patchmatch_level(
    d1: &DescriptorField,
    d2: &DescriptorField,
    seeds: &SeedGrid,
    init: Option<&SparseMatchSet>,
    params: &SearchParams,
) -> SparseMatchSet {
    patchmatch_level_traced(d1, d2, seeds, init, params, None)
}

/// Like [`patchmatch_level`] but optionally records per-seed costs after
/// initialization and after every scan, for monotonicity checks.
pub fn patchmatch_level_traced(
    d1: &DescriptorField,
    d2: &DescriptorField,
    seeds: &SeedGrid,
    init: Option<&SparseMatchSet>,
    params: &SearchParams,
    mut trace: Option<&mut Vec<Vec<f64>>>,
) -> SparseMatchSet {
    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
    let w = d1.width as i64;

    let mut states: Vec<SeedState> = seeds
        .positions
        .iter()
        .enumerate()
        .map(|(idx, &(x, y))| {
            let (u, v) = match init {
                Some(set) => {
                    debug_assert!(set.is_grid_complete());
                    (set.matches[idx].u.round(), set.matches[idx].v.round())
                }
                None => {
                    let r = params.window_radius;
                    let lo = (-r).max(-(x as f64));
                    let hi = r.min((w - 1 - x as i64) as f64);
                    let u = if hi > lo { rng.gen_range(lo..=hi).round() } else { 0.0 };
                    let v = if params.epipolar {
                        0.0
                    } else {
                        let vlo = (-r).max(-(y as f64));
                        let vhi = r.min((d1.height as i64 - 1 - y as i64) as f64);
                        if vhi > vlo { rng.gen_range(vlo..=vhi).round() } else { 0.0 }
                    };
                    (u, v)
                }
            };
            let tx = (x as i64 + u as i64).clamp(0, d2.width as i64 - 1);
            let ty = (y as i64 + v as i64).clamp(0, d2.height as i64 - 1);
            let cost = match_cost(d1, (x as i64, y as i64), d2, (tx, ty), params.patch_radius);
            SeedState { x, y, u: (tx - x as i64) as f64, v: (ty - y as i64) as f64, cost }
        })
        .collect();

    if let Some(t) = trace.as_deref_mut() {
        t.push(states.iter().map(|s| s.cost).collect());
    }

    let (nx, ny) = (seeds.nx, seeds.ny);
    for iter in 0..params.iterations {
        let forward = iter % 2 == 0;
        let order: Vec<usize> =
            if forward { (0..nx * ny).collect() } else { (0..nx * ny).rev().collect() };
        for idx in order {
            let (i, j) = (idx % nx, idx / nx);
            // Propagation from neighbors already visited in this scan.
            let neighbors: [Option<usize>; 2] = if forward {
                [
                    if i > 0 { Some(idx - 1) } else { None },
                    if j > 0 { Some(idx - nx) } else { None },
                ]
            } else {
                [
                    if i + 1 < nx { Some(idx + 1) } else { None },
                    if j + 1 < ny { Some(idx + nx) } else { None },
                ]
            };
            for n in neighbors.into_iter().flatten() {
                let (u, v) = (states[n].u, states[n].v);
                try_candidate(&mut states[idx], u, v, d1, d2, params);
            }
            // Random search around the current best with shrinking radius.
            let mut radius = params.window_radius;
            while radius >= 1.0 {
                let du = rng.gen_range(-radius..=radius).round();
                let dv = if params.epipolar { 0.0 } else { rng.gen_range(-radius..=radius).round() };
                let (u, v) = (states[idx].u + du, states[idx].v + dv);
                try_candidate(&mut states[idx], u, v, d1, d2, params);
                radius /= 2.0;
            }
        }
        if let Some(t) = trace.as_deref_mut() {
            t.push(states.iter().map(|s| s.cost).collect());
        }
    }

    SparseMatchSet {
        width: seeds.width,
        height: seeds.height,
        spacing: seeds.spacing,
        margin: seeds.margin,
        nx,
        ny,
        matches: states
            .into_iter()
            .map(|s| SparseMatch { x: s.x, y: s.y, u: s.u, v: s.v, cost: s.cost })
            .collect(),
    }
}

/// Full coarse-to-fine matching parameters.
#[derive(Debug, Clone)]
pub struct CpmParams {
    pub levels: usize,
    pub eta: f64,
    pub seed_spacing: usize,
    pub iterations: usize,
    pub patch_radius: usize,
    /// Full-resolution cap on |u|; `None` uses the image extent per level.
    pub max_search_radius: Option<f64>,
    /// Forward-backward rejection threshold in pixels.
    pub tau_fb: f64,
    /// Confidence falloff in pixels.
    pub sigma_c: f64,
    pub subpixel: bool,
    pub epipolar: bool,
    pub descriptor: DescriptorParams,
    pub rng_seed: u64,
}

impl Default for CpmParams {
    fn default() -> Self {
        CpmParams {
            levels: 5,
            eta: 0.5,
            seed_spacing: 3,
            iterations: 6,
            patch_radius: 1,
            max_search_radius: None,
            tau_fb: 1.5,
            sigma_c: 1.0,
            subpixel: true,
            epipolar: true,
            descriptor: DescriptorParams::default(),
            rng_seed: 0,
        }
    }
}

/// Matching output for one view pair, keeping both directions so the caller
/// can derive confidences without matching again.
#[derive(Debug, Clone)]
pub struct CpmPairMatch {
    /// Forward matches surviving the consistency filter.
    pub fwd: SparseMatchSet,
    /// Full forward grid (pre-filter).
    pub fwd_full: SparseMatchSet,
    /// Full backward grid.
    pub bwd_full: SparseMatchSet,
}

fn mix_seed(base: u64, salt: u64) -> u64 {
    // splitmix64 step; decorrelates per-level/per-direction streams.
    let mut z = base ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn run_pyramid_direction(
    pyr_src: &Pyramid,
    desc_src: &[DescriptorField],
    desc_dst: &[DescriptorField],
    grid: &SeedGrid,
    params: &CpmParams,
    dir_salt: u64,
) -> SparseMatchSet {
    let k = pyr_src.levels.len();
    let mut prev: Option<SparseMatchSet> = None;
    for level in (0..k).rev() {
        let img = &pyr_src.levels[level];
        let level_grid = if level == 0 {
            grid.clone()
        } else {
            grid.scaled(img.width(), img.height())
        };
        let radius = match params.max_search_radius {
            Some(r) => r * params.eta.powi(level as i32),
            None => img.width().max(img.height()) as f64,
        };
        let sp = SearchParams {
            epipolar: params.epipolar,
            window_radius: radius,
            iterations: params.iterations,
            patch_radius: params.patch_radius,
            rng_seed: mix_seed(params.rng_seed, dir_salt * 1000 + level as u64),
        };
        // Upscale the coarser level's flow into this level's frame.
        let init = prev.map(|p| {
            let scale = img.width() as f64 / pyr_src.levels[level + 1].width() as f64;
            let mut up = p.clone();
            up.width = img.width();
            up.height = img.height();
            for (m, &(x, y)) in up.matches.iter_mut().zip(&level_grid.positions) {
                m.x = x;
                m.y = y;
                m.u = (m.u * scale).round();
                m.v = (m.v * scale).round();
            }
            up
        });
        prev = Some(patchmatch_level(
            &desc_src[level],
            &desc_dst[level],
            &level_grid,
            init.as_ref(),
            &sp,
        ));
    }
    let mut set = prev.unwrap();
    if params.subpixel {
        subpixel_refine(&mut set, &desc_src[0], &desc_dst[0], params);
    }
    set
}

/// One parabola fit over the costs at u-1, u, u+1 along the epipolar line.
fn subpixel_refine(
    set: &mut SparseMatchSet,
    d1: &DescriptorField,
    d2: &DescriptorField,
    params: &CpmParams,
) {
    let w = d2.width as i64;
    for m in &mut set.matches {
        let (x, y) = (m.x as i64, m.y as i64);
        let ty = y + m.v as i64;
        let tx = x + m.u as i64;
        if tx - 1 < 0 || tx + 1 >= w {
            continue;
        }
        let c0 = m.cost;
        if c0 == 0.0 {
            continue; // exact match, nothing to refine
        }
        let cm = match_cost(d1, (x, y), d2, (tx - 1, ty), params.patch_radius);
        let cp = match_cost(d1, (x, y), d2, (tx + 1, ty), params.patch_radius);
        let denom = cm - 2.0 * c0 + cp;
        if denom > 1e-12 {
            let delta = (0.5 * (cm - cp) / denom).clamp(-0.5, 0.5);
            m.u += delta;
        }
    }
}

/// Match a pair of equal-size rectified views coarse-to-fine in both
/// directions and filter forward matches by forward-backward consistency.
pub fn cpm_match_pair(i1: &Image, i2: &Image, params: &CpmParams) -> Result<CpmPairMatch> {
    if i1.width() != i2.width() || i1.height() != i2.height() {
        return Err(Error::Structure(format!(
            "view pair sizes differ: {}x{} vs {}x{}",
            i1.width(),
            i1.height(),
            i2.width(),
            i2.height()
        )));
    }
    let p1 = build_pyramid(i1, params.levels, params.eta)?;
    let p2 = build_pyramid(i2, params.levels, params.eta)?;
    let d1: Vec<DescriptorField> = p1
        .levels
        .iter()
        .map(|im| descriptor::compute_descriptors(im, &params.descriptor))
        .collect::<Result<_>>()?;
    let d2: Vec<DescriptorField> = p2
        .levels
        .iter()
        .map(|im| descriptor::compute_descriptors(im, &params.descriptor))
        .collect::<Result<_>>()?;
    let grid = SeedGrid::new(i1.width(), i1.height(), params.seed_spacing)?;

    let fwd_full = run_pyramid_direction(&p1, &d1, &d2, &grid, params, 1);
    let bwd_full = run_pyramid_direction(&p2, &d2, &d1, &grid, params, 2);

    let mut fwd = fwd_full.clone();
    fwd.matches.retain(|m| {
        let b = bwd_full.nearest(m.x as f64 + m.u, m.y as f64 + m.v);
        (m.u + b.u).abs() + (m.v + b.v).abs() <= params.tau_fb
    });
    Ok(CpmPairMatch { fwd, fwd_full, bwd_full })
}

/// Spec-level entry point: consistency-filtered forward matches only.
pub fn cpm_match(i1: &Image, i2: &Image, params: &CpmParams) -> Result<SparseMatchSet> {
    Ok(cpm_match_pair(i1, i2, params)?.fwd)
}

/// Dense confidence map from forward-backward agreement:
/// `exp(-|fwd(x) + bwd(x + fwd(x))|_1 / sigma_c)` at seed pixels, 0 elsewhere.
pub fn flow_confidence(fwd: &SparseMatchSet, bwd: &SparseMatchSet, sigma_c: f64) -> Grid {
    let mut out = Grid::zeros(fwd.width, fwd.height);
    for m in &fwd.matches {
        let b = bwd.nearest(m.x as f64 + m.u, m.y as f64 + m.v);
        let diff = (m.u + b.u).abs() + (m.v + b.v).abs();
        out.set(m.x as usize, m.y as usize, (-diff / sigma_c).exp());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise_image(w: usize, h: usize, seed: u64) -> Image {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..w * h * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        Image::new(w, h, 3, data).unwrap()
    }

    /// Texture wrap-shifted horizontally by `shift` pixels.
    fn wrap_shift(img: &Image, shift: i64) -> Image {
        let (w, h, c) = (img.width(), img.height(), img.channels());
        let mut out = Image::zeros(w, h, c);
        for y in 0..h {
            for x in 0..w {
                let sx = (x as i64 - shift).rem_euclid(w as i64) as usize;
                let px = img.pixel(sx, y).to_vec();
                out.set_pixel(x, y, &px);
            }
        }
        out
    }

    #[test]
    fn pyramid_level_dimensions() {
        let img = Image::zeros(512, 512, 1);
        let p = build_pyramid(&img, 5, 0.5).unwrap();
        let dims: Vec<usize> = p.levels.iter().map(|l| l.width()).collect();
        assert_eq!(dims, vec![512, 256, 128, 64, 32]);
    }

    #[test]
    fn degenerate_pyramid_is_original() {
        let img = noise_image(20, 20, 1);
        let p = build_pyramid(&img, 1, 0.5).unwrap();
        assert_eq!(p.levels.len(), 1);
        assert_eq!(p.levels[0], img);
    }

    #[test]
    fn too_small_for_levels() {
        let img = Image::zeros(20, 20, 1);
        match build_pyramid(&img, 5, 0.5) {
            Err(Error::Size(_)) => {}
            other => panic!("expected SizeError, got {other:?}"),
        }
        assert_eq!(max_usable_levels(20, 20, 5, 0.5), 1);
        assert_eq!(max_usable_levels(512, 512, 5, 0.5), 5);
        assert_eq!(max_usable_levels(128, 128, 5, 0.5), 4);
        assert_eq!(max_usable_levels(8, 8, 5, 0.5), 0);
    }

    fn one_hot_field(w: usize, h: usize, dim: usize, hot: usize) -> DescriptorField {
        let mut data = vec![0.0f32; w * h * dim];
        for px in 0..w * h {
            data[px * dim + hot] = 1.0;
        }
        DescriptorField::from_raw(w, h, dim, data)
    }

    #[test]
    fn match_cost_identity_and_one_hot() {
        let a = one_hot_field(8, 8, 8, 2);
        assert_eq!(match_cost(&a, (4, 4), &a, (4, 4), 1), 0.0);
        let b = one_hot_field(8, 8, 8, 5);
        // All 9 descriptor pairs differ as two distinct one-hots: SAD = 2 each.
        assert_eq!(match_cost(&a, (4, 4), &b, (4, 4), 1), 18.0);
    }

    #[test]
    fn match_cost_equals_brute_force_on_random_fields() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let dim = 8;
        let (w, h) = (10, 9);
        let mk = |rng: &mut ChaCha8Rng| {
            DescriptorField::from_raw(
                w,
                h,
                dim,
                (0..w * h * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
            )
        };
        let d1 = mk(&mut rng);
        let d2 = mk(&mut rng);
        for &(p1, p2) in &[((4, 4), (5, 4)), ((1, 1), (8, 7)), ((4, 5), (4, 5))] {
            // Independent double-loop SAD with the same border clamping.
            let mut expect = 0.0f64;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let c = |p: (i64, i64), f: &DescriptorField| {
                        (
                            (p.0 + dx).clamp(0, w as i64 - 1) as usize,
                            (p.1 + dy).clamp(0, h as i64 - 1) as usize,
                        )
                    };
                    let (ax, ay) = c(p1, &d1);
                    let (bx, by) = c(p2, &d2);
                    for i in 0..dim {
                        expect += (d1.desc(ax, ay)[i] - d2.desc(bx, by)[i]).abs() as f64;
                    }
                }
            }
            let got = match_cost(&d1, p1, &d2, p2, 1);
            assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        }
    }

    fn descriptors_of(img: &Image) -> DescriptorField {
        descriptor::compute_descriptors(img, &DescriptorParams::default()).unwrap()
    }

    #[test]
    fn identity_pair_with_zero_init_is_fixed_point() {
        let img = noise_image(48, 32, 7);
        let d = descriptors_of(&img);
        let grid = SeedGrid::new(48, 32, 3).unwrap();
        let zero_init = SparseMatchSet {
            width: 48,
            height: 32,
            spacing: grid.spacing,
            margin: grid.margin,
            nx: grid.nx,
            ny: grid.ny,
            matches: grid
                .positions
                .iter()
                .map(|&(x, y)| SparseMatch { x, y, u: 0.0, v: 0.0, cost: 0.0 })
                .collect(),
        };
        let sp = SearchParams {
            epipolar: true,
            window_radius: 8.0,
            iterations: 4,
            patch_radius: 1,
            rng_seed: 3,
        };
        let out = patchmatch_level(&d, &d, &grid, Some(&zero_init), &sp);
        for m in &out.matches {
            assert_eq!((m.u, m.v), (0.0, 0.0));
            assert_eq!(m.cost, 0.0);
        }
    }

    #[test]
    fn zero_radius_returns_init() {
        let img = noise_image(32, 32, 8);
        let d = descriptors_of(&img);
        let grid = SeedGrid::new(32, 32, 4).unwrap();
        let init = SparseMatchSet {
            width: 32,
            height: 32,
            spacing: grid.spacing,
            margin: grid.margin,
            nx: grid.nx,
            ny: grid.ny,
            matches: grid
                .positions
                .iter()
                .map(|&(x, y)| SparseMatch { x, y, u: 1.0, v: 0.0, cost: 0.0 })
                .collect(),
        };
        let sp = SearchParams {
            epipolar: true,
            window_radius: 0.0,
            iterations: 4,
            patch_radius: 1,
            rng_seed: 3,
        };
        let out = patchmatch_level(&d, &d, &grid, Some(&init), &sp);
        for (m, i) in out.matches.iter().zip(&init.matches) {
            assert_eq!(m.u, i.u);
            assert_eq!(m.v, i.v);
        }
    }

    #[test]
    fn global_shift_reaches_exhaustive_optimum() {
        let base = noise_image(80, 48, 21).gaussian_blur(0.8);
        let img2 = wrap_shift(&base, 3); // content moves +3 px
        let d1 = descriptors_of(&base);
        let d2 = descriptors_of(&img2);
        let grid = SeedGrid::new(80, 48, 3).unwrap();
        let sp = SearchParams {
            epipolar: true,
            window_radius: 8.0,
            iterations: 6,
            patch_radius: 1,
            rng_seed: 5,
        };
        let out = patchmatch_level(&d1, &d2, &grid, None, &sp);
        let mut interior = 0;
        let mut hits = 0;
        for m in &out.matches {
            let x = m.x as i64;
            if !(20..=60).contains(&x) {
                continue;
            }
            interior += 1;
            // Exhaustive oracle over the epipolar window.
            let mut best = f64::INFINITY;
            for u in -8i64..=8 {
                let tx = x + u;
                if tx < 0 || tx >= 80 {
                    continue;
                }
                best = best.min(match_cost(&d1, (x, m.y as i64), &d2, (tx, m.y as i64), 1));
            }
            if (m.cost - best).abs() < 1e-12 && m.u == 3.0 {
                hits += 1;
            }
        }
        assert!(interior > 50);
        assert!(
            hits as f64 >= 0.95 * interior as f64,
            "only {hits}/{interior} seeds reached the oracle"
        );
    }

    #[test]
    fn traced_costs_are_monotone() {
        let base = noise_image(64, 48, 31);
        let img2 = wrap_shift(&base, 2);
        let d1 = descriptors_of(&base);
        let d2 = descriptors_of(&img2);
        let grid = SeedGrid::new(64, 48, 3).unwrap();
        let sp = SearchParams {
            epipolar: true,
            window_radius: 8.0,
            iterations: 6,
            patch_radius: 1,
            rng_seed: 17,
        };
        let mut trace = Vec::new();
        let _ = patchmatch_level_traced(&d1, &d2, &grid, None, &sp, Some(&mut trace));
        assert_eq!(trace.len(), 7);
        for w in trace.windows(2) {
            for (a, b) in w[0].iter().zip(&w[1]) {
                assert!(b <= a, "cost increased: {a} -> {b}");
            }
        }
    }

    #[test]
    fn cpm_identity_pair_has_zero_flow() {
        let img = noise_image(96, 64, 41);
        let params = CpmParams { levels: 2, rng_seed: 9, ..CpmParams::default() };
        let set = cpm_match(&img, &img, &params).unwrap();
        assert!(!set.matches.is_empty());
        for m in &set.matches {
            assert_eq!((m.u, m.v), (0.0, 0.0), "seed ({}, {}) moved", m.x, m.y);
        }
    }

    #[test]
    fn cpm_recovers_constant_shift() {
        let base = noise_image(96, 64, 43).gaussian_blur(0.8);
        let img2 = wrap_shift(&base, 2);
        let params = CpmParams { levels: 2, rng_seed: 13, ..CpmParams::default() };
        let set = cpm_match(&base, &img2, &params).unwrap();
        let interior: Vec<_> =
            set.matches.iter().filter(|m| (20..=76).contains(&(m.x as i64))).collect();
        assert!(interior.len() > 100);
        let good = interior.iter().filter(|m| (m.u - 2.0).abs() <= 1.0).count();
        assert!(
            good as f64 >= 0.9 * interior.len() as f64,
            "{good}/{} within 1 px",
            interior.len()
        );
    }

    #[test]
    fn textureless_pair_loses_most_seeds() {
        let img = Image::new(64, 48, 3, vec![0.5; 64 * 48 * 3]).unwrap();
        let params = CpmParams { levels: 2, rng_seed: 3, ..CpmParams::default() };
        let pair = cpm_match_pair(&img, &img, &params).unwrap();
        let total = pair.fwd_full.matches.len();
        assert!(
            pair.fwd.matches.len() * 2 < total,
            "{} of {} seeds survived on a textureless pair",
            pair.fwd.matches.len(),
            total
        );
    }

    #[test]
    fn cpm_is_bit_reproducible() {
        let base = noise_image(64, 48, 47);
        let img2 = wrap_shift(&base, 1);
        let params = CpmParams { levels: 2, rng_seed: 123, ..CpmParams::default() };
        let a = cpm_match(&base, &img2, &params).unwrap();
        let b = cpm_match(&base, &img2, &params).unwrap();
        assert_eq!(a.matches, b.matches);
    }

    #[test]
    fn confidence_examples() {
        let grid = SeedGrid::new(32, 32, 4).unwrap();
        let mk = |u: f64| SparseMatchSet {
            width: 32,
            height: 32,
            spacing: grid.spacing,
            margin: grid.margin,
            nx: grid.nx,
            ny: grid.ny,
            matches: grid
                .positions
                .iter()
                .map(|&(x, y)| SparseMatch { x, y, u, v: 0.0, cost: 0.0 })
                .collect(),
        };
        // Perfectly consistent: bwd = -fwd.
        let conf = flow_confidence(&mk(2.0), &mk(-2.0), 1.0);
        for &(x, y) in &grid.positions {
            assert!((conf.at(x as usize, y as usize) - 1.0).abs() < 1e-12);
        }
        // Disagreement of exactly sigma_c -> e^-1.
        let conf = flow_confidence(&mk(2.0), &mk(-1.0), 1.0);
        let (x, y) = grid.positions[grid.positions.len() / 2];
        assert!((conf.at(x as usize, y as usize) - (-1.0f64).exp()).abs() < 1e-12);
        // Non-seed pixels are zero.
        assert_eq!(conf.at(3, 2), 0.0);
    }
}
