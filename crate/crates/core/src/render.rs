//! Voxel masks and synthetic microscopy images from SWC forests, and random
//! ground-truth forests.
//!
//! Voxel `(i, j, k)` is foreground iff its center `(i + 0.5, j + 0.5, k + 0.5)`
//! lies inside the swept frustum of some parent-child segment (radius
//! interpolated linearly along the segment) or inside the sphere of some node.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::swc::{SwcForest, SwcNode, ROOT_PARENT};
use crate::volume::Volume;

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("invalid render spec: {0}")]
    Spec(String),
    #[error("infeasible synthesis spec: {0}")]
    Infeasible(String),
}

/// Binary voxel mask, x fastest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    dims: [usize; 3],
    data: Vec<bool>,
}

impl Mask {
    pub fn empty(dims: [usize; 3]) -> Self {
        Mask {
            dims,
            data: vec![false; dims.iter().product()],
        }
    }

    pub fn from_data(dims: [usize; 3], data: Vec<bool>) -> Self {
        assert_eq!(data.len(), dims.iter().product::<usize>(), "mask length");
        Mask { dims, data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[x + self.dims[0] * (y + self.dims[1] * z)]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn union(&self, other: &Mask) -> Mask {
        assert_eq!(self.dims, other.dims, "mask dims differ");
        Mask {
            dims: self.dims,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect(),
        }
    }
}

/// Inclusive voxel index range whose centers fall in `[lo, hi]`.
fn voxel_range(lo: f64, hi: f64, dim: usize) -> Option<(usize, usize)> {
    let first = (lo - 0.5).ceil().max(0.0);
    let last = (hi - 0.5).floor().min(dim as f64 - 1.0);
    (first <= last).then_some((first as usize, last as usize))
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Whether a point at offset `w` from the segment start lies in the frustum
/// from radius `r0` to `r1` along direction `d`.
///
/// Only the invariants `ww = w·w`, `wd = w·d`, `dd = d·d` enter, so the
/// answer is unchanged by any rotation or reflection of the whole scene.
fn in_frustum(ww: f64, wd: f64, dd: f64, r0: f64, r1: f64) -> bool {
    if ww <= r0 * r0 {
        return true;
    }
    let end = ww - 2.0 * wd + dd;
    if end <= r1 * r1 {
        return true;
    }
    if dd <= 0.0 {
        return false;
    }
    let len = dd.sqrt();
    let a = wd / len;
    let h2 = (ww - a * a).max(0.0);
    let k = (r1 - r0) / len;
    if k.abs() >= 1.0 {
        return false;
    }
    // f(u) = sqrt(h² + (u − a)²) − (r0 + k u) is convex; stationary point:
    let u = (a + k * h2.sqrt() / (1.0 - k * k).sqrt()).clamp(0.0, len);
    let radius = r0 + k * u;
    radius >= 0.0 && h2 + (u - a) * (u - a) <= radius * radius
}

fn paint_segment(mask: &mut Mask, p0: [f64; 3], r0: f64, p1: [f64; 3], r1: f64) {
    let d = sub(p1, p0);
    let dd = dot(d, d);
    let reach = r0.max(r1);
    let mut ranges = [(0, 0); 3];
    for a in 0..3 {
        let lo = p0[a].min(p1[a]) - reach;
        let hi = p0[a].max(p1[a]) + reach;
        match voxel_range(lo, hi, mask.dims[a]) {
            Some(r) => ranges[a] = r,
            None => return,
        }
    }
    let [w, h, _] = mask.dims;
    for z in ranges[2].0..=ranges[2].1 {
        for y in ranges[1].0..=ranges[1].1 {
            for x in ranges[0].0..=ranges[0].1 {
                let idx = x + w * (y + h * z);
                if mask.data[idx] {
                    continue;
                }
                let q = [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5];
                let off = sub(q, p0);
                if in_frustum(dot(off, off), dot(off, d), dd, r0, r1) {
                    mask.data[idx] = true;
                }
            }
        }
    }
}

pub fn rasterize_mask(forest: &SwcForest, dims: [usize; 3]) -> Mask {
    let mut mask = Mask::empty(dims);
    for n in forest.nodes() {
        paint_segment(&mut mask, n.center, n.radius, n.center, n.radius);
    }
    for (parent, child) in forest.edges() {
        paint_segment(&mut mask, parent.center, parent.radius, child.center, child.radius);
    }
    mask
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSpec {
    pub dims: [usize; 3],
    pub foreground_intensity: f64,
    pub background_level: f64,
    pub noise_sd: f64,
    /// Gaussian blur sigma in voxels; 0 disables blurring.
    pub psf_sigma: f64,
}

impl Default for RenderSpec {
    fn default() -> Self {
        RenderSpec {
            dims: [64; 3],
            foreground_intensity: 30000.0,
            background_level: 2000.0,
            noise_sd: 1500.0,
            psf_sigma: 0.8,
        }
    }
}

impl RenderSpec {
    pub fn validate(&self) -> Result<(), RenderError> {
        if self.dims.contains(&0) {
            return Err(RenderError::Spec(format!("dims {:?} must be positive", self.dims)));
        }
        let finite = [self.foreground_intensity, self.background_level, self.noise_sd, self.psf_sigma];
        if !finite.iter().all(|v| v.is_finite()) {
            return Err(RenderError::Spec("values must be finite".into()));
        }
        if self.noise_sd < 0.0 || self.psf_sigma < 0.0 {
            return Err(RenderError::Spec("noise_sd and psf_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Normalized Gaussian taps truncated at 3 sigma.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// One separable pass along `axis`, replicating edge samples.
fn blur_axis(data: &[f64], dims: [usize; 3], axis: usize, kernel: &[f64]) -> Vec<f64> {
    let radius = (kernel.len() / 2) as isize;
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let len = dims[axis] as isize;
    let mut out = vec![0.0; data.len()];
    for (idx, o) in out.iter_mut().enumerate() {
        let coord = ((idx / stride) % dims[axis]) as isize;
        let base = idx - coord as usize * stride;
        let mut acc = 0.0;
        for (t, &kv) in kernel.iter().enumerate() {
            let c = (coord + t as isize - radius).clamp(0, len - 1) as usize;
            acc += kv * data[base + c * stride];
        }
        *o = acc;
    }
    out
}

/// Mask scaled to the foreground intensity over the background level,
/// blurred, plus Gaussian noise, clamped to `[0, 65535]`.
pub fn render_image(forest: &SwcForest, spec: &RenderSpec, seed: u64) -> Result<Volume, RenderError> {
    spec.validate()?;
    let mask = rasterize_mask(forest, spec.dims);
    let mut data: Vec<f64> = mask
        .data
        .iter()
        .map(|&m| if m { spec.foreground_intensity } else { 0.0 } + spec.background_level)
        .collect();
    if spec.psf_sigma > 0.0 {
        let kernel = gaussian_kernel(spec.psf_sigma);
        for axis in 0..3 {
            data = blur_axis(&data, spec.dims, axis, &kernel);
        }
    }
    if spec.noise_sd > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, spec.noise_sd).map_err(|e| RenderError::Spec(e.to_string()))?;
        for v in &mut data {
            *v += normal.sample(&mut rng);
        }
    }
    let data = data.into_iter().map(|v| v.clamp(0.0, 65535.0) as f32).collect();
    Volume::new(spec.dims, data, [1.0; 3]).map_err(|e| RenderError::Spec(e.to_string()))
}

/// Coordinates and radii of generated forests are multiples of this, so
/// SWC text round-trips exactly and cube symmetries act exactly.
pub const GRID: f64 = 1.0 / 64.0;

fn quantize(v: f64) -> f64 {
    (v / GRID).round() * GRID
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub dims: [usize; 3],
    pub n_trees: usize,
    /// Inclusive range of nodes per tree.
    pub nodes_per_tree: (usize, usize),
    /// Inclusive range of node radii in voxels.
    pub radius: (f64, f64),
    /// Chance that a grown node also starts a side branch.
    pub branch_prob: f64,
    /// Inclusive range of parent-child distance in voxels.
    pub step: (f64, f64),
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            dims: [64; 3],
            n_trees: 2,
            nodes_per_tree: (20, 40),
            radius: (1.0, 2.5),
            branch_prob: 0.08,
            step: (2.0, 3.0),
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// Distance kept between node centers and the volume faces.
    fn margin(&self) -> f64 {
        1.0
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        let bad = |m: &str| Err(RenderError::Spec(m.to_string()));
        if self.dims.contains(&0) {
            return bad("dims must be positive");
        }
        if self.nodes_per_tree.0 == 0 || self.nodes_per_tree.0 > self.nodes_per_tree.1 {
            return bad("nodes_per_tree must be a non-empty range of positive counts");
        }
        let (r0, r1) = self.radius;
        if !(r0.is_finite() && r1.is_finite() && r0 > 0.0 && r0 <= r1) {
            return bad("radius must be a non-empty positive range");
        }
        let (s0, s1) = self.step;
        if !(s0.is_finite() && s1.is_finite() && s0 > 0.0 && s0 <= s1) {
            return bad("step must be a non-empty positive range");
        }
        if !(0.0..=1.0).contains(&self.branch_prob) {
            return bad("branch_prob must lie in [0, 1]");
        }
        let room = self.dims.iter().map(|&d| d as f64 - 2.0 * self.margin()).fold(f64::INFINITY, f64::min);
        if room <= 0.0 {
            return Err(RenderError::Infeasible(format!("dims {:?} leave no interior", self.dims)));
        }
        if self.nodes_per_tree.1 > 1 && s0 > room {
            return Err(RenderError::Infeasible(format!(
                "minimum step {s0} exceeds usable extent {room}"
            )));
        }
        Ok(())
    }

    fn inside(&self, p: [f64; 3]) -> bool {
        let m = self.margin();
        (0..3).all(|a| p[a] >= m && p[a] <= self.dims[a] as f64 - m)
    }

    fn sample_radius(&self, rng: &mut ChaCha8Rng) -> f64 {
        let (lo, hi) = self.radius;
        let r = quantize(rng.random_range(lo..=hi));
        if (lo..=hi).contains(&r) {
            r
        } else if (lo..=hi).contains(&(r + GRID)) {
            r + GRID
        } else if (lo..=hi).contains(&(r - GRID)) {
            r - GRID
        } else {
            lo
        }
    }
}

fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| normal.sample(rng));
        let n = dot(v, v).sqrt();
        if n > 1e-6 {
            return v.map(|c| c / n);
        }
    }
}

/// Persistent random walks with occasional side branches. Node centers and
/// radii are quantized to multiples of [`GRID`].
pub fn gen_random_forest(spec: &SynthSpec) -> Result<SwcForest, RenderError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut nodes: Vec<SwcNode> = Vec::new();
    let m = spec.margin();
    for _ in 0..spec.n_trees {
        let target = rng.random_range(spec.nodes_per_tree.0..=spec.nodes_per_tree.1);
        let root_id = nodes.len() as i64 + 1;
        let root = std::array::from_fn(|a| quantize(rng.random_range(m..=spec.dims[a] as f64 - m)));
        nodes.push(SwcNode::new(root_id, 1, root, spec.sample_radius(&mut rng), ROOT_PARENT));
        // growing tips: (node id, heading)
        let mut tips = vec![(root_id, random_unit(&mut rng))];
        let mut grown = 1;
        let mut failures = 0;
        while grown < target {
            if failures > 10_000 {
                return Err(RenderError::Infeasible(format!(
                    "could not place {target} nodes inside {:?}",
                    spec.dims
                )));
            }
            if tips.is_empty() {
                let pick = root_id + rng.random_range(0..grown as i64);
                tips.push((pick, random_unit(&mut rng)));
            }
            let t = rng.random_range(0..tips.len());
            let (from, heading) = tips[t];
            let base = nodes[(from - 1) as usize].center;
            let mut placed = None;
            for attempt in 0..20 {
                let jitter = random_unit(&mut rng);
                let spread = if attempt == 0 { 0.35 } else { 1.5 };
                let dir: [f64; 3] = std::array::from_fn(|a| heading[a] + spread * jitter[a]);
                let n = dot(dir, dir).sqrt();
                if n < 1e-9 {
                    continue;
                }
                let dir = dir.map(|c| c / n);
                let len = rng.random_range(spec.step.0..=spec.step.1);
                let p = std::array::from_fn(|a| quantize(base[a] + len * dir[a]));
                let dist = dot(sub(p, base), sub(p, base)).sqrt();
                if spec.inside(p) && dist >= spec.step.0 - GRID && dist <= spec.step.1 + GRID && dist > 0.0 {
                    placed = Some((p, dir));
                    break;
                }
            }
            let Some((p, dir)) = placed else {
                tips.swap_remove(t);
                failures += 1;
                continue;
            };
            let id = nodes.len() as i64 + 1;
            nodes.push(SwcNode::new(id, 3, p, spec.sample_radius(&mut rng), from));
            grown += 1;
            tips[t] = (id, dir);
            if rng.random_bool(spec.branch_prob) {
                tips.push((id, random_unit(&mut rng)));
            }
        }
    }
    SwcForest::new(nodes).map_err(|e| RenderError::Infeasible(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::swc::parse_swc;

    #[test]
    fn sphere_of_radius_one_and_a_half() {
        let f = parse_swc("1 1 5.5 5.5 5.5 1.5 -1").unwrap();
        assert_eq!(rasterize_mask(&f, [11; 3]).count(), 19);
    }

    #[test]
    fn small_sphere_covers_its_voxel() {
        let f = parse_swc("1 1 5.5 5.5 5.5 0.4 -1").unwrap();
        let m = rasterize_mask(&f, [11; 3]);
        assert_eq!(m.count(), 1);
        assert!(m.get(5, 5, 5));
    }

    #[test]
    fn empty_forest_is_background() {
        assert_eq!(rasterize_mask(&SwcForest::empty(), [4; 3]).count(), 0);
    }

    #[test]
    fn cylinder_along_x() {
        // radius 0.5 segment through voxel centers covers one row
        let f = parse_swc("1 1 1.5 2.5 2.5 0.5 -1\n2 1 6.5 2.5 2.5 0.5 1").unwrap();
        let m = rasterize_mask(&f, [8, 5, 5]);
        assert_eq!(m.count(), 6);
        assert!((1..=6).all(|x| m.get(x, 2, 2)));
    }

    #[test]
    fn frustum_matches_dense_sampling() {
        let cases = [
            ([0.0, 0.0, 0.0], 1.0, [6.0, 1.0, 0.0], 3.0),
            ([0.0, 0.0, 0.0], 2.5, [2.0, 0.0, 0.0], 0.2),
            ([1.0, 2.0, 0.5], 0.0, [4.0, -1.0, 2.0], 1.2),
        ];
        for (p0, r0, p1, r1) in cases {
            for qx in -8..16 {
                for qy in -8..12 {
                    let q = [qx as f64 * 0.5, qy as f64 * 0.5, 0.75];
                    let d = sub(p1, p0);
                    let w = sub(q, p0);
                    let fast = in_frustum(dot(w, w), dot(w, d), dot(d, d), r0, r1);
                    let dense = (0..=20_000).any(|s| {
                        let t = s as f64 / 20_000.0;
                        let c: [f64; 3] = std::array::from_fn(|a| p0[a] + t * d[a]);
                        let e = sub(q, c);
                        dot(e, e).sqrt() <= r0 + t * (r1 - r0) + 1e-9
                    });
                    let margin = {
                        // skip points within sampling error of the boundary
                        let mut best = f64::INFINITY;
                        for s in 0..=2000 {
                            let t = s as f64 / 2000.0;
                            let c: [f64; 3] = std::array::from_fn(|a| p0[a] + t * d[a]);
                            let e = sub(q, c);
                            best = best.min(dot(e, e).sqrt() - (r0 + t * (r1 - r0)));
                        }
                        best.abs()
                    };
                    if margin > 1e-2 {
                        assert_eq!(fast, dense, "q={q:?} seg={p0:?}->{p1:?} r={r0},{r1}");
                    }
                }
            }
        }
    }

    #[test]
    fn noiseless_render_is_mask_plus_background() {
        let f = parse_swc("1 1 4 4 4 2 -1").unwrap();
        let spec = RenderSpec {
            dims: [8; 3],
            foreground_intensity: 1000.0,
            background_level: 50.0,
            noise_sd: 0.0,
            psf_sigma: 0.0,
        };
        let v = render_image(&f, &spec, 1).unwrap();
        let m = rasterize_mask(&f, spec.dims);
        for (value, &fg) in v.data().iter().zip(m.data()) {
            assert_eq!(*value, if fg { 1050.0 } else { 50.0 });
        }
    }

    #[test]
    fn gaussian_kernel_is_normalized() {
        let k = gaussian_kernel(1.0);
        assert_eq!(k.len(), 7);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn forest_generation_respects_spec() {
        let spec = SynthSpec::default();
        let f = gen_random_forest(&spec).unwrap();
        assert_eq!(f.roots().count(), 2);
        for n in f.nodes() {
            assert!(n.radius >= spec.radius.0 && n.radius <= spec.radius.1);
            assert!((0..3).all(|a| n.center[a] >= 0.0 && n.center[a] < 64.0));
        }
        for (p, c) in f.edges() {
            let d = sub(c.center, p.center);
            let len = dot(d, d).sqrt();
            assert!(len >= spec.step.0 - GRID && len <= spec.step.1 + GRID, "{len}");
        }
    }

    #[test]
    fn infeasible_step() {
        let spec = SynthSpec {
            dims: [8; 3],
            step: (20.0, 30.0),
            ..SynthSpec::default()
        };
        assert!(matches!(gen_random_forest(&spec), Err(RenderError::Infeasible(_))));
    }
}
