//! Random camera-shake motion blur.
//!
//! A trajectory is a damped random walk of the camera's velocity with
//! occasional impulsive jolts. Rasterizing it with bilinear deposition gives a
//! point-spread function which is then convolved with sharp images.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::manifest::{KernelEntry, Manifest, ManifestRecord, Split, MANIFEST_FILE};
use crate::seed;

pub const DEFAULT_KERNEL_SIZE: usize = 31;

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryParams {
    pub num_steps: usize,
    /// Largest per-axis extent of the path, in pixels.
    pub max_len: f64,
    /// Per-step probability of an impulsive shake.
    pub p_impulsive: f64,
    /// Interval the per-trajectory Gaussian shake factor is drawn from.
    pub gaussian_shake_range: (f64, f64),
    /// Velocity multiplier applied on an impulsive shake.
    pub impulse_factor: f64,
    /// Initial speed in units of the nominal step `max_len / num_steps`.
    pub initial_speed: f64,
    pub seed: u64,
}

impl Default for TrajectoryParams {
    fn default() -> Self {
        TrajectoryParams {
            num_steps: 2000,
            max_len: 10.0,
            p_impulsive: 0.005,
            gaussian_shake_range: (0.5, 1.0),
            impulse_factor: 20.0,
            initial_speed: 1.0,
            seed: 0,
        }
    }
}

impl TrajectoryParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::Param("num_steps must be positive".into()));
        }
        if !(self.max_len.is_finite() && self.max_len > 0.0) {
            return Err(Error::Param(format!(
                "max_len must be positive, got {}",
                self.max_len
            )));
        }
        if !(0.0..=1.0).contains(&self.p_impulsive) {
            return Err(Error::Param(format!(
                "p_impulsive must lie in [0, 1], got {}",
                self.p_impulsive
            )));
        }
        let (lo, hi) = self.gaussian_shake_range;
        if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo <= hi) {
            return Err(Error::Param(format!(
                "gaussian_shake_range must satisfy 0 <= lo <= hi, got ({lo}, {hi})"
            )));
        }
        if !(self.impulse_factor.is_finite() && self.initial_speed.is_finite())
            || self.initial_speed < 0.0
        {
            return Err(Error::Param(
                "impulse_factor and initial_speed must be finite, initial_speed >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// `(x, y)` positions in pixels, relative to the kernel center.
    pub points: Vec<[f64; 2]>,
    /// Step indices at which an impulsive shake fired.
    pub impulses: Vec<usize>,
    pub params: TrajectoryParams,
}

impl Trajectory {
    /// A hand-specified trajectory (no dynamics).
    pub fn from_points(points: Vec<[f64; 2]>) -> Self {
        let params = TrajectoryParams {
            num_steps: points.len(),
            ..TrajectoryParams::default()
        };
        Trajectory {
            points,
            impulses: Vec::new(),
            params,
        }
    }

    /// Largest absolute per-axis displacement from the first point.
    pub fn max_displacement(&self) -> f64 {
        let Some(first) = self.points.first() else {
            return 0.0;
        };
        self.points
            .iter()
            .flat_map(|p| [(p[0] - first[0]).abs(), (p[1] - first[1]).abs()])
            .fold(0.0, f64::max)
    }

    /// Largest absolute coordinate, i.e. the distance from the kernel center
    /// the trajectory reaches along either axis.
    pub fn radius(&self) -> f64 {
        self.points
            .iter()
            .flat_map(|p| [p[0].abs(), p[1].abs()])
            .fold(0.0, f64::max)
    }
}

/// Samples a camera-shake path.
///
/// Velocity evolves as `v ← s·(v + δ·ε)` with `ε ~ N(0, I)`, nominal step
/// `δ = max_len / num_steps` and shake factor `s` drawn once per trajectory.
/// With probability `p_impulsive` a step first scales `v` by
/// `impulse_factor`. The path is then scaled so its larger per-axis range
/// equals `max_len` and centered on its bounding box.
pub fn generate_trajectory(params: &TrajectoryParams) -> Result<Trajectory> {
    params.validate()?;
    let mut rng = seed::rng(params.seed);
    let (lo, hi) = params.gaussian_shake_range;
    let shake = lo + (hi - lo) * rng.random::<f64>();
    let step = params.max_len / params.num_steps as f64;
    let theta = std::f64::consts::TAU * rng.random::<f64>();
    let mut v = [
        params.initial_speed * step * theta.cos(),
        params.initial_speed * step * theta.sin(),
    ];
    let mut points = Vec::with_capacity(params.num_steps);
    let mut impulses = Vec::new();
    let mut pos = [0.0f64; 2];
    points.push(pos);
    for t in 1..params.num_steps {
        if rng.random::<f64>() < params.p_impulsive {
            v = [v[0] * params.impulse_factor, v[1] * params.impulse_factor];
            impulses.push(t);
        }
        let ex: f64 = StandardNormal.sample(&mut rng);
        let ey: f64 = StandardNormal.sample(&mut rng);
        v = [shake * (v[0] + step * ex), shake * (v[1] + step * ey)];
        pos = [pos[0] + v[0], pos[1] + v[1]];
        points.push(pos);
    }

    let (mut min, mut max) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &points {
        for a in 0..2 {
            min[a] = min[a].min(p[a]);
            max[a] = max[a].max(p[a]);
        }
    }
    let range = (max[0] - min[0]).max(max[1] - min[1]);
    let scale = if range > 0.0 { params.max_len / range } else { 1.0 };
    let center = [(min[0] + max[0]) / 2.0, (min[1] + max[1]) / 2.0];
    for p in &mut points {
        for a in 0..2 {
            p[a] = (p[a] - center[a]) * scale;
        }
    }
    Ok(Trajectory {
        points,
        impulses,
        params: params.clone(),
    })
}

/// `size×size` nonnegative point-spread function summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurKernel {
    size: usize,
    weights: Vec<f64>,
}

impl BlurKernel {
    /// Validates and wraps raw weights (row-major).
    pub fn new(size: usize, weights: Vec<f64>) -> Result<Self> {
        if size == 0 || size.is_multiple_of(2) {
            return Err(Error::Param(format!("kernel size must be odd, got {size}")));
        }
        if weights.len() != size * size {
            return Err(Error::Shape(format!(
                "{} weights for a {size}x{size} kernel",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Param("kernel weights must be finite and >= 0".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Param(format!("kernel sums to {total}, expected 1")));
        }
        Ok(BlurKernel { size, weights })
    }

    /// Single unit tap at the center.
    pub fn delta(size: usize) -> Result<Self> {
        let mut w = vec![0.0; size * size];
        if let Some(c) = w.get_mut(size * size / 2) {
            *c = 1.0;
        }
        BlurKernel::new(size, w)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.size + col]
    }

    /// SHA-256 over the size and little-endian weights, as lowercase hex.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.size as u32).to_le_bytes());
        for w in &self.weights {
            h.update(w.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Deposits each trajectory point bilinearly onto a `size×size` canvas
/// centered on the origin, without normalizing. Returns the grid and the
/// total deposited mass.
pub fn deposit_trajectory(traj: &Trajectory, size: usize) -> Result<(Vec<f64>, f64)> {
    if size < 3 || size.is_multiple_of(2) {
        return Err(Error::Param(format!(
            "kernel size must be odd and >= 3, got {size}"
        )));
    }
    if traj.points.is_empty() {
        return Err(Error::Param("empty trajectory".into()));
    }
    let center = ((size - 1) / 2) as f64;
    let limit = (size - 1) as f64;
    let mut grid = vec![0.0f64; size * size];
    for p in &traj.points {
        let (u, v) = (center + p[0], center + p[1]);
        // rounding from centering can overshoot an exactly fitting path
        let tol = 1e-9;
        if !(u.is_finite() && v.is_finite()) || u < -tol || v < -tol || u > limit + tol || v > limit + tol {
            return Err(Error::Param(format!(
                "trajectory reaches ({:.3}, {:.3}), outside a {size}x{size} canvas",
                p[0], p[1]
            )));
        }
        let (u, v) = (u.clamp(0.0, limit), v.clamp(0.0, limit));
        let (x0, y0) = (u.floor(), v.floor());
        let (fx, fy) = (u - x0, v - y0);
        let (x0, y0) = (x0 as usize, y0 as usize);
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                let w = wy * wx;
                if w > 0.0 {
                    grid[(y0 + dy) * size + x0 + dx] += w;
                }
            }
        }
    }
    let mass = grid.iter().sum();
    Ok((grid, mass))
}

/// Sub-pixel (bilinear) rasterization of a trajectory into a blur kernel.
pub fn rasterize_kernel(traj: &Trajectory, size: usize) -> Result<BlurKernel> {
    let (grid, mass) = deposit_trajectory(traj, size)?;
    let weights = grid.into_iter().map(|w| w / mass).collect();
    BlurKernel::new(size, weights)
}

/// Mirror index without edge repetition (`d c b | a b c d | c b a`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Per-channel 2-D convolution with reflect padding; output clamped to
/// `[-1, 1]`.
pub fn apply_blur(img: &ImageTensor, k: &BlurKernel) -> Result<ImageTensor> {
    let (channels, h, w) = img.dims();
    if k.size() > h || k.size() > w {
        return Err(Error::Shape(format!(
            "{0}x{0} kernel is larger than the {h}x{w} image",
            k.size()
        )));
    }
    let r = (k.size() / 2) as isize;
    let taps: Vec<(isize, isize, f64)> = (0..k.size())
        .flat_map(|i| (0..k.size()).map(move |j| (i, j)))
        .filter_map(|(i, j)| {
            let wgt = k.at(i, j);
            (wgt != 0.0).then_some((i as isize - r, j as isize - r, wgt))
        })
        .collect();
    let mut out = Vec::with_capacity(img.data().len());
    for c in 0..channels {
        let plane = img.plane(c);
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0f64;
                for &(di, dj, wgt) in &taps {
                    let sy = reflect(y - di, h);
                    let sx = reflect(x - dj, w);
                    acc += wgt * plane[sy * w + sx] as f64;
                }
                out.push(acc.clamp(-1.0, 1.0) as f32);
            }
        }
    }
    ImageTensor::new(channels, h, w, out)
}

/// Kernel for one image of a corpus: a pure function of the master seed and
/// the image index.
pub fn kernel_for_index(
    params: &TrajectoryParams,
    kernel_size: usize,
    index: usize,
) -> Result<(u64, BlurKernel)> {
    let item_seed = seed::derive(params.seed, index as u64);
    let traj = generate_trajectory(&TrajectoryParams {
        seed: item_seed,
        ..params.clone()
    })?;
    Ok((item_seed, rasterize_kernel(&traj, kernel_size)?))
}

/// Blurs every image listed in `manifest` (paths relative to `base_dir`) with
/// a freshly sampled kernel, writing PNGs and `manifest.txt` into `out_dir`.
/// `params.seed` acts as the master seed.
pub fn build_blurred_set(
    manifest: &Manifest,
    base_dir: &Path,
    out_dir: &Path,
    params: &TrajectoryParams,
    kernel_size: usize,
) -> Result<Manifest> {
    params.validate()?;
    if (kernel_size as f64) < params.max_len + 1.0 || kernel_size.is_multiple_of(2) {
        return Err(Error::Param(format!(
            "kernel size {kernel_size} must be odd and exceed max_len {}",
            params.max_len
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let records: Vec<Result<ManifestRecord>> = manifest
        .records
        .par_iter()
        .enumerate()
        .map(|(index, rec)| {
            let (item_seed, kernel) = kernel_for_index(params, kernel_size, index)?;
            let out_name = Path::new(&rec.path)
                .with_extension("png")
                .to_string_lossy()
                .replace('\\', "/");
            let blurred = ImageTensor::load(&base_dir.join(&rec.path), None)
                .and_then(|img| apply_blur(&img, &kernel));
            match blurred {
                Ok(img) => {
                    img.save(&out_dir.join(&out_name))?;
                    Ok(ManifestRecord {
                        path: out_name,
                        split: Split::Blurred,
                        seed: Some(item_seed),
                        kernel: KernelEntry::Checksum(kernel.checksum()),
                    })
                }
                Err(e) => {
                    log::warn!("skipping {}: {e}", rec.path);
                    Ok(ManifestRecord {
                        path: out_name,
                        split: Split::Blurred,
                        seed: Some(item_seed),
                        kernel: KernelEntry::Skipped,
                    })
                }
            }
        })
        .collect();
    let out = Manifest {
        records: records.into_iter().collect::<Result<_>>()?,
    };
    out.write(&out_dir.join(MANIFEST_FILE))?;
    if !out.is_empty() && out.usable().count() == 0 {
        return Err(Error::Data(format!(
            "none of the {} listed images could be blurred",
            out.len()
        )));
    }
    Ok(out)
}
