//! Procedural lane-keeping world: tracks, rendering, vehicle, expert driver,
//! pixel perturbations, dataset generation and closed-loop episodes.
//!
//! Sign conventions: the lateral offset `d` is positive left of the
//! centerline; a positive road curvature turns right, so the vehicle's
//! heading (counter-clockwise from +x) changes at rate `-speed * y`.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::convhead::standardize;
use crate::dynamics::SolverConfig;
use crate::error::{Error, Result};
use crate::image::{read_frames_blob, write_frames_blob, Image};
use crate::network::{Policy, Sequence, SequenceInput};
use crate::scalar::Scalar;
use crate::trainer::SequenceSource;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Theme {
    Summer,
    Winter,
}

impl Theme {
    pub const ALL: [Theme; 2] = [Theme::Summer, Theme::Winter];

    pub fn name(self) -> &'static str {
        match self {
            Theme::Summer => "summer",
            Theme::Winter => "winter",
        }
    }

    fn palette(self) -> Palette {
        match self {
            Theme::Summer => Palette {
                sky: [0.55, 0.70, 0.90],
                surround: [0.36, 0.46, 0.20],
                road: [0.22, 0.22, 0.24],
                edge: [0.88, 0.88, 0.82],
            },
            Theme::Winter => Palette {
                sky: [0.80, 0.82, 0.86],
                surround: [0.96, 0.96, 0.98],
                road: [0.78, 0.78, 0.80],
                edge: [0.30, 0.30, 0.33],
            },
        }
    }
}

impl std::fmt::Display for Theme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

struct Palette {
    sky: [f64; 3],
    surround: [f64; 3],
    road: [f64; 3],
    edge: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackConfig {
    /// Drivable length in meters.
    pub length: f64,
    pub half_width: f64,
    pub max_curvature: f64,
    /// Upper bound of each sinusoid's amplitude (1/m).
    pub amplitude: f64,
    pub min_wavelength: f64,
    pub max_wavelength: f64,
    pub sample_spacing: f64,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            length: 400.0,
            half_width: 1.75,
            max_curvature: 0.1,
            amplitude: 0.02,
            min_wavelength: 60.0,
            max_wavelength: 300.0,
            sample_spacing: 0.1,
        }
    }
}

impl TrackConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.length,
            self.half_width,
            self.max_curvature,
            self.min_wavelength,
            self.sample_spacing,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) || self.max_wavelength < self.min_wavelength || !(self.amplitude >= 0.0) {
            return Err(Error::Config("invalid track configuration".into()));
        }
        Ok(())
    }
}

/// Extra centerline beyond the drivable length, for look-ahead and rendering.
const TRACK_MARGIN: f64 = 60.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub theme: Theme,
    pub length: f64,
    pub half_width: f64,
    pub spacing: f64,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub headings: Vec<f64>,
    pub curvature: Vec<f64>,
}

pub fn generate_track(seed: u64, config: &TrackConfig, theme: Theme) -> Result<Track> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_modes = rng.random_range(3..=6);
    let modes: Vec<(f64, f64, f64)> = (0..n_modes)
        .map(|_| {
            let amp = config.amplitude * rng.random::<f64>();
            let wavelength = rng.random_range(config.min_wavelength..=config.max_wavelength);
            let phase = rng.random_range(0.0..2.0 * PI);
            (amp, 2.0 * PI / wavelength, phase)
        })
        .collect();
    let ds = config.sample_spacing;
    let n = ((config.length + TRACK_MARGIN) / ds).ceil() as usize + 1;
    let curvature: Vec<f64> = (0..n)
        .map(|k| {
            let s = k as f64 * ds;
            let y: f64 = modes.iter().map(|(a, w, p)| a * (w * s + p).sin()).sum();
            y.clamp(-config.max_curvature, config.max_curvature)
        })
        .collect();
    let mut headings = vec![0.0; n];
    let mut xs = vec![0.0; n];
    let mut ys = vec![0.0; n];
    for k in 1..n {
        headings[k] = headings[k - 1] - 0.5 * ds * (curvature[k - 1] + curvature[k]);
        let mid = 0.5 * (headings[k - 1] + headings[k]);
        xs[k] = xs[k - 1] + ds * mid.cos();
        ys[k] = ys[k - 1] + ds * mid.sin();
    }
    Ok(Track {
        theme,
        length: config.length,
        half_width: config.half_width,
        spacing: ds,
        xs,
        ys,
        headings,
        curvature,
    })
}

impl Track {
    pub fn n_samples(&self) -> usize {
        self.xs.len()
    }

    fn index_at(&self, s: f64) -> (usize, f64) {
        let f = (s / self.spacing).clamp(0.0, (self.n_samples() - 1) as f64);
        let k = (f.floor() as usize).min(self.n_samples() - 2);
        (k, f - k as f64)
    }

    pub fn point_at(&self, s: f64) -> (f64, f64) {
        let (k, t) = self.index_at(s);
        (
            self.xs[k] + t * (self.xs[k + 1] - self.xs[k]),
            self.ys[k] + t * (self.ys[k + 1] - self.ys[k]),
        )
    }

    pub fn heading_at(&self, s: f64) -> f64 {
        let (k, t) = self.index_at(s);
        self.headings[k] + t * (self.headings[k + 1] - self.headings[k])
    }

    pub fn curvature_at(&self, s: f64) -> f64 {
        let (k, t) = self.index_at(s);
        self.curvature[k] + t * (self.curvature[k + 1] - self.curvature[k])
    }

    /// Position at arc length `s` displaced `d` to the left.
    pub fn offset_point(&self, s: f64, d: f64) -> (f64, f64) {
        let (x, y) = self.point_at(s);
        let h = self.heading_at(s);
        (x - d * h.sin(), y + d * h.cos())
    }

    /// Projects onto the polyline segment `k..k2`: `(s, side, squared distance)`,
    /// where the sign of `side` tells left (positive) from right.
    fn project_segment(&self, k: usize, k2: usize, px: f64, py: f64) -> (f64, f64, f64) {
        let (ax, ay) = (self.xs[k], self.ys[k]);
        let (ex, ey) = (self.xs[k2] - ax, self.ys[k2] - ay);
        let len2 = ex * ex + ey * ey;
        let t = (((px - ax) * ex + (py - ay) * ey) / len2).clamp(0.0, 1.0);
        let (cx, cy) = (ax + t * ex, ay + t * ey);
        let dist2 = (px - cx).powi(2) + (py - cy).powi(2);
        (
            (k as f64 + t * (k2 - k) as f64) * self.spacing,
            ex * (py - ay) - ey * (px - ax),
            dist2,
        )
    }

    /// Nearest point on the centerline polyline among segments starting at
    /// indices `lo..hi`, taken every `stride` samples.
    fn project_in(&self, px: f64, py: f64, lo: usize, hi: usize, stride: usize) -> (f64, f64) {
        let last = self.n_samples() - 1;
        let hi = hi.min(last);
        let mut best = (0.0, 1.0, f64::INFINITY);
        let mut k = lo.min(last - 1);
        while k < hi {
            let k2 = (k + stride).min(last);
            let cand = self.project_segment(k, k2, px, py);
            if cand.2 < best.2 {
                best = cand;
            }
            k += stride;
        }
        let d = best.2.sqrt();
        (best.0, if best.1 < 0.0 { -d } else { d })
    }

    /// `(s, d)` of a position, searching near `s_hint`.
    pub fn project(&self, px: f64, py: f64, s_hint: f64) -> (f64, f64) {
        let c = (s_hint / self.spacing).round().max(0.0) as usize;
        let w = (8.0 / self.spacing) as usize;
        self.project_in(px, py, c.saturating_sub(w), c + w, 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub s: f64,
    pub d: f64,
}

impl VehicleState {
    /// Vehicle placed at arc length `s`, offset `d` and heading error `psi`
    /// relative to the local road direction.
    pub fn on_track(track: &Track, s: f64, d: f64, psi: f64) -> Self {
        let (x, y) = track.offset_point(s, d);
        let (s, d) = track.project(x, y, s);
        Self {
            x,
            y,
            heading: track.heading_at(s) + psi,
            s,
            d,
        }
    }

    pub fn heading_error(&self, track: &Track) -> f64 {
        let e = self.heading - track.heading_at(self.s);
        (e + PI).rem_euclid(2.0 * PI) - PI
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleConfig {
    pub steering_ratio: f64,
    pub wheelbase: f64,
    pub speed: f64,
    pub frame_dt: f64,
}

impl Default for VehicleConfig {
    fn default() -> Self {
        Self {
            steering_ratio: 15.0,
            wheelbase: 2.7,
            speed: 10.0,
            frame_dt: 1.0 / 30.0,
        }
    }
}

impl VehicleConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.steering_ratio, self.wheelbase, self.speed, self.frame_dt]
            .iter()
            .any(|v| !(*v > 0.0))
        {
            return Err(Error::Config("vehicle parameters must be positive".into()));
        }
        Ok(())
    }
}

/// Steering-wheel angle `S_v * atan(L_v * y)`.
pub fn curvature_to_steering(y: f64, config: &VehicleConfig) -> f64 {
    config.steering_ratio * (config.wheelbase * y).atan()
}

/// Kinematic bicycle update under steering-wheel angle `alpha`.
pub fn vehicle_step(track: &Track, state: &VehicleState, alpha: f64, config: &VehicleConfig) -> VehicleState {
    let limit = PI / 2.0 - 1e-3;
    let wheel = (alpha / config.steering_ratio).clamp(-limit, limit);
    let heading = state.heading - config.speed / config.wheelbase * wheel.tan() * config.frame_dt;
    let step = config.speed * config.frame_dt;
    let x = state.x + step * heading.cos();
    let y = state.y + step * heading.sin();
    let (s, d) = track.project(x, y, state.s + step);
    VehicleState { x, y, heading, s, d }
}

pub const DEFAULT_LOOKAHEAD: f64 = 6.0;

/// Pure-pursuit curvature toward the centerline point `lookahead` meters of
/// arc length ahead; positive steers right.
pub fn expert_label(track: &Track, state: &VehicleState, lookahead: f64) -> f64 {
    let (tx, ty) = track.point_at(state.s + lookahead);
    let (dx, dy) = (tx - state.x, ty - state.y);
    let dist = (dx * dx + dy * dy).sqrt();
    if dist < 1e-9 {
        return 0.0;
    }
    let bearing = dy.atan2(dx) - state.heading;
    -2.0 * bearing.sin() / dist
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub camera_height: f64,
    pub pitch: f64,
    pub fog_distance: f64,
    pub edge_width: f64,
    pub view_behind: f64,
    pub view_ahead: f64,
    /// Centerline samples skipped between candidate segments.
    pub sample_stride: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            width: 48,
            height: 32,
            focal: 24.0,
            camera_height: 1.3,
            pitch: 0.26,
            fog_distance: 25.0,
            edge_width: 0.15,
            view_behind: 3.0,
            view_ahead: 50.0,
            sample_stride: 5,
        }
    }
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), a[2] + t * (b[2] - a[2])]
}

/// Pinhole view from a forward-facing camera over the flat ground plane.
pub fn render_frame(track: &Track, state: &VehicleState, theme: Theme, config: &RenderConfig) -> Image {
    let pal = theme.palette();
    let hw = track.half_width;
    if state.d.abs() > 4.0 * hw {
        return Image::filled(config.width, config.height, pal.road);
    }
    let (cx, cy) = (config.width as f64 / 2.0, config.height as f64 / 2.0);
    let (sp, cp) = config.pitch.sin_cos();
    let (sh, ch) = state.heading.sin_cos();
    let lo = ((state.s - config.view_behind).max(0.0) / track.spacing) as usize;
    let hi = ((state.s + config.view_ahead) / track.spacing) as usize;
    let mut img = Image::filled(config.width, config.height, pal.sky);
    for v in 0..config.height {
        let yc = (v as f64 + 0.5 - cy) / config.focal;
        let down = yc * cp + sp;
        if down <= 1e-6 {
            continue;
        }
        let t = config.camera_height / down;
        let forward = t * (cp - yc * sp);
        let footprint = t / config.focal;
        let fog = 1.0 - (-forward / config.fog_distance).exp();
        for u in 0..config.width {
            let xc = (u as f64 + 0.5 - cx) / config.focal;
            let right = t * xc;
            let gx = state.x + forward * ch + right * sh;
            let gy = state.y + forward * sh - right * ch;
            let (_, lat) = track.project_in(gx, gy, lo, hi, config.sample_stride);
            let (p0, p1) = (lat - footprint / 2.0, lat + footprint / 2.0);
            let road = overlap(p0, p1, -hw, hw) / footprint;
            let edge = (overlap(p0, p1, -hw, -hw + config.edge_width) + overlap(p0, p1, hw - config.edge_width, hw)) / footprint;
            let ground = [0, 1, 2].map(|c| pal.surround[c] * (1.0 - road) + pal.road[c] * (road - edge) + pal.edge[c] * edge);
            img.set_pixel(u, v, mix(ground, pal.sky, fog));
        }
    }
    img.clamp();
    img
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed for the noise on frame `index` of the perturbation stream `seed`.
pub fn frame_noise_seed(seed: u64, index: u64) -> u64 {
    stream_rng(seed, index).random()
}

/// I.i.d. zero-mean normal samples of the given variance.
pub fn noise_field(n: usize, variance: f64, seed: u64) -> Vec<f64> {
    if variance <= 0.0 {
        return vec![0.0; n];
    }
    let normal = Normal::new(0.0, variance.sqrt()).expect("finite variance");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| normal.sample(&mut rng)).collect()
}

pub fn add_gaussian_noise(image: &Image, variance: f64, seed: u64) -> Image {
    if variance <= 0.0 {
        return image.clone();
    }
    let mut out = image.clone();
    for (p, n) in out.data.iter_mut().zip(noise_field(image.data.len(), variance, seed)) {
        *p += n;
    }
    out.clamp();
    out
}

pub fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    } / 6.0;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    [h, s, max]
}

pub fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentFactors {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl AugmentFactors {
    pub const IDENTITY: Self = Self {
        brightness: 0.0,
        contrast: 1.0,
        saturation: 1.0,
    };

    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            brightness: rng.random_range(-0.4..=0.4),
            contrast: rng.random_range(0.6..=1.4),
            saturation: rng.random_range(0.6..=1.4),
        }
    }
}

/// Brightness shift, per-channel contrast about the channel mean, then HSV
/// saturation scaling; clamps to `[0, 1]` after every stage.
pub fn apply_augment(image: &Image, f: &AugmentFactors) -> Image {
    let mut out = image.clone();
    for v in &mut out.data {
        *v += f.brightness;
    }
    out.clamp();
    let n = (out.width * out.height) as f64;
    for c in 0..3 {
        let mean = out.data.iter().skip(c).step_by(3).sum::<f64>() / n;
        for v in out.data.iter_mut().skip(c).step_by(3) {
            *v = mean + f.contrast * (*v - mean);
        }
    }
    out.clamp();
    if f.saturation != 1.0 {
        for px in out.data.chunks_mut(3) {
            let [h, s, v] = rgb_to_hsv([px[0], px[1], px[2]]);
            px.copy_from_slice(&hsv_to_rgb([h, (s * f.saturation).clamp(0.0, 1.0), v]));
        }
        out.clamp();
    }
    out
}

pub fn augment(image: &Image, seed: u64) -> Image {
    apply_augment(image, &AugmentFactors::sample(seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_episodes: usize,
    pub themes: Vec<Theme>,
    pub seed: u64,
    /// Probability that a sequence starts from a perturbed pose.
    pub recovery_fraction: f64,
    /// Frames between possible perturbations; aligns with training windows.
    pub sequence_length: usize,
    pub max_offset_fraction: f64,
    pub max_heading_error: f64,
    pub lookahead: f64,
    pub track: TrackConfig,
    pub vehicle: VehicleConfig,
    pub render: RenderConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_episodes: 40,
            themes: Theme::ALL.to_vec(),
            seed: 0,
            recovery_fraction: 0.5,
            sequence_length: 32,
            max_offset_fraction: 0.8,
            max_heading_error: 20f64.to_radians(),
            lookahead: DEFAULT_LOOKAHEAD,
            track: TrackConfig::default(),
            vehicle: VehicleConfig::default(),
            render: RenderConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_episodes == 0 || self.themes.is_empty() || self.sequence_length == 0 {
            return Err(Error::Config("dataset needs episodes, themes and a sequence length".into()));
        }
        if !(0.0..=1.0).contains(&self.recovery_fraction) || !(self.lookahead > 0.0) {
            return Err(Error::Config("recovery_fraction must be in [0, 1] and lookahead positive".into()));
        }
        self.track.validate()?;
        self.vehicle.validate()
    }

    pub fn frames_per_episode(&self) -> usize {
        (self.track.length / (self.vehicle.speed * self.vehicle.frame_dt)).floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub theme: Theme,
    pub track_seed: u64,
    pub width: usize,
    pub height: usize,
}

/// One recorded expert drive.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeData {
    pub meta: EpisodeMeta,
    /// 8-bit RGB frames.
    pub frames: Vec<Vec<u8>>,
    pub labels: Vec<f64>,
    pub lateral_offset: Vec<f64>,
    pub heading_error: Vec<f64>,
}

impl EpisodeData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, t: usize) -> Image {
        Image::from_rgb8(self.meta.width, self.meta.height, &self.frames[t]).expect("frame size matches metadata")
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob = Vec::new();
        write_frames_blob(&mut blob, self.meta.width, self.meta.height, &self.frames).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("frames.bin");
        fs::write(&p, blob).map_err(|e| Error::io(&p, e))?;
        let mut csv = Vec::new();
        writeln!(csv, "t,curvature,lateral_offset,heading_error").unwrap();
        for t in 0..self.len() {
            writeln!(
                csv,
                "{},{:e},{:e},{:e}",
                t, self.labels[t], self.lateral_offset[t], self.heading_error[t]
            )
            .unwrap();
        }
        let p = dir.join("labels.csv");
        fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("meta.json");
        fs::write(&p, serde_json::to_string_pretty(&self.meta).unwrap()).map_err(|e| Error::io(&p, e))
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let p = dir.join("meta.json");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let meta: EpisodeMeta = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
        let p = dir.join("frames.bin");
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let (w, h, frames) = read_frames_blob(&bytes)?;
        if (w, h) != (meta.width, meta.height) {
            return Err(Error::Format(format!("{}: frame size disagrees with metadata", p.display())));
        }
        let p = dir.join("labels.csv");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let mut cols = [Vec::new(), Vec::new(), Vec::new()];
        for (i, line) in text.lines().skip(1).enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(Error::Format(format!(
                    "{}: line {} has {} fields",
                    p.display(),
                    i + 2,
                    fields.len()
                )));
            }
            for c in 0..3 {
                let v = fields[c + 1]
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("{}: line {}: {e}", p.display(), i + 2)))?;
                cols[c].push(v);
            }
        }
        if cols[0].len() != frames.len() {
            return Err(Error::Format(format!(
                "{}: {} labels for {} frames",
                dir.display(),
                cols[0].len(),
                frames.len()
            )));
        }
        let [labels, lateral_offset, heading_error] = cols;
        Ok(Self {
            meta,
            frames,
            labels,
            lateral_offset,
            heading_error,
        })
    }
}

/// Expert drive over one track. At each sequence boundary the vehicle is,
/// with probability `recovery_fraction`, placed at a random offset and
/// heading error at its current arc length.
pub fn generate_episode(config: &DatasetConfig, track_seed: u64, theme: Theme, episode_seed: u64) -> Result<EpisodeData> {
    let track = generate_track(track_seed, &config.track, theme)?;
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed);
    let n = config.frames_per_episode();
    let max_d = config.max_offset_fraction * track.half_width;
    let mut state = VehicleState::on_track(&track, 0.0, 0.0, 0.0);
    let mut ep = EpisodeData {
        meta: EpisodeMeta {
            theme,
            track_seed,
            width: config.render.width,
            height: config.render.height,
        },
        frames: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
        lateral_offset: Vec::with_capacity(n),
        heading_error: Vec::with_capacity(n),
    };
    for t in 0..n {
        if t % config.sequence_length == 0 && config.recovery_fraction > 0.0 && rng.random::<f64>() < config.recovery_fraction {
            let d = rng.random_range(-max_d..=max_d);
            let psi = rng.random_range(-config.max_heading_error..=config.max_heading_error);
            state = VehicleState::on_track(&track, state.s, d, psi);
        }
        ep.frames.push(render_frame(&track, &state, theme, &config.render).to_rgb8());
        let label = expert_label(&track, &state, config.lookahead);
        ep.labels.push(label);
        ep.lateral_offset.push(state.d);
        ep.heading_error.push(state.heading_error(&track));
        state = vehicle_step(&track, &state, curvature_to_steering(label, &config.vehicle), &config.vehicle);
    }
    Ok(ep)
}

/// `(theme, track seed, episode seed)` for every episode; themes alternate
/// so that they split evenly.
pub fn episode_plan(config: &DatasetConfig) -> Vec<(Theme, u64, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.n_episodes)
        .map(|i| (config.themes[i % config.themes.len()], rng.random(), rng.random()))
        .collect()
}

pub fn generate_dataset(config: &DatasetConfig) -> Result<Vec<EpisodeData>> {
    config.validate()?;
    episode_plan(config)
        .into_iter()
        .map(|(theme, track_seed, episode_seed)| generate_episode(config, track_seed, theme, episode_seed))
        .collect()
}

/// Splits episode indices into `(train, validation)` by whole episodes.
pub fn split_episodes(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = if n > 1 {
        ((n as f64 * val_fraction).round() as usize).min(n - 1)
    } else {
        0
    };
    let val = idx.split_off(n - n_val);
    idx.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    (idx, val)
}

/// Non-overlapping fixed-length windows over recorded episodes, fed to the
/// trainer as standardized frame tensors. Training draws are augmented.
pub struct FrameWindows<'a> {
    episodes: Vec<&'a EpisodeData>,
    windows: Vec<(usize, usize)>,
    length: usize,
}

impl<'a> FrameWindows<'a> {
    pub fn new(episodes: Vec<&'a EpisodeData>, length: usize) -> Self {
        let windows = episodes
            .iter()
            .enumerate()
            .flat_map(|(e, ep)| (0..ep.len() / length.max(1)).map(move |w| (e, w * length)))
            .collect();
        Self { episodes, windows, length }
    }
}

impl<T: Scalar> SequenceSource<T> for FrameWindows<'_> {
    fn len(&self) -> usize {
        self.windows.len()
    }

    fn get(&self, index: usize, augment_seed: Option<u64>) -> Result<Sequence<T>> {
        let (e, start) = self.windows[index];
        let ep = self.episodes[e];
        let factors = augment_seed.map(AugmentFactors::sample);
        let frames = (start..start + self.length)
            .map(|t| {
                let img = ep.image(t);
                match &factors {
                    Some(f) => standardize(&apply_augment(&img, f)),
                    None => standardize(&img),
                }
            })
            .collect();
        Ok(Sequence {
            inputs: SequenceInput::Frames(frames),
            labels: ep.labels[start..start + self.length].iter().map(|&y| T::lit(y)).collect(),
        })
    }
}

/// Anything that turns an observation into a curvature command.
pub trait Controller {
    fn reset(&mut self);

    /// Whether [`Controller::control`] reads the camera frame.
    fn needs_frames(&self) -> bool {
        true
    }

    fn control(&mut self, frame: &Image, track: &Track, state: &VehicleState) -> Result<f64>;

    /// Internal neuron potentials after the last call, if any.
    fn activity(&self) -> Option<Vec<f64>> {
        None
    }
}

pub struct ExpertController {
    pub lookahead: f64,
}

impl Controller for ExpertController {
    fn reset(&mut self) {}

    fn needs_frames(&self) -> bool {
        false
    }

    fn control(&mut self, _frame: &Image, track: &Track, state: &VehicleState) -> Result<f64> {
        Ok(expert_label(track, state, self.lookahead))
    }
}

/// Always commands a fixed curvature.
pub struct ConstantController(pub f64);

impl Controller for ConstantController {
    fn reset(&mut self) {}

    fn needs_frames(&self) -> bool {
        false
    }

    fn control(&mut self, _: &Image, _: &Track, _: &VehicleState) -> Result<f64> {
        Ok(self.0)
    }
}

/// Conv head plus recurrent network driving from camera frames.
pub struct NetworkController<T> {
    pub policy: Policy<T>,
    pub solver: SolverConfig,
    state: Vec<T>,
}

impl<T: Scalar> NetworkController<T> {
    pub fn new(policy: Policy<T>, solver: SolverConfig) -> Self {
        let n = policy.wiring.n_neurons();
        Self {
            policy,
            solver,
            state: vec![T::zero(); n],
        }
    }
}

impl<T: Scalar> Controller for NetworkController<T> {
    fn reset(&mut self) {
        self.state.iter_mut().for_each(|x| *x = T::zero());
    }

    fn control(&mut self, frame: &Image, _: &Track, _: &VehicleState) -> Result<f64> {
        let (sensory, _) = self.policy.sense(&standardize::<T>(frame))?;
        let next = self.policy.step(&self.state, &sensory, &self.solver)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: 0 });
        }
        self.state = next;
        Ok(self.policy.read_out(self.state[self.policy.wiring.output_neuron()]).as_f64())
    }

    fn activity(&self) -> Option<Vec<f64>> {
        Some(self.state.iter().map(|v| v.as_f64()).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub noise_variance: f64,
    pub noise_seed: u64,
    /// Step cap; the episode also ends once the track's drivable length is passed.
    pub max_steps: usize,
    pub lookahead: f64,
    pub record_frames: bool,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            noise_variance: 0.0,
            noise_seed: 0,
            max_steps: usize::MAX,
            lookahead: DEFAULT_LOOKAHEAD,
            record_frames: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// Observed (possibly noisy) 8-bit frames, when recorded.
    pub frames: Vec<Vec<u8>>,
    pub labels: Vec<f64>,
    pub predictions: Vec<f64>,
    /// State at which each frame was taken.
    pub states: Vec<VehicleState>,
    /// `activities[t]`: neuron potentials after frame `t`.
    pub activities: Vec<Vec<f64>>,
    pub crashed: bool,
    pub crash_step: Option<usize>,
    pub crash_reason: Option<String>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }

    pub fn lateral_offsets(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.d).collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W, track: &Track) -> std::io::Result<()> {
        writeln!(w, "t,s,lateral_offset,heading_error,label,prediction")?;
        for t in 0..self.len() {
            let st = &self.states[t];
            writeln!(
                w,
                "{},{:e},{:e},{:e},{:e},{:e}",
                t,
                st.s,
                st.d,
                st.heading_error(track),
                self.labels[t],
                self.predictions[t]
            )?;
        }
        Ok(())
    }
}

/// Render, perturb, control and advance until the track ends, the step cap
/// is hit, or the vehicle leaves the road.
pub fn run_closed_loop(
    controller: &mut dyn Controller,
    track: &Track,
    vehicle: &VehicleConfig,
    render: &RenderConfig,
    config: &EpisodeConfig,
) -> Episode {
    controller.reset();
    let mut state = VehicleState::on_track(track, 0.0, 0.0, 0.0);
    let mut ep = Episode {
        frames: Vec::new(),
        labels: Vec::new(),
        predictions: Vec::new(),
        states: Vec::new(),
        activities: Vec::new(),
        crashed: false,
        crash_step: None,
        crash_reason: None,
    };
    let blank = Image::filled(render.width, render.height, [0.0; 3]);
    let mut t = 0;
    while t < config.max_steps && state.s < track.length {
        let frame = if controller.needs_frames() || config.record_frames {
            let clean = render_frame(track, &state, track.theme, render);
            add_gaussian_noise(&clean, config.noise_variance, frame_noise_seed(config.noise_seed, t as u64))
        } else {
            blank.clone()
        };
        if config.record_frames {
            ep.frames.push(frame.to_rgb8());
        }
        let y = match controller.control(&frame, track, &state) {
            Ok(y) if y.is_finite() => y,
            Ok(_) | Err(_) => {
                ep.crashed = true;
                ep.crash_step = Some(t);
                ep.crash_reason = Some("network state diverged".into());
                break;
            }
        };
        ep.labels.push(expert_label(track, &state, config.lookahead));
        ep.predictions.push(y);
        ep.states.push(state);
        if let Some(a) = controller.activity() {
            ep.activities.push(a);
        }
        if state.d.abs() > track.half_width {
            ep.crashed = true;
            ep.crash_step = Some(t);
            ep.crash_reason = Some("left the road".into());
            break;
        }
        state = vehicle_step(track, &state, curvature_to_steering(y, vehicle), vehicle);
        t += 1;
    }
    ep
}
