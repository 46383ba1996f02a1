//! Deterministic synthetic scenes: textured shapes gliding over a textured
//! background at fixed depths, rendered to color frames, dense depth, and an
//! event stream produced by log-intensity threshold crossings between
//! sub-frames.

use crate::error::{Error, Result};
use crate::events::{read_events, write_events, Event, EventStream};
use crate::loss::GroundTruth;
use crate::raster::{read_depth, read_ppm, write_depth, write_ppm};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

/// Intensity floor applied before taking logs, so black pixels stay finite.
const LOG_FLOOR: f64 = 1e-3;

/// How strongly night mode squeezes intensities toward mid-gray.
const NIGHT_CONTRAST: f64 = 0.10;
const NIGHT_NOISE_SIGMA: f64 = 0.04;

/// Generator settings for one family of scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub n_objects: usize,
    /// Meters, near and far; the background sits at the far end.
    pub depth_range: (f64, f64),
    /// Pixels per second.
    pub velocity_range: (f64, f64),
    /// Contrast threshold in log-intensity units.
    pub theta: f64,
    /// Sub-frame spacing for event simulation, microseconds.
    pub frame_interval_us: u64,
    /// Length of the event window ending at the image timestamp.
    pub window_us: u64,
    /// Low-light variant: images lose contrast and gain noise while events
    /// stay clean.
    pub night: bool,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 7,
            height: 64,
            width: 64,
            n_objects: 3,
            depth_range: (4.0, 12.0),
            velocity_range: (20.0, 80.0),
            theta: 0.2,
            frame_interval_us: 1_000,
            window_us: 50_000,
            night: false,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height % 16 != 0 || self.width % 16 != 0 {
            return Err(Error::usage(format!(
                "canvas {}x{} must be divisible by 16",
                self.height, self.width
            )));
        }
        if !(self.theta > 0.0) {
            return Err(Error::usage("contrast threshold must be positive"));
        }
        let (near, far) = self.depth_range;
        if !(near > 0.0 && near < far) {
            return Err(Error::usage(format!(
                "depth range ({near}, {far}) must satisfy 0 < near < far"
            )));
        }
        let (lo, hi) = self.velocity_range;
        if !(lo >= 0.0 && lo <= hi) {
            return Err(Error::usage(format!(
                "velocity range ({lo}, {hi}) must satisfy 0 <= lo <= hi"
            )));
        }
        if self.frame_interval_us == 0 || self.window_us < self.frame_interval_us {
            return Err(Error::usage(
                "window must cover at least one frame interval",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Silhouette {
    Disc { radius: f64 },
    Block { half_w: f64, half_h: f64 },
}

#[derive(Debug, Clone)]
pub(crate) struct SceneObject {
    pub(crate) shape: Silhouette,
    pub(crate) cx: f64,
    pub(crate) cy: f64,
    /// Pixels per second.
    pub(crate) vx: f64,
    pub(crate) vy: f64,
    pub(crate) depth: f64,
    pub(crate) color: [f64; 3],
    pub(crate) freq: (f64, f64),
    pub(crate) phase: f64,
}

/// One concrete episode: objects in back-to-front paint order plus a static
/// textured background at the far plane.
#[derive(Debug, Clone)]
pub(crate) struct Scene {
    pub(crate) objects: Vec<SceneObject>,
    pub(crate) bg_color: [f64; 3],
    pub(crate) bg_freq: (f64, f64),
    pub(crate) bg_phase: f64,
    pub(crate) bg_depth: f64,
}

/// Signed toroidal offset of `a` from 0 on a ring of circumference `n`,
/// in (-n/2, n/2]. Keeps silhouettes continuous when objects wrap.
fn wrap_delta(a: f64, n: f64) -> f64 {
    let d = a.rem_euclid(n);
    if d > n / 2.0 {
        d - n
    } else {
        d
    }
}

fn grating(dx: f64, dy: f64, freq: (f64, f64), phase: f64) -> f64 {
    0.55 + 0.45 * (std::f64::consts::TAU * (freq.0 * dx + freq.1 * dy) + phase).sin()
}

impl Scene {
    /// Draws the episode for sample `index`; every draw depends only on
    /// `(spec.seed, index)`. Returns the RNG so night noise continues the
    /// same stream.
    pub(crate) fn generate(spec: &SceneSpec, index: u64) -> (Scene, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(index);
        let (h, w) = (spec.height as f64, spec.width as f64);
        let max_r = h.min(w) / 4.0;
        let mut objects: Vec<SceneObject> = (0..spec.n_objects)
            .map(|_| {
                let shape = if rng.random::<bool>() {
                    Silhouette::Disc {
                        radius: rng.random_range(3.0..max_r),
                    }
                } else {
                    Silhouette::Block {
                        half_w: rng.random_range(2.0..max_r),
                        half_h: rng.random_range(2.0..max_r),
                    }
                };
                let speed = rng.random_range(spec.velocity_range.0..=spec.velocity_range.1);
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                SceneObject {
                    shape,
                    cx: rng.random_range(0.0..w),
                    cy: rng.random_range(0.0..h),
                    vx: speed * angle.cos(),
                    vy: speed * angle.sin(),
                    depth: rng.random_range(spec.depth_range.0..spec.depth_range.1),
                    color: [
                        rng.random_range(0.25..0.95),
                        rng.random_range(0.25..0.95),
                        rng.random_range(0.25..0.95),
                    ],
                    freq: (rng.random_range(0.05..0.25), rng.random_range(0.05..0.25)),
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                }
            })
            .collect();
        objects.sort_by(|a, b| b.depth.total_cmp(&a.depth));
        let scene = Scene {
            objects,
            bg_color: [
                rng.random_range(0.15..0.5),
                rng.random_range(0.15..0.5),
                rng.random_range(0.15..0.5),
            ],
            bg_freq: (rng.random_range(0.03..0.12), rng.random_range(0.03..0.12)),
            bg_phase: rng.random_range(0.0..std::f64::consts::TAU),
            bg_depth: spec.depth_range.1,
        };
        (scene, rng)
    }

    /// Renders color and depth at time `t_us`. Nearer objects are painted
    /// last, so they occlude.
    pub(crate) fn paint(&self, height: usize, width: usize, t_us: u64) -> (Array3<f64>, Array2<f64>) {
        let t_s = t_us as f64 * 1e-6;
        let mut image = Array3::<f64>::zeros((height, width, 3));
        let mut depth = Array2::<f64>::from_elem((height, width), self.bg_depth);
        for y in 0..height {
            for x in 0..width {
                let tex = grating(x as f64, y as f64, self.bg_freq, self.bg_phase);
                for c in 0..3 {
                    image[[y, x, c]] = self.bg_color[c] * tex;
                }
            }
        }
        for obj in &self.objects {
            let cx = obj.cx + obj.vx * t_s;
            let cy = obj.cy + obj.vy * t_s;
            for y in 0..height {
                let dy = wrap_delta(y as f64 - cy, height as f64);
                for x in 0..width {
                    let dx = wrap_delta(x as f64 - cx, width as f64);
                    let inside = match obj.shape {
                        Silhouette::Disc { radius } => dx * dx + dy * dy <= radius * radius,
                        Silhouette::Block { half_w, half_h } => {
                            dx.abs() <= half_w && dy.abs() <= half_h
                        }
                    };
                    if inside {
                        let tex = grating(dx, dy, obj.freq, obj.phase);
                        for c in 0..3 {
                            image[[y, x, c]] = (obj.color[c] * tex).clamp(0.0, 1.0);
                        }
                        depth[[y, x]] = obj.depth;
                    }
                }
            }
        }
        (image, depth)
    }
}

fn luminance(image: &Array3<f64>) -> Array2<f64> {
    let (h, w, _) = image.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        (image[[y, x, 0]] + image[[y, x, 1]] + image[[y, x, 2]]) / 3.0
    })
}

fn night_post(image: &mut Array3<f64>, rng: &mut ChaCha8Rng) {
    use rand_distr::{Distribution, Normal};
    let noise = Normal::new(0.0, NIGHT_NOISE_SIGMA).unwrap();
    for v in image.iter_mut() {
        let squeezed = 0.5 + (*v - 0.5) * NIGHT_CONTRAST;
        *v = (squeezed + noise.sample(rng)).clamp(0.0, 1.0);
    }
}

/// Renders the image and depth map of sample 0 at `t_us`. Night specs get
/// the degraded image; depth is unaffected.
pub fn render(spec: &SceneSpec, t_us: u64) -> Result<(Array3<f64>, Array2<f64>)> {
    spec.validate()?;
    let (scene, mut rng) = Scene::generate(spec, 0);
    let (mut image, depth) = scene.paint(spec.height, spec.width, t_us);
    if spec.night {
        night_post(&mut image, &mut rng);
    }
    Ok((image, depth))
}

/// Runs the per-pixel threshold model over a luminance sequence: an event
/// fires each time log intensity moves `theta` past the last fired level,
/// with its timestamp linearly interpolated inside the sub-frame interval.
pub fn events_from_frames(
    frames: &[Array2<f64>],
    times_us: &[u64],
    theta: f64,
    sensor: (usize, usize),
) -> Result<EventStream> {
    if frames.len() != times_us.len() {
        return Err(Error::usage("one timestamp per frame required"));
    }
    if frames.is_empty() {
        return Ok(EventStream::new(vec![], sensor)?);
    }
    let (h, w) = sensor;
    let slack = theta * 1e-9;
    let log = |v: f64| (v.max(0.0) + LOG_FLOOR).ln();
    let mut reference: Vec<f64> = frames[0].iter().map(|&v| log(v)).collect();
    let mut last_log: Vec<f64> = reference.clone();
    let mut events: Vec<Event> = Vec::new();
    for k in 1..frames.len() {
        let (t0, t1) = (times_us[k - 1] as f64, times_us[k] as f64);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let l0 = last_log[i];
                let l1 = log(frames[k][[y, x]]);
                let span = l1 - l0;
                loop {
                    let (crossed, polarity) = if l1 - reference[i] >= theta - slack {
                        (reference[i] + theta, 1i8)
                    } else if reference[i] - l1 >= theta - slack {
                        (reference[i] - theta, -1i8)
                    } else {
                        break;
                    };
                    let frac = if span.abs() > 1e-12 {
                        ((crossed - l0) / span).clamp(0.0, 1.0)
                    } else {
                        1.0
                    };
                    let t = (t0 + frac * (t1 - t0)).round() as u64;
                    events.push(Event::new(x as u16, y as u16, t, polarity));
                    reference[i] = crossed;
                }
                last_log[i] = l1;
            }
        }
    }
    events.sort_by_key(|e| e.t);
    Ok(EventStream::new(events, sensor)?)
}

/// Sub-frame timestamps covering `[t0, t1]`, spaced `dt_us` with a shorter
/// final step when the window is not a multiple.
fn frame_times(t0: u64, t1: u64, dt_us: u64) -> Vec<u64> {
    let mut times = Vec::new();
    let mut t = t0;
    while t < t1 {
        times.push(t);
        t = (t + dt_us).min(t1);
    }
    times.push(t1);
    times
}

/// Simulates the event stream of sample 0 over `[t0, t1]`. Events always come
/// from clean intensities, night or not.
pub fn simulate_events(spec: &SceneSpec, t0: u64, t1: u64) -> Result<EventStream> {
    spec.validate()?;
    if t0 >= t1 {
        return Err(Error::usage(format!("window [{t0}, {t1}] must be increasing")));
    }
    let (scene, _) = Scene::generate(spec, 0);
    let times = frame_times(t0, t1, spec.frame_interval_us);
    let frames: Vec<Array2<f64>> = times
        .iter()
        .map(|&t| luminance(&scene.paint(spec.height, spec.width, t).0))
        .collect();
    events_from_frames(&frames, &times, spec.theta, (spec.height, spec.width))
}

/// One training/eval triplet.
#[derive(Debug, Clone)]
pub struct Sample {
    /// `[H, W, 3]` in `[0, 1]`, rendered at the end of the event window.
    pub image: Array3<f64>,
    pub events: EventStream,
    pub gt: GroundTruth,
}

/// Generates sample `index` of the family: events over `[0, window]`, image
/// and depth at the window end.
pub fn generate_sample(spec: &SceneSpec, index: u64) -> Result<Sample> {
    spec.validate()?;
    let (scene, mut rng) = Scene::generate(spec, index);
    let times = frame_times(0, spec.window_us, spec.frame_interval_us);
    let frames: Vec<Array2<f64>> = times
        .iter()
        .map(|&t| luminance(&scene.paint(spec.height, spec.width, t).0))
        .collect();
    let events = events_from_frames(&frames, &times, spec.theta, (spec.height, spec.width))?;
    let (mut image, depth) = scene.paint(spec.height, spec.width, spec.window_us);
    if spec.night {
        night_post(&mut image, &mut rng);
    }
    Ok(Sample {
        image,
        events,
        gt: GroundTruth::dense(depth)?,
    })
}

/// Paths of one manifest row, already joined onto the manifest directory.
#[derive(Debug, Clone)]
pub struct ManifestRow {
    pub image: PathBuf,
    pub events: PathBuf,
    pub depth: PathBuf,
}

/// Writes `n` samples plus `manifest.csv` into `out_dir` and returns the
/// manifest path. Same spec, same bytes.
pub fn build_split(spec: &SceneSpec, n: usize, out_dir: &Path) -> Result<PathBuf> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut manifest = String::from("image,events,depth\n");
    for i in 0..n {
        let sample = generate_sample(spec, i as u64)?;
        let (img, evt, dpt) = (
            format!("{i:04}.ppm"),
            format!("{i:04}.evt"),
            format!("{i:04}.dpt"),
        );
        write_ppm(&sample.image, &out_dir.join(&img))?;
        write_events(&sample.events, &out_dir.join(&evt))?;
        write_depth(&sample.gt.depth, &out_dir.join(&dpt))?;
        manifest.push_str(&format!("{img},{evt},{dpt}\n"));
    }
    let path = out_dir.join("manifest.csv");
    std::fs::write(&path, manifest)?;
    Ok(path)
}

/// Reads a manifest written by [`build_split`] (or hand-rolled with the same
/// header); relative paths resolve against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read manifest {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines();
    match lines.next() {
        Some("image,events,depth") => {}
        other => {
            return Err(Error::data(format!(
                "manifest {} must start with 'image,events,depth', got {:?}",
                path.display(),
                other.unwrap_or("")
            )))
        }
    }
    let mut rows = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(Error::data(format!(
                "manifest {} line {}: expected 3 columns, got {}",
                path.display(),
                ln + 2,
                cols.len()
            )));
        }
        rows.push(ManifestRow {
            image: base.join(cols[0].trim()),
            events: base.join(cols[1].trim()),
            depth: base.join(cols[2].trim()),
        });
    }
    Ok(rows)
}

/// Loads one triplet from disk. Depth pixels that are nonpositive or
/// non-finite become invalid ground truth.
pub fn load_sample(row: &ManifestRow) -> Result<Sample> {
    let image = read_ppm(&row.image)?;
    let events = read_events(&row.events)?;
    let depth = read_depth(&row.depth)?;
    let valid = depth.mapv(|d| d.is_finite() && d > 0.0);
    Ok(Sample {
        image,
        events,
        gt: GroundTruth::new(depth, valid)?,
    })
}
