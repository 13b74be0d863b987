//! Synthetic infrared sequences: smooth cluttered backgrounds, Gaussian point
//! targets on linear (optionally accelerating) tracks, and dim events that
//! suppress a target's contrast for a span of frames.
//!
//! Coordinates: a target position `(x, y)` is in pixel-index units, so the
//! blob peaks on pixel `(round(y), round(x))`. Pixel `(r, c)` covers
//! `[c, c+1) × [r, r+1)` in box coordinates, so a position maps to the box
//! centre `(x + 0.5, y + 0.5)`.
//!
//! Every random draw comes from a stream keyed by `(seed, frame, target, tag)`.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::Frame;
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Minimum local signal-to-noise ratio of an undimmed target.
pub const SNR_FLOOR: f64 = 3.0;
/// Smallest annotated box side in pixels.
pub const MIN_BOX_SIDE: f64 = 7.0;
const SIGMA_RANGE: (f64, f64) = (0.5, 2.0);
const QUANT: f64 = 65535.0;

/// Rounds to the nearest 16-bit level so PNG round trips are exact.
pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * QUANT).round() / QUANT
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for one `(seed, frame, target, tag)` key.
pub fn stream(seed: u64, frame: u64, target: u64, tag: &str) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for part in [frame, target] {
        h = splitmix(h ^ part);
    }
    for b in tag.bytes() {
        h = splitmix(h ^ b as u64);
    }
    ChaCha8Rng::seed_from_u64(h)
}

const NONE: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    /// Position at frame 0, pixel-index units.
    pub start: (f64, f64),
    /// Pixels per frame.
    pub velocity: (f64, f64),
    /// Pixels per frame²; zero for straight tracks.
    pub acceleration: (f64, f64),
    pub sigma: f64,
    /// Peak intensity added at the centre.
    pub contrast: f64,
}

impl TargetSpec {
    pub fn position(&self, frame: usize) -> (f64, f64) {
        let t = frame as f64;
        (
            self.start.0 + self.velocity.0 * t + 0.5 * self.acceleration.0 * t * t,
            self.start.1 + self.velocity.1 * t + 0.5 * self.acceleration.1 * t * t,
        )
    }

    /// Annotated box side: `max(7, round(6σ))`.
    pub fn box_side(&self) -> f64 {
        MIN_BOX_SIDE.max((6.0 * self.sigma).round())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimEvent {
    pub target: usize,
    pub start: usize,
    pub len: usize,
    /// Contrast factor in `[0, 1]`.
    pub multiplier: f64,
}

impl DimEvent {
    pub fn covers(&self, target: usize, frame: usize) -> bool {
        self.target == target && frame >= self.start && frame < self.start + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub length: usize,
    pub targets: Vec<TargetSpec>,
    /// Mean background intensity.
    pub level: f64,
    /// Standard deviation of the static clutter field.
    pub clutter: f64,
    /// Smoothing radius (Gaussian σ, px) of the clutter field.
    pub clutter_scale: f64,
    /// Per-frame white sensor noise standard deviation.
    pub sensor_noise: f64,
    /// Intensity change across the full width / height.
    pub gradient: (f64, f64),
    pub dim_events: Vec<DimEvent>,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.length == 0 {
            return Err(Error::input("scene needs positive height, width and length"));
        }
        if self.clutter < 0.0 || self.sensor_noise < 0.0 || self.clutter_scale < 0.0 {
            return Err(Error::input("noise parameters must be non-negative"));
        }
        for (i, t) in self.targets.iter().enumerate() {
            if !(SIGMA_RANGE.0..=SIGMA_RANGE.1).contains(&t.sigma) {
                return Err(Error::input(format!(
                    "target {i}: sigma {} outside [{}, {}]",
                    t.sigma, SIGMA_RANGE.0, SIGMA_RANGE.1
                )));
            }
            if !(t.contrast > 0.0 && t.contrast <= 1.0) {
                return Err(Error::input(format!("target {i}: contrast {} outside (0, 1]", t.contrast)));
            }
        }
        for e in &self.dim_events {
            if e.target >= self.targets.len() {
                return Err(Error::input(format!("dim event refers to missing target {}", e.target)));
            }
            if !(0.0..=1.0).contains(&e.multiplier) {
                return Err(Error::input(format!("dim multiplier {} outside [0, 1]", e.multiplier)));
            }
        }
        Ok(())
    }

    /// Whether the target centre is at least 2σ inside the frame.
    pub fn in_bounds(&self, target: usize, frame: usize) -> bool {
        let t = &self.targets[target];
        let (x, y) = t.position(frame);
        let m = 2.0 * t.sigma;
        x >= m && y >= m && x <= self.width as f64 - 1.0 - m && y <= self.height as f64 - 1.0 - m
    }

    /// A target that leaves the margin is considered to have exited for good.
    pub fn present(&self, target: usize, frame: usize) -> bool {
        (0..=frame).all(|f| self.in_bounds(target, f))
    }

    pub fn multiplier(&self, target: usize, frame: usize) -> f64 {
        self.dim_events
            .iter()
            .filter(|e| e.covers(target, frame))
            .map(|e| e.multiplier)
            .fold(1.0, f64::min)
    }

    pub fn dimmed(&self, target: usize, frame: usize) -> bool {
        self.multiplier(target, frame) < 1.0
    }
}

/// One annotated target in one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetBox {
    pub target: usize,
    pub bbox: BBox,
    pub visible: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub id: String,
    pub frames: Vec<Frame>,
    pub annotations: Vec<Vec<TargetBox>>,
    pub spec: SceneSpec,
}

impl Sequence {
    pub fn boxes(&self, frame: usize) -> Vec<BBox> {
        self.annotations[frame].iter().map(|a| a.bbox).collect()
    }

    /// Frame indices where at least one present target is dimmed.
    pub fn dimmed_frames(&self) -> Vec<usize> {
        (0..self.frames.len())
            .filter(|&f| self.annotations[f].iter().any(|a| self.spec.dimmed(a.target, f)))
            .collect()
    }
}

fn gaussian_blur(field: &mut [f64], h: usize, w: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let mut tmp = vec![0.0; h * w];
    // reflected borders
    let refl = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        while i < 0 || i >= n {
            i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
        }
        i as usize
    };
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-r..=r)
                .map(|d| kernel[(d + r) as usize] * field[y * w + refl(x as isize + d, w)])
                .sum::<f64>()
                / norm;
        }
    }
    for y in 0..h {
        for x in 0..w {
            field[y * w + x] = (-r..=r)
                .map(|d| kernel[(d + r) as usize] * tmp[refl(y as isize + d, h) * w + x])
                .sum::<f64>()
                / norm;
        }
    }
}

/// Static background: level + gradient + smoothed unit-variance clutter.
fn background(spec: &SceneSpec) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (spec.height, spec.width);
    let mut clutter = vec![0.0; h * w];
    if spec.clutter > 0.0 {
        let mut rng = stream(spec.seed, NONE, NONE, "clutter");
        for v in clutter.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        gaussian_blur(&mut clutter, h, w, spec.clutter_scale);
        let n = clutter.len() as f64;
        let mean = clutter.iter().sum::<f64>() / n;
        let sd = (clutter.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        let sd = if sd > 0.0 { sd } else { 1.0 };
        clutter.iter_mut().for_each(|v| *v = spec.clutter * (*v - mean) / sd);
    }
    let mut base = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let gx = spec.gradient.0 * (x as f64 / w as f64 - 0.5);
            let gy = spec.gradient.1 * (y as f64 / h as f64 - 0.5);
            base[y * w + x] = spec.level + gx + gy + clutter[y * w + x];
        }
    }
    (base, clutter)
}

/// Peak contrast over the local clutter + sensor noise deviation.
fn local_snr(spec: &SceneSpec, clutter: &[f64], target: usize, frame: usize) -> f64 {
    let t = &spec.targets[target];
    let (x, y) = t.position(frame);
    let r = (3.0 * t.sigma).ceil() as isize + 4;
    let (cx, cy) = (x.round() as isize, y.round() as isize);
    let mut vals = Vec::new();
    for yy in (cy - r).max(0)..=(cy + r).min(spec.height as isize - 1) {
        for xx in (cx - r).max(0)..=(cx + r).min(spec.width as isize - 1) {
            vals.push(clutter[yy as usize * spec.width + xx as usize]);
        }
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let noise = (var + spec.sensor_noise * spec.sensor_noise).sqrt();
    if noise == 0.0 {
        f64::INFINITY
    } else {
        t.contrast * spec.multiplier(target, frame) / noise
    }
}

/// Renders a sequence and its annotations.
pub fn generate_sequence(spec: &SceneSpec) -> Result<(Vec<Frame>, Vec<Vec<TargetBox>>)> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let (base, clutter) = background(spec);
    let mut frames = Vec::with_capacity(spec.length);
    let mut annotations = Vec::with_capacity(spec.length);
    for f in 0..spec.length {
        let mut img = base.clone();
        if spec.sensor_noise > 0.0 {
            let mut rng = stream(spec.seed, f as u64, NONE, "sensor");
            for v in img.iter_mut() {
                *v += spec.sensor_noise * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let mut anns = Vec::new();
        for (k, t) in spec.targets.iter().enumerate() {
            if !spec.present(k, f) {
                continue;
            }
            if !spec.dimmed(k, f) {
                let snr = local_snr(spec, &clutter, k, f);
                if snr < SNR_FLOOR {
                    return Err(Error::input(format!(
                        "target {k} at frame {f}: local SNR {snr:.2} below the floor {SNR_FLOOR}"
                    )));
                }
            }
            let (x, y) = t.position(f);
            let amp = t.contrast * spec.multiplier(k, f);
            if amp > 0.0 {
                let r = (4.0 * t.sigma).ceil() as isize;
                let (cx, cy) = (x.round() as isize, y.round() as isize);
                for yy in (cy - r).max(0)..=(cy + r).min(h as isize - 1) {
                    for xx in (cx - r).max(0)..=(cx + r).min(w as isize - 1) {
                        let d2 = (xx as f64 - x).powi(2) + (yy as f64 - y).powi(2);
                        img[yy as usize * w + xx as usize] += amp * (-d2 / (2.0 * t.sigma * t.sigma)).exp();
                    }
                }
            }
            let side = t.box_side();
            let bbox = BBox::from_center(x + 0.5, y + 0.5, side, side).clip(w as f64, h as f64);
            anns.push(TargetBox {
                target: k,
                bbox,
                visible: true,
            });
        }
        let pixels = Tensor::new(&[1, h, w], img.into_iter().map(quantize).collect())?;
        frames.push(Frame { pixels, index: f });
        annotations.push(anns);
    }
    Ok((frames, annotations))
}

/// Parameters for drawing a batch of random scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub sequences: usize,
    pub length: usize,
    pub size: usize,
    pub targets: usize,
    pub sigma: (f64, f64),
    pub contrast: (f64, f64),
    pub max_speed: f64,
    pub clutter: f64,
    pub clutter_scale: f64,
    pub sensor_noise: f64,
    /// Dim events per target; each spans `dim_span` frames.
    pub dim_events: usize,
    pub dim_span: usize,
    pub dim_multiplier: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            sequences: 4,
            length: 40,
            size: 64,
            targets: 1,
            sigma: (1.0, 2.0),
            contrast: (0.25, 0.45),
            max_speed: 1.5,
            clutter: 0.03,
            clutter_scale: 2.0,
            sensor_noise: 0.01,
            dim_events: 0,
            dim_span: 3,
            dim_multiplier: 0.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sequences == 0 || self.length == 0 {
            return Err(Error::input("dataset needs at least one sequence of at least one frame"));
        }
        if self.size == 0 || self.size % 8 != 0 {
            return Err(Error::input(format!("frame size {} must be a positive multiple of 8", self.size)));
        }
        if self.sigma.0 > self.sigma.1 || self.sigma.0 < SIGMA_RANGE.0 || self.sigma.1 > SIGMA_RANGE.1 {
            return Err(Error::input(format!("sigma range {:?} outside [0.5, 2]", self.sigma)));
        }
        if self.contrast.0 > self.contrast.1 || self.contrast.0 <= 0.0 || self.contrast.1 > 1.0 {
            return Err(Error::input(format!("contrast range {:?} outside (0, 1]", self.contrast)));
        }
        if self.dim_events > 0 && self.dim_span + 2 > self.length {
            return Err(Error::input("dim span does not fit inside the sequence"));
        }
        Ok(())
    }

    /// Scene `index` of the batch.
    pub fn scene(&self, index: usize) -> SceneSpec {
        let seed = splitmix(self.seed ^ splitmix(index as u64 + 1));
        let mut rng = stream(seed, NONE, NONE, "scene");
        let s = self.size as f64;
        let mut targets = Vec::with_capacity(self.targets);
        let mut dim_events = Vec::new();
        for k in 0..self.targets {
            let mut trng = stream(seed, NONE, k as u64, "target");
            let sigma = trng.random_range(self.sigma.0..=self.sigma.1);
            let contrast = trng.random_range(self.contrast.0..=self.contrast.1);
            let margin = 2.0 * sigma + 2.0;
            let span = s - 1.0 - 2.0 * margin;
            let travel = (self.length.saturating_sub(1)) as f64;
            let vmax = if travel > 0.0 {
                self.max_speed.min(0.9 * span / travel)
            } else {
                0.0
            };
            let pick = |trng: &mut ChaCha8Rng| {
                let v = if vmax > 0.0 { trng.random_range(-vmax..=vmax) } else { 0.0 };
                let lo = margin - (v * travel).min(0.0);
                let hi = s - 1.0 - margin - (v * travel).max(0.0);
                (trng.random_range(lo..=hi), v)
            };
            let (x0, vx) = pick(&mut trng);
            let (y0, vy) = pick(&mut trng);
            targets.push(TargetSpec {
                start: (x0, y0),
                velocity: (vx, vy),
                acceleration: (0.0, 0.0),
                sigma,
                contrast,
            });
            for _ in 0..self.dim_events {
                let start = trng.random_range(1..=self.length - self.dim_span - 1);
                dim_events.push(DimEvent {
                    target: k,
                    start,
                    len: self.dim_span,
                    multiplier: self.dim_multiplier,
                });
            }
        }
        let level = rng.random_range(0.15..=0.35);
        let gradient = (rng.random_range(-0.1..=0.1), rng.random_range(-0.1..=0.1));
        SceneSpec {
            height: self.size,
            width: self.size,
            length: self.length,
            targets,
            level,
            clutter: self.clutter,
            clutter_scale: self.clutter_scale,
            sensor_noise: self.sensor_noise,
            gradient,
            dim_events,
            seed,
        }
    }
}

pub fn sequence_id(index: usize) -> String {
    format!("seq{index:03}")
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<Sequence>> {
    spec.validate()?;
    (0..spec.sequences)
        .map(|i| {
            let scene = spec.scene(i);
            let (frames, annotations) = generate_sequence(&scene)?;
            Ok(Sequence {
                id: sequence_id(i),
                frames,
                annotations,
                spec: scene,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    length: usize,
    spec: SceneSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    sequences: Vec<ManifestEntry>,
}

fn frame_path(root: &Path, id: &str, f: usize) -> std::path::PathBuf {
    root.join(id).join("frames").join(format!("{f:06}.png"))
}

pub fn write_frame_png(path: &Path, frame: &Frame) -> Result<()> {
    let (_, h, w) = frame.pixels.chw();
    let raw: Vec<u16> = frame.pixels.data()[..h * w]
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * QUANT).round() as u16)
        .collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).expect("buffer matches dimensions");
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn read_frame_png(path: &Path, index: usize) -> Result<Frame> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .into_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().into_iter().map(|v| v as f64 / QUANT).collect();
    Frame::new(Tensor::new(&[1, h, w], data)?, index)
}

pub fn annotation_text(seq: &Sequence) -> String {
    let mut s = String::new();
    for (f, anns) in seq.annotations.iter().enumerate() {
        for a in anns {
            s.push_str(&format!(
                "{} {} {} {} {} {} {} {}\n",
                seq.id,
                f,
                a.target,
                a.bbox.x1,
                a.bbox.y1,
                a.bbox.x2,
                a.bbox.y2,
                u8::from(a.visible)
            ));
        }
    }
    s
}

/// Parses `seq frame target x1 y1 x2 y2 visible` lines into per-frame lists.
pub fn parse_annotations(text: &str, path: &Path, seq_id: &str, length: usize) -> Result<Vec<Vec<TargetBox>>> {
    let mut out = vec![Vec::new(); length];
    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 8 {
            return Err(Error::parse(path, ln, format!("expected 8 fields, found {}", f.len())));
        }
        if f[0] != seq_id {
            return Err(Error::parse(path, ln, format!("sequence id `{}` does not match `{seq_id}`", f[0])));
        }
        let int = |s: &str, what: &str| s.parse::<usize>().map_err(|e| Error::parse(path, ln, format!("{what}: {e}")));
        let real = |s: &str, what: &str| s.parse::<f64>().map_err(|e| Error::parse(path, ln, format!("{what}: {e}")));
        let frame = int(f[1], "frame")?;
        if frame >= length {
            return Err(Error::parse(path, ln, format!("frame {frame} beyond sequence length {length}")));
        }
        let bbox = BBox::new(real(f[3], "x1")?, real(f[4], "y1")?, real(f[5], "x2")?, real(f[6], "y2")?);
        if !bbox.is_valid() {
            return Err(Error::parse(path, ln, "degenerate box"));
        }
        let visible = match f[7] {
            "1" => true,
            "0" => false,
            other => return Err(Error::parse(path, ln, format!("visible flag `{other}` is not 0 or 1"))),
        };
        out[frame].push(TargetBox {
            target: int(f[2], "target")?,
            bbox,
            visible,
        });
    }
    Ok(out)
}

pub fn write_dataset(root: &Path, sequences: &[Sequence]) -> Result<()> {
    let mut manifest = Manifest { sequences: Vec::new() };
    for seq in sequences {
        let dir = root.join(&seq.id).join("frames");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (f, frame) in seq.frames.iter().enumerate() {
            write_frame_png(&frame_path(root, &seq.id, f), frame)?;
        }
        let ann = root.join(&seq.id).join("ann.txt");
        fs::write(&ann, annotation_text(seq)).map_err(|e| Error::io(&ann, e))?;
        manifest.sequences.push(ManifestEntry {
            id: seq.id.clone(),
            length: seq.frames.len(),
            spec: seq.spec.clone(),
        });
    }
    let path = root.join("manifest.txt");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join("manifest.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(&path, e.line(), e.to_string()))
}

/// Checks that every sequence in the manifest has exactly its listed frames on disk.
pub fn validate_dataset(root: &Path) -> Result<()> {
    let manifest = read_manifest(root)?;
    for (i, entry) in manifest.sequences.iter().enumerate() {
        let dir = root.join(&entry.id).join("frames");
        let count = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().extension().is_some_and(|x| x == "png"))
            .count();
        let missing = (0..entry.length).find(|&f| !frame_path(root, &entry.id, f).is_file());
        if count != entry.length || missing.is_some() {
            return Err(Error::parse(
                root.join("manifest.txt"),
                i + 1,
                format!("sequence {} lists {} frames, found {count} on disk", entry.id, entry.length),
            ));
        }
    }
    Ok(())
}

pub fn read_dataset(root: &Path) -> Result<Vec<Sequence>> {
    validate_dataset(root)?;
    let manifest = read_manifest(root)?;
    manifest
        .sequences
        .into_iter()
        .map(|entry| {
            let frames = (0..entry.length)
                .map(|f| read_frame_png(&frame_path(root, &entry.id, f), f))
                .collect::<Result<Vec<_>>>()?;
            let ann = root.join(&entry.id).join("ann.txt");
            let text = fs::read_to_string(&ann).map_err(|e| Error::io(&ann, e))?;
            let annotations = parse_annotations(&text, &ann, &entry.id, entry.length)?;
            Ok(Sequence {
                id: entry.id,
                frames,
                annotations,
                spec: entry.spec,
            })
        })
        .collect()
}
