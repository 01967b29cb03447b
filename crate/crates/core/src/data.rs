//! Data pipeline: label maps, one-hot / instance-map encoding, Gaussian
//! noise injection, jitter-crop augmentation, PPM/PGM I/O and a synthetic
//! overlapping-cars dataset.
//!
//! File formats (all dependency-free and bit-exact):
//!
//! * targets: binary PPM (`P6`, maxval 255); pixel value `v` maps to
//!   `2v/255 - 1` and back with round-half-up.
//! * layouts: binary PGM (`P5`, maxval 255) holding raw class ids.
//! * class table: UTF-8 lines `id<TAB>name`, ids dense from 0.
//! * manifest: UTF-8 lines `layout_path<TAB>target_path<TAB>seed`, paths
//!   relative to the manifest file.
//!
//! Noise is added to *all* encoded input channels (one-hot plus instance)
//! and never clamped — the generator genuinely denoises. With `sigma == 0`
//! the pipeline is fully deterministic and consumes no RNG draws.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Label maps and class tables
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassTable {
    pub names: Vec<String>,
}

impl ClassTable {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Per-pixel class ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub ids: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, ids: Vec<u8>) -> Result<Self> {
        if ids.len() != width * height {
            return Err(Error::contract(format!(
                "label map {width}x{height} needs {} ids, got {}",
                width * height,
                ids.len()
            )));
        }
        Ok(LabelMap { width, height, ids })
    }

    pub fn id(&self, x: usize, y: usize) -> u8 {
        self.ids[y * self.width + x]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetEntry {
    pub layout_path: PathBuf,
    pub target_path: PathBuf,
    /// Per-scene seed recorded at synthesis time; the fixed-noise training
    /// mode keys its draws off this.
    pub seed: u64,
}

// ---------------------------------------------------------------------------
// Encoding
// ---------------------------------------------------------------------------

/// `[C, H, W]` tensor with channel `c` set to 1 where `id == c`.
pub fn one_hot_encode(m: &LabelMap, num_classes: usize) -> Result<Tensor> {
    let (w, h) = (m.width, m.height);
    let mut data = vec![0.0f32; num_classes * h * w];
    for y in 0..h {
        for x in 0..w {
            let id = m.id(x, y) as usize;
            if id >= num_classes {
                return Err(Error::contract(format!(
                    "class id {id} at pixel ({x}, {y}) is out of range for {num_classes} classes"
                )));
            }
            data[(id * h + y) * w + x] = 1.0;
        }
    }
    Tensor::from_vec(&[num_classes, h, w], data)
}

/// Inverse of [`one_hot_encode`] by per-pixel argmax (lowest id wins ties).
pub fn decode_argmax(t: &Tensor) -> Result<LabelMap> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::contract(format!(
            "decode_argmax expects [C, H, W], got {s:?}"
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = t.data();
    let mut ids = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut best = 0usize;
            let mut best_v = f32::NEG_INFINITY;
            for ch in 0..c {
                let v = d[(ch * h + y) * w + x];
                if v > best_v {
                    best_v = v;
                    best = ch;
                }
            }
            ids[y * w + x] = best as u8;
        }
    }
    LabelMap::new(w, h, ids)
}

/// One binary channel per complex class: 1 on pixels of that class, 0
/// ("black") elsewhere. An empty `complex_ids` yields a zero-channel tensor
/// and a warning on stderr.
pub fn extract_instance_map(
    m: &LabelMap,
    complex_ids: &[usize],
    num_classes: usize,
) -> Result<Tensor> {
    let mut seen = HashSet::new();
    for &id in complex_ids {
        if id >= num_classes {
            return Err(Error::contract(format!(
                "complex class id {id} is not in the class table ({num_classes} classes)"
            )));
        }
        if !seen.insert(id) {
            return Err(Error::contract(format!("duplicate complex class id {id}")));
        }
    }
    let (w, h) = (m.width, m.height);
    if complex_ids.is_empty() {
        eprintln!("warning: no complex classes designated; instance map has zero channels");
        return Ok(Tensor::zeros(&[0, h, w]));
    }
    let mut data = vec![0.0f32; complex_ids.len() * h * w];
    for (ci, &id) in complex_ids.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                if m.id(x, y) as usize == id {
                    data[(ci * h + y) * w + x] = 1.0;
                }
            }
        }
    }
    Tensor::from_vec(&[complex_ids.len(), h, w], data)
}

/// One-hot channels plus, when `use_instance`, the instance channels:
/// `[C + C_ins, H, W]`. This is the generator's conditioning input before
/// noise injection.
pub fn encode_input(
    m: &LabelMap,
    num_classes: usize,
    complex_ids: &[usize],
    use_instance: bool,
) -> Result<Tensor> {
    let one_hot = one_hot_encode(m, num_classes)?;
    if !use_instance {
        return Ok(one_hot);
    }
    let inst = extract_instance_map(m, complex_ids, num_classes)?;
    let c = one_hot.shape()[0] + inst.shape()[0];
    let (h, w) = (m.height, m.width);
    let mut data = Vec::with_capacity(c * h * w);
    data.extend_from_slice(one_hot.data());
    data.extend_from_slice(inst.data());
    Tensor::from_vec(&[c, h, w], data)
}

/// `input + N(0, sigma^2)` i.i.d. per element (Box–Muller), no clamping.
/// `sigma == 0` returns the input bit-exactly and consumes no draws.
pub fn add_noise(input: &Tensor, sigma: f32, rng: &mut Rng) -> Result<Tensor> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::contract(format!(
            "noise sigma must be finite and >= 0, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(input.clone());
    }
    let data = input
        .data()
        .iter()
        .map(|v| v + sigma * rng.normal_f32())
        .collect();
    Tensor::from_vec(input.shape(), data)
}

fn nearest_resize3(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::contract(format!("expected [C, H, W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if h == out_h && w == out_w {
        return Ok(t.clone());
    }
    let d = t.data();
    let mut out = vec![0.0f32; c * out_h * out_w];
    for ch in 0..c {
        for y in 0..out_h {
            let sy = y * h / out_h;
            for x in 0..out_w {
                let sx = x * w / out_w;
                out[(ch * out_h + y) * out_w + x] = d[(ch * h + sy) * w + sx];
            }
        }
    }
    Tensor::from_vec(&[c, out_h, out_w], out)
}

/// Nearest-neighbor resize both tensors to `enlarged`², then crop a shared
/// random `base`² window (row offset drawn first, then column), keeping
/// input and target pixel-aligned. `enlarged == base` is the identity.
pub fn jitter_crop(
    input: &Tensor,
    target: &Tensor,
    base: usize,
    enlarged: usize,
    rng: &mut Rng,
) -> Result<(Tensor, Tensor)> {
    if enlarged < base || base == 0 {
        return Err(Error::contract(format!(
            "jitter_crop needs enlarged >= base >= 1, got base {base}, enlarged {enlarged}"
        )));
    }
    let ri = nearest_resize3(input, enlarged, enlarged)?;
    let rt = nearest_resize3(target, enlarged, enlarged)?;
    let span = (enlarged - base + 1) as u64;
    let oy = rng.below(span) as usize;
    let ox = rng.below(span) as usize;
    let crop = |t: &Tensor| -> Result<Tensor> {
        let c = t.shape()[0];
        let d = t.data();
        let mut out = vec![0.0f32; c * base * base];
        for ch in 0..c {
            for y in 0..base {
                let src = (ch * enlarged + y + oy) * enlarged + ox;
                out[(ch * base + y) * base..(ch * base + y) * base + base]
                    .copy_from_slice(&d[src..src + base]);
            }
        }
        Tensor::from_vec(&[c, base, base], out)
    };
    Ok((crop(&ri)?, crop(&rt)?))
}

// ---------------------------------------------------------------------------
// PPM / PGM
// ---------------------------------------------------------------------------

/// `v in [0, 255]` to `[-1, 1]`.
#[inline]
pub fn image_to_unit(v: u8) -> f32 {
    2.0 * v as f32 / 255.0 - 1.0
}

/// `[-1, 1]` back to `[0, 255]` with round-half-up; out-of-range values
/// are clamped first.
#[inline]
pub fn unit_to_image(t: f32) -> u8 {
    let c = t.clamp(-1.0, 1.0);
    ((c + 1.0) * 127.5 + 0.5).floor() as u8
}

struct ByteParser<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> ByteParser<'a> {
    fn new(bytes: &'a [u8], path: &Path) -> Self {
        ByteParser { bytes, pos: 0, path: path.display().to_string() }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse { path: self.path.clone(), offset: self.pos, msg: msg.into() }
    }

    /// Whitespace and `#`-to-end-of-line comments between header tokens.
    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn uint(&mut self, what: &str) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err(format!("expected {what} (unsigned integer)")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("digits are ASCII")
            .parse()
            .map_err(|e| self.err(format!("bad {what}: {e}")))
    }

    fn magic(&mut self, expect: &[u8]) -> Result<()> {
        if self.bytes.len() < expect.len() || &self.bytes[..expect.len()] != expect {
            return Err(self.err(format!(
                "bad magic, expected {}",
                String::from_utf8_lossy(expect)
            )));
        }
        self.pos = expect.len();
        Ok(())
    }

    /// Single whitespace byte separating the header from the payload.
    fn payload(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos >= self.bytes.len() || !self.bytes[self.pos].is_ascii_whitespace() {
            return Err(self.err("expected single whitespace before payload"));
        }
        self.pos += 1;
        if self.bytes.len() < self.pos + len {
            let have = self.bytes.len() - self.pos;
            self.pos = self.bytes.len();
            return Err(self.err(format!(
                "truncated {what} payload: need {len} bytes, have {have}"
            )));
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        // Trailing whitespace is tolerated; anything else is corruption.
        if self.bytes[self.pos..].iter().any(|b| !b.is_ascii_whitespace()) {
            return Err(self.err("trailing bytes after payload"));
        }
        Ok(out)
    }
}

fn header_dims(p: &mut ByteParser<'_>) -> Result<(usize, usize)> {
    let w = p.uint("width")?;
    let h = p.uint("height")?;
    let maxval = p.uint("maxval")?;
    if maxval != 255 {
        return Err(p.err(format!("unsupported maxval {maxval}, only 255")));
    }
    if w == 0 || h == 0 {
        return Err(p.err("zero image dimension"));
    }
    Ok((w, h))
}

/// Binary PPM (`P6`) to a `[3, H, W]` tensor in `[-1, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let mut p = ByteParser::new(&bytes, path);
    p.magic(b"P6")?;
    let (w, h) = header_dims(&mut p)?;
    let raw = p.payload(3 * w * h, "pixel")?;
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = image_to_unit(raw[(y * w + x) * 3 + c]);
            }
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// `[3, H, W]` tensor in `[-1, 1]` to binary PPM.
pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::contract(format!("write_ppm expects [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = img.data();
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.reserve(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                bytes.push(unit_to_image(d[(c * h + y) * w + x]));
            }
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Binary PGM (`P5`) holding raw class ids.
pub fn read_pgm(path: &Path) -> Result<LabelMap> {
    let bytes = fs::read(path)?;
    let mut p = ByteParser::new(&bytes, path);
    p.magic(b"P5")?;
    let (w, h) = header_dims(&mut p)?;
    let raw = p.payload(w * h, "id")?;
    LabelMap::new(w, h, raw.to_vec())
}

pub fn write_pgm(path: &Path, m: &LabelMap) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", m.width, m.height).into_bytes();
    bytes.extend_from_slice(&m.ids);
    fs::write(path, bytes)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Class table and manifest
// ---------------------------------------------------------------------------

pub fn write_class_table(path: &Path, table: &ClassTable) -> Result<()> {
    let mut out = String::new();
    for (id, name) in table.names.iter().enumerate() {
        writeln!(out, "{id}\t{name}").expect("string write");
    }
    fs::write(path, out)?;
    Ok(())
}

/// Lines `id<TAB>name`; ids must be dense and ascending from 0.
pub fn read_class_table(path: &Path) -> Result<ClassTable> {
    let text = fs::read_to_string(path)?;
    let pathstr = path.display().to_string();
    let mut names = Vec::new();
    let mut offset = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let this_offset = offset;
        offset += line.len() + 1;
        if line.trim().is_empty() {
            continue;
        }
        let perr = |msg: String| Error::Parse {
            path: pathstr.clone(),
            offset: this_offset,
            msg: format!("line {}: {msg}", lineno + 1),
        };
        let (id_str, name) = line
            .split_once('\t')
            .ok_or_else(|| perr("expected id<TAB>name".into()))?;
        let id: usize = id_str
            .parse()
            .map_err(|e| perr(format!("bad class id {id_str:?}: {e}")))?;
        if id != names.len() {
            return Err(perr(format!("expected id {} (dense, ascending), got {id}", names.len())));
        }
        if name.is_empty() {
            return Err(perr("empty class name".into()));
        }
        names.push(name.to_string());
    }
    if names.is_empty() {
        return Err(Error::Parse {
            path: pathstr,
            offset: 0,
            msg: "class table has no entries".into(),
        });
    }
    Ok(ClassTable { names })
}

/// Paths are written exactly as stored in the entries (conventionally
/// relative to the manifest location).
pub fn write_manifest(path: &Path, entries: &[DatasetEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        writeln!(
            out,
            "{}\t{}\t{}",
            e.layout_path.display(),
            e.target_path.display(),
            e.seed
        )
        .expect("string write");
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads `layout<TAB>target<TAB>seed` lines, resolving relative paths
/// against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<DatasetEntry>> {
    let text = fs::read_to_string(path)?;
    let pathstr = path.display().to_string();
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut entries = Vec::new();
    let mut offset = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let this_offset = offset;
        offset += line.len() + 1;
        if line.trim().is_empty() {
            continue;
        }
        let perr = |msg: String| Error::Parse {
            path: pathstr.clone(),
            offset: this_offset,
            msg: format!("line {}: {msg}", lineno + 1),
        };
        let mut parts = line.split('\t');
        let layout = parts.next().filter(|s| !s.is_empty());
        let target = parts.next().filter(|s| !s.is_empty());
        let seed = parts.next();
        if parts.next().is_some() {
            return Err(perr("expected exactly 3 tab-separated fields".into()));
        }
        let (layout, target, seed) = match (layout, target, seed) {
            (Some(l), Some(t), Some(s)) => (l, t, s),
            _ => return Err(perr("expected layout<TAB>target<TAB>seed".into())),
        };
        let seed: u64 = seed
            .trim()
            .parse()
            .map_err(|e| perr(format!("bad seed {seed:?}: {e}")))?;
        let resolve = |s: &str| {
            let p = Path::new(s);
            if p.is_absolute() { p.to_path_buf() } else { base.join(p) }
        };
        entries.push(DatasetEntry {
            layout_path: resolve(layout),
            target_path: resolve(target),
            seed,
        });
    }
    Ok(entries)
}

// ---------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------

pub const CLASS_BACKGROUND: usize = 0;
pub const CLASS_ROAD: usize = 1;
pub const CLASS_BUILDING: usize = 2;
pub const CLASS_CAR: usize = 3;

pub fn synthetic_class_table() -> ClassTable {
    ClassTable {
        names: ["background", "road", "building", "car"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
    }
}

/// Everything needed to re-render a scene; rendering is a pure function of
/// this value.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSceneSpec {
    pub seed: u64,
    pub size: usize,
    pub num_cars: usize,
    pub num_buildings: usize,
    /// Probability that each car after the first is deliberately placed
    /// overlapping its predecessor.
    pub overlap_rate: f32,
}

/// Axis-aligned rounded rectangle (top-left corner, possibly clipped by the
/// canvas).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CarPlacement {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
    pub radius: usize,
}

impl CarPlacement {
    /// Full (unoccluded) footprint on a `size`² canvas; the overlap oracle
    /// intersects these.
    pub fn mask(&self, size: usize) -> Vec<bool> {
        let mut m = vec![false; size * size];
        for y in self.y0..(self.y0 + self.h).min(size) {
            for x in self.x0..(self.x0 + self.w).min(size) {
                if self.contains(x, y) {
                    m[y * size + x] = true;
                }
            }
        }
        m
    }

    fn contains(&self, x: usize, y: usize) -> bool {
        let (lx, ly) = (x - self.x0, y - self.y0);
        if lx >= self.w || ly >= self.h {
            return false;
        }
        let r = self.radius;
        if r == 0 {
            return true;
        }
        // Distance test against the nearest corner-circle center.
        let cx = if lx < r {
            r as i64
        } else if lx >= self.w - r {
            (self.w - 1 - r) as i64
        } else {
            return true;
        };
        let cy = if ly < r {
            r as i64
        } else if ly >= self.h - r {
            (self.h - 1 - r) as i64
        } else {
            return true;
        };
        let dx = lx as i64 - cx;
        let dy = ly as i64 - cy;
        dx * dx + dy * dy <= (r * r) as i64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub layout: LabelMap,
    /// `[3, size, size]` in `[-1, 1]`, quantized to the PPM grid so a
    /// write/read round trip is lossless.
    pub target: Tensor,
    pub cars: Vec<CarPlacement>,
}

const BG_TOP: [f32; 3] = [88.0, 136.0, 192.0];
const BG_BOTTOM: [f32; 3] = [168.0, 196.0, 224.0];
const ROAD_COLOR: [f32; 3] = [90.0, 90.0, 90.0];
const LANE_COLOR: [f32; 3] = [214.0, 206.0, 96.0];
const BUILDING_COLOR: [f32; 3] = [164.0, 92.0, 68.0];
const WINDOW_COLOR: [f32; 3] = [44.0, 52.0, 78.0];
const CAR_BODY: [f32; 3] = [186.0, 58.0, 52.0];
const CAR_GLASS: [f32; 3] = [56.0, 76.0, 104.0];
const WHEEL_COLOR: [f32; 3] = [26.0, 26.0, 26.0];

/// Sky color at row `y`: a vertical gradient, paler toward the horizon.
fn bg_at(y: usize, n: usize) -> [f32; 3] {
    let t = y as f32 / (n - 1) as f32;
    [0, 1, 2].map(|c| BG_TOP[c] + t * (BG_BOTTOM[c] - BG_TOP[c]))
}

/// Small per-instance body-tint jitter (within roughly +/- 8 gray levels).
/// Kept deliberately small: the instance index is not observable from the
/// class layout, so this variation is an irreducible appearance floor.
fn car_tint(idx: usize) -> [f32; 3] {
    [
        CAR_BODY[0] + ((idx * 13) % 17) as f32 - 8.0,
        CAR_BODY[1] + ((idx * 7) % 17) as f32 - 8.0,
        CAR_BODY[2] + ((idx * 11) % 17) as f32 - 8.0,
    ]
}

fn building_tint(idx: usize) -> [f32; 3] {
    [
        BUILDING_COLOR[0] + ((idx * 5) % 17) as f32 - 8.0,
        BUILDING_COLOR[1] + ((idx * 9) % 17) as f32 - 8.0,
        BUILDING_COLOR[2] + ((idx * 3) % 17) as f32 - 8.0,
    ]
}

/// Renders a street scene: a vertical sky gradient, a shaded road band with
/// dashed lane markings, building rectangles with window grids above the
/// road, and overlapping rounded-rectangle cars (windshield, wheels, shaded
/// body) on it. Appearance is anchored to each object's own geometry, so a
/// synthesizer that reads the layout can predict far more than flat
/// per-class colors; a small per-instance tint jitter and a 1-px darker
/// border around each *visible* car region stay irreducible from the class
/// layout alone (the latter marks occlusion boundaries). Deterministic in
/// `spec` (same seed twice gives identical scenes); zero objects yield the
/// bare sky gradient.
pub fn generate_scene(spec: &SyntheticSceneSpec) -> Result<Scene> {
    let n = spec.size;
    if n < 16 {
        return Err(Error::contract(format!("scene size {n} too small, need >= 16")));
    }
    if !(0.0..=1.0).contains(&spec.overlap_rate) {
        return Err(Error::contract(format!(
            "overlap_rate must lie in [0, 1], got {}",
            spec.overlap_rate
        )));
    }
    let mut rng = Rng::new(spec.seed);
    let mut ids = vec![CLASS_BACKGROUND as u8; n * n];
    let mut rgb = vec![0.0f32; 3 * n * n];
    let paint = |rgb: &mut [f32], x: usize, y: usize, c: [f32; 3]| {
        for ch in 0..3 {
            rgb[(ch * n + y) * n + x] = c[ch].clamp(0.0, 255.0);
        }
    };
    for y in 0..n {
        let c = bg_at(y, n);
        for x in 0..n {
            paint(&mut rgb, x, y, c);
        }
    }

    let mut cars = Vec::new();
    if spec.num_cars + spec.num_buildings > 0 {
        // Road band with a vertical shading ramp (nearer = lighter) and a
        // dashed center line.
        let r0 = n * 11 / 20;
        let r1 = n * 17 / 20;
        let lane_y = (r0 + r1) / 2;
        let lane_h = (n / 32).max(1);
        let dash = (n / 8).max(2);
        for y in r0..r1 {
            let shade = 0.8 + 0.4 * (y - r0) as f32 / (r1 - r0) as f32;
            for x in 0..n {
                ids[y * n + x] = CLASS_ROAD as u8;
                let on_lane = y >= lane_y && y < lane_y + lane_h && (x / dash) % 2 == 0;
                let c = if on_lane { LANE_COLOR } else { ROAD_COLOR };
                paint(&mut rgb, x, y, c.map(|v| v * shade));
            }
        }

        for b in 0..spec.num_buildings {
            let bw = n / 6 + rng.below((n / 6) as u64 + 1) as usize;
            let bh = n / 5 + rng.below((n * 3 / 10) as u64 + 1) as usize;
            let bx = rng.below((n - bw) as u64 + 1) as usize;
            let by = r0.saturating_sub(bh);
            let tint = building_tint(b);
            for y in by..r0 {
                for x in bx..(bx + bw).min(n) {
                    ids[y * n + x] = CLASS_BUILDING as u8;
                    // Window grid anchored at the facade's top-left corner,
                    // on a wall with a slight top-lit vertical shade.
                    let (lx, ly) = (x - bx, y - by);
                    let window = (1..3).contains(&(ly % 5)) && (1..3).contains(&(lx % 5));
                    let c = if window {
                        WINDOW_COLOR
                    } else {
                        let fy = ly as f32 / (r0 - by).max(2) as f32;
                        tint.map(|v| v * (1.08 - 0.16 * fy))
                    };
                    paint(&mut rgb, x, y, c);
                }
            }
        }

        // Visible-instance ownership for border detection.
        let mut owner = vec![-1i64; n * n];
        for i in 0..spec.num_cars {
            let ch = n / 8 + rng.below((n / 24) as u64 + 1) as usize;
            let cw = n / 5 + rng.below((n * 2 / 15) as u64 + 1) as usize;
            let band = r1 - r0 - ch.min(r1 - r0);
            let overlap_prev = i > 0 && rng.unit_f32() < spec.overlap_rate;
            let (x0, y0) = if overlap_prev {
                let prev: &CarPlacement = &cars[i - 1];
                let x = (prev.x0 + prev.w / 2 + rng.below((cw / 4) as u64 + 1) as usize)
                    .min(n - cw);
                let y = (prev.y0 + rng.below(3) as usize).clamp(r0, r0 + band);
                (x, y)
            } else {
                (
                    rng.below((n - cw) as u64 + 1) as usize,
                    r0 + rng.below(band as u64 + 1) as usize,
                )
            };
            let placement = CarPlacement { x0, y0, w: cw, h: ch, radius: ch.min(cw) / 3 };
            let mask = placement.mask(n);
            for y in 0..n {
                for x in 0..n {
                    if mask[y * n + x] {
                        ids[y * n + x] = CLASS_CAR as u8;
                        owner[y * n + x] = i as i64;
                    }
                }
            }
            cars.push(placement);
        }

        // Fill each visible car region. Appearance is anchored to the car's
        // own (possibly occluded) bounding box: windshield glass across the
        // upper middle, dark wheels at the lower corners, and a top-lit body
        // in the instance tint elsewhere.
        for y in 0..n {
            for x in 0..n {
                let o = owner[y * n + x];
                if o < 0 {
                    continue;
                }
                let i = o as usize;
                let car = &cars[i];
                let fx = (x - car.x0) as f32 / (car.w - 1).max(1) as f32;
                let fy = (y - car.y0) as f32 / (car.h - 1).max(1) as f32;
                let wheel =
                    fy >= 0.6 && ((0.10..=0.32).contains(&fx) || (0.68..=0.90).contains(&fx));
                let glass = fy <= 0.42 && (0.28..=0.72).contains(&fx);
                let c = if wheel {
                    WHEEL_COLOR
                } else if glass {
                    CAR_GLASS
                } else {
                    car_tint(i).map(|v| v * (1.18 - 0.36 * fy))
                };
                paint(&mut rgb, x, y, c);
            }
        }
        // 1-px darker border wherever a visible car pixel touches a pixel
        // of a different owner (another car, any other class, or the canvas
        // edge) — this outline marks occlusion boundaries the class layout
        // cannot express.
        let mut border = Vec::new();
        for y in 0..n {
            for x in 0..n {
                let o = owner[y * n + x];
                if o < 0 {
                    continue;
                }
                let edge = [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)].iter().any(|(dx, dy)| {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= n as i64 || ny >= n as i64 {
                        return true;
                    }
                    owner[ny as usize * n + nx as usize] != o
                });
                if edge {
                    border.push((x, y));
                }
            }
        }
        for (x, y) in border {
            for ch in 0..3 {
                rgb[(ch * n + y) * n + x] *= 0.55;
            }
        }
    }

    // Quantize to the PPM grid so rendered targets survive I/O bit-exactly.
    let data: Vec<f32> = rgb
        .iter()
        .map(|v| image_to_unit(unit_to_image(2.0 * v / 255.0 - 1.0)))
        .collect();
    Ok(Scene {
        layout: LabelMap::new(n, n, ids)?,
        target: Tensor::from_vec(&[3, n, n], data)?,
        cars,
    })
}

// ---------------------------------------------------------------------------
// Dataset synthesis
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisConfig {
    pub count: usize,
    pub size: usize,
    pub master_seed: u64,
    pub overlap_rate: f32,
    pub min_cars: usize,
    pub max_cars: usize,
    pub min_buildings: usize,
    pub max_buildings: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            count: 200,
            size: 64,
            master_seed: 0,
            overlap_rate: 0.5,
            min_cars: 2,
            max_cars: 4,
            min_buildings: 1,
            max_buildings: 3,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        // count == 0 is legal: it emits the class table and an empty manifest.
        if self.min_cars > self.max_cars || self.min_buildings > self.max_buildings {
            return Err(Error::config("min object counts must not exceed max"));
        }
        if !(0.0..=1.0).contains(&self.overlap_rate) {
            return Err(Error::config(format!(
                "overlap_rate must lie in [0, 1], got {}",
                self.overlap_rate
            )));
        }
        Ok(())
    }
}

/// Stream tags for [`derive_seed`] (arbitrary distinct constants).
const TAG_PICK: u64 = 0x5049_434b; // object-count draws
const TAG_SCENE: u64 = 0x5343_454e; // scene layout/render draws

/// Writes `layouts/`, `targets/`, `classes.tsv` and `manifest.tsv` under
/// `dir`. Per-scene seed `i` is `derive_seed(master_seed, i)`; regeneration
/// with the same config is byte-identical. Returns the entries with paths
/// resolved against `dir`.
pub fn synthesize_dataset(dir: &Path, cfg: &SynthesisConfig) -> Result<Vec<DatasetEntry>> {
    cfg.validate()?;
    fs::create_dir_all(dir.join("layouts"))?;
    fs::create_dir_all(dir.join("targets"))?;
    write_class_table(&dir.join("classes.tsv"), &synthetic_class_table())?;
    let mut relative = Vec::with_capacity(cfg.count);
    let mut resolved = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let scene_seed = derive_seed(cfg.master_seed, i as u64);
        let mut pick = Rng::new(derive_seed(scene_seed, TAG_PICK));
        let spec = SyntheticSceneSpec {
            seed: derive_seed(scene_seed, TAG_SCENE),
            size: cfg.size,
            num_cars: cfg.min_cars + pick.below((cfg.max_cars - cfg.min_cars) as u64 + 1) as usize,
            num_buildings: cfg.min_buildings
                + pick.below((cfg.max_buildings - cfg.min_buildings) as u64 + 1) as usize,
            overlap_rate: cfg.overlap_rate,
        };
        let scene = generate_scene(&spec)?;
        let layout_rel = format!("layouts/scene_{i:04}.pgm");
        let target_rel = format!("targets/scene_{i:04}.ppm");
        write_pgm(&dir.join(&layout_rel), &scene.layout)?;
        write_ppm(&dir.join(&target_rel), &scene.target)?;
        relative.push(DatasetEntry {
            layout_path: PathBuf::from(&layout_rel),
            target_path: PathBuf::from(&target_rel),
            seed: scene_seed,
        });
        resolved.push(DatasetEntry {
            layout_path: dir.join(&layout_rel),
            target_path: dir.join(&target_rel),
            seed: scene_seed,
        });
    }
    write_manifest(&dir.join("manifest.tsv"), &relative)?;
    Ok(resolved)
}

/// Loads one manifest entry: the layout and the `[-1, 1]` target image.
pub fn load_pair(entry: &DatasetEntry) -> Result<(LabelMap, Tensor)> {
    let layout = read_pgm(&entry.layout_path)?;
    let target = read_ppm(&entry.target_path)?;
    let s = target.shape();
    if layout.width != s[2] || layout.height != s[1] {
        return Err(Error::contract(format!(
            "layout {}x{} does not match target {}x{} ({} / {})",
            layout.width,
            layout.height,
            s[2],
            s[1],
            entry.layout_path.display(),
            entry.target_path.display()
        )));
    }
    Ok((layout, target))
}
