//! Frame decoding, manifests, sampling, splits and the synthetic corpus.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// One video of a manifest; frame paths are in temporal order.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub video_id: String,
    pub label: usize,
    pub frame_paths: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub class_names: Vec<String>,
    pub split_seed: u64,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parses `video_id,label,frame_path` lines. Relative frame paths are
    /// resolved against `base`. Lines starting with `#` are comments, except
    /// `# classes=a,b,...` and `# split_seed=N`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut class_names: Option<Vec<String>> = None;
        let mut split_seed = 0;
        let mut entries: Vec<ManifestEntry> = Vec::new();
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                let comment = comment.trim();
                if let Some(v) = comment.strip_prefix("classes=") {
                    class_names = Some(v.split(',').map(|s| s.trim().to_string()).collect());
                } else if let Some(v) = comment.strip_prefix("split_seed=") {
                    split_seed = v
                        .trim()
                        .parse()
                        .map_err(|_| Error::Data(format!("manifest line {}: bad split_seed", no + 1)))?;
                }
                continue;
            }
            let mut parts = line.splitn(3, ',');
            let (Some(id), Some(label), Some(path)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Data(format!("manifest line {}: expected video_id,label,frame_path", no + 1)));
            };
            let label: usize = label
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("manifest line {}: bad label `{label}`", no + 1)))?;
            let path = PathBuf::from(path.trim());
            let path = if path.is_absolute() { path } else { base.join(path) };
            let id = id.trim();
            match index.get(id) {
                Some(&i) => {
                    if entries[i].label != label {
                        return Err(Error::Data(format!("manifest line {}: video `{id}` changes label", no + 1)));
                    }
                    if i + 1 != entries.len() {
                        return Err(Error::Data(format!("manifest line {}: frames of `{id}` are not grouped", no + 1)));
                    }
                    entries[i].frame_paths.push(path);
                }
                None => {
                    index.insert(id.to_string(), entries.len());
                    entries.push(ManifestEntry {
                        video_id: id.to_string(),
                        label,
                        frame_paths: vec![path],
                    });
                }
            }
        }
        let max_label = entries.iter().map(|e| e.label + 1).max().unwrap_or(0);
        let class_names = class_names.unwrap_or_else(|| (0..max_label).map(|k| format!("class{k}")).collect());
        if let Some(e) = entries.iter().find(|e| e.label >= class_names.len()) {
            return Err(Error::Data(format!(
                "video `{}` has label {} but only {} classes are declared",
                e.video_id,
                e.label,
                class_names.len()
            )));
        }
        Ok(Self {
            entries,
            class_names,
            split_seed,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Manifest text with frame paths made relative to `base` where possible.
    pub fn to_text(&self, base: &Path) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# classes={}", self.class_names.join(","));
        let _ = writeln!(out, "# split_seed={}", self.split_seed);
        for e in &self.entries {
            for p in &e.frame_paths {
                let rel = p.strip_prefix(base).unwrap_or(p);
                let _ = writeln!(out, "{},{},{}", e.video_id, e.label, rel.display());
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text(path.parent().unwrap_or(Path::new("."))))?;
        Ok(())
    }

    fn with_entries(&self, entries: Vec<ManifestEntry>) -> Self {
        Self {
            entries,
            class_names: self.class_names.clone(),
            split_seed: self.split_seed,
        }
    }
}

/// `floor(k * T / N)` for `k < N`; when `T < N` the indices cycle `k mod T`.
pub fn periodic_sample(total: usize, n: usize) -> Vec<usize> {
    if total == 0 {
        return Vec::new();
    }
    if total < n {
        return (0..n).map(|k| k % total).collect();
    }
    (0..n).map(|k| k * total / n).collect()
}

/// Stratified video-level split. Each class keeps `round(fraction * n)`
/// videos for training, at least one on each side.
pub fn split(manifest: &DatasetManifest, train_fraction: f64, seed: u64) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train fraction {train_fraction} must be in (0, 1)")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); manifest.num_classes()];
    for (i, e) in manifest.entries.iter().enumerate() {
        by_class[e.label].push(i);
    }
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for (k, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(Error::Data(format!("class {k} has {} video(s); at least 2 are needed to split", members.len())));
        }
        let mut r = rng::indexed_stream(seed, "split", k as u64);
        members.shuffle(&mut r);
        let n_train = ((train_fraction * members.len() as f64).round() as usize).clamp(1, members.len() - 1);
        train_idx.extend_from_slice(&members[..n_train]);
        test_idx.extend_from_slice(&members[n_train..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let pick = |idx: &[usize]| idx.iter().map(|&i| manifest.entries[i].clone()).collect();
    Ok((manifest.with_entries(pick(&train_idx)), manifest.with_entries(pick(&test_idx))))
}

pub const RAWF32_MAGIC: &[u8; 8] = b"RAWF32\0\0";

/// Decodes a P6, P5 or RAWF32 image to a `[3, H, W]` tensor in `[0, 1]`.
pub fn decode_frame(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("cannot read frame {}: {e}", path.display())))?;
    decode_bytes(&bytes).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn decode_bytes(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.starts_with(RAWF32_MAGIC) {
        return decode_rawf32(bytes);
    }
    match bytes.get(..2) {
        Some(b"P6") => decode_pnm(bytes, 3),
        Some(b"P5") => decode_pnm(bytes, 1),
        _ => Err(Error::Data("unsupported image format (expected P6, P5 or RAWF32)".into())),
    }
}

fn decode_pnm(bytes: &[u8], channels: usize) -> Result<Tensor<f32>> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::Data("truncated header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data("malformed header".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Data("malformed header".into()));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::Data(format!("bad header values {w}x{h} maxval {maxval}")));
    }
    let bps = if maxval < 256 { 1 } else { 2 };
    let need = w * h * channels * bps;
    let body = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::Data(format!("truncated pixel data: need {need} bytes, have {}", bytes.len() - pos)))?;
    let maxval = maxval as f32;
    let sample = |i: usize| -> f32 {
        let v = if bps == 1 {
            body[i] as u32
        } else {
            u16::from_be_bytes([body[2 * i], body[2 * i + 1]]) as u32
        };
        (v as f32 / maxval).min(1.0)
    };
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            data[c * plane + p] = sample(p * channels + c.min(channels - 1));
        }
    }
    Tensor::new(&[3, h, w], data)
}

fn decode_rawf32(bytes: &[u8]) -> Result<Tensor<f32>> {
    let header = bytes.get(8..20).ok_or_else(|| Error::Data("truncated RAWF32 header".into()))?;
    let dim = |i: usize| u32::from_le_bytes(header[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::Data(format!("bad RAWF32 dimensions {c}x{h}x{w}")));
    }
    let need = c * h * w * 4;
    let body = bytes
        .get(20..20 + need)
        .ok_or_else(|| Error::Data(format!("truncated RAWF32 data: need {need} bytes")))?;
    let vals: Vec<f32> = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let plane = h * w;
    let data = match c {
        3 => vals,
        1 => vals.iter().cycle().take(3 * plane).copied().collect(),
        _ => return Err(Error::Data(format!("RAWF32 with {c} channels is not supported"))),
    };
    Tensor::new(&[3, h, w], data)
}

pub fn encode_rawf32(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = RAWF32_MAGIC.to_vec();
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Quantises a value in `[0, 1]` to 8 bits.
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PPM of a `[3, H, W]` tensor at maxval 255.
pub fn encode_ppm(t: &Tensor<f32>) -> Vec<u8> {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for p in 0..plane {
        for c in 0..3 {
            out.push(to_u8(t.data()[c * plane + p]));
        }
    }
    out
}

/// Binary PGM of `h x w` values in `[0, 1]`.
pub fn encode_pgm(values: &[f32], h: usize, w: usize) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| to_u8(v)));
    out
}

/// Sampled frames of one video: `frames` is `[N, 3, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub frames: Tensor<f32>,
    pub label: usize,
    pub video_id: String,
}

/// Decodes `num_frames` periodically sampled frames of `entry`, each of
/// which must be `size x size`.
pub fn load_video(entry: &ManifestEntry, num_frames: usize, size: usize) -> Result<VideoSample> {
    if entry.frame_paths.is_empty() {
        return Err(Error::Data(format!("video `{}` has no frames", entry.video_id)));
    }
    let plane = 3 * size * size;
    let mut data = Vec::with_capacity(num_frames * plane);
    for i in periodic_sample(entry.frame_paths.len(), num_frames) {
        let path = &entry.frame_paths[i];
        let f = decode_frame(path)?;
        if f.shape() != [3, size, size] {
            return Err(Error::Data(format!(
                "{}: frame is {:?}, expected [3, {size}, {size}]",
                path.display(),
                f.shape()
            )));
        }
        data.extend_from_slice(f.data());
    }
    Ok(VideoSample {
        frames: Tensor::new(&[num_frames, 3, size, size], data)?,
        label: entry.label,
        video_id: entry.video_id.clone(),
    })
}

/// Loads every video of `manifest`. Decoding runs on the current rayon
/// pool; the result keeps manifest order.
pub fn load_dataset(manifest: &DatasetManifest, num_frames: usize, size: usize) -> Result<Vec<VideoSample>> {
    manifest
        .entries
        .par_iter()
        .map(|e| load_video(e, num_frames, size))
        .collect()
}

/// Stacks samples into one `[V, N, 3, H, W]` batch.
pub fn batch(samples: &[&VideoSample]) -> Result<(Tensor<f32>, Vec<usize>)> {
    let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(first.frames.shape());
    let mut data = Vec::with_capacity(shape.iter().product());
    for s in samples {
        if s.frames.shape() != first.frames.shape() {
            return Err(Error::Data(format!("video `{}` has a different frame shape", s.video_id)));
        }
        data.extend_from_slice(s.frames.data());
    }
    Ok((Tensor::new(&shape, data)?, samples.iter().map(|s| s.label).collect()))
}

/// Parameters of the synthetic attribution corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub videos_per_class: usize,
    pub frames: usize,
    pub size: usize,
    pub seed: u64,
    /// Peak amplitude of the artifact pattern.
    pub amplitude: f64,
    /// Uniform per-pixel noise half-width.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            videos_per_class: 50,
            frames: 10,
            size: 112,
            seed: 7,
            amplitude: 0.3,
            noise: 0.01,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.size % 8 != 0 {
            return Err(Error::Config(format!("synthetic frame size {} must be a positive multiple of 8", self.size)));
        }
        if self.classes == 0 || self.videos_per_class == 0 || self.frames == 0 {
            return Err(Error::Config("classes, videos per class and frames must be positive".into()));
        }
        Ok(())
    }

    /// Spatial period in pixels of class `k`'s artifact grating.
    pub fn period(&self, k: usize) -> f64 {
        3.0 * 1.5f64.powi(k as i32) * self.size as f64 / 112.0
    }

    /// Temporal flicker period in frames of class `k`.
    pub fn flicker(&self, k: usize) -> f64 {
        2.0 + k as f64
    }
}

/// Image quadrant: 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
pub type Quadrant = usize;

pub fn video_id(class: usize, index: usize) -> String {
    format!("c{class}_v{index:03}")
}

struct Face {
    base: f64,
    grad: (f64, f64),
    center: (f64, f64),
    radii: (f64, f64),
    tone: f64,
    tint: [f64; 3],
    drift: Vec<(f64, f64)>,
}

fn face(cfg: &SynthConfig, index: usize) -> Face {
    let s = cfg.size as f64;
    let mut r = rng::indexed_stream(cfg.seed, "synth.face", index as u64);
    let mut drift = vec![(0.0, 0.0)];
    for _ in 1..cfg.frames {
        let &(x, y) = drift.last().unwrap();
        drift.push((x + r.gen_range(-0.01..0.01) * s, y + r.gen_range(-0.01..0.01) * s));
    }
    Face {
        base: r.gen_range(0.35..0.5),
        grad: (r.gen_range(-0.06..0.06), r.gen_range(-0.06..0.06)),
        center: (s * (0.5 + r.gen_range(-0.05..0.05)), s * (0.5 + r.gen_range(-0.05..0.05))),
        radii: (s * r.gen_range(0.28..0.36), s * r.gen_range(0.36..0.44)),
        tone: r.gen_range(0.12..0.22),
        tint: [r.gen_range(0.04..0.08), r.gen_range(0.0..0.03), r.gen_range(-0.05..-0.01)],
        drift,
    }
}

/// Frames (`[3, size, size]` each, already quantised to 8 bits) and the
/// artifact quadrant of video `index` of `class`. Videos with the same
/// index share their face across classes; only the artifact differs.
pub fn synth_video(cfg: &SynthConfig, class: usize, index: usize) -> (Vec<Tensor<f32>>, Quadrant) {
    let s = cfg.size;
    let sf = s as f64;
    let face = face(cfg, index);
    let mut r = rng::indexed_stream(cfg.seed, "synth.artifact", (class * cfg.videos_per_class + index) as u64);
    let quadrant: Quadrant = r.gen_range(0..4);
    let theta = r.gen_range(0.0..std::f64::consts::PI);
    let phase = r.gen_range(0.0..std::f64::consts::TAU);
    let t_phase = r.gen_range(0.0..std::f64::consts::TAU);
    let (qy, qx) = (quadrant / 2, quadrant % 2);
    let half = s / 2;
    let k = std::f64::consts::TAU / cfg.period(class);
    let (kx, ky) = (k * theta.cos(), k * theta.sin());
    let mut noise = rng::indexed_stream(cfg.seed, "synth.noise", (class * cfg.videos_per_class + index) as u64);
    let plane = s * s;
    let frames = (0..cfg.frames)
        .map(|t| {
            let flick = 1.0 + 0.5 * (std::f64::consts::TAU * t as f64 / cfg.flicker(class) + t_phase).cos();
            let amp = cfg.amplitude * flick / 1.5;
            let (dx, dy) = face.drift[t];
            let (cx, cy) = (face.center.0 + dx, face.center.1 + dy);
            let mut data = vec![0f32; 3 * plane];
            for y in 0..s {
                for x in 0..s {
                    let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut v = face.base + face.grad.0 * (fx / sf - 0.5) + face.grad.1 * (fy / sf - 0.5);
                    let ex = (fx - cx) / face.radii.0;
                    let ey = (fy - cy) / face.radii.1;
                    let rr = (ex * ex + ey * ey).sqrt();
                    let skin = if rr < 0.8 {
                        1.0
                    } else if rr < 1.0 {
                        0.5 + 0.5 * (std::f64::consts::PI * (rr - 0.8) / 0.2).cos()
                    } else {
                        0.0
                    };
                    v += face.tone * skin;
                    let blob = |bx: f64, by: f64, sx: f64, sy: f64| {
                        let (ux, uy) = ((fx - bx) / sx, (fy - by) / sy);
                        (-(ux * ux + uy * uy) / 2.0).exp()
                    };
                    let eye = 0.04 * sf;
                    v -= 0.14 * blob(cx - 0.13 * sf, cy - 0.08 * sf, eye, eye);
                    v -= 0.14 * blob(cx + 0.13 * sf, cy - 0.08 * sf, eye, eye);
                    v -= 0.10 * blob(cx, cy + 0.2 * sf, 0.1 * sf, 0.025 * sf);
                    let mut art = 0.0;
                    if y / half == qy && x / half == qx {
                        let (ly, lx) = ((y % half) as f64 + 0.5, (x % half) as f64 + 0.5);
                        let wy = (std::f64::consts::PI * ly / half as f64).sin();
                        let wx = (std::f64::consts::PI * lx / half as f64).sin();
                        art = amp * wy * wy * wx * wx * (kx * fx + ky * fy + phase).cos();
                    }
                    for (c, &tint) in face.tint.iter().enumerate() {
                        let n = noise.gen_range(-cfg.noise..=cfg.noise);
                        let px = (v + tint * skin + art + n).clamp(0.0, 1.0);
                        data[c * plane + y * s + x] = to_u8(px as f32) as f32 / 255.0;
                    }
                }
            }
            Tensor::new(&[3, s, s], data).expect("shape matches")
        })
        .collect();
    (frames, quadrant)
}

/// Writes the synthetic corpus under `out_dir`: `frames/<video>/<t>.ppm`,
/// `manifest.csv` and `regions.csv` (`video_id,quadrant`).
pub fn synth_generate(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let frames_dir = out_dir.join("frames");
    fs::create_dir_all(&frames_dir)?;
    let jobs: Vec<(usize, usize)> = (0..cfg.classes)
        .flat_map(|k| (0..cfg.videos_per_class).map(move |i| (k, i)))
        .collect();
    let written: Vec<(ManifestEntry, Quadrant)> = jobs
        .par_iter()
        .map(|&(k, i)| -> Result<(ManifestEntry, Quadrant)> {
            let id = video_id(k, i);
            let dir = frames_dir.join(&id);
            fs::create_dir_all(&dir)?;
            let (frames, q) = synth_video(cfg, k, i);
            let mut paths = Vec::with_capacity(frames.len());
            for (t, f) in frames.iter().enumerate() {
                let p = dir.join(format!("{t:03}.ppm"));
                fs::write(&p, encode_ppm(f))?;
                paths.push(p);
            }
            Ok((
                ManifestEntry {
                    video_id: id,
                    label: k,
                    frame_paths: paths,
                },
                q,
            ))
        })
        .collect::<Result<_>>()?;
    let mut regions = String::from("video_id,quadrant\n");
    for (e, q) in &written {
        let _ = writeln!(regions, "{},{q}", e.video_id);
    }
    fs::write(out_dir.join("regions.csv"), regions)?;
    let manifest = DatasetManifest {
        entries: written.into_iter().map(|(e, _)| e).collect(),
        class_names: (0..cfg.classes).map(|k| format!("class{k}")).collect(),
        split_seed: cfg.seed,
    };
    manifest.save(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

/// Reads a `video_id,quadrant` sidecar.
pub fn load_regions(path: &Path) -> Result<BTreeMap<String, Quadrant>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for (no, line) in text.lines().enumerate().skip(1) {
        let Some((id, q)) = line.split_once(',') else { continue };
        let q: Quadrant = q
            .trim()
            .parse()
            .ok()
            .filter(|&q| q < 4)
            .ok_or_else(|| Error::Data(format!("{} line {}: bad quadrant", path.display(), no + 1)))?;
        out.insert(id.trim().to_string(), q);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn periodic_sample_examples() {
        assert_eq!(periodic_sample(100, 10), (0..10).map(|k| 10 * k).collect::<Vec<_>>());
        assert_eq!(periodic_sample(25, 10), vec![0, 2, 5, 7, 10, 12, 15, 17, 20, 22]);
        assert_eq!(periodic_sample(3, 10), vec![0, 1, 2, 0, 1, 2, 0, 1, 2, 0]);
    }

    fn manifest(per_class: &[usize]) -> DatasetManifest {
        let mut entries = Vec::new();
        for (k, &n) in per_class.iter().enumerate() {
            for i in 0..n {
                entries.push(ManifestEntry {
                    video_id: video_id(k, i),
                    label: k,
                    frame_paths: vec![PathBuf::from(format!("{k}/{i}.ppm"))],
                });
            }
        }
        DatasetManifest {
            entries,
            class_names: (0..per_class.len()).map(|k| format!("class{k}")).collect(),
            split_seed: 0,
        }
    }

    #[test]
    fn split_examples() {
        let m = manifest(&[10, 10, 10]);
        let (tr, te) = split(&m, 0.7, 3).unwrap();
        for k in 0..3 {
            assert_eq!(tr.entries.iter().filter(|e| e.label == k).count(), 7);
            assert_eq!(te.entries.iter().filter(|e| e.label == k).count(), 3);
        }
        assert_eq!(split(&m, 0.7, 3).unwrap(), (tr, te));
        let big = manifest(&[1290; 5]);
        let (tr, te) = split(&big, 0.7, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (4515, 1935));
        assert!(split(&manifest(&[5, 1]), 0.7, 1).is_err());
        assert!(split(&m, 1.0, 1).is_err());
    }

    #[test]
    fn ppm_examples() {
        let white = b"P6\n2 2\n255\n".iter().copied().chain([255u8; 12]).collect::<Vec<_>>();
        assert!(decode_bytes(&white).unwrap().data().iter().all(|&v| v == 1.0));
        let mut red = b"P6 1 1 255\n".to_vec();
        red.extend_from_slice(&[255, 0, 0]);
        assert_eq!(decode_bytes(&red).unwrap().data(), &[1.0, 0.0, 0.0]);
        let mut gray = b"P5\n# comment\n2 1\n255\n".to_vec();
        gray.extend_from_slice(&[0, 51]);
        assert_eq!(decode_bytes(&gray).unwrap().data(), &[0.0, 0.2, 0.0, 0.2, 0.0, 0.2]);
        assert!(decode_bytes(&red[..red.len() - 1]).is_err());
        assert!(decode_bytes(b"GIF89a").is_err());
    }

    #[test]
    fn rawf32_round_trip_is_bitwise() {
        let t = Tensor::<f32>::new(&[3, 2, 2], (0..12).map(|i| i as f32 / 7.0 - 0.3).collect()).unwrap();
        let back = decode_bytes(&encode_rawf32(&t)).unwrap();
        assert_eq!(back, t);
        assert!(decode_bytes(&encode_rawf32(&t)[..30]).is_err());
    }

    #[test]
    fn manifest_text_round_trip() {
        let m = manifest(&[2, 3]);
        let text = m.to_text(Path::new("/none"));
        let back = DatasetManifest::parse(&text, Path::new("")).unwrap();
        assert_eq!(back, m);
        assert!(DatasetManifest::parse("a,1,x\nb,0,y\na,1,z\n", Path::new("")).is_err());
        assert!(DatasetManifest::parse("# classes=a\nv,3,x\n", Path::new("")).is_err());
    }

    #[test]
    fn synth_frames_are_deterministic_and_in_range() {
        let cfg = SynthConfig {
            size: 32,
            frames: 3,
            videos_per_class: 2,
            ..SynthConfig::default()
        };
        let (a, qa) = synth_video(&cfg, 2, 1);
        let (b, qb) = synth_video(&cfg, 2, 1);
        assert_eq!((a.clone(), qa), (b, qb));
        assert!(a.iter().all(|f| f.data().iter().all(|&v| (0.0..=1.0).contains(&v))));
        assert!(SynthConfig { size: 100, ..cfg }.validate().is_err());
    }
}
