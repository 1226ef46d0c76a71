//! Deterministic synthetic detection scenes: coloured geometric shapes on a
//! dark noisy background, one `(shape, colour)` pair per class.
//!
//! Every scene draws from its own ChaCha8 stream (`seed`, stream = scene
//! index), so a dataset is a pure function of `(classes, n, seed)` and
//! scenes can be generated in any order.
//!
//! On disk a dataset is a directory of binary PPM (P6, 8-bit) images plus a
//! `manifest.json` holding an array of
//! `{file, width, height, objects: [{x1, y1, x2, y2, class_id}]}` entries.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxgeom::{iou, BBox};
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 64;
pub const MIN_OBJECT: usize = 10;
pub const MAX_OBJECT: usize = 28;
pub const MAX_OBJECTS: usize = 4;
pub const MAX_GT_IOU: f64 = 0.2;
pub const NOISE_STD: f64 = 0.02;
pub const BACKGROUND: f64 = 0.1;
const PLACEMENT_ATTEMPTS: usize = 100;
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: malformed manifest: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("invalid class table: {0}")]
    Classes(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Cross,
    Ring,
    Bar,
}

impl Shape {
    /// Bounding-box height for a given width.
    fn height(self, size: usize) -> usize {
        match self {
            Shape::Bar => (size * 2 / 5).max(4),
            _ => size,
        }
    }

    /// Whether normalised box coordinates `(u, v) ∈ [0,1]²` are inside the shape.
    fn contains(self, u: f64, v: f64) -> bool {
        let (du, dv) = (u - 0.5, v - 0.5);
        match self {
            Shape::Square | Shape::Bar => true,
            Shape::Circle => du * du + dv * dv <= 0.25,
            Shape::Triangle => du.abs() <= 0.5 * v,
            Shape::Cross => du.abs() <= 1.0 / 6.0 || dv.abs() <= 1.0 / 6.0,
            Shape::Ring => {
                let r2 = du * du + dv * dv;
                (0.09..=0.25).contains(&r2)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassDef {
    pub class_id: usize,
    pub shape: Shape,
    pub color: [f64; 3],
}

/// The six built-in classes, ids 1..=6.
pub fn default_classes() -> Vec<ClassDef> {
    let table = [
        (Shape::Square, [0.90, 0.15, 0.15]),
        (Shape::Circle, [0.15, 0.80, 0.20]),
        (Shape::Triangle, [0.20, 0.30, 0.95]),
        (Shape::Cross, [0.95, 0.85, 0.10]),
        (Shape::Ring, [0.85, 0.20, 0.85]),
        (Shape::Bar, [0.10, 0.85, 0.85]),
    ];
    table
        .iter()
        .enumerate()
        .map(|(i, &(shape, color))| ClassDef {
            class_id: i + 1,
            shape,
            color,
        })
        .collect()
}

/// Looks up classes by id in the built-in table.
pub fn classes_by_id(ids: &[usize]) -> Result<Vec<ClassDef>, SynthError> {
    let table = default_classes();
    ids.iter()
        .map(|&id| {
            table
                .iter()
                .find(|c| c.class_id == id)
                .copied()
                .ok_or_else(|| SynthError::Classes(format!("no built-in class with id {id}")))
        })
        .collect()
}

fn validate_classes(classes: &[ClassDef]) -> Result<(), SynthError> {
    if classes.is_empty() {
        return Err(SynthError::Classes("empty class list".into()));
    }
    for (i, a) in classes.iter().enumerate() {
        if a.class_id == 0 {
            return Err(SynthError::Classes("class id 0 is reserved for background".into()));
        }
        for b in &classes[i + 1..] {
            if a.class_id == b.class_id || (a.shape == b.shape && a.color == b.color) {
                return Err(SynthError::Classes(format!(
                    "classes {} and {} are not distinct",
                    a.class_id, b.class_id
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    #[serde(flatten)]
    pub bbox: BBox,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// `[3, 64, 64]` in `[0, 1]`.
    pub image: Tensor,
    pub annotations: Vec<Annotation>,
}

impl Scene {
    pub fn gt(&self) -> Vec<(BBox, usize)> {
        self.annotations.iter().map(|a| (a.bbox, a.class_id)).collect()
    }
}

fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Places the given classes (in order) without exceeding the pairwise IoU
/// limit. Returns `None` if some object cannot be placed.
fn place(rng: &mut ChaCha8Rng, objects: &[ClassDef]) -> Option<Vec<Annotation>> {
    let mut placed: Vec<Annotation> = Vec::with_capacity(objects.len());
    for class in objects {
        let mut ok = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let w = rng.random_range(MIN_OBJECT..=MAX_OBJECT);
            let h = class.shape.height(w);
            let x = rng.random_range(0..=IMAGE_SIZE - w);
            let y = rng.random_range(0..=IMAGE_SIZE - h);
            let b = BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64).expect("positive size");
            if placed.iter().all(|p| iou(&p.bbox, &b) <= MAX_GT_IOU) {
                ok = Some(b);
                break;
            }
        }
        placed.push(Annotation {
            bbox: ok?,
            class_id: class.class_id,
        });
    }
    Some(placed)
}

fn render(rng: &mut ChaCha8Rng, classes: &[ClassDef], objects: &[Annotation]) -> Tensor {
    let n = IMAGE_SIZE;
    let mut img = vec![BACKGROUND; 3 * n * n];
    for obj in objects {
        let class = classes.iter().find(|c| c.class_id == obj.class_id).expect("known class");
        let [x1, y1, x2, y2] = obj.bbox.corners();
        let (w, h) = (x2 - x1, y2 - y1);
        for py in y1 as usize..y2 as usize {
            for px in x1 as usize..x2 as usize {
                let u = (px as f64 + 0.5 - x1) / w;
                let v = (py as f64 + 0.5 - y1) / h;
                if class.shape.contains(u, v) {
                    for (ch, &c) in class.color.iter().enumerate() {
                        img[(ch * n + py) * n + px] = c;
                    }
                }
            }
        }
    }
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    img.iter_mut()
        .for_each(|v| *v = (*v + noise.sample(rng)).clamp(0.0, 1.0));
    Tensor::from_vec(vec![3, n, n], img).expect("image shape")
}

/// Draws the object list, retrying with one object fewer whenever placement fails.
fn build_scene(
    rng: &mut ChaCha8Rng,
    classes: &[ClassDef],
    mut draw: impl FnMut(&mut ChaCha8Rng) -> Vec<ClassDef>,
) -> Scene {
    let mut objects = draw(rng);
    loop {
        if let Some(annotations) = place(rng, &objects) {
            let image = render(rng, classes, &annotations);
            return Scene { image, annotations };
        }
        objects.pop();
        if objects.is_empty() {
            objects = draw(rng);
            objects.truncate(1);
        }
    }
}

/// `n` scenes with 1–4 objects each, every object's class drawn uniformly.
pub fn generate_dataset(classes: &[ClassDef], n: usize, seed: u64) -> Result<Vec<Scene>, SynthError> {
    validate_classes(classes)?;
    Ok((0..n)
        .map(|i| {
            let mut rng = scene_rng(seed, i);
            build_scene(&mut rng, classes, |rng| {
                let count = rng.random_range(1..=MAX_OBJECTS);
                (0..count).map(|_| classes[rng.random_range(0..classes.len())]).collect()
            })
        })
        .collect())
}

/// `n` scenes each holding 1–2 objects of `new` classes; with probability
/// `p_old` a scene also holds 1–2 objects of `old` classes. Annotations are
/// complete; pass the result through [`incremental_subset`] for training.
pub fn generate_cooccurring(
    new: &[ClassDef],
    old: &[ClassDef],
    n: usize,
    p_old: f64,
    seed: u64,
) -> Result<Vec<Scene>, SynthError> {
    let all: Vec<ClassDef> = new.iter().chain(old).copied().collect();
    validate_classes(&all)?;
    Ok((0..n)
        .map(|i| {
            let mut rng = scene_rng(seed, i);
            build_scene(&mut rng, &all, |rng| {
                let mut objs: Vec<ClassDef> = (0..rng.random_range(1..=2))
                    .map(|_| new[rng.random_range(0..new.len())])
                    .collect();
                if !old.is_empty() && rng.random_bool(p_old) {
                    objs.extend((0..rng.random_range(1..=2)).map(|_| old[rng.random_range(0..old.len())]));
                }
                // new-class objects are placed first, so they survive a retry
                objs
            })
        })
        .collect())
}

/// Scenes containing at least one object of `new_ids`, with every other
/// annotation removed. Images are untouched, so unannotated old-class
/// objects remain visible.
pub fn incremental_subset(scenes: &[Scene], new_ids: &[usize]) -> Vec<Scene> {
    scenes
        .iter()
        .filter_map(|s| {
            let annotations: Vec<Annotation> = s
                .annotations
                .iter()
                .filter(|a| new_ids.contains(&a.class_id))
                .copied()
                .collect();
            (!annotations.is_empty()).then(|| Scene {
                image: s.image.clone(),
                annotations,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub width: usize,
    pub height: usize,
    pub objects: Vec<Annotation>,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn encode_ppm(image: &Tensor) -> Vec<u8> {
    let s = image.shape();
    assert!(s.len() == 3 && s[0] == 3, "expected [3, H, W] image");
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((d[(c * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor, String> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| "non-ASCII header")?.to_string());
    }
    if fields[0] != "P6" {
        return Err(format!("unsupported magic `{}`", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field `{s}`"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 || w == 0 || h == 0 {
        return Err(format!("unsupported geometry {w}x{h} maxval {max}"));
    }
    pos += 1; // single whitespace byte after maxval
    let pixels = bytes.get(pos..).unwrap_or_default();
    if pixels.len() != 3 * w * h {
        return Err(format!("expected {} pixel bytes, found {}", 3 * w * h, pixels.len()));
    }
    let mut data = vec![0.0; 3 * w * h];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = f64::from(pixels[(y * w + x) * 3 + c]) / 255.0;
            }
        }
    }
    Tensor::from_vec(vec![3, h, w], data).map_err(|e| e.to_string())
}

pub fn save_dataset(scenes: &[Scene], dir: &Path) -> Result<(), SynthError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let file = format!("{i:05}.ppm");
        let path = dir.join(&file);
        fs::write(&path, encode_ppm(&scene.image)).map_err(io_err(&path))?;
        let s = scene.image.shape();
        manifest.push(ManifestEntry {
            file,
            width: s[2],
            height: s[1],
            objects: scene.annotations.clone(),
        });
    }
    write_manifest(&manifest, dir)
}

pub fn write_manifest(entries: &[ManifestEntry], dir: &Path) -> Result<(), SynthError> {
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(entries).expect("manifest serializes");
    fs::write(&path, json).map_err(io_err(&path))
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Scene>, SynthError> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text).map_err(|source| SynthError::Manifest {
        path: mpath.clone(),
        source,
    })?;
    entries
        .into_iter()
        .map(|e| {
            let path = dir.join(&e.file);
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            let image = decode_ppm(&bytes).map_err(|reason| SynthError::Format {
                path: path.clone(),
                reason,
            })?;
            if image.shape() != [3, e.height, e.width] {
                return Err(SynthError::Format {
                    path,
                    reason: format!("image is {:?}, manifest says {}x{}", image.shape(), e.width, e.height),
                });
            }
            Ok(Scene {
                image,
                annotations: e.objects,
            })
        })
        .collect()
}
