//! Procedural underwater-style scenes: colored discs over a vertical
//! background gradient, emitted as ground-truth-consistent
//! {image, depth, mask, caption} quadruples, plus the on-disk dataset format.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::Palette;
use crate::error::{Result, TideError};
use crate::nn::Vocab;
use crate::tensorio::{read_bytes, write_bytes, Tensor};

/// Category names; id 0 is the background.
pub const CATEGORIES: [&str; 6] = ["background", "fish", "reef", "plant", "wreck", "diver"];
const PLURALS: [&str; 6] = ["", "fish", "reefs", "plants", "wrecks", "divers"];
const COUNT_WORDS: [&str; 4] = ["a", "two", "three", "four"];

/// Canonical render colors of the object categories (index 0 unused).
pub const RENDER_COLORS: [[f32; 3]; 6] = [
    [0.0, 0.0, 0.0],
    [0.95, 0.55, 0.10],
    [0.90, 0.20, 0.60],
    [0.15, 0.85, 0.25],
    [0.85, 0.85, 0.90],
    [0.95, 0.95, 0.15],
];

/// Maximum darkening applied toward the rim of a disc.
pub const SHADING: f32 = 0.1;

/// Background kinds: caption word, top color, bottom color.
pub const BACKGROUNDS: [(&str, [f32; 3], [f32; 3]); 4] = [
    ("sandy", [0.05, 0.25, 0.45], [0.45, 0.42, 0.30]),
    ("rocky", [0.05, 0.20, 0.40], [0.30, 0.30, 0.32]),
    ("muddy", [0.05, 0.25, 0.35], [0.30, 0.25, 0.15]),
    ("dark", [0.02, 0.08, 0.20], [0.12, 0.12, 0.18]),
];

/// Every word the caption template can produce, "a" and "fish" first.
pub fn vocabulary() -> Vocab {
    let mut words: Vec<&str> = vec!["a", "fish"];
    words.extend(&CATEGORIES[2..]);
    words.extend(&PLURALS[2..]);
    words.extend(&COUNT_WORDS[1..]);
    words.extend(["and", "over", "seabed"]);
    words.extend(BACKGROUNDS.iter().map(|b| b.0));
    Vocab::new(&words)
}

/// Mask palette: cube corners in category order.
pub fn palette() -> Palette {
    Palette::cube(&CATEGORIES).expect("six categories fit the cube palette")
}

/// Palette that reads an image in codec space as a category field: each
/// object category at its render color, the background at the mean of all
/// background gradient end points.
pub fn image_palette() -> Palette {
    let n = 2.0 * BACKGROUNDS.len() as f64;
    let mut bg = [0.0; 3];
    for (_, top, bottom) in BACKGROUNDS {
        for c in 0..3 {
            bg[c] += (top[c] + bottom[c]) as f64 / n;
        }
    }
    let mut colors = vec![bg.map(|v| 2.0 * v - 1.0)];
    colors.extend(RENDER_COLORS[1..].iter().map(|c| c.map(|v| 2.0 * v as f64 - 1.0)));
    Palette::new(colors, CATEGORIES.iter().map(|s| s.to_string()).collect()).expect("render colors are well separated")
}

/// Depth assignment shared by the generator and the consistency metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthRule {
    pub background_base: f64,
    pub background_slope: f64,
    pub object_base: f64,
    pub object_span: f64,
    pub max_radius: f64,
}

impl DepthRule {
    pub fn for_grammar(g: &Grammar) -> Self {
        Self { background_base: 0.9, background_slope: 0.1, object_base: 0.2, object_span: 0.5, max_radius: g.max_radius }
    }

    /// Background depth at `row` of an image with `height` rows.
    pub fn background(&self, row: usize, height: usize) -> f64 {
        let frac = if height > 1 { row as f64 / (height - 1) as f64 } else { 0.0 };
        self.background_base + self.background_slope * frac
    }

    pub fn object(&self, radius: f64) -> f64 {
        self.object_base + self.object_span * (1.0 - (radius / self.max_radius).min(1.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grammar {
    pub size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    /// Object categories that may be drawn (ids into [`CATEGORIES`], never 0).
    pub categories: Vec<u8>,
    /// Background kinds that may be drawn (indices into [`BACKGROUNDS`]).
    pub backgrounds: Vec<usize>,
    /// When non-empty, exactly these objects are drawn.
    pub forced: Vec<u8>,
}

impl Default for Grammar {
    fn default() -> Self {
        Self::with_size(16)
    }
}

impl Grammar {
    pub fn with_size(size: usize) -> Self {
        let s = size as f64;
        Self {
            size,
            min_objects: 1,
            max_objects: 3,
            min_radius: 0.15 * s,
            max_radius: 0.3 * s,
            categories: (1..CATEGORIES.len() as u8).collect(),
            backgrounds: (0..BACKGROUNDS.len()).collect(),
            forced: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories.is_empty() || self.categories.iter().any(|&c| c == 0 || c as usize >= CATEGORIES.len()) {
            return Err(TideError::invalid("grammar needs at least one object category besides background"));
        }
        if self.forced.iter().any(|&c| c == 0 || c as usize >= CATEGORIES.len()) || self.forced.len() > 4 {
            return Err(TideError::invalid("forced objects must be 1..=4 valid object categories"));
        }
        if self.backgrounds.is_empty() || self.backgrounds.iter().any(|&b| b >= BACKGROUNDS.len()) {
            return Err(TideError::invalid("grammar needs at least one valid background"));
        }
        if !(self.min_objects >= 1 && self.min_objects <= self.max_objects && self.max_objects <= 4) {
            return Err(TideError::invalid("object count bounds must satisfy 1 <= min <= max <= 4"));
        }
        if !(self.min_radius > 0.0 && self.min_radius <= self.max_radius && self.max_radius < self.size as f64) {
            return Err(TideError::invalid("radius bounds must be ordered and fit the frame"));
        }
        if self.size < 4 {
            return Err(TideError::invalid("image size must be at least 4"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub category: u8,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub depth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub background: usize,
    pub objects: Vec<SceneObject>,
}

/// One training record.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadruple {
    /// H × W × 3 in [0, 1].
    pub image: Array3<f32>,
    /// H × W in [0, 1], 0 nearest.
    pub depth: Array2<f32>,
    pub mask: Array2<u8>,
    pub caption: String,
}

/// Template caption: "a fish and two reefs over a sandy seabed".
pub fn caption_for(objects: &[SceneObject], background: usize) -> String {
    let mut counts: BTreeMap<u8, usize> = BTreeMap::new();
    for o in objects {
        *counts.entry(o.category).or_default() += 1;
    }
    let parts: Vec<String> = counts
        .iter()
        .map(|(&c, &n)| {
            let noun = if n == 1 { CATEGORIES[c as usize] } else { PLURALS[c as usize] };
            format!("{} {}", COUNT_WORDS[n.min(4) - 1], noun)
        })
        .collect();
    format!("{} over a {} seabed", parts.join(" and "), BACKGROUNDS[background].0)
}

/// Object categories a caption mentions (before "over").
pub fn caption_categories(caption: &str) -> BTreeSet<u8> {
    caption
        .split_whitespace()
        .take_while(|w| *w != "over")
        .filter_map(|w| {
            (1..CATEGORIES.len()).find(|&c| CATEGORIES[c] == w || PLURALS[c] == w).map(|c| c as u8)
        })
        .collect()
}

/// Draws the object list for `seed`.
pub fn sample_spec(seed: u64, grammar: &Grammar) -> Result<SceneSpec> {
    grammar.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = grammar.backgrounds[rng.random_range(0..grammar.backgrounds.len())];
    let categories: Vec<u8> = if grammar.forced.is_empty() {
        let n = rng.random_range(grammar.min_objects..=grammar.max_objects);
        (0..n).map(|_| grammar.categories[rng.random_range(0..grammar.categories.len())]).collect()
    } else {
        grammar.forced.clone()
    };
    let rule = DepthRule::for_grammar(grammar);
    let size = grammar.size as f64;
    let radii: Vec<f64> = categories
        .iter()
        .map(|_| {
            if grammar.min_radius == grammar.max_radius {
                grammar.min_radius
            } else {
                rng.random_range(grammar.min_radius..grammar.max_radius)
            }
        })
        .collect();
    let mut best: Option<SceneSpec> = None;
    for _ in 0..64 {
        let objects: Vec<SceneObject> = categories
            .iter()
            .zip(&radii)
            .map(|(&category, &radius)| {
                let margin = 0.5 * radius;
                SceneObject {
                    category,
                    cx: rng.random_range(margin..size - margin),
                    cy: rng.random_range(margin..size - margin),
                    radius,
                    depth: rule.object(radius),
                }
            })
            .collect();
        let spec = SceneSpec { seed, background, objects };
        let (_, owner) = rasterize(&spec, grammar.size);
        let all_visible = (0..spec.objects.len()).all(|k| owner.iter().filter(|&&o| o == k as i32).count() >= 2);
        if all_visible {
            return Ok(spec);
        }
        if best.is_none() {
            best = Some(spec);
        }
    }
    // fall back to the first draw with hidden objects removed
    let mut spec = best.expect("at least one attempt");
    let (_, owner) = rasterize(&spec, grammar.size);
    let keep: HashSet<i32> = owner.iter().copied().filter(|&o| o >= 0).collect();
    let objects = spec.objects.iter().enumerate().filter(|(k, _)| keep.contains(&(*k as i32))).map(|(_, o)| o.clone()).collect();
    spec.objects = objects;
    Ok(spec)
}

/// Back-to-front draw order (far first) and the per-pixel owning object (−1 = background).
fn rasterize(spec: &SceneSpec, size: usize) -> (Vec<usize>, Array2<i32>) {
    let mut order: Vec<usize> = (0..spec.objects.len()).collect();
    order.sort_by(|&a, &b| spec.objects[b].depth.total_cmp(&spec.objects[a].depth).then(a.cmp(&b)));
    let mut owner = Array2::from_elem((size, size), -1i32);
    for &k in &order {
        let o = &spec.objects[k];
        for ((y, x), v) in owner.indexed_iter_mut() {
            let (dx, dy) = (x as f64 + 0.5 - o.cx, y as f64 + 0.5 - o.cy);
            if dx * dx + dy * dy <= o.radius * o.radius {
                *v = k as i32;
            }
        }
    }
    (order, owner)
}

/// Renders a scene specification into a quadruple.
pub fn render(spec: &SceneSpec, grammar: &Grammar) -> Quadruple {
    let size = grammar.size;
    let rule = DepthRule::for_grammar(grammar);
    let (_, owner) = rasterize(spec, size);
    let (_, top, bottom) = BACKGROUNDS[spec.background];
    let mut image = Array3::zeros((size, size, 3));
    let mut depth = Array2::zeros((size, size));
    let mut mask = Array2::zeros((size, size));
    for ((y, x), &k) in owner.indexed_iter() {
        if k < 0 {
            let frac = if size > 1 { y as f32 / (size - 1) as f32 } else { 0.0 };
            for c in 0..3 {
                image[[y, x, c]] = top[c] + (bottom[c] - top[c]) * frac;
            }
            depth[[y, x]] = rule.background(y, size) as f32;
        } else {
            let o = &spec.objects[k as usize];
            let (dx, dy) = (x as f64 + 0.5 - o.cx, y as f64 + 0.5 - o.cy);
            let rim = ((dx * dx + dy * dy).sqrt() / o.radius).min(1.0) as f32;
            let base = RENDER_COLORS[o.category as usize];
            for c in 0..3 {
                image[[y, x, c]] = base[c] * (1.0 - SHADING * rim);
            }
            depth[[y, x]] = o.depth as f32;
            mask[[y, x]] = o.category;
        }
    }
    Quadruple { image, depth, mask, caption: caption_for(&spec.objects, spec.background) }
}

/// Deterministic in `seed`.
pub fn generate_scene(seed: u64, grammar: &Grammar) -> Result<Quadruple> {
    Ok(render(&sample_spec(seed, grammar)?, grammar))
}

/// Generates quadruples for `seeds` (in parallel when enabled), in seed order.
pub fn generate_many(seeds: &[u64], grammar: &Grammar) -> Result<Vec<Quadruple>> {
    crate::par::map(seeds, |&s| generate_scene(s, grammar)).into_iter().collect()
}

/// Checks a rendered quadruple against its specification.
pub fn validate(q: &Quadruple, spec: &SceneSpec, grammar: &Grammar) -> std::result::Result<(), Vec<String>> {
    let mut errors = Vec::new();
    let size = grammar.size;
    if q.image.dim() != (size, size, 3) || q.depth.dim() != (size, size) || q.mask.dim() != (size, size) {
        return Err(vec!["shape mismatch".into()]);
    }
    if q.image.iter().any(|v| !(0.0..=1.0).contains(v)) {
        errors.push("image outside [0, 1]".into());
    }
    if q.depth.iter().any(|v| !(0.0..=1.0).contains(v)) {
        errors.push("depth outside [0, 1]".into());
    }
    if q.mask.iter().any(|&m| m as usize >= CATEGORIES.len()) {
        errors.push("mask category out of range".into());
    }
    let in_mask: BTreeSet<u8> = q.mask.iter().copied().filter(|&m| m != 0).collect();
    let in_caption = caption_categories(&q.caption);
    if in_mask != in_caption {
        errors.push(format!("caption categories {in_caption:?} vs mask {in_mask:?}"));
    }
    for ((y, x), &m) in q.mask.indexed_iter() {
        if m == 0 {
            continue;
        }
        let base = RENDER_COLORS[m as usize];
        for c in 0..3 {
            if (q.image[[y, x, c]] - base[c]).abs() > SHADING + 1e-6 {
                errors.push(format!("pixel ({y},{x}) color off canonical for category {m}"));
            }
        }
    }
    let object_max = q.mask.indexed_iter().filter(|(_, &m)| m != 0).map(|(p, _)| q.depth[p]).fold(f32::MIN, f32::max);
    let background_min = q.mask.indexed_iter().filter(|(_, &m)| m == 0).map(|(p, _)| q.depth[p]).fold(f32::MAX, f32::min);
    if object_max >= background_min {
        errors.push("object not strictly nearer than background".into());
    }
    for a in &spec.objects {
        for b in &spec.objects {
            if a.radius > b.radius && a.depth > b.depth {
                errors.push("larger object drawn farther than smaller one".into());
            }
        }
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(errors)
    }
}

/// Dataset-level facts evaluators need; stored beside the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub size: usize,
    pub categories: Vec<String>,
    pub depth_rule: DepthRule,
}

impl DatasetHeader {
    pub fn for_grammar(g: &Grammar) -> Self {
        Self {
            size: g.size,
            categories: CATEGORIES.iter().map(|s| s.to_string()).collect(),
            depth_rule: DepthRule::for_grammar(g),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileSet {
    pub image: String,
    pub depth: String,
    pub mask: String,
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub caption: String,
    pub files: FileSet,
    pub crc32c: BTreeMap<String, u32>,
}

pub const MANIFEST: &str = "manifest.jsonl";
pub const HEADER: &str = "header.json";

/// Writes one tensor file per modality per record plus `manifest.jsonl`.
pub fn write_dataset<'a, I>(records: I, dir: &Path, header: &DatasetHeader) -> Result<Vec<ManifestEntry>>
where
    I: IntoIterator<Item = &'a Quadruple>,
{
    fs::create_dir_all(dir).map_err(|e| TideError::io(dir, e))?;
    let header_path = dir.join(HEADER);
    let header_json = serde_json::to_string_pretty(header).expect("header serializes");
    write_bytes(&header_path, header_json.as_bytes())?;
    let manifest_path = dir.join(MANIFEST);
    let mut manifest = fs::File::create(&manifest_path).map_err(|e| TideError::io(&manifest_path, e))?;
    let mut entries = Vec::new();
    for (i, q) in records.into_iter().enumerate() {
        let id = format!("{i:06}");
        let files = FileSet {
            image: format!("{id}.image.tide"),
            depth: format!("{id}.depth.tide"),
            mask: format!("{id}.mask.tide"),
        };
        let payloads = [
            ("image", &files.image, Tensor::F32(q.image.clone().into_dyn()).to_bytes()),
            ("depth", &files.depth, Tensor::F32(q.depth.clone().into_dyn()).to_bytes()),
            ("mask", &files.mask, Tensor::U8(q.mask.clone().into_dyn()).to_bytes()),
        ];
        let mut crc = BTreeMap::new();
        for (kind, name, bytes) in &payloads {
            write_bytes(&dir.join(name), bytes)?;
            crc.insert(kind.to_string(), crc32c::crc32c(bytes));
        }
        let entry = ManifestEntry { id, caption: q.caption.clone(), files, crc32c: crc };
        let line = serde_json::to_string(&entry).expect("entry serializes");
        writeln!(manifest, "{line}").map_err(|e| TideError::io(&manifest_path, e))?;
        entries.push(entry);
    }
    manifest.flush().map_err(|e| TideError::io(&manifest_path, e))?;
    Ok(entries)
}

pub fn read_header(dir: &Path) -> Result<DatasetHeader> {
    let path = dir.join(HEADER);
    let bytes = read_bytes(&path)?;
    serde_json::from_slice(&bytes).map_err(|e| TideError::format("dataset header", e.to_string()))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path: PathBuf = dir.join(MANIFEST);
    if !path.exists() {
        return Err(TideError::Missing(path));
    }
    let file = fs::File::open(&path).map_err(|e| TideError::io(&path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| TideError::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| TideError::format("manifest line", format!("line {}: {e}", n + 1)))?;
        out.push(entry);
    }
    Ok(out)
}

fn read_checked(dir: &Path, entry: &ManifestEntry, kind: &str, name: &str) -> Result<Tensor> {
    let bytes = read_bytes(&dir.join(name))?;
    let expected = entry
        .crc32c
        .get(kind)
        .ok_or_else(|| TideError::format("manifest line", format!("{} lacks a {kind} checksum", entry.id)))?;
    if crc32c::crc32c(&bytes) != *expected {
        return Err(TideError::Checksum { id: entry.id.clone(), file: name.to_string() });
    }
    Tensor::from_bytes(&bytes)
}

/// Reads every record, verifying checksums, in manifest order.
pub fn read_dataset(dir: &Path) -> Result<Vec<(String, Quadruple)>> {
    read_manifest(dir)?
        .into_iter()
        .map(|e| {
            let image = read_checked(dir, &e, "image", &e.files.image)?.into_f32_3()?;
            let depth = read_checked(dir, &e, "depth", &e.files.depth)?.into_f32_2()?;
            let mask = read_checked(dir, &e, "mask", &e.files.mask)?.into_u8_2()?;
            Ok((e.id, Quadruple { image, depth, mask, caption: e.caption }))
        })
        .collect()
}

/// One synthesis job: a caption and the seed of one sample for it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthesisJob {
    pub caption: String,
    pub seed: u64,
}

/// Deduplicates captions (first occurrence wins) and fans each out to `n`
/// distinct seeds `base_seed + k`, k counting over all jobs.
pub fn expand_captions<S: AsRef<str>>(captions: &[S], n: usize, base_seed: u64) -> Result<Vec<SynthesisJob>> {
    if n == 0 {
        return Err(TideError::invalid("samples per caption must be at least 1"));
    }
    let mut seen = HashSet::new();
    let mut jobs = Vec::new();
    for c in captions {
        let c = c.as_ref();
        if seen.insert(c.to_string()) {
            for _ in 0..n {
                let seed = base_seed + jobs.len() as u64;
                jobs.push(SynthesisJob { caption: c.to_string(), seed });
            }
        }
    }
    Ok(jobs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_starts_with_template_words() {
        let v = vocabulary();
        assert_eq!(v.id("a"), Some(3));
        assert_eq!(v.id("fish"), Some(4));
        for seed in 0..50 {
            let q = generate_scene(seed, &Grammar::default()).unwrap();
            for w in q.caption.split_whitespace() {
                assert!(v.id(w).is_some(), "{w} missing from vocabulary");
            }
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let g = Grammar::default();
        assert_eq!(generate_scene(42, &g).unwrap(), generate_scene(42, &g).unwrap());
        assert_ne!(generate_scene(42, &g).unwrap(), generate_scene(43, &g).unwrap());
    }

    #[test]
    fn forced_fish() {
        let g = Grammar { forced: vec![1], ..Grammar::default() };
        let q = generate_scene(5, &g).unwrap();
        assert!(q.caption.contains("fish"));
        assert!(q.mask.iter().any(|&m| m == 1));
        assert_eq!(q.caption.split_whitespace().next(), Some("a"));
    }

    #[test]
    fn seed_seven_passes_validator() {
        let g = Grammar::default();
        let spec = sample_spec(7, &g).unwrap();
        assert!((1..=4).contains(&spec.objects.len()));
        validate(&render(&spec, &g), &spec, &g).unwrap();
    }

    #[test]
    fn rendered_images_decode_to_their_masks() {
        let pal = image_palette();
        for seed in 0..200 {
            let q = generate_scene(seed, &Grammar::default()).unwrap();
            let grid = crate::codec::encode_image(q.image.view());
            assert_eq!(crate::codec::decode_mask(grid.view(), &pal).unwrap(), q.mask, "seed {seed}");
        }
    }

    #[test]
    fn validator_passes_across_seeds() {
        let g = Grammar::default();
        for seed in 0..1000 {
            let spec = sample_spec(seed, &g).unwrap();
            assert!((1..=4).contains(&spec.objects.len()));
            validate(&render(&spec, &g), &spec, &g).unwrap();
        }
    }

    #[test]
    fn captions_follow_template() {
        let objs = |cats: &[u8]| -> Vec<SceneObject> {
            cats.iter().map(|&c| SceneObject { category: c, cx: 1.0, cy: 1.0, radius: 1.0, depth: 0.5 }).collect()
        };
        assert_eq!(caption_for(&objs(&[1]), 0), "a fish over a sandy seabed");
        assert_eq!(caption_for(&objs(&[2, 1, 2]), 3), "a fish and two reefs over a dark seabed");
        assert_eq!(caption_categories("a fish and two reefs over a dark seabed"), BTreeSet::from([1, 2]));
    }

    #[test]
    fn grammar_validation() {
        assert!(Grammar { categories: vec![], ..Grammar::default() }.validate().is_err());
        assert!(Grammar { min_radius: 5.0, max_radius: 2.0, ..Grammar::default() }.validate().is_err());
        assert!(Grammar { min_objects: 3, max_objects: 2, ..Grammar::default() }.validate().is_err());
        assert!(Grammar::with_size(64).validate().is_ok());
    }

    #[test]
    fn expand_dedups_and_fans_out() {
        let jobs = expand_captions(&["a", "a", "b"], 2, 0).unwrap();
        let caps: Vec<&str> = jobs.iter().map(|j| j.caption.as_str()).collect();
        assert_eq!(caps, ["a", "a", "b", "b"]);
        let seeds: HashSet<u64> = jobs.iter().map(|j| j.seed).collect();
        assert_eq!(seeds.len(), 4);
        assert_eq!(expand_captions(&["a", "b", "a"], 1, 0).unwrap().len(), 2);
        assert!(expand_captions(&["a"], 0, 0).is_err());
        let many: Vec<String> = (0..5000).map(|i| format!("caption {i}")).collect();
        assert_eq!(expand_captions(&many, 10, 0).unwrap().len(), 50_000);
    }

    #[test]
    fn dataset_round_trip_and_integrity() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grammar::default();
        let recs = generate_many(&[1, 2, 3], &g).unwrap();
        let header = DatasetHeader::for_grammar(&g);
        let entries = write_dataset(&recs, dir.path(), &header).unwrap();
        assert_eq!(entries.len(), 3);
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.iter().map(|(_, q)| q.clone()).collect::<Vec<_>>(), recs);
        assert_eq!(read_header(dir.path()).unwrap(), header);

        let victim = dir.path().join(&entries[1].files.depth);
        let mut bytes = fs::read(&victim).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        fs::write(&victim, bytes).unwrap();
        match read_dataset(dir.path()) {
            Err(TideError::Checksum { id, .. }) => assert_eq!(id, entries[1].id),
            other => panic!("expected checksum failure, got {other:?}"),
        }

        fs::remove_file(dir.path().join(&entries[0].files.mask)).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(TideError::Missing(_))));
    }

    #[test]
    fn empty_and_malformed_datasets() {
        let dir = tempfile::tempdir().unwrap();
        let header = DatasetHeader::for_grammar(&Grammar::default());
        write_dataset(std::iter::empty(), dir.path(), &header).unwrap();
        assert_eq!(fs::read_to_string(dir.path().join(MANIFEST)).unwrap(), "");
        assert!(read_dataset(dir.path()).unwrap().is_empty());
        fs::write(dir.path().join(MANIFEST), "{not json}\n").unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(TideError::Format { .. })));
    }
}
