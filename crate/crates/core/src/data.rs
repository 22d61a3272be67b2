//! Synthetic fine-grained dataset and minibatch iteration.
//!
//! Every image shows the same body shape at a jittered position over clutter.
//! The class is written only in small two-colour glyphs placed at fixed slots
//! on the body; optional decoy glyphs with the same appearance are scattered
//! over the background, so a glyph only counts where it sits on the body.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::canvas::Rect;
use crate::error::{Error, Result};
use crate::pnm;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub classes: usize,
    /// Glyph slots on the body; the class is written in base-`P` digits, one per slot.
    pub slots: usize,
    pub glyph_size: usize,
    /// Body half-width as a fraction of the image side.
    pub body_radius: f64,
    /// Clutter rectangles per 100 background pixels.
    pub clutter: f64,
    /// Decoy glyphs placed off the body.
    pub decoys: usize,
    /// Decoy glyphs placed on the body away from the slots.
    pub body_decoys: usize,
    /// Maximum body displacement in pixels along each axis.
    pub jitter: usize,
    /// Amplitude of uniform per-pixel noise.
    pub noise: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            image_size: 96,
            classes: 8,
            slots: 3,
            glyph_size: 7,
            body_radius: 0.3,
            clutter: 1.0,
            decoys: 3,
            body_decoys: 3,
            jitter: 8,
            noise: 0.1,
            train_per_class: 200,
            test_per_class: 100,
            seed: 0,
        }
    }
}

const HUES: usize = 6;
const BODY: [f64; 3] = [0.72, 0.58, 0.40];
const BACKGROUND: [f64; 3] = [0.45, 0.50, 0.48];
/// Six hues in complementary pairs, then black and white.
const PALETTE: [[f64; 3]; 8] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.85, 0.90],
    [0.10, 0.75, 0.15],
    [0.85, 0.15, 0.85],
    [0.15, 0.25, 0.95],
    [0.95, 0.90, 0.10],
    [0.05, 0.05, 0.05],
    [0.98, 0.98, 0.98],
];

impl SyntheticSpec {
    /// Patterns per slot: the smallest `P` with `P^slots ≥ classes`.
    pub fn patterns_per_slot(&self) -> usize {
        let mut p: usize = 1;
        while p.pow(self.slots as u32) < self.classes {
            p += 1;
        }
        p
    }

    fn body_radii(&self) -> (f64, f64) {
        let rx = self.body_radius * self.image_size as f64;
        (rx, rx * 0.8)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.slots == 0 || self.slots > 6 {
            return Err(Error::Config(format!("slots must be 1..=6, got {}", self.slots)));
        }
        if self.image_size < 16 || self.glyph_size < 3 {
            return Err(Error::Config("image must be at least 16 px and glyphs at least 3 px".into()));
        }
        if !(self.body_radius > 0.0 && self.body_radius < 0.5) {
            return Err(Error::Config(format!("body radius {} outside (0, 0.5)", self.body_radius)));
        }
        if !(self.clutter >= 0.0) || !(self.noise >= 0.0) {
            return Err(Error::Config("clutter and noise must be non-negative".into()));
        }
        if self.slots * self.patterns_per_slot() > 2 * HUES {
            return Err(Error::Config(format!(
                "{} classes over {} slots need more than {} distinct glyph patterns",
                self.classes,
                self.slots,
                2 * HUES
            )));
        }
        if self.train_per_class == 0 {
            return Err(Error::Config("train_per_class must be at least 1".into()));
        }
        let (_, ry) = self.body_radii();
        if self.glyph_size as f64 >= ry {
            return Err(Error::Spec(format!(
                "glyph of {} px does not fit a body of half-height {ry:.1} px",
                self.glyph_size
            )));
        }
        let reach = self.body_radius * self.image_size as f64 + self.jitter as f64;
        if reach >= self.image_size as f64 / 2.0 {
            return Err(Error::Spec("jittered body leaves the image".into()));
        }
        Ok(())
    }

    /// Digit of `class` at `slot`.
    pub fn digit(&self, class: usize, slot: usize) -> usize {
        let p = self.patterns_per_slot();
        (class / p.pow(slot as u32)) % p
    }

    /// Pattern colours `(outer, inner)` for a slot/digit pair: one of six hues
    /// around a dark or light centre. Distinct for the first twelve pairs; with
    /// two digits per slot, a slot's digits are complementary hues.
    pub fn pattern(&self, slot: usize, digit: usize) -> ([f64; 3], [f64; 3]) {
        let k = slot * self.patterns_per_slot() + digit;
        let outer = PALETTE[k % HUES];
        let inner = PALETTE[HUES + (k / HUES + k) % 2];
        (outer, inner)
    }

    /// Slot centre relative to the body centre.
    fn slot_offset(&self, slot: usize) -> (f64, f64) {
        let (rx, ry) = self.body_radii();
        let angle = std::f64::consts::TAU * slot as f64 / self.slots as f64 + std::f64::consts::FRAC_PI_6;
        let r = if self.slots == 1 { 0.0 } else { 0.5 };
        (r * rx * angle.cos(), r * ry * angle.sin())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
    /// Class-carrying glyph rectangles, one per slot, in image pixels.
    pub glyphs: Vec<Rect>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

struct Canvas<'a> {
    data: &'a mut [f64],
    side: usize,
}

impl Canvas<'_> {
    fn put(&mut self, x: i64, y: i64, color: [f64; 3]) {
        let s = self.side as i64;
        if x < 0 || y < 0 || x >= s || y >= s {
            return;
        }
        let i = (y * s + x) as usize;
        let plane = self.side * self.side;
        for (c, v) in color.iter().enumerate() {
            self.data[c * plane + i] = *v;
        }
    }

    fn fill(&mut self, x0: i64, y0: i64, w: i64, h: i64, color: [f64; 3]) {
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                self.put(x, y, color);
            }
        }
    }

    fn glyph(&mut self, x0: i64, y0: i64, size: usize, colors: ([f64; 3], [f64; 3])) {
        let n = size as i64;
        self.fill(x0, y0, n, n, colors.0);
        let inset = (n + 2) / 4;
        self.fill(x0 + inset, y0 + inset, n - 2 * inset, n - 2 * inset, colors.1);
    }
}

fn inside_ellipse(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> bool {
    let dx = (x - cx) / rx;
    let dy = (y - cy) / ry;
    dx * dx + dy * dy <= 1.0
}

/// Renders one example. Identical `(spec, label, rng state)` gives identical output.
pub fn render_example<R: Rng + ?Sized>(spec: &SyntheticSpec, label: usize, rng: &mut R) -> Example {
    let n = spec.image_size;
    let nf = n as f64;
    let mut data = vec![0.0; 3 * n * n];
    for (c, plane) in data.chunks_mut(n * n).enumerate() {
        plane.iter_mut().for_each(|v| *v = BACKGROUND[c]);
    }
    let j = spec.jitter as i64;
    let jit = |rng: &mut R| if j == 0 { 0.0 } else { rng.gen_range(-j..=j) as f64 };
    let cx = nf / 2.0 + jit(rng);
    let cy = nf / 2.0 + jit(rng);
    let (rx, ry) = spec.body_radii();
    let on_body = |x: f64, y: f64| inside_ellipse(x, y, cx, cy, rx + 1.0, ry + 1.0);

    let mut img = Canvas { data: &mut data, side: n };
    let background = nf * nf - std::f64::consts::PI * rx * ry;
    let count = (spec.clutter * background / 100.0).round() as usize;
    for _ in 0..count {
        let w = rng.gen_range(2..=6);
        let h = rng.gen_range(2..=6);
        let x = rng.gen_range(0..n as i64);
        let y = rng.gen_range(0..n as i64);
        let shade = rng.gen_range(0.2..0.8);
        let tint: [f64; 3] = [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)];
        img.fill(x, y, w, h, [shade + tint[0], shade + tint[1], shade + tint[2]]);
    }

    let g = spec.glyph_size as i64;
    let mut placed = 0;
    let mut attempts = 0;
    while placed < spec.decoys && attempts < 200 {
        attempts += 1;
        let x = rng.gen_range(0..n as i64 - g);
        let y = rng.gen_range(0..n as i64 - g);
        let corners = [(x, y), (x + g, y), (x, y + g), (x + g, y + g)];
        if corners.iter().any(|&(a, b)| on_body(a as f64, b as f64)) {
            continue;
        }
        let slot = rng.gen_range(0..spec.slots);
        let digit = rng.gen_range(0..spec.patterns_per_slot());
        img.glyph(x, y, spec.glyph_size, spec.pattern(slot, digit));
        placed += 1;
    }

    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if inside_ellipse(px, py, cx, cy, rx, ry) {
                let dx = (px - cx) / rx;
                let dy = (py - cy) / ry;
                let shade = 1.0 - 0.25 * (dx * dx + dy * dy);
                img.put(x as i64, y as i64, BODY.map(|v| v * shade));
            }
        }
    }

    let slot_centres: Vec<(f64, f64)> = (0..spec.slots)
        .map(|s| {
            let (ox, oy) = spec.slot_offset(s);
            (cx + ox, cy + oy)
        })
        .collect();
    let gf = g as f64;
    let mut taken = slot_centres.clone();
    let mut attempts = 0;
    while taken.len() < spec.slots + spec.body_decoys && attempts < 500 {
        attempts += 1;
        let x = cx + rng.gen_range(-rx..rx);
        let y = cy + rng.gen_range(-ry..ry);
        let fits = inside_ellipse(x, y, cx, cy, rx - gf, ry - gf);
        let clear = taken.iter().all(|&(a, b)| (a - x).abs().max((b - y).abs()) >= 1.5 * gf);
        if !(fits && clear) {
            continue;
        }
        let slot = rng.gen_range(0..spec.slots);
        let digit = rng.gen_range(0..spec.patterns_per_slot());
        let x0 = (x - gf / 2.0).round() as i64;
        let y0 = (y - gf / 2.0).round() as i64;
        img.glyph(x0, y0, spec.glyph_size, spec.pattern(slot, digit));
        taken.push((x, y));
    }

    let mut glyphs = Vec::with_capacity(spec.slots);
    for (slot, &(sx, sy)) in slot_centres.iter().enumerate() {
        let x0 = (sx - gf / 2.0).round() as i64;
        let y0 = (sy - gf / 2.0).round() as i64;
        img.glyph(x0, y0, spec.glyph_size, spec.pattern(slot, spec.digit(label, slot)));
        glyphs.push(Rect { x0: x0 as f64, y0: y0 as f64, x1: (x0 + g) as f64, y1: (y0 + g) as f64 });
    }

    if spec.noise > 0.0 {
        for v in data.iter_mut() {
            *v = (*v + rng.gen_range(-spec.noise..spec.noise)).clamp(0.0, 1.0);
        }
    }
    let image = Tensor::new(&[3, n, n], data).expect("image buffer matches its shape");
    Example { image, label, glyphs }
}

fn example_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Balanced train and test splits; example `i` of a split has label `i mod C`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let c = spec.classes;
    let make = |offset: usize, count: usize| -> Vec<Example> {
        (0..count)
            .map(|i| {
                let mut rng = example_rng(spec.seed, (offset + i) as u64);
                render_example(spec, i % c, &mut rng)
            })
            .collect()
    };
    let n_train = c * spec.train_per_class;
    let train = make(0, n_train);
    let test = make(n_train, c * spec.test_per_class);
    Ok(Dataset { classes: c, train, test })
}

fn glyph_pixels(image: &Tensor, rect: &Rect) -> Vec<f64> {
    let n = image.shape()[2];
    let plane = n * image.shape()[1];
    let mut out = Vec::new();
    for c in 0..3 {
        for y in rect.y0 as usize..rect.y1 as usize {
            for x in rect.x0 as usize..rect.x1 as usize {
                out.push(image.data()[c * plane + y * n + x]);
            }
        }
    }
    out
}

/// Reads the class by matching each slot's ground-truth box against the pattern templates.
/// Ties go to the lowest digit.
pub fn oracle_classify(spec: &SyntheticSpec, example: &Example) -> usize {
    let p = spec.patterns_per_slot();
    let mut class = 0;
    for (slot, rect) in example.glyphs.iter().enumerate() {
        let observed = glyph_pixels(&example.image, rect);
        let mut best = (f64::INFINITY, 0);
        for digit in 0..p {
            let mut buf = vec![0.0; 3 * spec.glyph_size * spec.glyph_size];
            Canvas { data: &mut buf, side: spec.glyph_size }.glyph(0, 0, spec.glyph_size, spec.pattern(slot, digit));
            let ssd: f64 = observed.iter().zip(&buf).map(|(a, b)| (a - b) * (a - b)).sum();
            if ssd < best.0 {
                best = (ssd, digit);
            }
        }
        class += best.1 * p.pow(slot as u32);
    }
    class
}

/// Copy of the example with every glyph box painted in flat body colour.
pub fn mask_glyphs(example: &Example) -> Example {
    let mut out = example.clone();
    let n = out.image.shape()[2];
    let mut img = Canvas { data: out.image.data_mut(), side: n };
    for r in &example.glyphs {
        img.fill(r.x0 as i64, r.y0 as i64, (r.x1 - r.x0) as i64, (r.y1 - r.y0) as i64, BODY);
    }
    out
}

/// Example order for one epoch, cut into batches. Without shuffling the order is the identity.
pub fn iterate_minibatches<R: Rng + ?Sized>(len: usize, batch: usize, rng: Option<&mut R>) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    if let Some(rng) = rng {
        order.shuffle(rng);
    }
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Random canvas order that only permutes within each scale block.
pub fn within_scale_permutation<R: Rng + ?Sized>(blocks: &[Range<usize>], rng: &mut R) -> Vec<usize> {
    let mut out = Vec::new();
    for b in blocks {
        let mut idx: Vec<usize> = b.clone().collect();
        idx.shuffle(rng);
        out.extend(idx);
    }
    out
}

/// Parses `relative_path,label` lines. Blank lines and `#` comments are skipped.
pub fn parse_manifest(text: &str, classes: usize) -> Result<Vec<(PathBuf, usize)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| Error::Input(format!("manifest line {}: {what}", n + 1));
        let (path, label) = line.rsplit_once(',').ok_or_else(|| bad("expected relative_path,label"))?;
        let label: usize = label.trim().parse().map_err(|_| bad("label is not a non-negative integer"))?;
        if label >= classes {
            return Err(bad(&format!("label {label} not below class count {classes}")));
        }
        let path = path.trim();
        if path.is_empty() {
            return Err(bad("empty path"));
        }
        out.push((PathBuf::from(path), label));
    }
    Ok(out)
}

/// Loads the images a manifest lists, resolving paths against its directory.
/// Real images carry no glyph annotations.
pub fn load_manifest(path: &Path, classes: usize) -> Result<Vec<Example>> {
    let text = fs::read_to_string(path)?;
    let root = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, classes)?
        .into_iter()
        .map(|(rel, label)| {
            let image = pnm::load_image(&root.join(&rel))?;
            if image.shape()[0] != 3 {
                return Err(Error::Input(format!("{} is not an RGB image", rel.display())));
            }
            Ok(Example { image, label, glyphs: Vec::new() })
        })
        .collect()
}

/// Writes `examples` as `{prefix}_{index}.ppm` files under `dir` plus a manifest
/// named `{prefix}.csv`; returns the manifest path.
pub fn write_split(dir: &Path, prefix: &str, examples: &[Example]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (i, e) in examples.iter().enumerate() {
        let name = format!("{prefix}_{i:05}.ppm");
        pnm::save_image(&dir.join(&name), &e.image)?;
        manifest.push_str(&format!("{name},{}\n", e.label));
    }
    let path = dir.join(format!("{prefix}.csv"));
    fs::write(&path, manifest)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn quiet(classes: usize) -> SyntheticSpec {
        SyntheticSpec {
            classes,
            clutter: 0.0,
            decoys: 0,
            body_decoys: 0,
            jitter: 0,
            noise: 0.0,
            train_per_class: 2,
            test_per_class: 1,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn quiet_images_differ_only_in_glyphs() {
        let spec = SyntheticSpec { slots: 1, ..quiet(2) };
        let ds = generate_synthetic(&spec).unwrap();
        let (a, b) = (&ds.train[0], &ds.train[1]);
        assert_eq!(a.glyphs, b.glyphs);
        let n = spec.image_size;
        let mut differing = 0;
        for c in 0..3 {
            for y in 0..n {
                for x in 0..n {
                    let i = c * n * n + y * n + x;
                    if a.image.data()[i] != b.image.data()[i] {
                        differing += 1;
                        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                        assert!(a.glyphs.iter().any(|r| r.x0 <= px && px < r.x1 && r.y0 <= py && py < r.y1));
                    }
                }
            }
        }
        assert!(differing > 0);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec { train_per_class: 3, test_per_class: 1, ..SyntheticSpec::default() };
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        let other = SyntheticSpec { seed: 1, ..spec.clone() };
        assert_ne!(generate_synthetic(&spec).unwrap().train, generate_synthetic(&other).unwrap().train);
    }

    #[test]
    fn splits_are_balanced() {
        let spec = SyntheticSpec { train_per_class: 3, test_per_class: 2, ..SyntheticSpec::default() };
        let ds = generate_synthetic(&spec).unwrap();
        assert_eq!(ds.train.len(), 24);
        assert_eq!(ds.test.len(), 16);
        for c in 0..8 {
            assert_eq!(ds.train.iter().filter(|e| e.label == c).count(), 3);
        }
        assert!(ds.train.iter().chain(&ds.test).all(|e| e.image.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn oracle_reads_quiet_images() {
        let ds = generate_synthetic(&SyntheticSpec { train_per_class: 5, ..quiet(8) }).unwrap();
        let spec = quiet(8);
        assert!(ds.train.iter().all(|e| oracle_classify(&spec, e) == e.label));
    }

    #[test]
    fn oversized_glyph_is_spec_error() {
        let spec = SyntheticSpec { glyph_size: 30, ..SyntheticSpec::default() };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Spec(_))));
        let spec = SyntheticSpec { classes: 0, ..SyntheticSpec::default() };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn patterns_are_distinct() {
        let spec = SyntheticSpec::default();
        let mut seen = Vec::new();
        for s in 0..spec.slots {
            for d in 0..spec.patterns_per_slot() {
                let p = spec.pattern(s, d);
                assert_ne!(p.0, p.1);
                assert!(!seen.contains(&p));
                seen.push(p);
            }
        }
    }

    #[test]
    fn unshuffled_batches_are_identity() {
        let b = iterate_minibatches::<ChaCha8Rng>(7, 3, None);
        assert_eq!(b, vec![vec![0, 1, 2], vec![3, 4, 5], vec![6]]);
    }

    #[test]
    fn shuffled_batches_reproduce() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            (0..2).map(|_| iterate_minibatches(10, 4, Some(&mut rng))).collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run());
        assert_ne!(a[0], a[1]);
    }

    proptest! {
        #[test]
        fn permutation_stays_within_blocks(sizes in prop::collection::vec(1usize..8, 1..5), seed in any::<u64>()) {
            let mut blocks = Vec::new();
            let mut start = 0;
            for s in sizes {
                blocks.push(start..start + s);
                start += s;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let perm = within_scale_permutation(&blocks, &mut rng);
            prop_assert_eq!(perm.len(), start);
            for (pos, &idx) in perm.iter().enumerate() {
                let home = blocks.iter().position(|b| b.contains(&pos)).unwrap();
                prop_assert!(blocks[home].contains(&idx));
            }
        }
    }

    #[test]
    fn manifest_lines() {
        let m = parse_manifest("# header\na/b.ppm,1\n\n c,d.ppm , 0 \n", 2).unwrap();
        assert_eq!(m, vec![(PathBuf::from("a/b.ppm"), 1), (PathBuf::from("c,d.ppm"), 0)]);
        for bad in ["x.ppm", "x.ppm,-1", "x.ppm,2", ",1"] {
            assert!(matches!(parse_manifest(bad, 2), Err(Error::Input(_))), "{bad}");
        }
    }

    #[test]
    fn written_split_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec { image_size: 24, glyph_size: 3, train_per_class: 2, test_per_class: 1, ..quiet(3) };
        let data = generate_synthetic(&spec).unwrap();
        let path = write_split(dir.path(), "train", &data.train).unwrap();
        let loaded = load_manifest(&path, 3).unwrap();
        assert_eq!(loaded.len(), data.train.len());
        for (a, b) in loaded.iter().zip(&data.train) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.image.shape(), b.image.shape());
            let worst = a.image.data().iter().zip(b.image.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(worst <= 0.5 / 255.0 + 1e-12);
        }
    }
}
