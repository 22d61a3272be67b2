//! Multi-scale attention canvases.
//!
//! An image is first normalized so its short edge has a fixed length. Each
//! scale then slides a square window over it with a fixed stride (plus one
//! centered window), and every crop is resized to a common output size.
//! Canvases are sequenced coarse to fine: largest window first.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Axis-aligned rectangle `[x0, x1) × [y0, y1)` in image pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn square(x0: usize, y0: usize, side: usize) -> Self {
        Self::new(x0 as f64, y0 as f64, (x0 + side) as f64, (y0 + side) as f64)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }

    pub fn contains(&self, other: &Rect) -> bool {
        other.x0 >= self.x0 && other.y0 >= self.y0 && other.x1 <= self.x1 && other.y1 <= self.y1
    }
}

/// One window size and its stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scale {
    pub window: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CanvasPlan {
    pub normalized_short_edge: usize,
    pub scales: Vec<Scale>,
    pub output_size: usize,
    pub include_center_per_scale: bool,
}

impl CanvasPlan {
    /// 256-pixel short edge; windows 224/168/112 with strides 32/44/48; 224 output.
    pub fn standard() -> Self {
        Self {
            normalized_short_edge: 256,
            scales: vec![
                Scale { window: 224, stride: 32 },
                Scale { window: 168, stride: 44 },
                Scale { window: 112, stride: 48 },
            ],
            output_size: 224,
            include_center_per_scale: true,
        }
    }

    /// The standard layout rescaled to a 96-pixel short edge (5/10/17 canvases),
    /// resized to `output_size`.
    pub fn desk(output_size: usize) -> Self {
        Self {
            normalized_short_edge: 96,
            scales: vec![
                Scale { window: 84, stride: 12 },
                Scale { window: 63, stride: 16 },
                Scale { window: 42, stride: 18 },
            ],
            output_size,
            include_center_per_scale: true,
        }
    }

    /// Keeps only the `n` coarsest scales.
    pub fn with_scale_count(mut self, n: usize) -> Self {
        self.sorted_scales_in_place();
        self.scales.truncate(n);
        self
    }

    fn sorted_scales_in_place(&mut self) {
        self.scales.sort_by(|a, b| b.window.cmp(&a.window));
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Plan("no scales".into()));
        }
        if self.output_size == 0 || self.normalized_short_edge == 0 {
            return Err(Error::Plan("zero output size or short edge".into()));
        }
        for s in &self.scales {
            if s.stride == 0 {
                return Err(Error::Plan(format!("stride must be >= 1 for window {}", s.window)));
            }
            if s.window == 0 || s.window > self.normalized_short_edge {
                return Err(Error::Plan(format!(
                    "window {} exceeds short edge {}",
                    s.window, self.normalized_short_edge
                )));
            }
        }
        Ok(())
    }

    /// Canvas count for a normalized image of the given size.
    pub fn canvas_count(&self, height: usize, width: usize) -> Result<usize> {
        Ok(self.layout(height, width)?.len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Canvas {
    pub pixels: Tensor,
    /// Window position in normalized-image coordinates.
    pub footprint: Rect,
    pub scale_index: usize,
    pub sequence_index: usize,
    pub image_height: usize,
    pub image_width: usize,
}

/// Grid positions along one axis: `floor((dim − window)/stride) + 1` of them.
pub fn axis_positions(dim: usize, window: usize, stride: usize) -> Result<Vec<usize>> {
    if window > dim {
        return Err(Error::Plan(format!("window {window} larger than image side {dim}")));
    }
    if stride == 0 {
        return Err(Error::Plan("stride must be >= 1".into()));
    }
    Ok((0..=(dim - window) / stride).map(|i| i * stride).collect())
}

/// Grid window origins `(x0, y0)` for one scale, row-major.
fn window_offsets(scale: &Scale, height: usize, width: usize) -> Result<Vec<(usize, usize)>> {
    let ys = axis_positions(height, scale.window, scale.stride)?;
    let xs = axis_positions(width, scale.window, scale.stride)?;
    let grid: Vec<(usize, usize)> = ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| (x, y)))
        .collect();
    Ok(grid)
}

fn offsets_with_center(
    scale: &Scale,
    height: usize,
    width: usize,
    center: bool,
) -> Result<Vec<(usize, usize)>> {
    let grid = window_offsets(scale, height, width)?;
    if !center {
        return Ok(grid);
    }
    let c = ((width - scale.window) / 2, (height - scale.window) / 2);
    // A one-position grid already is the centered crop.
    if grid.len() == 1 && grid[0] == c {
        return Ok(grid);
    }
    let mut out = Vec::with_capacity(grid.len() + 1);
    out.push(c);
    out.extend(grid);
    Ok(out)
}

impl CanvasPlan {
    /// Origins and scale index of every canvas, in sequence order.
    pub fn layout(&self, height: usize, width: usize) -> Result<Vec<(usize, Rect)>> {
        self.validate()?;
        let mut plan = self.clone();
        plan.sorted_scales_in_place();
        let mut out = Vec::new();
        for (si, s) in plan.scales.iter().enumerate() {
            for (x, y) in offsets_with_center(s, height, width, self.include_center_per_scale)? {
                out.push((si, Rect::square(x, y, s.window)));
            }
        }
        Ok(out)
    }
}

/// Round-half-up integer division `num / den`.
fn div_round(num: usize, den: usize) -> usize {
    (2 * num + den) / (2 * den)
}

fn image_dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::Input(format!("image must be C×H×W, got {:?}", image.shape()))),
    }
}

/// Bilinear resize of the `src_rect` region of `image` to `out_h × out_w`,
/// sampling at half-pixel centers and clamping inside the region.
pub fn resize_region(
    image: &Tensor,
    x0: usize,
    y0: usize,
    src_w: usize,
    src_h: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor> {
    let (c, h, w) = image_dims(image)?;
    if src_w == 0 || src_h == 0 || x0 + src_w > w || y0 + src_h > h {
        return Err(Error::Input("resize region outside image".into()));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::Input("empty resize target".into()));
    }
    let sy = src_h as f64 / out_h as f64;
    let sx = src_w as f64 / out_w as f64;
    let taps = |o: usize, scale: f64, len: usize| -> (usize, usize, f64) {
        let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, pos - lo as f64)
    };
    let xt: Vec<_> = (0..out_w).map(|o| taps(o, sx, src_w)).collect();
    let yt: Vec<_> = (0..out_h).map(|o| taps(o, sy, src_h)).collect();
    let data = image.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        for &(ylo, yhi, fy) in &yt {
            let r0 = &plane[(y0 + ylo) * w + x0..];
            let r1 = &plane[(y0 + yhi) * w + x0..];
            for &(xlo, xhi, fx) in &xt {
                let top = r0[xlo] * (1.0 - fx) + r0[xhi] * fx;
                let bot = r1[xlo] * (1.0 - fx) + r1[xhi] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

pub fn resize(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, h, w) = image_dims(image)?;
    resize_region(image, 0, 0, w, h, out_h, out_w)
}

/// Target size after scaling the short edge to `short_edge`; the long edge
/// rounds half up.
pub fn normalized_dims(height: usize, width: usize, short_edge: usize) -> (usize, usize) {
    if height <= width {
        (short_edge, div_round(width * short_edge, height))
    } else {
        (div_round(height * short_edge, width), short_edge)
    }
}

/// Resizes so that `min(H, W) == short_edge`, keeping the aspect ratio.
pub fn normalize_image(image: &Tensor, short_edge: usize) -> Result<Tensor> {
    let (_, h, w) = image_dims(image)?;
    if h == 0 || w == 0 || short_edge == 0 {
        return Err(Error::Input("empty image".into()));
    }
    let (nh, nw) = normalized_dims(h, w, short_edge);
    if (nh, nw) == (h, w) {
        return Ok(image.clone());
    }
    resize(image, nh, nw)
}

/// Crops and resizes every canvas of `plan` out of an already normalized image.
pub fn generate_canvases(image: &Tensor, plan: &CanvasPlan) -> Result<Vec<Canvas>> {
    let (_, h, w) = image_dims(image)?;
    let layout = plan.layout(h, w)?;
    layout
        .into_iter()
        .enumerate()
        .map(|(seq, (scale_index, fp))| {
            let side = fp.width() as usize;
            let pixels = resize_region(
                image,
                fp.x0 as usize,
                fp.y0 as usize,
                side,
                side,
                plan.output_size,
                plan.output_size,
            )?;
            Ok(Canvas {
                pixels,
                footprint: fp,
                scale_index,
                sequence_index: seq,
                image_height: h,
                image_width: w,
            })
        })
        .collect()
}

/// Contiguous index ranges of canvases sharing a scale.
pub fn scale_blocks(scale_indices: &[usize]) -> Vec<Range<usize>> {
    let mut blocks = Vec::new();
    let mut start = 0;
    for i in 1..=scale_indices.len() {
        if i == scale_indices.len() || scale_indices[i] != scale_indices[start] {
            if i > start {
                blocks.push(start..i);
            }
            start = i;
        }
    }
    blocks
}

/// Pixel mask over the normalized image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupportRegion {
    width: usize,
    height: usize,
    mask: Vec<bool>,
}

impl SupportRegion {
    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, mask: vec![false; width * height] }
    }

    /// Marks every pixel whose center lies inside `rect` (clipped to the image).
    pub fn add_rect(&mut self, rect: &Rect) {
        let lo = |v: f64, max: usize| ((v - 0.5).ceil().max(0.0) as usize).min(max);
        let (xa, xb) = (lo(rect.x0, self.width), lo(rect.x1, self.width));
        let (ya, yb) = (lo(rect.y0, self.height), lo(rect.y1, self.height));
        for y in ya..yb {
            self.mask[y * self.width + xa..y * self.width + xb]
                .iter_mut()
                .for_each(|m| *m = true);
        }
    }

    pub fn from_rect(width: usize, height: usize, rect: &Rect) -> Self {
        let mut s = Self::empty(width, height);
        s.add_rect(rect);
        s
    }

    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Total pixel count `N` of the image.
    pub fn total(&self) -> usize {
        self.mask.len()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.width + x]
    }

    pub fn intersects_rect(&self, rect: &Rect) -> bool {
        let probe = Self::from_rect(self.width, self.height, rect);
        self.mask.iter().zip(&probe.mask).any(|(a, b)| *a && *b)
    }

    pub fn intersection_area(&self, other: &SupportRegion) -> usize {
        self.mask.iter().zip(&other.mask).filter(|(a, b)| **a && **b).count()
    }
}

/// Receptive rectangle of feature cell `(row, col)` of a `K×K` map over `footprint`.
pub fn cell_rect(footprint: &Rect, k: usize, row: usize, col: usize) -> Rect {
    let cw = footprint.width() / k as f64;
    let ch = footprint.height() / k as f64;
    Rect::new(
        footprint.x0 + col as f64 * cw,
        footprint.y0 + row as f64 * ch,
        footprint.x0 + (col + 1) as f64 * cw,
        footprint.y0 + (row + 1) as f64 * ch,
    )
}

fn map_side(len: usize) -> Result<usize> {
    let k = (len as f64).sqrt().round() as usize;
    if k * k != len || k == 0 {
        return Err(Error::Contract(format!("attention map of {len} cells is not square")));
    }
    Ok(k)
}

/// Smallest set of cells holding at least `mass_threshold` of the attention mass,
/// mapped onto the canvas footprint.
pub fn attention_support(att_map: &[f64], canvas: &Canvas, mass_threshold: f64) -> Result<SupportRegion> {
    if !(mass_threshold > 0.0 && mass_threshold <= 1.0) {
        return Err(Error::Contract(format!("mass threshold {mass_threshold} not in (0, 1]")));
    }
    let total: f64 = att_map.iter().sum();
    if (total - 1.0).abs() > 1e-6 || att_map.iter().any(|&v| v < 0.0) {
        return Err(Error::Contract(format!("attention map not normalized (sum {total})")));
    }
    let k = map_side(att_map.len())?;
    let mut order: Vec<usize> = (0..att_map.len()).collect();
    order.sort_by(|&a, &b| att_map[b].total_cmp(&att_map[a]).then(a.cmp(&b)));
    let mut region = SupportRegion::empty(canvas.image_width, canvas.image_height);
    let mut mass = 0.0;
    for i in order {
        region.add_rect(&cell_rect(&canvas.footprint, k, i / k, i % k));
        mass += att_map[i];
        if mass >= mass_threshold - 1e-12 {
            break;
        }
    }
    Ok(region)
}

/// `|a ∩ b| / N`.
pub fn overlap_ratio(a: &SupportRegion, b: &SupportRegion) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Contract("support regions over different images".into()));
    }
    Ok(a.intersection_area(b) as f64 / a.total() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverlapReport {
    /// Ratio for each consecutive pair `(t−1, t)`.
    pub ratios: Vec<f64>,
    /// Pair indices whose ratio is `>= beta`.
    pub violations: Vec<usize>,
}

impl OverlapReport {
    pub fn mean_ratio(&self) -> Option<f64> {
        (!self.ratios.is_empty()).then(|| self.ratios.iter().sum::<f64>() / self.ratios.len() as f64)
    }
}

/// Checks the neighbouring-step overlap bound over a canvas sequence.
pub fn validate_sequence(
    canvases: &[Canvas],
    att_maps: &[Vec<f64>],
    beta: f64,
    mass_threshold: f64,
) -> Result<OverlapReport> {
    if canvases.len() != att_maps.len() {
        return Err(Error::Input(format!(
            "{} canvases but {} attention maps",
            canvases.len(),
            att_maps.len()
        )));
    }
    let supports = canvases
        .iter()
        .zip(att_maps)
        .map(|(c, m)| attention_support(m, c, mass_threshold))
        .collect::<Result<Vec<_>>>()?;
    let mut ratios = Vec::new();
    let mut violations = Vec::new();
    for (i, pair) in supports.windows(2).enumerate() {
        let r = overlap_ratio(&pair[0], &pair[1])?;
        if r >= beta {
            violations.push(i);
        }
        ratios.push(r);
    }
    Ok(OverlapReport { ratios, violations })
}
