//! Constrained view pairs, positive/negative key boxes, the projected masked
//! box, and the zero mask on the query view.

pub mod augment;
mod image;

use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;

pub use self::augment::AugmentConfig;
pub use self::image::Image;
use crate::geometry::{iou, overlap_in_view, project_box, BBox, ViewTransform};
use crate::{Error, Real, Result, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    /// Minimum crop area as a fraction of the image area.
    pub min_crop_area_frac: f64,
    /// Aspect-ratio range of the random crops.
    pub crop_ratio: [f64; 2],
    /// Probability of mirroring each crop.
    pub flip_prob: f64,
    pub view_size: usize,
    /// Number of negative key boxes per image (`M`).
    pub num_neg_boxes: usize,
    /// Side-length range of key boxes, in key-view pixels.
    pub box_size_range: [f64; 2],
    pub neg_iou_max: f64,
    /// Both sides of the key-view overlap must be at least this long.
    pub min_overlap_side: f64,
    pub max_attempts: usize,
    /// Fresh view-pair draws for one image before it is skipped.
    pub image_retries: usize,
    pub mask_enabled: bool,
    pub augment: AugmentConfig,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            min_crop_area_frac: 0.2,
            crop_ratio: [3.0 / 4.0, 4.0 / 3.0],
            flip_prob: 0.5,
            view_size: 224,
            num_neg_boxes: 16,
            box_size_range: [32.0, 128.0],
            neg_iou_max: 0.2,
            min_overlap_side: 64.0,
            max_attempts: 100,
            image_retries: 10,
            mask_enabled: true,
            augment: AugmentConfig::default(),
        }
    }
}

impl SamplerConfig {
    /// 96-pixel views with the box and overlap sizes scaled to match.
    pub fn desk() -> Self {
        SamplerConfig {
            view_size: 96,
            box_size_range: [16.0, 48.0],
            min_overlap_side: 32.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.box_size_range;
        let bad = |m: &str| Err(Error::Config(alloc::string::String::from(m)));
        if !(self.min_crop_area_frac > 0.0 && self.min_crop_area_frac <= 1.0) {
            return bad("min_crop_area_frac must lie in (0, 1]");
        }
        if !(lo > 0.0 && lo <= hi && hi <= self.view_size as f64) {
            return bad("box_size_range must lie within (0, view_size]");
        }
        if !(0.0..1.0).contains(&self.neg_iou_max) && self.neg_iou_max != 1.0 {
            return bad("neg_iou_max must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("flip_prob must lie in [0, 1]");
        }
        if self.num_neg_boxes == 0 {
            return bad("num_neg_boxes must be at least 1");
        }
        if self.view_size == 0 || self.max_attempts == 0 {
            return bad("view_size and max_attempts must be positive");
        }
        Ok(())
    }
}

/// Random-access image collection, optionally labeled.
pub trait ImageSource {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn image(&self, index: usize) -> Result<Image>;

    fn label(&self, _index: usize) -> Option<usize> {
        None
    }
}

impl ImageSource for [Image] {
    fn len(&self) -> usize {
        <[Image]>::len(self)
    }

    fn image(&self, index: usize) -> Result<Image> {
        self.get(index).cloned().ok_or_else(|| Error::Dataset(alloc::format!("index {index} out of range")))
    }
}

impl ImageSource for [(Image, usize)] {
    fn len(&self) -> usize {
        <[(Image, usize)]>::len(self)
    }

    fn image(&self, index: usize) -> Result<Image> {
        self.get(index).map(|p| p.0.clone()).ok_or_else(|| Error::Dataset(alloc::format!("index {index} out of range")))
    }

    fn label(&self, index: usize) -> Option<usize> {
        self.get(index).map(|p| p.1)
    }
}

/// One image's regions: the masked box in the query view and the positive and
/// negative boxes in the key view.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSample {
    pub query_transform: ViewTransform,
    pub key_transform: ViewTransform,
    pub masked_box: BBox,
    pub pos_box: BBox,
    pub neg_boxes: Vec<BBox>,
}

impl RegionSample {
    /// Positive box followed by the negatives.
    pub fn key_boxes(&self) -> Vec<BBox> {
        core::iter::once(self.pos_box).chain(self.neg_boxes.iter().copied()).collect()
    }

    /// Every invariant violation found, as short labels. Empty when valid.
    pub fn violations(&self, cfg: &SamplerConfig) -> Vec<&'static str> {
        let mut out = Vec::new();
        let [lo, hi] = cfg.box_size_range;
        let tol = 1e-9;
        let sides_ok = |b: &BBox| {
            b.width() >= lo - tol && b.width() <= hi + tol && b.height() >= lo - tol && b.height() <= hi + tol
        };
        let proj = project_box(&self.pos_box, &self.key_transform, &self.query_transform);
        if proj.max_abs_diff(&self.masked_box) >= 1e-4 {
            out.push("masked box is not the projection of the positive box");
        }
        let back = project_box(&self.masked_box, &self.query_transform, &self.key_transform);
        if back.max_abs_diff(&self.pos_box) >= 1e-4 {
            out.push("masked box does not project back onto the positive box");
        }
        if !self.query_transform.view_rect().contains(&self.masked_box, tol) {
            out.push("masked box leaves the query view");
        }
        let key_rect = self.key_transform.view_rect();
        if !key_rect.contains(&self.pos_box, tol) {
            out.push("positive box leaves the key view");
        }
        if !sides_ok(&self.pos_box) {
            out.push("positive box side out of range");
        }
        if self.neg_boxes.len() != cfg.num_neg_boxes {
            out.push("wrong number of negative boxes");
        }
        for nb in &self.neg_boxes {
            if !sides_ok(nb) {
                out.push("negative box side out of range");
            }
            if !key_rect.contains(nb, tol) {
                out.push("negative box leaves the key view");
            }
            if cfg.neg_iou_max < 1.0 && iou(nb, &self.pos_box) >= cfg.neg_iou_max {
                out.push("negative box overlaps the positive box");
            }
        }
        out
    }
}

/// Query and key views of one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewPair {
    pub query: ViewTransform,
    pub key: ViewTransform,
    /// Number of draws needed to satisfy the overlap constraint.
    pub attempts: usize,
}

/// A random-resized crop covering at least `min_crop_area_frac` of the image.
/// Falls back to the whole image when ten draws fail to fit.
pub fn random_resized_crop<R: Rng + ?Sized>(
    rng: &mut R,
    image_w: usize,
    image_h: usize,
    cfg: &SamplerConfig,
) -> ViewTransform {
    let (w, h) = (image_w as f64, image_h as f64);
    let total = w * h;
    let [r_lo, r_hi] = cfg.crop_ratio;
    let (log_lo, log_hi) = (Float::ln(r_lo), Float::ln(r_hi));
    let hflip = rng.random_bool(cfg.flip_prob);
    let view = cfg.view_size;
    for _ in 0..10 {
        let frac = if cfg.min_crop_area_frac < 1.0 { rng.random_range(cfg.min_crop_area_frac..=1.0) } else { 1.0 };
        let ratio = Float::exp(if log_hi > log_lo { rng.random_range(log_lo..=log_hi) } else { log_lo });
        let area = frac * total;
        let cw = Float::sqrt(area * ratio);
        let ch = Float::sqrt(area / ratio);
        if cw <= w && ch <= h {
            let x = if w > cw { rng.random_range(0.0..=w - cw) } else { 0.0 };
            let y = if h > ch { rng.random_range(0.0..=h - ch) } else { 0.0 };
            return ViewTransform::new(BBox::from_xywh(x, y, cw, ch), view, view, hflip);
        }
    }
    ViewTransform::new(BBox::from_xywh(0.0, 0.0, w, h), view, view, hflip)
}

/// Draws independent query and key crops until their overlap, seen in the key
/// view, has both sides of at least `min_overlap_side` pixels.
pub fn sample_view_pair<R: Rng + ?Sized>(
    rng: &mut R,
    image_w: usize,
    image_h: usize,
    cfg: &SamplerConfig,
) -> Result<ViewPair> {
    if image_w == 0 || image_h == 0 {
        return Err(Error::Config(alloc::format!("empty image {image_w}x{image_h}")));
    }
    for attempt in 1..=cfg.max_attempts {
        let query = random_resized_crop(rng, image_w, image_h, cfg);
        let key = random_resized_crop(rng, image_w, image_h, cfg);
        let ok = match overlap_in_view(&key, &query) {
            Some(ov) => ov.width() >= cfg.min_overlap_side && ov.height() >= cfg.min_overlap_side,
            None => cfg.min_overlap_side <= 0.0,
        };
        if ok {
            return Ok(ViewPair { query, key, attempts: attempt });
        }
    }
    Err(Error::SamplingExhausted { what: "view pair with sufficient overlap", attempts: cfg.max_attempts })
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Samples the positive box inside the key-view overlap, `M` negatives in the
/// key view with low IoU against it, and projects the positive into the query
/// view to obtain the masked box.
pub fn sample_region_boxes<R: Rng + ?Sized>(
    rng: &mut R,
    query: &ViewTransform,
    key: &ViewTransform,
    cfg: &SamplerConfig,
) -> Result<RegionSample> {
    let [lo, hi] = cfg.box_size_range;
    let key_rect = key.view_rect();
    let overlap = overlap_in_view(key, query)
        .and_then(|ov| ov.intersection(&key_rect))
        .filter(|ov| ov.width() >= lo && ov.height() >= lo)
        .ok_or(Error::SamplingExhausted { what: "overlap smaller than the minimum box", attempts: 0 })?;

    let pw = uniform(rng, lo, hi).min(overlap.width());
    let ph = uniform(rng, lo, hi).min(overlap.height());
    let px = uniform(rng, overlap.x1, overlap.x2 - pw);
    let py = uniform(rng, overlap.y1, overlap.y2 - ph);
    let pos_box = BBox::from_xywh(px, py, pw, ph);

    let vacuous = cfg.neg_iou_max >= 1.0;
    let mut neg_boxes = Vec::with_capacity(cfg.num_neg_boxes);
    for _ in 0..cfg.num_neg_boxes {
        let mut found = None;
        for _ in 0..cfg.max_attempts {
            let w = uniform(rng, lo, hi).min(key_rect.width());
            let h = uniform(rng, lo, hi).min(key_rect.height());
            let x = uniform(rng, 0.0, key_rect.width() - w);
            let y = uniform(rng, 0.0, key_rect.height() - h);
            let cand = BBox::from_xywh(x, y, w, h);
            if vacuous || iou(&cand, &pos_box) < cfg.neg_iou_max {
                found = Some(cand);
                break;
            }
        }
        neg_boxes.push(found.ok_or(Error::SamplingExhausted {
            what: "negative box with low overlap",
            attempts: cfg.max_attempts,
        })?);
    }

    let q_rect = query.view_rect();
    let proj = project_box(&pos_box, key, query);
    // Rounding can push an edge a hair outside the view.
    let masked_box = BBox {
        x1: proj.x1.max(q_rect.x1),
        y1: proj.y1.max(q_rect.y1),
        x2: proj.x2.min(q_rect.x2),
        y2: proj.y2.min(q_rect.y2),
    };
    Ok(RegionSample { query_transform: *query, key_transform: *key, masked_box, pos_box, neg_boxes })
}

/// Zeroes, in every channel, the pixels of a `[C, H, W]` array whose centers
/// fall inside `b`.
pub fn mask_in_place<F: Real>(pixels: &mut [F], channels: usize, height: usize, width: usize, b: &BBox) {
    let cols = covered_range(b.x1, b.x2, width);
    let rows = covered_range(b.y1, b.y2, height);
    for c in 0..channels {
        for i in rows.clone() {
            let row = &mut pixels[(c * height + i) * width..(c * height + i + 1) * width];
            row[cols.clone()].fill(F::zero());
        }
    }
}

/// Masked copy of a `[C, H, W]` tensor.
pub fn apply_mask<F: Real>(view: &Tensor<F>, b: &BBox) -> Result<Tensor<F>> {
    let (c, h, w) = match *view.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(crate::error::shape_err!("apply_mask expects [C, H, W], got {:?}", view.shape())),
    };
    let mut out = view.clone();
    mask_in_place(out.data_mut(), c, h, w, b);
    Ok(out)
}

/// Indices `k` with `lo <= k + 0.5 < hi`, clipped to `0..n`.
pub(crate) fn covered_range(lo: f64, hi: f64, n: usize) -> core::ops::Range<usize> {
    let start = Float::ceil(lo - 0.5).max(0.0);
    let end = Float::ceil(hi - 0.5).max(0.0);
    let (start, end) = ((start as usize).min(n), (end as usize).min(n));
    start..end.max(start)
}

/// Stacked query/key views and region boxes for one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainBatch<F> {
    /// `[N, 3, V, V]`, masked when the sampler's mask is enabled.
    pub queries: Tensor<F>,
    /// `[N, 3, V, V]`, never masked.
    pub keys: Tensor<F>,
    pub samples: Vec<RegionSample>,
    /// Index into the input image list of each batch entry.
    pub sources: Vec<usize>,
    /// Images dropped after exhausting their retries.
    pub skipped: usize,
}

impl<F: Real> PretrainBatch<F> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `[N, 1 + M, 4]` key boxes, positive first.
    pub fn key_boxes(&self) -> Tensor<f64> {
        let m1 = self.samples.first().map_or(0, |s| 1 + s.neg_boxes.len());
        let data = self.samples.iter().flat_map(|s| s.key_boxes()).flat_map(|b| b.as_array()).collect();
        Tensor::from_vec(&[self.samples.len(), m1, 4], data).expect("uniform box count")
    }
}

/// Renders one augmented view as a normalized `[3, V, V]` tensor.
pub fn render_view<F: Real, R: Rng + ?Sized>(
    img: &Image,
    t: &ViewTransform,
    aug: &AugmentConfig,
    rng: &mut R,
) -> Tensor<F> {
    let mut view = img.render_view(t);
    augment::photometric(&mut view, aug, rng);
    augment::to_tensor(&view, &aug.mean, &aug.std)
}

/// Query view (masked if enabled), key view and regions of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem<F> {
    pub query: Tensor<F>,
    pub key: Tensor<F>,
    pub sample: RegionSample,
}

/// Samples and renders one image, redrawing the view pair up to
/// `image_retries` times. `None` means the image should be skipped.
pub fn prepare_item<F: Real, R: Rng + ?Sized>(img: &Image, rng: &mut R, cfg: &SamplerConfig) -> Option<BatchItem<F>> {
    let v = cfg.view_size;
    let sample = (0..cfg.image_retries.max(1)).find_map(|_| {
        sample_view_pair(rng, img.width(), img.height(), cfg)
            .and_then(|pair| sample_region_boxes(rng, &pair.query, &pair.key, cfg))
            .ok()
    })?;
    let mut query: Tensor<F> = render_view(img, &sample.query_transform, &cfg.augment, rng);
    if cfg.mask_enabled {
        mask_in_place(query.data_mut(), 3, v, v, &sample.masked_box);
    }
    let key = render_view(img, &sample.key_transform, &cfg.augment, rng);
    Some(BatchItem { query, key, sample })
}

impl<F: Real> PretrainBatch<F> {
    /// Stacks prepared items; `None` entries count as skipped.
    pub fn from_items(items: Vec<Option<BatchItem<F>>>, view_size: usize) -> Result<Self> {
        let v = view_size;
        let mut queries = Vec::with_capacity(items.len() * 3 * v * v);
        let mut keys = Vec::with_capacity(items.len() * 3 * v * v);
        let (mut samples, mut sources, mut skipped) = (Vec::new(), Vec::new(), 0);
        for (idx, item) in items.into_iter().enumerate() {
            let Some(item) = item else {
                skipped += 1;
                continue;
            };
            queries.extend_from_slice(item.query.data());
            keys.extend_from_slice(item.key.data());
            samples.push(item.sample);
            sources.push(idx);
        }
        let n = samples.len();
        Ok(PretrainBatch {
            queries: Tensor::from_vec(&[n, 3, v, v], queries)?,
            keys: Tensor::from_vec(&[n, 3, v, v], keys)?,
            samples,
            sources,
            skipped,
        })
    }
}

/// Builds a training batch from one random stream. Each image gets a
/// constrained view pair and region sample; images whose sampling keeps
/// failing are skipped and counted.
pub fn build_batch<F: Real, R: Rng + ?Sized>(
    images: &[&Image],
    rng: &mut R,
    cfg: &SamplerConfig,
) -> Result<PretrainBatch<F>> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let items = images.iter().map(|img| prepare_item(img, rng, cfg)).collect();
    PretrainBatch::from_items(items, cfg.view_size)
}

#[cfg(test)]
mod tests;
