//! Representation analysis: the pooled-feature distance between two crops of
//! an image, the frozen-feature linear probe, and mask prediction head
//! response maps.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::shape_err;
use crate::model::{Backbone, BackboneSpec, MaskCoNet};
use crate::nn::{ParamSet, Pass};
use crate::sampling::augment::to_tensor;
use crate::sampling::{covered_range, mask_in_place, random_resized_crop, ImageSource, SamplerConfig};
use crate::{BBox, Error, Real, Result, Tensor, ViewTransform};

/// Spatially averages a `[C]`, `[C, H, W]` or `[1, C, H, W]` feature.
pub fn pooled_vector<F: Real>(y: &Tensor<F>) -> Result<Vec<f64>> {
    let (c, hw) = match *y.shape() {
        [c] => (c, 1),
        [c, h, w] | [1, c, h, w] => (c, h * w),
        _ => return Err(shape_err!("expected a feature vector or a single feature map, got {:?}", y.shape())),
    };
    if hw == 0 {
        return Err(shape_err!("empty feature map {:?}", y.shape()));
    }
    Ok(y.data().chunks(hw).take(c).map(|p| p.iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64).collect())
}

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = Float::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroVector);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Squared Euclidean distance between the L2-normalized, spatially pooled
/// features. Lies in `[0, 4]`.
pub fn feature_distance<F: Real>(y1: &Tensor<F>, y2: &Tensor<F>) -> Result<f64> {
    if y1.shape() != y2.shape() {
        return Err(shape_err!("feature shapes differ: {:?} vs {:?}", y1.shape(), y2.shape()));
    }
    let (a, b) = (unit(&pooled_vector(y1)?)?, unit(&pooled_vector(y2)?)?);
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// A frozen feature extractor.
pub trait Encoder<F: Real> {
    /// Outputs of stages `conv1..=STAGES[last]` for a batch `[N, 3, V, V]`.
    fn stages(&self, x: &Tensor<F>, last: usize) -> Result<Vec<Tensor<F>>>;

    /// Hash of every weight and statistic, for drift checks.
    fn fingerprint(&self) -> u64;
}

/// A backbone evaluated with its running batch-norm statistics.
#[derive(Debug, Clone)]
pub struct FrozenBackbone<'a, F> {
    pub backbone: &'a Backbone,
    pub params: &'a ParamSet<F>,
    pub stats: &'a ParamSet<F>,
}

impl<'a, F: Real> FrozenBackbone<'a, F> {
    pub fn new(backbone: &'a Backbone, params: &'a ParamSet<F>, stats: &'a ParamSet<F>) -> Self {
        FrozenBackbone { backbone, params, stats }
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.backbone.spec
    }
}

/// FNV-1a over the names and bit patterns of every tensor.
pub fn fingerprint<F: Real>(sets: &[&ParamSet<F>]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    let mut buf = Vec::new();
    for set in sets {
        for (name, t) in set.iter() {
            eat(name.as_bytes());
            buf.clear();
            for &v in t.data() {
                v.write_le(&mut buf);
            }
            eat(&buf);
        }
    }
    h
}

impl<F: Real> Encoder<F> for FrozenBackbone<'_, F> {
    fn stages(&self, x: &Tensor<F>, last: usize) -> Result<Vec<Tensor<F>>> {
        // Evaluation never writes the statistics; the copy only satisfies the
        // signature shared with training passes.
        let mut stats = self.stats.clone();
        Ok(self.backbone.forward_stages(self.params, &mut stats, x, Pass::Eval, last)?.0)
    }

    fn fingerprint(&self) -> u64 {
        fingerprint(&[self.params, self.stats])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceReport {
    pub dataset: String,
    pub num_pairs: usize,
    pub mean: f64,
    pub distances: Vec<f64>,
}

impl DistanceReport {
    pub fn min(&self) -> f64 {
        self.distances.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.distances.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Every distance in `[0, 4]` and the mean between min and max.
    pub fn is_consistent(&self) -> bool {
        let eps = 1e-12;
        self.distances.len() == self.num_pairs
            && self.distances.iter().all(|d| (-eps..=4.0 + eps).contains(d))
            && self.mean >= self.min() - eps
            && self.mean <= self.max() + eps
    }
}

/// Pairs encoded per forward pass.
const SCAN_CHUNK: usize = 16;

/// Mean feature distance between two random-resized crops of randomly drawn
/// images. The crops carry no photometric augmentation, mask or boxes.
pub fn dataset_distance_scan<F, E, S, R>(
    dataset: &str,
    source: &S,
    encoder: &E,
    cfg: &SamplerConfig,
    rng: &mut R,
    num_pairs: usize,
) -> Result<DistanceReport>
where
    F: Real,
    E: Encoder<F>,
    S: ImageSource + ?Sized,
    R: Rng + ?Sized,
{
    if source.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if num_pairs == 0 {
        return Err(Error::Config("num_pairs must be at least 1".into()));
    }
    let v = cfg.view_size;
    let (mean, std) = (&cfg.augment.mean, &cfg.augment.std);
    let mut distances = Vec::with_capacity(num_pairs);
    while distances.len() < num_pairs {
        let b = SCAN_CHUNK.min(num_pairs - distances.len());
        let mut views = Vec::with_capacity(2 * b * 3 * v * v);
        for _ in 0..b {
            let img = source.image(rng.random_range(0..source.len()))?;
            for _ in 0..2 {
                let t = random_resized_crop(rng, img.width(), img.height(), cfg);
                views.extend_from_slice(to_tensor::<F>(&img.render_view(&t), mean, std).data());
            }
        }
        let x = Tensor::from_vec(&[2 * b, 3, v, v], views)?;
        let c5 = encoder.stages(&x, 4)?.pop().expect("five stages");
        for i in 0..b {
            let (y1, y2) = (single(&c5, 2 * i)?, single(&c5, 2 * i + 1)?);
            distances.push(feature_distance(&y1, &y2)?);
        }
    }
    let mean = distances.iter().sum::<f64>() / num_pairs as f64;
    Ok(DistanceReport { dataset: dataset.into(), num_pairs, mean, distances })
}

fn single<F: Real>(batch: &Tensor<F>, i: usize) -> Result<Tensor<F>> {
    let (_, c, h, w) = batch.dims4()?;
    Tensor::from_vec(&[c, h, w], batch.item(i).to_vec())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    /// Epochs at which the learning rate drops tenfold.
    pub milestones: Vec<usize>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub view_size: usize,
    /// Standardize each feature with the training-split mean and deviation.
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 90,
            milestones: vec![30, 60],
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 256,
            view_size: 224,
            standardize: true,
        }
    }
}

impl ProbeConfig {
    /// A third of the schedule on 96-pixel views.
    pub fn desk() -> Self {
        ProbeConfig { epochs: 30, milestones: vec![10, 20], view_size: 96, ..Self::default() }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * Float::powi(0.1, drops as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub layer: String,
    /// Held-out top-1 accuracy.
    pub top1: f64,
    pub train_top1: f64,
    pub num_train: usize,
    pub num_test: usize,
    pub config: ProbeConfig,
}

/// Center crop keeping `224/256` of the shorter side, resized to `view`.
pub fn eval_transform(width: usize, height: usize, view: usize) -> ViewTransform {
    let side = width.min(height) as f64 * 224.0 / 256.0;
    let (x, y) = ((width as f64 - side) / 2.0, (height as f64 - side) / 2.0);
    ViewTransform::new(BBox::from_xywh(x, y, side, side), view, view, false)
}

/// Pooled features `[n, C_l]` of every image for each requested stage.
pub fn extract_features<F, E, S>(
    encoder: &E,
    source: &S,
    stages: &[usize],
    view: usize,
    norm: (&[f32; 3], &[f32; 3]),
) -> Result<Vec<Tensor<f64>>>
where
    F: Real,
    E: Encoder<F>,
    S: ImageSource + ?Sized,
{
    let last = stages.iter().copied().max().ok_or_else(|| Error::Config("no layers requested".into()))?;
    let mut feats: Vec<Vec<f64>> = vec![Vec::new(); stages.len()];
    let mut dims = vec![0; stages.len()];
    let n = source.len();
    for start in (0..n).step_by(SCAN_CHUNK * 2) {
        let end = (start + SCAN_CHUNK * 2).min(n);
        let mut views = Vec::with_capacity((end - start) * 3 * view * view);
        for i in start..end {
            let img = source.image(i)?;
            let t = eval_transform(img.width(), img.height(), view);
            views.extend_from_slice(to_tensor::<F>(&img.render_view(&t), norm.0, norm.1).data());
        }
        let x = Tensor::from_vec(&[end - start, 3, view, view], views)?;
        let outs = encoder.stages(&x, last)?;
        for (k, &s) in stages.iter().enumerate() {
            let (b, c, h, w) = outs[s].dims4()?;
            dims[k] = c;
            for j in 0..b {
                let item = outs[s].item(j);
                feats[k].extend(item.chunks(h * w).map(|p| p.iter().map(|v| v.as_f64()).sum::<f64>() / (h * w) as f64));
            }
        }
    }
    feats.into_iter().zip(dims).map(|(f, c)| Tensor::from_vec(&[n, c], f)).collect()
}

fn labels<S: ImageSource + ?Sized>(source: &S) -> Result<Vec<usize>> {
    (0..source.len())
        .map(|i| source.label(i).ok_or_else(|| Error::Dataset(alloc::format!("image {i} has no class label"))))
        .collect()
}

/// Softmax regression `scores = x W^T + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub weight: Tensor<f64>,
    pub bias: Vec<f64>,
    /// Per-feature shift and scale applied before the linear map.
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl LinearClassifier {
    fn scores(&self, x: &[f64], out: &mut [f64]) {
        let d = self.shift.len();
        for (k, o) in out.iter_mut().enumerate() {
            let w = &self.weight.data()[k * d..(k + 1) * d];
            *o = self.bias[k] + (0..d).map(|j| w[j] * (x[j] - self.shift[j]) * self.scale[j]).sum::<f64>();
        }
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let mut s = vec![0.0; self.bias.len()];
        self.scores(x, &mut s);
        argmax(&s)
    }

    /// Top-1 accuracy on `[n, d]` features.
    pub fn accuracy(&self, x: &Tensor<f64>, y: &[usize]) -> Result<f64> {
        let (n, d) = x.dims2()?;
        if n != y.len() || d != self.shift.len() {
            return Err(shape_err!("features {:?} vs {} labels and {} inputs", x.shape(), y.len(), self.shift.len()));
        }
        if n == 0 {
            return Ok(0.0);
        }
        let hits = (0..n).filter(|&i| self.predict(x.item(i)) == y[i]).count();
        Ok(hits as f64 / n as f64)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in v.iter().enumerate() {
        if s > v[best] {
            best = i;
        }
    }
    best
}

/// Mini-batch SGD on the cross-entropy loss, weights starting at zero.
pub fn fit_linear_classifier<R: Rng + ?Sized>(
    x: &Tensor<f64>,
    y: &[usize],
    num_classes: usize,
    cfg: &ProbeConfig,
    rng: &mut R,
) -> Result<LinearClassifier> {
    let (n, d) = x.dims2()?;
    if n != y.len() {
        return Err(shape_err!("{n} feature rows but {} labels", y.len()));
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let (mut shift, mut scale) = (vec![0.0; d], vec![1.0; d]);
    if cfg.standardize {
        for j in 0..d {
            let mean = (0..n).map(|i| x.item(i)[j]).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| Float::powi(x.item(i)[j] - mean, 2)).sum::<f64>() / n as f64;
            shift[j] = mean;
            scale[j] = 1.0 / Float::sqrt(var + 1e-8);
        }
    }
    let mut clf = LinearClassifier { weight: Tensor::zeros(&[num_classes, d]), bias: vec![0.0; num_classes], shift, scale };
    let mut vw = vec![0.0; num_classes * d];
    let mut vb = vec![0.0; num_classes];
    let mut gw = vec![0.0; num_classes * d];
    let mut gb = vec![0.0; num_classes];
    let mut p = vec![0.0; num_classes];
    let mut z = vec![0.0; d];
    let mut order: Vec<usize> = (0..n).collect();
    let bs = cfg.batch_size.max(1);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(rng);
        for chunk in order.chunks(bs) {
            gw.iter_mut().for_each(|g| *g = 0.0);
            gb.iter_mut().for_each(|g| *g = 0.0);
            for &i in chunk {
                let xi = x.item(i);
                clf.scores(xi, &mut p);
                let mx = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for s in p.iter_mut() {
                    *s = Float::exp(*s - mx);
                    sum += *s;
                }
                for (j, zj) in z.iter_mut().enumerate() {
                    *zj = (xi[j] - clf.shift[j]) * clf.scale[j];
                }
                for k in 0..num_classes {
                    let g = p[k] / sum - if k == y[i] { 1.0 } else { 0.0 };
                    gb[k] += g;
                    for j in 0..d {
                        gw[k * d + j] += g * z[j];
                    }
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            let w = clf.weight.data_mut();
            for ((wv, bufv), &g) in w.iter_mut().zip(vw.iter_mut()).zip(&gw) {
                *bufv = cfg.momentum * *bufv + g * inv + cfg.weight_decay * *wv;
                *wv -= lr * *bufv;
            }
            for ((bv, bufv), &g) in clf.bias.iter_mut().zip(vb.iter_mut()).zip(&gb) {
                *bufv = cfg.momentum * *bufv + g * inv + cfg.weight_decay * *bv;
                *bv -= lr * *bufv;
            }
        }
    }
    Ok(clf)
}

/// Trains one linear classifier per requested stage on frozen pooled
/// features and reports held-out top-1 accuracy.
///
/// Panics if the encoder's weights change during the call.
pub fn train_linear_probes<F, E, S, T, R>(
    encoder: &E,
    train: &S,
    test: &T,
    layers: &[&str],
    cfg: &ProbeConfig,
    norm: (&[f32; 3], &[f32; 3]),
    rng: &mut R,
) -> Result<Vec<ProbeResult>>
where
    F: Real,
    E: Encoder<F>,
    S: ImageSource + ?Sized,
    T: ImageSource + ?Sized,
    R: Rng + ?Sized,
{
    let stages = layers.iter().map(|l| BackboneSpec::stage_index(l)).collect::<Result<Vec<_>>>()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (ytr, yte) = (labels(train)?, labels(test)?);
    let num_classes = ytr.iter().chain(&yte).copied().max().unwrap_or(0) + 1;
    let before = encoder.fingerprint();
    let ftr = extract_features(encoder, train, &stages, cfg.view_size, norm)?;
    let fte = extract_features(encoder, test, &stages, cfg.view_size, norm)?;
    assert_eq!(before, encoder.fingerprint(), "frozen encoder changed during probing");
    let mut results = Vec::with_capacity(layers.len());
    for (k, layer) in layers.iter().enumerate() {
        let clf = fit_linear_classifier(&ftr[k], &ytr, num_classes, cfg, rng)?;
        results.push(ProbeResult {
            layer: String::from(*layer),
            top1: clf.accuracy(&fte[k], &yte)?,
            train_top1: clf.accuracy(&ftr[k], &ytr)?,
            num_train: ytr.len(),
            num_test: yte.len(),
            config: cfg.clone(),
        });
    }
    Ok(results)
}

/// Channel-mean activation maps, upsampled to the view, and the ratio of the
/// mean inside the mask region to the mean outside it.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMaps {
    /// `[V, V]` backbone output response.
    pub conv5: Tensor<f64>,
    /// `[V, V]` mask prediction head output response.
    pub mph: Tensor<f64>,
    /// `None` when the outside mean is zero.
    pub conv5_ratio: Option<f64>,
    pub mph_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MphResponse {
    pub unmasked: ResponseMaps,
    pub masked: ResponseMaps,
    pub mask: BBox,
}

/// Square of side `side` centered in a `view x view` image.
pub fn center_mask_box(view: usize, side: f64) -> BBox {
    let o = (view as f64 - side) / 2.0;
    BBox { x1: o, y1: o, x2: o + side, y2: o + side }
}

/// The mask side used for response maps: 64 pixels at 224, scaled.
pub fn response_mask_side(view: usize) -> f64 {
    64.0 * view as f64 / 224.0
}

/// Bilinear upsampling of an `h x w` map to `out x out`, pixel centers
/// aligned, border replicated.
pub fn upsample(map: &[f64], h: usize, w: usize, out: usize) -> Vec<f64> {
    let (sy, sx) = (h as f64 / out as f64, w as f64 / out as f64);
    let mut res = Vec::with_capacity(out * out);
    for i in 0..out {
        let v = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let (y0, fy) = (Float::floor(v) as usize, v - Float::floor(v));
        let y1 = (y0 + 1).min(h - 1);
        for j in 0..out {
            let u = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let (x0, fx) = (Float::floor(u) as usize, u - Float::floor(u));
            let x1 = (x0 + 1).min(w - 1);
            let top = map[y0 * w + x0] * (1.0 - fx) + map[y0 * w + x1] * fx;
            let bot = map[y1 * w + x0] * (1.0 - fx) + map[y1 * w + x1] * fx;
            res.push(top * (1.0 - fy) + bot * fy);
        }
    }
    res
}

/// Mean over pixels whose centers fall in `b` divided by the mean elsewhere.
pub fn region_ratio(map: &[f64], view: usize, b: &BBox) -> Option<f64> {
    let (rows, cols) = (covered_range(b.y1, b.y2, view), covered_range(b.x1, b.x2, view));
    let (mut inside, mut n_in, mut outside, mut n_out) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..view {
        for j in 0..view {
            if rows.contains(&i) && cols.contains(&j) {
                inside += map[i * view + j];
                n_in += 1;
            } else {
                outside += map[i * view + j];
                n_out += 1;
            }
        }
    }
    let (mi, mo) = (inside / n_in.max(1) as f64, outside / n_out.max(1) as f64);
    (n_in > 0 && mo != 0.0).then(|| mi / mo)
}

fn channel_mean<F: Real>(maps: &Tensor<F>, i: usize) -> Result<(Vec<f64>, usize, usize)> {
    let (_, c, h, w) = maps.dims4()?;
    let item = maps.item(i);
    let mut m = vec![0.0; h * w];
    for plane in item.chunks(h * w) {
        for (a, v) in m.iter_mut().zip(plane) {
            *a += v.as_f64() / c as f64;
        }
    }
    Ok((m, h, w))
}

/// Backbone and MPH responses for a normalized view `[3, V, V]` and for the
/// same view with a centered square set to zero.
pub fn mph_response_maps<F: Real>(
    net: &MaskCoNet,
    params: &ParamSet<F>,
    stats: &ParamSet<F>,
    view: &Tensor<F>,
    mask_side: f64,
) -> Result<MphResponse> {
    let [c, h, w] = *view.shape() else {
        return Err(shape_err!("expected a [3, V, V] view, got {:?}", view.shape()));
    };
    if h != w {
        return Err(shape_err!("expected a square view, got {h}x{w}"));
    }
    let mask = center_mask_box(w, mask_side);
    let mut masked = view.clone();
    mask_in_place(masked.data_mut(), c, h, w, &mask);
    let x = Tensor::stack(&[view.clone(), masked])?;
    let mut stats = stats.clone();
    let (c5, _) = net.backbone.forward(params, &mut stats, &x, Pass::Eval)?;
    let (m, _) = net.mph.forward(params, &mut stats, &c5, Pass::Eval)?;
    let maps = |i: usize| -> Result<ResponseMaps> {
        let up = |t: &Tensor<F>| -> Result<Tensor<f64>> {
            let (mean, mh, mw) = channel_mean(t, i)?;
            Tensor::from_vec(&[w, w], upsample(&mean, mh, mw, w))
        };
        let (a, b) = (up(&c5)?, up(&m)?);
        Ok(ResponseMaps {
            conv5_ratio: region_ratio(a.data(), w, &mask),
            mph_ratio: region_ratio(b.data(), w, &mask),
            conv5: a,
            mph: b,
        })
    };
    Ok(MphResponse { unmasked: maps(0)?, masked: maps(1)?, mask })
}

#[cfg(test)]
mod tests;
