//! Image scores, AUROC, SSIM/PSNR and the per-category evaluation report.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use rcad_tensor::Tensor;

use crate::error::{Error, Result};

pub const DEFAULT_K_FRACTION: f32 = 0.001;
/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

/// Pixel anomaly scores and the derived image score.
#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyMap {
    /// 1×1×H×W, values in [0,1].
    pub scores: Tensor,
    pub image_score: f32,
}

impl AnomalyMap {
    pub fn new(scores: Tensor, k_fraction: f32) -> Result<Self> {
        let image_score = image_score_topk(scores.data(), k_fraction)?;
        Ok(AnomalyMap { scores, image_score })
    }
}

/// Number of pixels averaged by [`image_score_topk`].
pub fn topk_count(n: usize, k_fraction: f32) -> usize {
    ((k_fraction as f64 * n as f64).ceil() as usize).clamp(1, n.max(1))
}

/// Mean of the `⌈k_fraction · n⌉` largest scores.
pub fn image_score_topk(scores: &[f32], k_fraction: f32) -> Result<f32> {
    if scores.is_empty() {
        return Err(Error::Metric("top-k score of an empty map".into()));
    }
    if !(k_fraction > 0.0 && k_fraction <= 1.0) {
        return Err(Error::Metric(format!("k_fraction {k_fraction} outside (0, 1]")));
    }
    let k = topk_count(scores.len(), k_fraction);
    let mut sorted = scores.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let sum: f64 = sorted[..k].iter().map(|&s| s as f64).sum();
    Ok((sum / k as f64) as f32)
}

/// Probability that a random positive outscores a random negative, ties
/// counted as one half (Mann–Whitney U / (n₊ n₋)), via average ranks.
pub fn auroc(scores: &[f32], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Metric(format!(
            "AUROC needs both classes ({positives} positive, {negatives} negative)"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    // Twice the rank sum of positives, so tied ranks stay integral.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j average to (i+1+j)/2.
        let tied_pos = order[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        rank_sum2 += tied_pos * (i + 1 + j) as u128;
        i = j;
    }
    let (p, n) = (positives as u128, negatives as u128);
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of one H×W plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|t| win[t] * plane[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|t| win[t] * rows[(y + t) * ow + x]).sum();
        }
    }
    out
}

fn planes(a: &Tensor, b: &Tensor, op: &str) -> Result<(usize, usize, usize)> {
    if a.shape() != b.shape() {
        return Err(Error::Metric(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    let s = a.shape();
    if s.len() < 2 {
        return Err(Error::Metric(format!("{op}: need at least 2 dimensions, got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    Ok((a.len() / (h * w), h, w))
}

/// Mean SSIM over all H×W planes with an 11-tap Gaussian window (σ = 1.5)
/// and data range 1.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    ssim_with(a, b, 11, 1.0)
}

/// SSIM with a Gaussian window of `window` taps, shrunk to fit small images.
pub fn ssim_with(a: &Tensor, b: &Tensor, window: usize, data_range: f64) -> Result<f64> {
    let (n, h, w) = planes(a, b, "ssim")?;
    let mut size = window.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    if size == 0 {
        return Err(Error::Metric("ssim: empty window".into()));
    }
    let win = gaussian_window(size, 1.5);
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for p in 0..n {
        let pa: Vec<f64> = a.data()[p * h * w..(p + 1) * h * w].iter().map(|&v| v as f64).collect();
        let pb: Vec<f64> = b.data()[p * h * w..(p + 1) * h * w].iter().map(|&v| v as f64).collect();
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mu_a = filter_valid(&pa, h, w, &win);
        let mu_b = filter_valid(&pb, h, w, &win);
        let aa = filter_valid(&prod(&pa, &pa), h, w, &win);
        let bb = filter_valid(&prod(&pb, &pb), h, w, &win);
        let ab = filter_valid(&prod(&pa, &pb), h, w, &win);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    psnr_with(a, b, 1.0)
}

/// PSNR in dB, capped at [`PSNR_CAP`].
pub fn psnr_with(a: &Tensor, b: &Tensor, data_range: f64) -> Result<f64> {
    planes(a, b, "psnr")?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP))
}

/// One scored test image.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredImage {
    pub id: String,
    pub category: String,
    pub label: bool,
    pub map: AnomalyMap,
    /// Ground-truth mask with the map's pixel count; `None` means all normal.
    pub mask: Option<Tensor>,
    /// (SSIM, PSNR) of the final reconstruction, for normal images.
    pub quality: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategoryReport {
    pub category: String,
    pub images: usize,
    pub image_auroc: f64,
    pub pixel_auroc: f64,
    pub ssim: Option<f64>,
    pub psnr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub k_fraction: f32,
    /// (id, category, label, image score) in input order.
    pub images: Vec<(String, String, bool, f32)>,
    /// Sorted by category name.
    pub categories: Vec<CategoryReport>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl EvalReport {
    pub fn image_auroc(&self) -> f64 {
        mean(self.categories.iter().map(|c| c.image_auroc)).unwrap_or(f64::NAN)
    }

    pub fn pixel_auroc(&self) -> f64 {
        mean(self.categories.iter().map(|c| c.pixel_auroc)).unwrap_or(f64::NAN)
    }

    pub fn ssim(&self) -> Option<f64> {
        mean(self.categories.iter().filter_map(|c| c.ssim))
    }

    pub fn psnr(&self) -> Option<f64> {
        mean(self.categories.iter().filter_map(|c| c.psnr))
    }

    /// One row per category followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from("category,i_auroc,p_auroc,ssim,psnr\n");
        for c in &self.categories {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{},{}",
                c.category,
                c.image_auroc,
                c.pixel_auroc,
                opt(c.ssim),
                opt(c.psnr)
            );
        }
        let _ = writeln!(
            out,
            "mean,{:.6},{:.6},{},{}",
            self.image_auroc(),
            self.pixel_auroc(),
            opt(self.ssim()),
            opt(self.psnr())
        );
        out
    }

    /// `path,image_score,label` rows.
    pub fn scores_csv(&self) -> String {
        let mut out = String::from("path,image_score,label\n");
        for (id, _, label, score) in &self.images {
            let _ = writeln!(out, "{id},{score:.6},{}", u8::from(*label));
        }
        out
    }
}

/// Per-category image AUROC over top-k scores, pixel AUROC over the pooled
/// pixels of the category, and mean reconstruction quality on normals.
pub fn summarize(items: &[ScoredImage], k_fraction: f32) -> Result<EvalReport> {
    let mut groups: BTreeMap<&str, Vec<&ScoredImage>> = BTreeMap::new();
    for it in items {
        groups.entry(it.category.as_str()).or_default().push(it);
    }
    let mut categories = Vec::with_capacity(groups.len());
    for (name, group) in groups {
        let report = category_report(name, &group).map_err(|e| e.context(format!("category {name}")))?;
        categories.push(report);
    }
    Ok(EvalReport {
        k_fraction,
        images: items
            .iter()
            .map(|i| (i.id.clone(), i.category.clone(), i.label, i.map.image_score))
            .collect(),
        categories,
    })
}

fn category_report(name: &str, group: &[&ScoredImage]) -> Result<CategoryReport> {
    let scores: Vec<f32> = group.iter().map(|i| i.map.image_score).collect();
    let labels: Vec<bool> = group.iter().map(|i| i.label).collect();
    let image_auroc = auroc(&scores, &labels)?;
    let mut pixel_scores = Vec::new();
    let mut pixel_labels = Vec::new();
    for it in group {
        let px = it.map.scores.data();
        match &it.mask {
            Some(m) if m.len() != px.len() => {
                return Err(Error::Metric(format!(
                    "{}: mask has {} pixels, map has {}",
                    it.id,
                    m.len(),
                    px.len()
                )))
            }
            Some(m) => pixel_labels.extend(m.data().iter().map(|&v| v > 0.0)),
            None => pixel_labels.extend(std::iter::repeat_n(false, px.len())),
        }
        pixel_scores.extend_from_slice(px);
    }
    let pixel_auroc = auroc(&pixel_scores, &pixel_labels)?;
    Ok(CategoryReport {
        category: name.to_string(),
        images: group.len(),
        image_auroc,
        pixel_auroc,
        ssim: mean(group.iter().filter_map(|i| i.quality.map(|q| q.0))),
        psnr: mean(group.iter().filter_map(|i| i.quality.map(|q| q.1))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topk_hand_values() {
        assert!((image_score_topk(&[0.9, 0.8, 0.1, 0.0], 0.5).unwrap() - 0.85).abs() < 1e-7);
        assert!((image_score_topk(&[0.2, 0.4], 1.0).unwrap() - 0.3).abs() < 1e-7);
        assert!(image_score_topk(&[], 0.5).is_err());
        assert!(image_score_topk(&[1.0], 0.0).is_err());
        assert_eq!(topk_count(4096, 0.001), 5);
    }

    #[test]
    fn auroc_hand_values() {
        let s = [0.1, 0.4, 0.35, 0.8];
        let l = [false, false, true, true];
        assert_eq!(auroc(&s, &l).unwrap(), 0.75);
        assert_eq!(auroc(&[0.3; 6], &[true, false, true, false, true, false]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.0, 1.0], &[false, true]).unwrap(), 1.0);
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(Error::Metric(_))));
    }

    #[test]
    fn psnr_hand_value() {
        let a = Tensor::zeros(&[1, 8, 8]);
        let b = Tensor::full(&[1, 8, 8], 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    }

    #[test]
    fn ssim_identity() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let a = Tensor::rand_uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&a, &Tensor::zeros(&[3, 16, 16])).unwrap() < 0.5);
    }
}
