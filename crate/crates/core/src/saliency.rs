//! Saliency maps from unnaturalness maps (square root, bilinear resize,
//! Gaussian blur) and shuffled-AUC evaluation against eye fixations.
//!
//! Shuffled AUC scores a map by ranking its values at this image's
//! fixation points (positives) against fixation points pooled from other
//! images (negatives); ties count one half (rank-sum convention). A purely
//! center-biased map scores about 0.5 because the negatives carry the same
//! center bias.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Element, Tensor};
use crate::vlm::UnnaturalnessMap;

/// Nonnegative saliency values at image resolution.
#[derive(Debug, Clone)]
pub struct SaliencyMap<T: Element> {
    values: Tensor<T>,
}

impl<T: Element> SaliencyMap<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::InvalidShape {
                shape: values.shape().to_vec(),
                reason: "saliency map must be rank 2".into(),
            });
        }
        if let Some((index, value)) = values.first_non_finite() {
            return Err(Error::NonFinite {
                context: "saliency map".into(),
                index,
                value: value.to_f64(),
            });
        }
        if values.data().iter().any(|&v| v < T::zero()) {
            return Err(Error::InvalidArgument("saliency map has negative entries".into()));
        }
        Ok(SaliencyMap { values })
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    /// Value at a normalized coordinate, nearest-pixel sampling: x in
    /// [0,1] covers the pixel columns as equal bins.
    pub fn sample(&self, x: f64, y: f64) -> T {
        let (h, w) = (self.height(), self.width());
        let col = ((x * w as f64) as usize).min(w - 1);
        let row = ((y * h as f64) as usize).min(h - 1);
        self.values.get(&[row, col])
    }
}

/// Eye fixations for one image, in normalized [0,1] coordinates.
#[derive(Debug, Clone)]
pub struct FixationSet {
    pub image_id: String,
    pub points: Vec<(f64, f64)>,
}

impl FixationSet {
    pub fn new(image_id: impl Into<String>, points: Vec<(f64, f64)>) -> Result<Self> {
        for &(x, y) in &points {
            if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                return Err(Error::InvalidArgument(format!(
                    "fixation ({x}, {y}) outside [0,1]^2"
                )));
            }
        }
        Ok(FixationSet {
            image_id: image_id.into(),
            points,
        })
    }
}

/// Read one image's fixations from CSV with header `x,y`.
pub fn read_fixations_csv(path: &Path, image_id: &str) -> Result<FixationSet> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    {
        let headers = reader.headers()?;
        if headers.len() < 2 || &headers[0] != "x" || &headers[1] != "y" {
            return Err(Error::InvalidArgument(format!(
                "fixation file {} must have header 'x,y'",
                path.display()
            )));
        }
    }
    let mut points = Vec::new();
    for record in reader.records() {
        let record = record?;
        let x: f64 = record[0]
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad x '{}'", &record[0])))?;
        let y: f64 = record[1]
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad y '{}'", &record[1])))?;
        points.push((x, y));
    }
    FixationSet::new(image_id, points)
}

/// Write fixations as CSV with header `x,y` (LF line endings).
pub fn write_fixations_csv(path: &Path, fixations: &FixationSet) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["x", "y"])?;
    for &(x, y) in &fixations.points {
        writer.write_record([format!("{x}"), format!("{y}")])?;
    }
    writer.flush()?;
    Ok(())
}

/// Bilinear resize with the half-pixel (align-corners-false) convention;
/// source coordinates are clamped at the borders.
pub fn bilinear_resize<T: Element>(map: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if map.rank() != 2 {
        return Err(Error::InvalidArgument(format!(
            "bilinear_resize on rank-{} tensor",
            map.rank()
        )));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("resize target must be positive".into()));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut out = Tensor::zeros(&[out_h, out_w]);
    for oy in 0..out_h {
        let sy = ((oy as f64 + 0.5) * h as f64 / out_h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..out_w {
            let sx = ((ox as f64 + 0.5) * w as f64 / out_w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            let v00 = map.get(&[y0, x0]).to_f64();
            let v01 = map.get(&[y0, x1]).to_f64();
            let v10 = map.get(&[y1, x0]).to_f64();
            let v11 = map.get(&[y1, x1]).to_f64();
            let top = v00 * (1.0 - fx) + v01 * fx;
            let bottom = v10 * (1.0 - fx) + v11 * fx;
            out.set(&[oy, ox], T::from_f64(top * (1.0 - fy) + bottom * fy));
        }
    }
    Ok(out)
}

fn reflect(mut index: isize, len: usize) -> usize {
    let n = len as isize;
    loop {
        if index < 0 {
            index = -index - 1;
        } else if index >= n {
            index = 2 * n - 1 - index;
        } else {
            return index as usize;
        }
    }
}

/// Separable Gaussian blur: truncated kernel of radius `ceil(3*sigma)`
/// normalized to sum 1, reflect padding at the borders. `sigma_px == 0`
/// returns the input bit-identically.
pub fn gaussian_blur<T: Element>(map: &Tensor<T>, sigma_px: f64) -> Result<Tensor<T>> {
    if map.rank() != 2 {
        return Err(Error::InvalidArgument(format!(
            "gaussian_blur on rank-{} tensor",
            map.rank()
        )));
    }
    if sigma_px < 0.0 || !sigma_px.is_finite() {
        return Err(Error::InvalidArgument(format!("sigma must be >= 0, got {sigma_px}")));
    }
    if sigma_px == 0.0 {
        return Ok(map.clone());
    }
    let radius = (3.0 * sigma_px).ceil() as usize;
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    let mut total = 0.0;
    for i in 0..=2 * radius {
        let d = i as f64 - radius as f64;
        let v = (-d * d / (2.0 * sigma_px * sigma_px)).exp();
        kernel.push(v);
        total += v;
    }
    for v in &mut kernel {
        *v /= total;
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    // horizontal pass
    let mut horizontal = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &k) in kernel.iter().enumerate() {
                let sx = reflect(x as isize + i as isize - radius as isize, w);
                acc += k * map.get(&[y, sx]).to_f64();
            }
            horizontal[y * w + x] = acc;
        }
    }
    // vertical pass
    let mut out = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &k) in kernel.iter().enumerate() {
                let sy = reflect(y as isize + i as isize - radius as isize, h);
                acc += k * horizontal[sy * w + x];
            }
            out.set(&[y, x], T::from_f64(acc));
        }
    }
    Ok(out)
}

/// Turn an unnaturalness map into a saliency map: elementwise square root
/// (damping peaky values), bilinear resize to the output size, then
/// Gaussian blur with `sigma_px = sigma_rel * out_w`.
pub fn saliency_from_map<T: Element>(
    map: &UnnaturalnessMap<T>,
    out_h: usize,
    out_w: usize,
    sigma_rel: f64,
) -> Result<SaliencyMap<T>> {
    if sigma_rel < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "sigma_rel must be >= 0, got {sigma_rel}"
        )));
    }
    let rooted = map.values().sqrt();
    let resized = bilinear_resize(&rooted, out_h, out_w)?;
    let blurred = gaussian_blur(&resized, sigma_rel * out_w as f64)?;
    // rounding can push near-zero values a hair negative
    SaliencyMap::new(blurred.map(|v| v.max_val(T::zero())))
}

/// Shuffled AUC: rank saliency at positive fixations against negatives
/// with the Mann-Whitney tie convention, computed by average ranks.
pub fn shuffled_auc<T: Element>(
    sal: &SaliencyMap<T>,
    positives: &FixationSet,
    negatives: &FixationSet,
) -> Result<f64> {
    if positives.points.is_empty() || negatives.points.is_empty() {
        return Err(Error::EmptyCorpus("shuffled_auc fixation sets".into()));
    }
    let pos: Vec<f64> = positives
        .points
        .iter()
        .map(|&(x, y)| sal.sample(x, y).to_f64())
        .collect();
    let neg: Vec<f64> = negatives
        .points
        .iter()
        .map(|&(x, y)| sal.sample(x, y).to_f64())
        .collect();
    Ok(rank_auc(&pos, &neg))
}

/// AUC by rank sums with average ranks for ties; exactly equals the
/// pairwise count `(wins + ties/2) / (|P| * |N|)`.
fn rank_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let n_pos = pos.len();
    let n_neg = neg.len();
    let mut scored: Vec<(f64, bool)> = pos
        .iter()
        .map(|&v| (v, true))
        .chain(neg.iter().map(|&v| (v, false)))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < scored.len() {
        let mut j = i;
        while j < scored.len() && scored[j].0 == scored[i].0 {
            j += 1;
        }
        // ranks are 1-based; tied entries share the average rank
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for entry in &scored[i..j] {
            if entry.1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    u / (n_pos as f64 * n_neg as f64)
}

/// Pool every other image's fixations as the negative set; when the pool
/// exceeds `cap`, sample that many points without replacement (seeded).
pub fn build_negative_set(
    all_fixations: &BTreeMap<String, FixationSet>,
    exclude: &str,
    cap: usize,
    seed: u64,
) -> Result<FixationSet> {
    let mut pool: Vec<(f64, f64)> = Vec::new();
    for (id, set) in all_fixations {
        if id != exclude {
            pool.extend_from_slice(&set.points);
        }
    }
    if pool.is_empty() {
        return Err(Error::EmptyCorpus(format!(
            "no fixations outside image '{exclude}'"
        )));
    }
    if pool.len() > cap {
        let mut stream = rng::stream(seed, &format!("saliency.negatives.{exclude}"));
        // partial Fisher-Yates: the first `cap` entries become the sample
        for i in 0..cap {
            let j = stream.gen_range(i..pool.len());
            pool.swap(i, j);
        }
        pool.truncate(cap);
    }
    FixationSet::new(format!("negatives-for-{exclude}"), pool)
}
