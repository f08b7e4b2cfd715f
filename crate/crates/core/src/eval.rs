//! Depth metrics, mIoU and cross-modal consistency scoring.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2, ArrayView3, Zip};

use crate::codec::{decode_mask, encode_image};
use crate::error::{Result, TideError};
use crate::model::{TideModel, Toggles};
use crate::scenes::{image_palette, DepthRule, CATEGORIES};
use crate::schedule::NoiseSchedule;
use crate::sample::{sample_triple, Triple};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DepthMetrics {
    pub si_log: f64,
    pub a_rel: f64,
    pub log10: f64,
    pub rmse: f64,
    pub s_rel: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl DepthMetrics {
    pub const CSV_HEADER: &'static str = "si_log,a_rel,log10,rmse,s_rel,rmse_log,delta1,delta2,delta3";

    pub fn fields(&self) -> [f64; 9] {
        [self.si_log, self.a_rel, self.log10, self.rmse, self.s_rel, self.rmse_log, self.delta1, self.delta2, self.delta3]
    }

    fn from_fields(f: [f64; 9]) -> Self {
        Self {
            si_log: f[0],
            a_rel: f[1],
            log10: f[2],
            rmse: f[3],
            s_rel: f[4],
            rmse_log: f[5],
            delta1: f[6],
            delta2: f[7],
            delta3: f[8],
        }
    }

    pub fn csv_row(&self) -> String {
        self.fields().iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(",")
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Valid (pred, gt) pixel pairs, pred optionally median-scaled.
fn valid_pairs(
    pred: ArrayView2<'_, f64>,
    gt: ArrayView2<'_, f64>,
    valid: Option<ArrayView2<'_, bool>>,
    median_align: bool,
) -> Result<Vec<(f64, f64)>> {
    if pred.dim() != gt.dim() || valid.is_some_and(|v| v.dim() != gt.dim()) {
        return Err(TideError::shape(format!("pred {:?} vs gt {:?}", pred.dim(), gt.dim())));
    }
    let mut pairs = Vec::new();
    for ((idx, &p), &g) in pred.indexed_iter().zip(gt.iter()) {
        if valid.is_some_and(|v| !v[idx]) {
            continue;
        }
        if !(p > 0.0 && g > 0.0 && p.is_finite() && g.is_finite()) {
            return Err(TideError::invalid(format!("non-positive depth at {idx:?}: pred {p}, gt {g}")));
        }
        pairs.push((p, g));
    }
    if pairs.is_empty() {
        return Err(TideError::invalid("no valid pixels"));
    }
    if median_align {
        let k = median(pairs.iter().map(|x| x.1).collect()) / median(pairs.iter().map(|x| x.0).collect());
        pairs.iter_mut().for_each(|x| x.0 *= k);
    }
    Ok(pairs)
}

fn metrics_of(pairs: &[(f64, f64)]) -> DepthMetrics {
    let n = pairs.len() as f64;
    let mean = |f: &dyn Fn(f64, f64) -> f64| pairs.iter().map(|&(p, g)| f(p, g)).sum::<f64>() / n;
    let log_err: Vec<f64> = pairs.iter().map(|&(p, g)| p.ln() - g.ln()).collect();
    let mu = log_err.iter().sum::<f64>() / n;
    let var = log_err.iter().map(|e| (e - mu) * (e - mu)).sum::<f64>() / n;
    let delta = |k: i32| mean(&|p, g| ((g / p).max(p / g) < 1.25f64.powi(k)) as u8 as f64);
    DepthMetrics {
        si_log: 100.0 * var.sqrt(),
        a_rel: mean(&|p, g| (g - p).abs() / g),
        log10: mean(&|p, g| (g.log10() - p.log10()).abs()),
        rmse: mean(&|p, g| (g - p) * (g - p)).sqrt(),
        s_rel: mean(&|p, g| (g - p) * (g - p) / g),
        rmse_log: mean(&|p, g| (g.ln() - p.ln()).powi(2)).sqrt(),
        delta1: delta(1),
        delta2: delta(2),
        delta3: delta(3),
    }
}

/// Depth error metrics over the valid pixels of one image.
pub fn depth_metrics(
    pred: ArrayView2<'_, f64>,
    gt: ArrayView2<'_, f64>,
    valid: Option<ArrayView2<'_, bool>>,
    median_align: bool,
) -> Result<DepthMetrics> {
    Ok(metrics_of(&valid_pairs(pred, gt, valid, median_align)?))
}

/// Metrics over several images: averaged per image, or over pooled pixels
/// when `pooled` (median alignment stays per image either way).
pub fn depth_metrics_many(
    images: &[(ArrayView2<'_, f64>, ArrayView2<'_, f64>, Option<ArrayView2<'_, bool>>)],
    median_align: bool,
    pooled: bool,
) -> Result<DepthMetrics> {
    if images.is_empty() {
        return Err(TideError::invalid("no images to evaluate"));
    }
    let per: Vec<Vec<(f64, f64)>> =
        images.iter().map(|(p, g, v)| valid_pairs(*p, *g, *v, median_align)).collect::<Result<_>>()?;
    if pooled {
        return Ok(metrics_of(&per.concat()));
    }
    let mut acc = [0.0; 9];
    for pairs in &per {
        for (a, f) in acc.iter_mut().zip(metrics_of(pairs).fields()) {
            *a += f;
        }
    }
    Ok(DepthMetrics::from_fields(acc.map(|a| a / per.len() as f64)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiouReport {
    /// IoU per category; `None` when absent from both grids.
    pub per_category: Vec<Option<f64>>,
    pub mean: f64,
}

pub fn miou(pred: ArrayView2<'_, u8>, gt: ArrayView2<'_, u8>, k: usize) -> Result<MiouReport> {
    if pred.dim() != gt.dim() {
        return Err(TideError::shape(format!("pred {:?} vs gt {:?}", pred.dim(), gt.dim())));
    }
    let mut inter = vec![0usize; k];
    let mut union = vec![0usize; k];
    let mut bad = None;
    Zip::from(pred).and(gt).for_each(|&p, &g| {
        let (p, g) = (p as usize, g as usize);
        if p >= k || g >= k {
            bad = Some(p.max(g));
            return;
        }
        if p == g {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[g] += 1;
        }
    });
    if let Some(id) = bad {
        return Err(TideError::invalid(format!("category {id} out of range for {k} categories")));
    }
    let per_category: Vec<Option<f64>> =
        (0..k).map(|c| (union[c] > 0).then(|| inter[c] as f64 / union[c] as f64)).collect();
    let included: Vec<f64> = per_category.iter().flatten().copied().collect();
    if included.is_empty() {
        return Err(TideError::invalid("no category present in either grid"));
    }
    Ok(MiouReport { mean: included.iter().sum::<f64>() / included.len() as f64, per_category })
}

/// Ranks starting at 1, ties sharing their average rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            out[o] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    pearson(&ranks(a), &ranks(b))
}

/// Depth the scene rule implies for a mask: background by row, each
/// 4-connected same-category region by the radius of a disc of equal area.
pub fn implied_depth(mask: ArrayView2<'_, u8>, rule: &DepthRule) -> Array2<f64> {
    let (h, w) = mask.dim();
    let mut out = Array2::from_shape_fn((h, w), |(y, _)| rule.background(y, h));
    let mut seen = Array2::from_elem((h, w), false);
    for start in (0..h).flat_map(|y| (0..w).map(move |x| (y, x))) {
        let cat = mask[start];
        if cat == 0 || seen[start] {
            continue;
        }
        let mut region = vec![start];
        let mut stack = vec![start];
        seen[start] = true;
        while let Some((y, x)) = stack.pop() {
            let neighbors = [(y.wrapping_sub(1), x), (y + 1, x), (y, x.wrapping_sub(1)), (y, x + 1)];
            for n in neighbors {
                if n.0 < h && n.1 < w && !seen[n] && mask[n] == cat {
                    seen[n] = true;
                    region.push(n);
                    stack.push(n);
                }
            }
        }
        let radius = (region.len() as f64 / std::f64::consts::PI).sqrt();
        let d = rule.object(radius);
        for p in region {
            out[p] = d;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyReport {
    /// mIoU between the image read as a category field and the mask.
    pub mask_image: f64,
    /// Spearman correlation of depth against the mask's rule-implied depth;
    /// `None` when undefined (single-category mask or constant depth).
    pub depth_mask: Option<f64>,
}

pub fn consistency_report(
    image: ArrayView3<'_, f32>,
    depth: ArrayView2<'_, f32>,
    mask: ArrayView2<'_, u8>,
    rule: &DepthRule,
) -> Result<ConsistencyReport> {
    let (h, w, _) = image.dim();
    if depth.dim() != (h, w) || mask.dim() != (h, w) {
        return Err(TideError::shape(format!("image {:?}, depth {:?}, mask {:?}", image.dim(), depth.dim(), mask.dim())));
    }
    let read = decode_mask(encode_image(image).view(), &image_palette())?;
    let mask_image = miou(read.view(), mask, CATEGORIES.len())?.mean;
    let single = mask.iter().all(|&m| m == mask[[0, 0]]);
    let depth_mask = if single {
        None
    } else {
        let implied = implied_depth(mask, rule);
        let d: Vec<f64> = depth.iter().map(|&v| v as f64).collect();
        spearman(&d, &implied.iter().copied().collect::<Vec<_>>())
    };
    Ok(ConsistencyReport { mask_image, depth_mask })
}

pub fn triple_consistency(t: &Triple, rule: &DepthRule) -> Result<ConsistencyReport> {
    consistency_report(t.image.view(), t.depth.view(), t.mask.view(), rule)
}

/// Mean consistency over several reports; undefined depth scores are
/// skipped and counted.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencySummary {
    pub mask_image: f64,
    pub depth_mask: f64,
    pub samples: usize,
    pub undefined_depth: usize,
}

pub fn summarize(reports: &[ConsistencyReport]) -> Result<ConsistencySummary> {
    if reports.is_empty() {
        return Err(TideError::invalid("no reports to summarize"));
    }
    let defined: Vec<f64> = reports.iter().filter_map(|r| r.depth_mask).collect();
    Ok(ConsistencySummary {
        mask_image: reports.iter().map(|r| r.mask_image).sum::<f64>() / reports.len() as f64,
        depth_mask: if defined.is_empty() { f64::NAN } else { defined.iter().sum::<f64>() / defined.len() as f64 },
        samples: reports.len(),
        undefined_depth: reports.len() - defined.len(),
    })
}

/// One ablation variant: a name, its model and the toggles it runs with.
pub struct Variant<'a> {
    pub name: String,
    pub model: &'a TideModel,
    pub toggles: Toggles,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub summary: ConsistencySummary,
}

pub const ABLATION_HEADER: &str = "variant,mask_image_miou,depth_mask_spearman,samples,undefined_depth";

/// Samples `captions[k]` with seed `seed + k` for every variant and scores
/// each triple; rows follow variant order.
pub fn ablation_sweep(
    variants: &[Variant<'_>],
    schedule: &NoiseSchedule,
    captions: &[String],
    steps: usize,
    seed_value: u64,
    rule: &DepthRule,
) -> Result<Vec<AblationRow>> {
    let jobs: Vec<(usize, usize)> =
        (0..variants.len()).flat_map(|v| (0..captions.len()).map(move |k| (v, k))).collect();
    let reports: Vec<ConsistencyReport> = crate::par::map(&jobs, |&(v, k)| {
        let var = &variants[v];
        let t = sample_triple(var.model, schedule, &captions[k], steps, seed_value + k as u64, var.toggles)?;
        triple_consistency(&t, rule)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    variants
        .iter()
        .enumerate()
        .map(|(v, var)| {
            let chunk = &reports[v * captions.len()..(v + 1) * captions.len()];
            Ok(AblationRow { variant: var.name.clone(), summary: summarize(chunk)? })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let s = &r.summary;
        writeln!(out, "{},{:.6},{:.6},{},{}", r.variant, s.mask_image, s.depth_mask, s.samples, s.undefined_depth).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::{generate_scene, Grammar};
    use ndarray::{arr2, Array3};

    #[test]
    fn two_pixel_example() {
        let gt = arr2(&[[1.0, 2.0]]);
        let pred = arr2(&[[2.0, 2.0]]);
        let m = depth_metrics(pred.view(), gt.view(), None, false).unwrap();
        assert!((m.a_rel - 0.5).abs() < 1e-12);
        assert!((m.rmse - 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(m.delta1, 0.5);
        assert!((m.si_log - 100.0 * 2f64.ln() / 2.0).abs() < 1e-9);
        assert!((m.si_log - 34.657).abs() < 0.01);
    }

    #[test]
    fn identity_and_scale() {
        let gt = arr2(&[[0.3, 0.9], [0.5, 0.7]]);
        let m = depth_metrics(gt.view(), gt.view(), None, false).unwrap();
        assert_eq!(m.fields(), [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let doubled = gt.mapv(|v| 2.0 * v);
        assert!(depth_metrics(doubled.view(), gt.view(), None, false).unwrap().si_log.abs() < 1e-9);
        let aligned = depth_metrics(doubled.view(), gt.view(), None, true).unwrap();
        assert!(aligned.a_rel < 1e-12);
    }

    #[test]
    fn depth_errors() {
        let gt = arr2(&[[1.0, 0.0]]);
        assert!(depth_metrics(gt.view(), gt.view(), None, false).is_err());
        let valid = arr2(&[[true, false]]);
        assert!(depth_metrics(gt.view(), gt.view(), Some(valid.view()), false).is_ok());
        let none = arr2(&[[false, false]]);
        assert!(depth_metrics(gt.view(), gt.view(), Some(none.view()), false).is_err());
    }

    #[test]
    fn pooled_versus_per_image() {
        let (g1, p1) = (arr2(&[[1.0, 2.0]]), arr2(&[[2.0, 2.0]]));
        let (g2, p2) = (arr2(&[[1.0, 1.0, 1.0, 1.0]]), arr2(&[[1.0, 1.0, 1.0, 1.0]]));
        let imgs = [(p1.view(), g1.view(), None), (p2.view(), g2.view(), None)];
        let per = depth_metrics_many(&imgs, false, false).unwrap();
        let pooled = depth_metrics_many(&imgs, false, true).unwrap();
        assert!((per.a_rel - 0.25).abs() < 1e-12);
        assert!((pooled.a_rel - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn miou_examples() {
        let a = arr2(&[[0u8, 1], [0, 1]]);
        let b = arr2(&[[0u8, 0], [1, 1]]);
        let r = miou(a.view(), b.view(), 2).unwrap();
        assert!((r.mean - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(miou(a.view(), a.view(), 6).unwrap().mean, 1.0);
        let c = a.mapv(|v| 1 - v);
        assert_eq!(miou(a.view(), c.view(), 2).unwrap().mean, 0.0);
        assert!(miou(a.view(), arr2(&[[0u8]]).view(), 2).is_err());
        assert!(miou(a.view(), a.view(), 1).is_err());
    }

    #[test]
    fn spearman_with_ties() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
        assert_eq!(ranks(&[5.0, 1.0, 5.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn ground_truth_scenes_are_consistent() {
        let g = Grammar::default();
        let rule = DepthRule::for_grammar(&g);
        for seed in 0..50 {
            let q = generate_scene(seed, &g).unwrap();
            let r = consistency_report(q.image.view(), q.depth.view(), q.mask.view(), &rule).unwrap();
            assert_eq!(r.mask_image, 1.0);
            assert!(r.depth_mask.unwrap() > 0.5, "seed {seed}: {:?}", r.depth_mask);
        }
    }

    #[test]
    fn implied_depth_is_perfectly_consistent() {
        let g = Grammar::default();
        let rule = DepthRule::for_grammar(&g);
        let q = generate_scene(3, &g).unwrap();
        let d = implied_depth(q.mask.view(), &rule).mapv(|v| v as f32);
        let r = consistency_report(q.image.view(), d.view(), q.mask.view(), &rule).unwrap();
        assert!((r.depth_mask.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn three_pixel_swap() {
        // image reads as [fish, reef, background]; mask says [fish, fish, background]
        let pal = image_palette();
        let col = |c: usize| pal.colors()[c].map(|v| ((v + 1.0) / 2.0) as f32);
        let cols = [col(1), col(2), col(0)];
        let image = Array3::from_shape_fn((1, 3, 3), |(_, x, c)| cols[x][c]);
        let mask = arr2(&[[1u8, 1, 0]]);
        let depth = arr2(&[[0.3f32, 0.3, 0.95]]);
        let r = consistency_report(image.view(), depth.view(), mask.view(), &DepthRule::for_grammar(&Grammar::default())).unwrap();
        // fish 1/2, reef 0/1, background 1/1
        assert!((r.mask_image - 0.5).abs() < 1e-12);
        let single = arr2(&[[0u8, 0, 0]]);
        assert_eq!(consistency_report(image.view(), depth.view(), single.view(), &DepthRule::for_grammar(&Grammar::default())).unwrap().depth_mask, None);
    }
}
