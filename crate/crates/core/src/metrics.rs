//! Overlap, boundary and volume metrics with per-organ aggregation.
//!
//! HD95 is in millimetres: each directed distance set is read from the exact
//! distance transform of one mask at the other's voxels, and its 95th
//! percentile uses linear interpolation at rank `0.95 * (n - 1)` of the sorted
//! values. Undefined entries are `None`, never zero.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, LabelMap};
use crate::kv::KeyValues;
use crate::prior::squared_edt;

fn check(p: &BinaryMask, g: &BinaryMask) -> Result<()> {
    if p.dims != g.dims || p.spacing != g.spacing {
        return Err(Error::DimMismatch(format!("masks {} vs {}", p.dims, g.dims)));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

pub fn confusion(p: &BinaryMask, g: &BinaryMask) -> Result<Counts> {
    check(p, g)?;
    let mut c = Counts::default();
    for (&a, &b) in p.bits.iter().zip(&g.bits) {
        match (a, b) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            _ => {}
        }
    }
    Ok(c)
}

/// `2|P∩G| / (|P| + |G|)`; 1 when both are empty.
pub fn dsc(p: &BinaryMask, g: &BinaryMask) -> Result<f64> {
    let c = confusion(p, g)?;
    let denom = 2 * c.tp + c.fp + c.fn_;
    Ok(if denom == 0 { 1.0 } else { 2.0 * c.tp as f64 / denom as f64 })
}

/// `|P∩G| / |P∪G|`; 1 when both are empty.
pub fn iou(p: &BinaryMask, g: &BinaryMask) -> Result<f64> {
    let c = confusion(p, g)?;
    let union = c.tp + c.fp + c.fn_;
    Ok(if union == 0 { 1.0 } else { c.tp as f64 / union as f64 })
}

/// Mean of foreground IoUs; `None` for an empty list.
pub fn miou(per_class: &[f64]) -> Option<f64> {
    (!per_class.is_empty()).then(|| per_class.iter().sum::<f64>() / per_class.len() as f64)
}

fn ratio(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

/// `F_beta = (1 + beta²) P R / (beta² P + R)`, with every 0/0 taken as 0.
pub fn fbeta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let d = b2 * precision + recall;
    if d == 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / d
    }
}

pub fn precision_recall_fbeta(p: &BinaryMask, g: &BinaryMask, beta: f64) -> Result<(f64, f64, f64)> {
    let c = confusion(p, g)?;
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    Ok((precision, recall, fbeta(precision, recall, beta)))
}

/// Linear-interpolation percentile of ascending `sorted` at rank `q * (n - 1)`.
pub fn percentile_linear(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

fn directed(from: &BinaryMask, to: &BinaryMask) -> Result<Vec<f64>> {
    let field = squared_edt(to)?;
    let mut d: Vec<f64> = from
        .bits
        .iter()
        .zip(&field.values)
        .filter(|(&b, _)| b)
        .map(|(_, &v)| v.sqrt())
        .collect();
    d.sort_by(f64::total_cmp);
    Ok(d)
}

/// Symmetric 95th-percentile Hausdorff distance in mm. `Some(0.0)` when both
/// masks are empty, `None` when exactly one is.
pub fn hd95(p: &BinaryMask, g: &BinaryMask) -> Result<Option<f64>> {
    check(p, g)?;
    match (p.is_empty(), g.is_empty()) {
        (true, true) => return Ok(Some(0.0)),
        (true, false) | (false, true) => return Ok(None),
        _ => {}
    }
    let pg = percentile_linear(&directed(p, g)?, 0.95).unwrap_or(0.0);
    let gp = percentile_linear(&directed(g, p)?, 0.95).unwrap_or(0.0);
    Ok(Some(pg.max(gp)))
}

/// `(|P| - |G|) / |G| * 100`; `None` when `G` is empty.
pub fn rvd(p: &BinaryMask, g: &BinaryMask) -> Result<Option<f64>> {
    check(p, g)?;
    let (np, ng) = (p.count(), g.count());
    Ok((ng > 0).then(|| (np as f64 - ng as f64) / ng as f64 * 100.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrganMetrics {
    pub dsc: f64,
    pub iou: f64,
    /// F-beta with beta = 0.5 (precision-weighted).
    pub f1_50: f64,
    pub f1: f64,
    pub f2: f64,
    pub precision: f64,
    pub recall: f64,
    pub hd95: Option<f64>,
    pub rvd: Option<f64>,
}

pub fn organ_metrics(p: &BinaryMask, g: &BinaryMask) -> Result<OrganMetrics> {
    let (precision, recall, f1) = precision_recall_fbeta(p, g, 1.0)?;
    Ok(OrganMetrics {
        dsc: dsc(p, g)?,
        iou: iou(p, g)?,
        f1_50: fbeta(precision, recall, 0.5),
        f1,
        f2: fbeta(precision, recall, 2.0),
        precision,
        recall,
        hd95: hd95(p, g)?,
        rvd: rvd(p, g)?,
    })
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> (Option<f64>, usize) {
    let (mut sum, mut n, mut undefined) = (0.0, 0usize, 0usize);
    for v in values {
        match v {
            Some(x) => {
                sum += x;
                n += 1;
            }
            None => undefined += 1,
        }
    }
    ((n > 0).then(|| sum / n as f64), undefined)
}

fn average(entries: &[OrganMetrics]) -> Option<OrganMetrics> {
    if entries.is_empty() {
        return None;
    }
    let n = entries.len() as f64;
    let m = |f: fn(&OrganMetrics) -> f64| entries.iter().map(f).sum::<f64>() / n;
    Some(OrganMetrics {
        dsc: m(|e| e.dsc),
        iou: m(|e| e.iou),
        f1_50: m(|e| e.f1_50),
        f1: m(|e| e.f1),
        f2: m(|e| e.f2),
        precision: m(|e| e.precision),
        recall: m(|e| e.recall),
        hd95: mean_opt(entries.iter().map(|e| e.hd95)).0,
        rvd: mean_opt(entries.iter().map(|e| e.rvd)).0,
    })
}

/// Per-organ metrics over the foreground classes and their means. Organs
/// absent from both maps are listed in `absent` and excluded from the means.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub per_organ: BTreeMap<u8, OrganMetrics>,
    pub absent: Vec<u8>,
    pub averages: Option<OrganMetrics>,
    pub undefined_hd95: usize,
    pub undefined_rvd: usize,
}

impl MetricsReport {
    fn from_entries(per_organ: BTreeMap<u8, OrganMetrics>, absent: Vec<u8>) -> Self {
        let entries: Vec<OrganMetrics> = per_organ.values().copied().collect();
        Self {
            averages: average(&entries),
            undefined_hd95: entries.iter().filter(|e| e.hd95.is_none()).count(),
            undefined_rvd: entries.iter().filter(|e| e.rvd.is_none()).count(),
            per_organ,
            absent,
        }
    }

    pub fn miou(&self) -> Option<f64> {
        miou(&self.per_organ.values().map(|e| e.iou).collect::<Vec<_>>())
    }

    /// Columns: Organ, DSC, IoU, F1_50, F1, F2, Precision, Recall, HD95.
    pub fn to_table(&self, name: impl Fn(u8) -> String) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<24} {:>7} {:>7} {:>7} {:>7} {:>7} {:>9} {:>7} {:>8}",
            "Organ", "DSC", "IoU", "F1_50", "F1", "F2", "Precision", "Recall", "HD95"
        );
        let row = |out: &mut String, label: &str, m: &OrganMetrics| {
            let hd = m.hd95.map_or("n/a".to_string(), |h| format!("{h:.3}"));
            let _ = writeln!(
                out,
                "{:<24} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>9.4} {:>7.4} {:>8}",
                label, m.dsc, m.iou, m.f1_50, m.f1, m.f2, m.precision, m.recall, hd
            );
        };
        for (&id, m) in &self.per_organ {
            row(&mut out, &name(id), m);
        }
        if let Some(avg) = &self.averages {
            row(&mut out, "Average (per organ)", avg);
        }
        out
    }

    /// Machine-readable `organ.<id>.<metric>=value` and `mean.<metric>=value`
    /// lines; undefined values are written as `undefined`.
    pub fn to_kv(&self) -> KeyValues {
        fn put(kv: &mut KeyValues, prefix: &str, m: &OrganMetrics) {
            let opt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| x.to_string());
            kv.push(&format!("{prefix}.dsc"), m.dsc)
                .push(&format!("{prefix}.iou"), m.iou)
                .push(&format!("{prefix}.f1_50"), m.f1_50)
                .push(&format!("{prefix}.f1"), m.f1)
                .push(&format!("{prefix}.f2"), m.f2)
                .push(&format!("{prefix}.precision"), m.precision)
                .push(&format!("{prefix}.recall"), m.recall)
                .push(&format!("{prefix}.hd95"), opt(m.hd95))
                .push(&format!("{prefix}.rvd"), opt(m.rvd));
        }
        let mut kv = KeyValues::new();
        for (&id, m) in &self.per_organ {
            put(&mut kv, &format!("organ.{id}"), m);
        }
        if let Some(avg) = &self.averages {
            put(&mut kv, "mean", avg);
        }
        if let Some(m) = self.miou() {
            kv.push("mean.miou", m);
        }
        kv.push("absent", crate::kv::join(&self.absent))
            .push("undefined.hd95", self.undefined_hd95)
            .push("undefined.rvd", self.undefined_rvd);
        kv
    }
}

/// Binarizes both maps per foreground class and evaluates each organ.
pub fn evaluate_labelmaps(pred: &LabelMap, gt: &LabelMap, classes: usize) -> Result<MetricsReport> {
    if pred.dims != gt.dims || pred.spacing != gt.spacing {
        return Err(Error::DimMismatch(format!("prediction {} vs ground truth {}", pred.dims, gt.dims)));
    }
    pred.check_classes(classes)?;
    gt.check_classes(classes)?;
    let mut per_organ = BTreeMap::new();
    let mut absent = Vec::new();
    for c in 1..classes as u8 {
        let p = pred.mask_of(c);
        let g = gt.mask_of(c);
        if p.is_empty() && g.is_empty() {
            absent.push(c);
            continue;
        }
        per_organ.insert(c, organ_metrics(&p, &g)?);
    }
    Ok(MetricsReport::from_entries(per_organ, absent))
}

/// Mean over volumes: each organ averages the volumes where it was evaluated,
/// and the overall means average the per-volume means.
pub fn aggregate_reports(reports: &[MetricsReport]) -> Result<MetricsReport> {
    if reports.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut grouped: BTreeMap<u8, Vec<OrganMetrics>> = BTreeMap::new();
    for r in reports {
        for (&id, m) in &r.per_organ {
            grouped.entry(id).or_default().push(*m);
        }
    }
    let per_organ: BTreeMap<u8, OrganMetrics> = grouped
        .into_iter()
        .filter_map(|(id, v)| average(&v).map(|m| (id, m)))
        .collect();
    let absent: Vec<u8> = reports
        .iter()
        .flat_map(|r| r.absent.iter().copied())
        .filter(|id| !per_organ.contains_key(id))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let means: Vec<OrganMetrics> = reports.iter().filter_map(|r| r.averages).collect();
    Ok(MetricsReport {
        averages: average(&means),
        undefined_hd95: reports.iter().map(|r| r.undefined_hd95).sum(),
        undefined_rvd: reports.iter().map(|r| r.undefined_rvd).sum(),
        per_organ,
        absent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Dims, Spacing};

    fn mask(dims: Dims, spacing: Spacing, set: &[(usize, usize, usize)]) -> BinaryMask {
        let mut m = BinaryMask::empty(dims, spacing);
        for &(z, y, x) in set {
            m.set(z, y, x, true);
        }
        m
    }

    #[test]
    fn overlap_cases() {
        let d = Dims::new(1, 1, 4);
        let a = mask(d, Spacing::UNIT, &[(0, 0, 0), (0, 0, 1)]);
        let b = mask(d, Spacing::UNIT, &[(0, 0, 1), (0, 0, 2)]);
        let e = BinaryMask::empty(d, Spacing::UNIT);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert_eq!(dsc(&a, &b).unwrap(), 0.5);
        assert_eq!(dsc(&e, &e).unwrap(), 1.0);
        assert_eq!(dsc(&a, &e).unwrap(), 0.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let other = BinaryMask::empty(Dims::new(1, 1, 5), Spacing::UNIT);
        assert!(matches!(dsc(&a, &other), Err(Error::DimMismatch(_))));
    }

    #[test]
    fn miou_cases() {
        assert_eq!(miou(&[1.0, 1.0]), Some(1.0));
        assert_eq!(miou(&[0.5, 1.0]), Some(0.75));
        assert_eq!(miou(&[]), None);
    }

    #[test]
    fn precision_recall_cases() {
        let d = Dims::new(1, 1, 6);
        let g = mask(d, Spacing::UNIT, &[(0, 0, 0), (0, 0, 1)]);
        assert_eq!(precision_recall_fbeta(&g, &g, 1.0).unwrap(), (1.0, 1.0, 1.0));
        let sup = mask(d, Spacing::UNIT, &[(0, 0, 0), (0, 0, 1), (0, 0, 2), (0, 0, 3)]);
        let (p, r, _) = precision_recall_fbeta(&sup, &g, 1.0).unwrap();
        assert_eq!((p, r), (0.5, 1.0));
        let one = mask(d, Spacing::UNIT, &[(0, 0, 1), (0, 0, 2)]);
        assert_eq!(precision_recall_fbeta(&one, &g, 2.0).unwrap(), (0.5, 0.5, 0.5));
        let e = BinaryMask::empty(d, Spacing::UNIT);
        assert_eq!(precision_recall_fbeta(&e, &e, 1.0).unwrap(), (0.0, 0.0, 0.0));
    }

    #[test]
    fn table_f_scores_follow_from_precision_and_recall() {
        // (F1_50, F1, F2, precision, recall) for the 13 organs of the reference
        // table. Entries are means over volumes, so F-scores of the mean P and R
        // agree only approximately; the ordering around F1 is exact.
        let rows = [
            (0.9573, 0.9558, 0.9545, 0.9584, 0.9537),
            (0.9447, 0.9402, 0.9360, 0.9479, 0.9333),
            (0.9441, 0.9433, 0.9425, 0.9448, 0.9420),
            (0.6591, 0.6166, 0.5830, 0.6945, 0.5641),
            (0.7692, 0.7209, 0.6854, 0.8110, 0.6673),
            (0.9674, 0.9659, 0.9645, 0.9684, 0.9637),
            (0.8496, 0.8038, 0.7716, 0.8929, 0.7550),
            (0.9098, 0.8946, 0.8803, 0.9206, 0.8713),
            (0.8483, 0.8342, 0.8232, 0.8595, 0.8174),
            (0.7348, 0.7155, 0.6993, 0.7497, 0.6901),
            (0.7927, 0.7828, 0.7750, 0.8004, 0.7709),
            (0.6751, 0.7037, 0.7381, 0.6586, 0.7655),
            (0.6402, 0.6544, 0.6743, 0.6332, 0.6918),
        ];
        for (f05, f1, f2, p, r) in rows {
            assert!((fbeta(p, r, 0.5) - f05).abs() < 0.015, "F0.5 for {p},{r}");
            assert!((fbeta(p, r, 1.0) - f1).abs() < 0.015);
            assert!((fbeta(p, r, 2.0) - f2).abs() < 0.015);
            assert_eq!(f05 > f1, p > r);
            assert_eq!(f2 > f1, r > p);
        }
        // Nearly balanced organs agree to table rounding.
        assert!((fbeta(0.9584, 0.9537, 0.5) - 0.9573).abs() < 2e-4);
        assert!((fbeta(0.9448, 0.9420, 0.5) - 0.9441).abs() < 2e-4);
    }

    #[test]
    fn hd95_cases() {
        let d = Dims::cube(5);
        let a = mask(d, Spacing::UNIT, &[(1, 1, 1)]);
        assert_eq!(hd95(&a, &a).unwrap(), Some(0.0));
        let b = mask(d, Spacing::UNIT, &[(1, 1, 4)]);
        assert_eq!(hd95(&a, &b).unwrap(), Some(3.0));
        let e = BinaryMask::empty(d, Spacing::UNIT);
        assert_eq!(hd95(&e, &e).unwrap(), Some(0.0));
        assert_eq!(hd95(&a, &e).unwrap(), None);
    }

    #[test]
    fn hd95_shift_along_anisotropic_axis() {
        let d = Dims::cube(12);
        let s = Spacing([2.0, 1.0, 1.0]);
        let mut g = BinaryMask::empty(d, s);
        let mut p = BinaryMask::empty(d, s);
        for z in 2..9 {
            for y in 2..10 {
                for x in 2..10 {
                    g.set(z, y, x, true);
                    p.set(z + 1, y, x, true);
                }
            }
        }
        assert_eq!(hd95(&p, &g).unwrap(), Some(2.0));
    }

    #[test]
    fn percentile_rule() {
        assert_eq!(percentile_linear(&[0.0, 10.0], 0.95), Some(9.5));
        assert_eq!(percentile_linear(&[4.0], 0.95), Some(4.0));
        assert_eq!(percentile_linear(&[], 0.95), None);
    }

    #[test]
    fn rvd_cases() {
        let d = Dims::new(1, 1, 200);
        let set = |n: usize| {
            let mut m = BinaryMask::empty(d, Spacing::UNIT);
            (0..n).for_each(|i| m.bits[i] = true);
            m
        };
        assert_eq!(rvd(&set(100), &set(100)).unwrap(), Some(0.0));
        assert_eq!(rvd(&set(110), &set(100)).unwrap(), Some(10.0));
        assert_eq!(rvd(&set(0), &set(100)).unwrap(), Some(-100.0));
        assert_eq!(rvd(&set(3), &set(0)).unwrap(), None);
    }

    fn two_organ_maps() -> (LabelMap, LabelMap) {
        let d = Dims::new(2, 3, 4);
        let gt: Vec<u8> = (0..24).map(|i| if i < 6 { 1 } else if i > 17 { 3 } else { 0 }).collect();
        let pred: Vec<u8> = (0..24).map(|i| if i < 5 { 1 } else if i > 15 { 3 } else { 0 }).collect();
        (
            LabelMap::new(d, Spacing([2.0, 1.0, 1.0]), pred).unwrap(),
            LabelMap::new(d, Spacing([2.0, 1.0, 1.0]), gt).unwrap(),
        )
    }

    #[test]
    fn evaluate_identity_and_absent() {
        let (_, gt) = two_organ_maps();
        let r = evaluate_labelmaps(&gt, &gt, 14).unwrap();
        assert_eq!(r.per_organ.keys().copied().collect::<Vec<_>>(), vec![1, 3]);
        for m in r.per_organ.values() {
            assert_eq!((m.dsc, m.iou, m.hd95, m.rvd), (1.0, 1.0, Some(0.0), Some(0.0)));
        }
        assert_eq!(r.absent.len(), 11);
        assert_eq!(r.averages.unwrap().dsc, 1.0);
    }

    #[test]
    fn evaluate_matches_per_op_calls() {
        let (pred, gt) = two_organ_maps();
        let r = evaluate_labelmaps(&pred, &gt, 4).unwrap();
        for c in [1u8, 3] {
            let (p, g) = (pred.mask_of(c), gt.mask_of(c));
            let m = r.per_organ[&c];
            assert_eq!(m.dsc, dsc(&p, &g).unwrap());
            assert_eq!(m.hd95, hd95(&p, &g).unwrap());
            assert_eq!(m.rvd, rvd(&p, &g).unwrap());
        }
        let avg = r.averages.unwrap();
        assert_eq!(avg.dsc, (r.per_organ[&1].dsc + r.per_organ[&3].dsc) / 2.0);
        assert_eq!(r.absent, vec![2]);
    }

    #[test]
    fn aggregate_is_mean_of_volumes() {
        let (pred, gt) = two_organ_maps();
        let a = evaluate_labelmaps(&pred, &gt, 4).unwrap();
        let b = evaluate_labelmaps(&gt, &gt, 4).unwrap();
        let agg = aggregate_reports(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(agg.per_organ[&1].dsc, (a.per_organ[&1].dsc + 1.0) / 2.0);
        assert_eq!(
            agg.averages.unwrap().dsc,
            (a.averages.unwrap().dsc + b.averages.unwrap().dsc) / 2.0
        );
        assert_eq!(aggregate_reports(&[a.clone()]).unwrap().per_organ, a.per_organ);
    }

    #[test]
    fn table_has_reference_columns() {
        let (pred, gt) = two_organ_maps();
        let r = evaluate_labelmaps(&pred, &gt, 4).unwrap();
        let table = r.to_table(|id| format!("organ {id}"));
        let header: Vec<&str> = table.lines().next().unwrap().split_whitespace().collect();
        assert_eq!(header, ["Organ", "DSC", "IoU", "F1_50", "F1", "F2", "Precision", "Recall", "HD95"]);
        assert!(table.lines().last().unwrap().starts_with("Average (per organ)"));
        let kv = r.to_kv();
        assert_eq!(kv.get("organ.1.dsc").unwrap().parse::<f64>().unwrap(), r.per_organ[&1].dsc);
    }
}
