//! Exact anisotropic distance transform and relation priors.
//!
//! Squared distances are computed axis by axis (x, then y, then z) with the
//! lower envelope of parabolas, in physical millimetres. Each pass adds one
//! axis term, so a value always equals `((dx*sx)^2 + (dy*sy)^2) + (dz*sz)^2`
//! for its nearest seed, evaluated in that order.

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, Dims, LabelMap, LogitTensor, Spacing};
use crate::loss::RelationRegion;

/// Squared distances in mm², one per voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceField {
    pub dims: Dims,
    pub spacing: Spacing,
    pub values: Vec<f64>,
}

impl DistanceField {
    pub fn distance(&self, i: usize) -> f64 {
        self.values[i].sqrt()
    }
}

/// One-dimensional squared transform of `f` with axis weight `w = spacing²`.
///
/// `f[i]` is the incoming cost (infinite for no seed). `v`, `z` and `out` are
/// scratch buffers sized by the caller.
fn edt_1d(f: &[f64], w: f64, spacing: f64, v: &mut [usize], z: &mut [f64], out: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    let mut first = None;
    for (q, &fq) in f.iter().enumerate() {
        if fq.is_finite() {
            first = Some(q);
            break;
        }
    }
    let Some(start) = first else {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    };
    v[0] = start;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let key = |q: usize| f[q] + w * (q * q) as f64;
    for q in start + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        let mut s = (key(q) - key(v[k])) / (2.0 * w * (q - v[k]) as f64);
        while s <= z[k] {
            k -= 1;
            s = (key(q) - key(v[k])) / (2.0 * w * (q - v[k]) as f64);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let eval = |p: usize, q: usize| {
        let d = (q as f64 - p as f64) * spacing;
        f[p] + d * d
    };
    let mut j = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        // Consecutive envelope members differ linearly in q, so advancing while
        // the next one is no worse selects the true minimum even when `z` is
        // off by rounding.
        while j < k && eval(v[j + 1], q) <= eval(v[j], q) {
            j += 1;
        }
        *o = eval(v[j], q);
    }
}

/// Exact squared Euclidean distance (mm²) from each voxel to the nearest set voxel.
pub fn squared_edt(mask: &BinaryMask) -> Result<DistanceField> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let dims = mask.dims;
    let [sz, sy, sx] = mask.spacing.0;
    let mut values: Vec<f64> = mask
        .bits
        .iter()
        .map(|&b| if b { 0.0 } else { f64::INFINITY })
        .collect();
    let longest = dims.d.max(dims.h).max(dims.w);
    let mut v = vec![0usize; longest];
    let mut z = vec![0.0; longest + 1];
    let mut line = vec![0.0; longest];
    let mut out = vec![0.0; longest];

    // x: contiguous rows.
    for row in values.chunks_mut(dims.w) {
        line[..dims.w].copy_from_slice(row);
        edt_1d(&line[..dims.w], sx * sx, sx, &mut v, &mut z, &mut out[..dims.w]);
        row.copy_from_slice(&out[..dims.w]);
    }
    // y
    for zi in 0..dims.d {
        for x in 0..dims.w {
            for y in 0..dims.h {
                line[y] = values[dims.index(zi, y, x)];
            }
            edt_1d(&line[..dims.h], sy * sy, sy, &mut v, &mut z, &mut out[..dims.h]);
            for y in 0..dims.h {
                values[dims.index(zi, y, x)] = out[y];
            }
        }
    }
    // z
    for y in 0..dims.h {
        for x in 0..dims.w {
            for zi in 0..dims.d {
                line[zi] = values[dims.index(zi, y, x)];
            }
            edt_1d(&line[..dims.d], sz * sz, sz, &mut v, &mut z, &mut out[..dims.d]);
            for zi in 0..dims.d {
                values[dims.index(zi, y, x)] = out[zi];
            }
        }
    }
    Ok(DistanceField {
        dims,
        spacing: mask.spacing,
        values,
    })
}

/// Spherical dilation: every voxel within `radius_mm` of the mask.
pub fn dilate(mask: &BinaryMask, radius_mm: f64) -> Result<BinaryMask> {
    if !(radius_mm >= 0.0) {
        return Err(Error::ConfigInvalid(format!("dilation radius {radius_mm}")));
    }
    let field = squared_edt(mask)?;
    let r2 = radius_mm * radius_mm;
    Ok(BinaryMask {
        dims: mask.dims,
        spacing: mask.spacing,
        bits: field.values.iter().map(|&d| d <= r2).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelationPriorConfig {
    /// Decay extent in voxels; converted to mm with the mean spacing.
    pub d_max_voxels: f64,
    /// Optional spherical dilation of the anchor (mm) before measuring distance.
    pub dilate_mm: Option<f64>,
}

impl Default for RelationPriorConfig {
    fn default() -> Self {
        Self {
            d_max_voxels: 8.0,
            dilate_mm: None,
        }
    }
}

impl RelationPriorConfig {
    pub fn d_max_mm(&self, spacing: Spacing) -> f64 {
        self.d_max_voxels * spacing.mean()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d_max_voxels > 0.0) || self.dilate_mm.is_some_and(|r| !(r >= 0.0)) {
            return Err(Error::ConfigInvalid(format!("invalid prior config {self:?}")));
        }
        Ok(())
    }
}

/// `max(0, 1 - d / (d_max + 1))`.
pub fn prior_value(d: f64, d_max: f64) -> f64 {
    (1.0 - d / (d_max + 1.0)).max(0.0)
}

/// Prior field for one anchor region, values in `[0, 1]`.
pub fn relation_prior(anchor: &BinaryMask, cfg: &RelationPriorConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let dilated;
    let seed = match cfg.dilate_mm {
        Some(r) => {
            dilated = dilate(anchor, r)?;
            &dilated
        }
        None => anchor,
    };
    let field = squared_edt(seed)?;
    let d_max = cfg.d_max_mm(anchor.spacing);
    Ok(field.values.iter().map(|&d2| prior_value(d2.sqrt(), d_max)).collect())
}

/// Per-class prior tensor plus the per-relation fields that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorAssembly {
    pub tensor: LogitTensor,
    pub regions: Vec<RelationRegion>,
    /// Relations whose anchor region was empty.
    pub skipped: Vec<(u8, u8)>,
}

impl PriorAssembly {
    pub fn is_active(&self) -> bool {
        !self.regions.is_empty()
    }
}

/// Places each relation's field on its target channel, combining by max.
/// Anchor regions are read from `anchors`; relations with an absent anchor are
/// recorded in `skipped`.
pub fn assemble_prior_tensor(
    relations: &[(u8, u8)],
    anchors: &LabelMap,
    classes: usize,
    cfg: &RelationPriorConfig,
) -> Result<PriorAssembly> {
    cfg.validate()?;
    let mut tensor = LogitTensor::zeros(classes, anchors.dims, anchors.spacing);
    let mut regions = Vec::new();
    let mut skipped = Vec::new();
    for &(anchor, target) in relations {
        for id in [anchor, target] {
            if id as usize >= classes {
                return Err(Error::LabelOutOfRange { label: id, classes });
            }
        }
        let mask = anchors.mask_of(anchor);
        let field = match relation_prior(&mask, cfg) {
            Ok(f) => f,
            Err(Error::EmptyMask) => {
                skipped.push((anchor, target));
                continue;
            }
            Err(e) => return Err(e),
        };
        for (dst, &p) in tensor.channel_mut(target as usize).iter_mut().zip(&field) {
            *dst = dst.max(p);
        }
        regions.push(RelationRegion { anchor, target, field });
    }
    Ok(PriorAssembly {
        tensor,
        regions,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask_from(dims: Dims, spacing: Spacing, set: &[(usize, usize, usize)]) -> BinaryMask {
        let mut m = BinaryMask::empty(dims, spacing);
        for &(z, y, x) in set {
            m.set(z, y, x, true);
        }
        m
    }

    /// All-pairs oracle, summing axis terms in the same x, y, z order.
    fn brute(mask: &BinaryMask) -> Vec<f64> {
        let dims = mask.dims;
        let [sz, sy, sx] = mask.spacing.0;
        let seeds: Vec<(usize, usize, usize)> = (0..dims.len())
            .filter(|&i| mask.bits[i])
            .map(|i| dims.coords(i))
            .collect();
        (0..dims.len())
            .map(|i| {
                let (z, y, x) = dims.coords(i);
                seeds
                    .iter()
                    .map(|&(a, b, c)| {
                        let dx = (x as f64 - c as f64) * sx;
                        let dy = (y as f64 - b as f64) * sy;
                        let dz = (z as f64 - a as f64) * sz;
                        (dx * dx + dy * dy) + dz * dz
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn full_mask_is_zero() {
        let mut m = BinaryMask::empty(Dims::cube(3), Spacing::UNIT);
        m.bits.iter_mut().for_each(|b| *b = true);
        assert!(squared_edt(&m).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn corner_seed_values() {
        let m = mask_from(Dims::cube(3), Spacing::UNIT, &[(0, 0, 0)]);
        let f = squared_edt(&m).unwrap();
        assert_eq!(f.values[Dims::cube(3).index(2, 2, 2)], 12.0);
        let m = mask_from(Dims::cube(3), Spacing([2.0, 1.0, 1.0]), &[(0, 0, 0)]);
        let f = squared_edt(&m).unwrap();
        assert_eq!(f.values[Dims::cube(3).index(1, 0, 0)], 4.0);
    }

    #[test]
    fn empty_mask_rejected() {
        let m = BinaryMask::empty(Dims::cube(2), Spacing::UNIT);
        assert!(matches!(squared_edt(&m), Err(Error::EmptyMask)));
        assert!(matches!(dilate(&m, 1.0), Err(Error::EmptyMask)));
    }

    #[test]
    fn dilation_cases() {
        let dims = Dims::cube(5);
        let m = mask_from(dims, Spacing::UNIT, &[(2, 2, 2)]);
        assert_eq!(dilate(&m, 0.0).unwrap(), m);
        assert_eq!(dilate(&m, 100.0).unwrap().count(), dims.len());
        let d = dilate(&m, 1.5).unwrap();
        // seed + 6 faces + 12 edges; corners at sqrt(3) excluded
        assert_eq!(d.count(), 19);
        assert!(d.get(2, 3, 3));
        assert!(!d.get(3, 3, 3));
    }

    #[test]
    fn prior_closed_form() {
        assert_eq!(prior_value(0.0, 3.0), 1.0);
        assert_eq!(prior_value(2.0, 3.0), 0.5);
        assert_eq!(prior_value(4.0, 3.0), 0.0);
        assert_eq!(prior_value(9.0, 3.0), 0.0);
    }

    #[test]
    fn prior_field_on_line() {
        let dims = Dims::new(1, 1, 12);
        let m = mask_from(dims, Spacing::UNIT, &[(0, 0, 0)]);
        let cfg = RelationPriorConfig {
            d_max_voxels: 3.0,
            dilate_mm: None,
        };
        let f = relation_prior(&m, &cfg).unwrap();
        assert_eq!(&f[..6], &[1.0, 0.75, 0.5, 0.25, 0.0, 0.0]);
    }

    #[test]
    fn d_max_scales_with_mean_spacing() {
        let cfg = RelationPriorConfig::default();
        assert_eq!(cfg.d_max_mm(Spacing([2.0, 1.5, 1.0])), 12.0);
    }

    fn two_anchor_map() -> LabelMap {
        let dims = Dims::new(1, 1, 20);
        let mut data = vec![0u8; 20];
        data[0] = 1;
        data[19] = 2;
        data[10] = 6;
        LabelMap::new(dims, Spacing::UNIT, data).unwrap()
    }

    #[test]
    fn assembly_placement_and_max() {
        let labels = two_anchor_map();
        let cfg = RelationPriorConfig {
            d_max_voxels: 4.0,
            dilate_mm: None,
        };
        let none = assemble_prior_tensor(&[], &labels, 14, &cfg).unwrap();
        assert!(none.tensor.data.iter().all(|&v| v == 0.0));
        assert!(!none.is_active());

        let one = assemble_prior_tensor(&[(1, 6)], &labels, 14, &cfg).unwrap();
        for c in 0..14 {
            let nonzero = one.tensor.channel(c).iter().any(|&v| v != 0.0);
            assert_eq!(nonzero, c == 6);
        }

        let two = assemble_prior_tensor(&[(1, 6), (2, 6)], &labels, 14, &cfg).unwrap();
        let a = relation_prior(&labels.mask_of(1), &cfg).unwrap();
        let b = relation_prior(&labels.mask_of(2), &cfg).unwrap();
        for i in 0..20 {
            assert_eq!(two.tensor.at(6, i), a[i].max(b[i]));
        }
        assert_eq!(two.regions.len(), 2);
    }

    #[test]
    fn absent_anchor_is_skipped() {
        let labels = two_anchor_map();
        let out = assemble_prior_tensor(&[(5, 6), (1, 6)], &labels, 14, &RelationPriorConfig::default()).unwrap();
        assert_eq!(out.skipped, vec![(5, 6)]);
        assert_eq!(out.regions.len(), 1);
    }

    fn arb_mask(max: usize) -> impl Strategy<Value = BinaryMask> {
        (1..=max, 1..=max, 1..=max, prop_oneof![
            Just([1.0, 1.0, 1.0]),
            Just([2.0, 1.5, 1.5]),
            Just([3.0, 0.7, 1.2])
        ])
            .prop_flat_map(|(d, h, w, s)| {
                let n = d * h * w;
                (Just((Dims::new(d, h, w), Spacing(s))), proptest::collection::vec(prop::bool::weighted(0.08), n))
            })
            .prop_map(|((dims, spacing), mut bits)| {
                if !bits.iter().any(|&b| b) {
                    let mid = bits.len() / 2;
                    bits[mid] = true;
                }
                BinaryMask { dims, spacing, bits }
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn edt_matches_brute_force(m in arb_mask(9)) {
            prop_assert_eq!(squared_edt(&m).unwrap().values, brute(&m));
        }

        #[test]
        fn prior_is_bounded_and_one_on_anchor(m in arb_mask(8), dmax in 0.5f64..6.0) {
            let cfg = RelationPriorConfig { d_max_voxels: dmax, dilate_mm: None };
            let f = relation_prior(&m, &cfg).unwrap();
            for (i, &p) in f.iter().enumerate() {
                prop_assert!((0.0..=1.0).contains(&p));
                prop_assert_eq!(p == 1.0, m.bits[i]);
            }
        }

        #[test]
        fn dilation_is_monotone(m in arb_mask(7), r1 in 0.0f64..4.0, dr in 0.0f64..4.0) {
            let a = dilate(&m, r1).unwrap();
            let b = dilate(&m, r1 + dr).unwrap();
            prop_assert!(m.is_subset_of(&a));
            prop_assert!(a.is_subset_of(&b));
        }
    }
}
