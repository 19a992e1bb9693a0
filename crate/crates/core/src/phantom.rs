//! Synthetic ellipsoid phantoms and the corruptible logit oracle that stands in
//! for a frozen volumetric backbone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grid::{Dims, LabelMap, LogitTensor, Spacing, Volume, DEFAULT_CLASSES};
use crate::kv::{join, parse_triple, KeyValues};

/// Clinical soft-tissue window in Hounsfield units.
pub const HU_MIN: f64 = -175.0;
pub const HU_MAX: f64 = 250.0;

#[derive(Clone, Debug, PartialEq)]
pub struct OrganSpec {
    pub class_id: u8,
    /// Centre in millimetres, `(z, y, x)`.
    pub center: [f64; 3],
    /// Semi-axes in millimetres, `(z, y, x)`.
    pub radii: [f64; 3],
    pub intensity_mean: f64,
    pub intensity_sigma: f64,
}

impl OrganSpec {
    fn contains(&self, p: [f64; 3]) -> bool {
        let mut s = 0.0;
        for a in 0..3 {
            let t = (p[a] - self.center[a]) / self.radii[a];
            s += t * t;
        }
        s <= 1.0
    }

    fn to_line(&self) -> String {
        format!(
            "{}; {}; {}; {}; {}",
            self.class_id,
            join(&self.center),
            join(&self.radii),
            self.intensity_mean,
            self.intensity_sigma
        )
    }

    fn parse_line(line: &str) -> Result<Self> {
        let parts: Vec<&str> = line.split(';').map(str::trim).collect();
        let bad = || Error::ConfigInvalid(format!("bad organ line {line:?}"));
        if parts.len() != 5 {
            return Err(bad());
        }
        Ok(Self {
            class_id: parts[0].parse().map_err(|_| bad())?,
            center: parse_triple(parts[1])?,
            radii: parse_triple(parts[2])?,
            intensity_mean: parts[3].parse().map_err(|_| bad())?,
            intensity_sigma: parts[4].parse().map_err(|_| bad())?,
        })
    }
}

/// Phantom description. On overlap the earlier organ wins.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub spacing: Spacing,
    pub organs: Vec<OrganSpec>,
    pub background_mean: f64,
    pub background_sigma: f64,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        self.spacing.validate()?;
        let mut seen = [false; 256];
        for o in &self.organs {
            if o.class_id == 0 || o.class_id as usize >= DEFAULT_CLASSES {
                return Err(Error::ConfigInvalid(format!("organ class {} outside 1..13", o.class_id)));
            }
            if std::mem::replace(&mut seen[o.class_id as usize], true) {
                return Err(Error::ConfigInvalid(format!("organ class {} listed twice", o.class_id)));
            }
            if o.radii.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
                return Err(Error::ConfigInvalid(format!("organ {} radii must be positive", o.class_id)));
            }
            if !(o.intensity_sigma >= 0.0) || !o.intensity_mean.is_finite() || !o.center.iter().all(|c| c.is_finite()) {
                return Err(Error::ConfigInvalid(format!("organ {} intensity or centre invalid", o.class_id)));
            }
        }
        if !(self.background_sigma >= 0.0) || !self.background_mean.is_finite() {
            return Err(Error::ConfigInvalid("background intensity invalid".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.push("dims", join(&self.dims.as_array()))
            .push("spacing", join(&self.spacing.0))
            .push("background_mean", self.background_mean)
            .push("background_sigma", self.background_sigma)
            .push("seed", self.seed);
        for o in &self.organs {
            kv.push("organ", o.to_line());
        }
        kv
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# organ = class; centre z,y,x mm; radii z,y,x mm; mean HU; sigma HU\n");
        out.push_str(&self.to_kv().to_text());
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        let [d, h, w] = parse_triple::<usize>(kv.require("dims")?)?;
        let spec = Self {
            dims: Dims::new(d, h, w),
            spacing: Spacing(parse_triple(kv.get("spacing").unwrap_or("1,1,1"))?),
            organs: kv.all("organ").map(OrganSpec::parse_line).collect::<Result<_>>()?,
            background_mean: kv.parse_or("background_mean", -80.0)?,
            background_sigma: kv.parse_or("background_sigma", 15.0)?,
            seed: kv.parse_or("seed", 0)?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Labels each voxel with the first ellipsoid containing its centre
/// (`index * spacing` in millimetres) and draws intensities from that class's
/// normal distribution.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, LabelMap)> {
    spec.validate()?;
    let dims = spec.dims;
    let sp = spec.spacing.0;
    let mut labels = vec![0u8; dims.len()];
    for z in 0..dims.d {
        for y in 0..dims.h {
            for x in 0..dims.w {
                let p = [z as f64 * sp[0], y as f64 * sp[1], x as f64 * sp[2]];
                if let Some(o) = spec.organs.iter().find(|o| o.contains(p)) {
                    labels[dims.index(z, y, x)] = o.class_id;
                }
            }
        }
    }
    let mut params = [(spec.background_mean, spec.background_sigma); 256];
    for o in &spec.organs {
        params[o.class_id as usize] = (o.intensity_mean, o.intensity_sigma);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let data = labels
        .iter()
        .map(|&l| {
            let (m, s) = params[l as usize];
            m + s * std_normal.sample(&mut rng)
        })
        .collect();
    Ok((
        Volume::new(dims, spec.spacing, data)?,
        LabelMap::new(dims, spec.spacing, labels)?,
    ))
}

/// Organs of the canonical desk-scale phantoms:
/// spleen, right kidney, left kidney, liver, stomach.
pub const CANONICAL_ORGANS: [u8; 5] = [1, 2, 3, 6, 7];

/// Canonical 48³ phantom number `index`, with centres jittered by up to 3 mm and
/// radii scaled by up to 8%.
pub fn canonical_phantom_spec(index: usize, seed: u64) -> PhantomSpec {
    // (class, centre, radii, mean HU, sigma HU); smaller organs first so they win overlaps.
    const LAYOUT: [(u8, [f64; 3], [f64; 3], f64, f64); 5] = [
        (2, [58.0, 52.0, 18.0], [16.0, 8.5, 7.5], 160.0, 10.0),
        (3, [58.0, 52.0, 54.0], [16.0, 8.5, 7.5], 160.0, 10.0),
        (1, [44.0, 46.0, 58.0], [15.0, 10.0, 8.5], 110.0, 10.0),
        (7, [40.0, 26.0, 50.0], [16.0, 11.0, 12.0], 10.0, 10.0),
        (6, [44.0, 30.0, 20.0], [26.0, 17.0, 16.0], 60.0, 10.0),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let organs = LAYOUT
        .iter()
        .map(|&(class_id, c, r, mean, sigma)| OrganSpec {
            class_id,
            center: c.map(|v| v + rng.random_range(-3.0..=3.0)),
            radii: r.map(|v| v * rng.random_range(0.92..=1.08)),
            intensity_mean: mean,
            intensity_sigma: sigma,
        })
        .collect();
    PhantomSpec {
        dims: Dims::cube(48),
        spacing: Spacing([2.0, 1.5, 1.5]),
        organs,
        background_mean: -80.0,
        background_sigma: 15.0,
        seed: rng.random(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogitOracleConfig {
    pub classes: usize,
    pub scale: f64,
    pub noise_sigma: f64,
    pub suppressed: Vec<u8>,
    pub suppression_margin: f64,
    /// `(a, b, p)`: a voxel of class `a` is one-hot at `b` with probability `p`.
    pub confusion_pairs: Vec<(u8, u8, f64)>,
    pub seed: u64,
}

impl Default for LogitOracleConfig {
    fn default() -> Self {
        Self {
            classes: DEFAULT_CLASSES,
            scale: 4.0,
            noise_sigma: 0.5,
            suppressed: Vec::new(),
            suppression_margin: 2.0,
            confusion_pairs: Vec::new(),
            seed: 0,
        }
    }
}

impl LogitOracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::ConfigInvalid(format!("oracle scale {} must be positive", self.scale)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::ConfigInvalid("noise_sigma must be non-negative".into()));
        }
        if !self.suppression_margin.is_finite() {
            return Err(Error::ConfigInvalid("suppression_margin must be finite".into()));
        }
        if self.classes < 2 {
            return Err(Error::ConfigInvalid("oracle needs at least 2 classes".into()));
        }
        for &(a, b, p) in &self.confusion_pairs {
            if !(0.0..=1.0).contains(&p) || a as usize >= self.classes || b as usize >= self.classes {
                return Err(Error::ConfigInvalid(format!("confusion pair ({a}, {b}, {p}) invalid")));
            }
        }
        Ok(())
    }
}

/// Visual-logit oracle.
///
/// Each voxel gets `scale` on its target channel and 0 elsewhere, plus
/// independent `N(0, noise_sigma²)` noise on every channel. At voxels of a
/// suppressed class the own channel is lowered to `scale - margin` and the
/// background channel raised to `scale`, so a text bias must add more than
/// `margin` to recover the organ. Otherwise the target is the label, swapped by
/// the first matching confusion pair with its probability.
pub fn oracle_logits(labels: &LabelMap, cfg: &LogitOracleConfig) -> Result<LogitTensor> {
    cfg.validate()?;
    labels.check_classes(cfg.classes)?;
    let v = labels.dims.len();
    let c = cfg.classes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut suppressed = [false; 256];
    for &s in &cfg.suppressed {
        suppressed[s as usize] = true;
    }
    let mut out = LogitTensor::zeros(c, labels.dims, labels.spacing);
    for (i, &l) in labels.data.iter().enumerate() {
        if l != 0 && suppressed[l as usize] {
            out.data[i] = cfg.scale;
            out.data[l as usize * v + i] = cfg.scale - cfg.suppression_margin;
            continue;
        }
        let mut target = l;
        if let Some(&(_, b, p)) = cfg.confusion_pairs.iter().find(|&&(a, _, _)| a == l) {
            if rng.random_bool(p) {
                target = b;
            }
        }
        out.data[target as usize * v + i] = cfg.scale;
    }
    if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
        for x in &mut out.data {
            *x += noise.sample(&mut rng);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSamplerConfig {
    pub patch: Dims,
    pub pos_fraction: f64,
    pub samples_per_volume: usize,
    pub seed: u64,
}

impl Default for PatchSamplerConfig {
    fn default() -> Self {
        Self {
            patch: Dims::cube(96),
            pos_fraction: 0.5,
            samples_per_volume: 4,
            seed: 0,
        }
    }
}

impl PatchSamplerConfig {
    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        if !(0.0..=1.0).contains(&self.pos_fraction) {
            return Err(Error::ConfigInvalid(format!("pos_fraction {} outside [0, 1]", self.pos_fraction)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    pub volume: Volume,
    pub labels: LabelMap,
    pub origin: [usize; 3],
}

/// Draws a patch origin: centred on a uniformly chosen foreground voxel when
/// `positive`, else uniform over all valid offsets. Axes shorter than the patch
/// always start at 0 and are zero-padded.
pub fn draw_origin<R: Rng>(labels: &LabelMap, foreground: &[usize], patch: Dims, positive: bool, rng: &mut R) -> Result<[usize; 3]> {
    let dims = labels.dims.as_array();
    let size = patch.as_array();
    let mut origin = [0usize; 3];
    if positive {
        let &i = foreground.get(rng.random_range(0..foreground.len().max(1))).ok_or(Error::NoForeground)?;
        let (z, y, x) = labels.dims.coords(i);
        for (a, c) in [z, y, x].into_iter().enumerate() {
            let max = dims[a].saturating_sub(size[a]);
            origin[a] = c.saturating_sub(size[a] / 2).min(max);
        }
    } else {
        for a in 0..3 {
            origin[a] = rng.random_range(0..=dims[a].saturating_sub(size[a]));
        }
    }
    Ok(origin)
}

pub fn foreground_indices(labels: &LabelMap) -> Vec<usize> {
    labels
        .data
        .iter()
        .enumerate()
        .filter(|(_, &l)| l != 0)
        .map(|(i, _)| i)
        .collect()
}

pub fn crop_labels(labels: &LabelMap, origin: [usize; 3], size: Dims) -> LabelMap {
    let mut out = LabelMap::zeros(size, labels.spacing);
    for z in 0..size.d.min(labels.dims.d.saturating_sub(origin[0])) {
        for y in 0..size.h.min(labels.dims.h.saturating_sub(origin[1])) {
            let n = size.w.min(labels.dims.w.saturating_sub(origin[2]));
            let src = labels.dims.index(origin[0] + z, origin[1] + y, origin[2]);
            let dst = size.index(z, y, 0);
            out.data[dst..dst + n].copy_from_slice(&labels.data[src..src + n]);
        }
    }
    out
}

/// `samples_per_volume` patches; each is positive with probability `pos_fraction`.
pub fn sample_patches(volume: &Volume, labels: &LabelMap, cfg: &PatchSamplerConfig) -> Result<Vec<PatchSample>> {
    use crate::window::PatchSource;
    cfg.validate()?;
    if volume.dims != labels.dims {
        return Err(Error::DimMismatch(format!("volume {} vs labels {}", volume.dims, labels.dims)));
    }
    let fg = foreground_indices(labels);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.samples_per_volume)
        .map(|_| {
            let positive = rng.random_bool(cfg.pos_fraction);
            if positive && fg.is_empty() {
                return Err(Error::NoForeground);
            }
            let origin = draw_origin(labels, &fg, cfg.patch, positive, &mut rng)?;
            Ok(PatchSample {
                volume: volume.patch(origin, cfg.patch),
                labels: crop_labels(labels, origin, cfg.patch),
                origin,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flips: bool,
    pub rot90: bool,
    /// Largest relative intensity change; at most 0.1.
    pub max_intensity_shift: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flips: true,
            rot90: true,
            max_intensity_shift: 0.1,
        }
    }
}

fn remap<T: Copy>(data: &[T], dims: Dims, out_dims: Dims, src_of: impl Fn([usize; 3]) -> [usize; 3]) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for z in 0..out_dims.d {
        for y in 0..out_dims.h {
            for x in 0..out_dims.w {
                let [sz, sy, sx] = src_of([z, y, x]);
                out.push(data[dims.index(sz, sy, sx)]);
            }
        }
    }
    out
}

pub fn flip_axis<T: Copy>(data: &[T], dims: Dims, axis: usize) -> Vec<T> {
    let n = dims.as_array()[axis];
    remap(data, dims, dims, |mut p| {
        p[axis] = n - 1 - p[axis];
        p
    })
}

/// One quarter turn in the `(a, b)` plane: `out[.., i, j] = in[.., n_b - 1 - j, i]`.
/// Returns the new dims, which swap extents `a` and `b`.
pub fn rot90<T: Copy>(data: &[T], dims: Dims, a: usize, b: usize) -> (Vec<T>, Dims) {
    let mut ext = dims.as_array();
    ext.swap(a, b);
    let out_dims = Dims::new(ext[0], ext[1], ext[2]);
    let nb = dims.as_array()[a];
    let out = remap(data, dims, out_dims, |p| {
        let mut s = p;
        s[a] = nb - 1 - p[b];
        s[b] = p[a];
        s
    });
    (out, out_dims)
}

/// Multiplies every intensity by `1 + fraction`.
pub fn shift_intensity(volume: &Volume, fraction: f64) -> Volume {
    Volume {
        dims: volume.dims,
        spacing: volume.spacing,
        data: volume.data.iter().map(|v| v * (1.0 + fraction)).collect(),
    }
}

/// Random flips (each axis with probability 0.5), a random number of quarter
/// turns about a random axis pair, and an intensity shift drawn uniformly from
/// `[-max, max]`. Geometry is shared by volume and labels.
pub fn augment(volume: &Volume, labels: &LabelMap, cfg: &AugmentConfig, seed: u64) -> Result<(Volume, LabelMap)> {
    if !(0.0..=0.1).contains(&cfg.max_intensity_shift) {
        return Err(Error::ConfigInvalid(format!(
            "intensity shift {} outside [0, 0.1]",
            cfg.max_intensity_shift
        )));
    }
    if volume.dims != labels.dims {
        return Err(Error::DimMismatch(format!("volume {} vs labels {}", volume.dims, labels.dims)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = volume.data.clone();
    let mut l = labels.data.clone();
    let mut dims = volume.dims;
    let mut spacing = volume.spacing;
    if cfg.flips {
        for axis in 0..3 {
            if rng.random_bool(0.5) {
                v = flip_axis(&v, dims, axis);
                l = flip_axis(&l, dims, axis);
            }
        }
    }
    if cfg.rot90 {
        const PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];
        let (a, b) = PAIRS[rng.random_range(0..3)];
        let turns = rng.random_range(0..4);
        for _ in 0..turns {
            (v, _) = rot90(&v, dims, a, b);
            (l, dims) = rot90(&l, dims, a, b);
            spacing.0.swap(a, b);
        }
    }
    let shift = if cfg.max_intensity_shift > 0.0 {
        rng.random_range(-cfg.max_intensity_shift..=cfg.max_intensity_shift)
    } else {
        0.0
    };
    let out = Volume { dims, spacing, data: v };
    Ok((shift_intensity(&out, shift), LabelMap { dims, spacing, data: l }))
}

/// Clips to the soft-tissue window and maps it linearly onto `[0, 1]`.
pub fn normalize_hu(hu: f64) -> f64 {
    (hu.clamp(HU_MIN, HU_MAX) - HU_MIN) / (HU_MAX - HU_MIN)
}

pub fn normalize_intensity(volume: &Volume) -> Volume {
    Volume {
        dims: volume.dims,
        spacing: volume.spacing,
        data: volume.data.iter().map(|&v| normalize_hu(v)).collect(),
    }
}

/// Logit floor for classes the classifier has no model for.
const ABSENT_LOGIT: f64 = -50.0;

/// Per-class Gaussian log-likelihood on normalised intensity; the visual-logit
/// provider for raw volumes.
#[derive(Clone, Debug, PartialEq)]
pub struct IntensityClassifier {
    /// `(mean, sigma)` in normalised units, `None` for unmodelled classes.
    pub classes: Vec<Option<(f64, f64)>>,
}

impl IntensityClassifier {
    /// Models background and every organ of `spec`; sigmas are floored at 1e-3.
    pub fn from_spec(spec: &PhantomSpec, classes: usize) -> Result<Self> {
        spec.validate()?;
        let scale = HU_MAX - HU_MIN;
        let model = |m: f64, s: f64| Some((normalize_hu(m), (s / scale).max(1e-3)));
        let mut out = vec![None; classes];
        *out.first_mut().ok_or(Error::EmptyInput)? = model(spec.background_mean, spec.background_sigma);
        for o in &spec.organs {
            let slot = out
                .get_mut(o.class_id as usize)
                .ok_or(Error::LabelOutOfRange { label: o.class_id, classes })?;
            *slot = model(o.intensity_mean, o.intensity_sigma);
        }
        Ok(Self { classes: out })
    }

    pub fn logits(&self, normalized: &Volume) -> LogitTensor {
        let v = normalized.dims.len();
        let mut out = LogitTensor::zeros(self.classes.len(), normalized.dims, normalized.spacing);
        for (c, model) in self.classes.iter().enumerate() {
            let ch = &mut out.data[c * v..(c + 1) * v];
            match *model {
                Some((m, s)) => {
                    for (o, &x) in ch.iter_mut().zip(&normalized.data) {
                        let t = (x - m) / s;
                        *o = (-0.5 * t * t - s.ln()).max(ABSENT_LOGIT);
                    }
                }
                None => ch.fill(ABSENT_LOGIT),
            }
        }
        out
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.push("classes", self.classes.len());
        for (c, m) in self.classes.iter().enumerate() {
            if let Some((mean, sigma)) = m {
                kv.push("model", format!("{c}; {mean}; {sigma}"));
            }
        }
        kv
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        let classes: usize = kv.parse_value("classes")?.ok_or_else(|| Error::ConfigInvalid("missing classes".into()))?;
        let mut out = vec![None; classes];
        for line in kv.all("model") {
            let bad = || Error::ConfigInvalid(format!("bad model line {line:?}"));
            let parts: Vec<&str> = line.split(';').map(str::trim).collect();
            let [c, m, s] = parts.as_slice() else { return Err(bad()) };
            let c: usize = c.parse().map_err(|_| bad())?;
            let (m, s): (f64, f64) = (m.parse().map_err(|_| bad())?, s.parse().map_err(|_| bad())?);
            if c >= classes || !(s > 0.0) {
                return Err(bad());
            }
            out[c] = Some((m, s));
        }
        Ok(Self { classes: out })
    }
}
