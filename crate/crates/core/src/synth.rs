//! Seeded cardiac phantoms whose appearance depends on their metadata.
//!
//! Each phantom is a body ellipse holding a left-ventricle cavity, a myocardial
//! ring around it and a right-ventricle crescent, plus blood-bright distractor
//! blobs. Disease sets wall thickness and chamber size; vendor sets a global
//! intensity offset and how strongly the myocardium stands out from tissue.

use std::collections::BTreeMap;

use compseg_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::losses::Mask;
use crate::meta_codec::MetadataRecord;

pub const BACKGROUND: u8 = 0;
pub const LV: u8 = 1;
pub const RV: u8 = 2;
pub const MYO: u8 = 3;

const TISSUE: f64 = 0.4;
const LV_BLOOD: f64 = 1.0;
const RV_BLOOD: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiseaseGeometry {
    pub wall_thickness_px: f64,
    pub chamber_scale: f64,
    pub rv_scale: f64,
}

/// Vendor → scanner models and their field strength in tesla.
pub const SCANNERS: [(&str, &str, f64); 9] = [
    ("Philips", "Achieva", 1.5),
    ("Philips", "Ingenia", 3.0),
    ("Siemens", "Avanto", 1.5),
    ("Siemens", "AvantoFit", 1.5),
    ("Siemens", "Symphony", 1.5),
    ("Siemens", "TrioTim", 3.0),
    ("GE", "SignaExcite", 1.5),
    ("GE", "SignaExplorer", 1.5),
    ("GE", "SignaHDxt", 1.5),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub image_size: usize,
    pub num_classes: usize,
    pub spacing_mm: f64,
    pub vendor_intensity_offsets: BTreeMap<String, f64>,
    /// Myocardium intensity above surrounding tissue, per vendor.
    pub vendor_myo_contrast: BTreeMap<String, f64>,
    pub disease_geometry: BTreeMap<String, DiseaseGeometry>,
    pub noise_sigma: f64,
    /// Base left-ventricle cavity radius at 64 px, scaled with `image_size`.
    pub cavity_radius_px: f64,
    pub distractors: usize,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        let offsets = [("Philips", 0.3), ("Siemens", 0.0), ("GE", -0.1)];
        let contrast = [("Philips", 0.2), ("Siemens", 0.2), ("GE", 0.03)];
        let geometry = [
            ("NOR", 3.0, 1.0, 1.0),
            ("DLV", 2.0, 1.3, 0.9),
            ("HCM", 6.0, 0.8, 1.0),
            ("ARR", 3.0, 1.0, 1.0),
            ("FALL", 4.0, 0.9, 1.35),
            ("CIA", 5.0, 1.0, 1.0),
        ];
        Self {
            image_size: 64,
            num_classes: 4,
            spacing_mm: 1.25,
            vendor_intensity_offsets: offsets.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            vendor_myo_contrast: contrast.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            disease_geometry: geometry
                .iter()
                .map(|(k, t, c, r)| {
                    (
                        k.to_string(),
                        DiseaseGeometry {
                            wall_thickness_px: *t,
                            chamber_scale: *c,
                            rv_scale: *r,
                        },
                    )
                })
                .collect(),
            noise_sigma: 0.05,
            cavity_radius_px: 7.0,
            distractors: 2,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    fn scale(&self) -> f64 {
        self.image_size as f64 / 64.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(Error::Config(format!("phantom size {} below 32 px", self.image_size)));
        }
        if self.num_classes != 4 {
            return Err(Error::Config("phantoms have exactly four classes".into()));
        }
        if !(self.spacing_mm > 0.0) || !(self.noise_sigma >= 0.0) || !(self.cavity_radius_px > 0.0) {
            return Err(Error::Config("spacing, noise and radius must be positive".into()));
        }
        if self
            .vendor_intensity_offsets
            .values()
            .chain(self.vendor_myo_contrast.values())
            .any(|v| !v.is_finite())
        {
            return Err(Error::Config("vendor offsets and contrasts must be finite".into()));
        }
        let half = self.image_size as f64 / 2.0;
        for (name, g) in &self.disease_geometry {
            if g.wall_thickness_px < 1.0 || g.chamber_scale <= 0.0 || g.rv_scale <= 0.0 {
                return Err(Error::Config(format!("disease `{name}` geometry {g:?} is degenerate")));
            }
            // worst case: largest jittered cavity and wall, right ventricle
            // along its long axis, maximal centre shift
            let rv = 8.0 * self.scale() * g.rv_scale;
            let reach = 1.1 * self.cavity_radius_px * self.scale() * g.chamber_scale
                + g.wall_thickness_px * self.scale()
                + 0.3
                + 0.4 * rv;
            let extent = (reach * reach + (1.5 * rv).powi(2)).sqrt() + 5.0 * self.scale();
            if extent >= half - 1.0 {
                return Err(Error::Config(format!("disease `{name}` heart does not fit in the image")));
            }
        }
        Ok(())
    }

    /// Draw a record consistent with the spec's vendor and disease tables.
    pub fn sample_record(&self, rng: &mut ChaCha8Rng) -> Result<MetadataRecord> {
        let vendors: Vec<&String> = self.vendor_intensity_offsets.keys().collect();
        let diseases: Vec<&String> = self.disease_geometry.keys().collect();
        if vendors.is_empty() || diseases.is_empty() {
            return Err(Error::Generation("spec has no vendors or diseases".into()));
        }
        let vendor = vendors[rng.random_range(0..vendors.len())];
        let scanners: Vec<_> = SCANNERS.iter().filter(|(v, ..)| v == vendor).collect();
        let disease = diseases[rng.random_range(0..diseases.len())];
        let mut record = MetadataRecord::new().with_label("vendor", vendor).with_label("disease", disease);
        if !scanners.is_empty() {
            let (_, scanner, tesla) = scanners[rng.random_range(0..scanners.len())];
            record = record.with_label("scanner", scanner).with_number("field_strength", *tesla);
        }
        Ok(record)
    }
}

/// One generated case.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `(1, 1, H, W)`.
    pub image: FeatureMap<f32>,
    /// Row-major class indices.
    pub sub_labels: Vec<u8>,
    pub super_label: Mask,
    pub record: MetadataRecord,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.super_label.height()
    }

    pub fn width(&self) -> usize {
        self.super_label.width()
    }
}

fn inside(y: f64, x: f64, cy: f64, cx: f64, ry: f64, rx: f64, angle: f64) -> bool {
    let (s, c) = angle.sin_cos();
    let (dy, dx) = (y - cy, x - cx);
    let u = dx * c + dy * s;
    let v = -dx * s + dy * c;
    (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
}

/// Render the phantom for `record`; deterministic in `(spec.seed, record)`.
pub fn generate_phantom(spec: &PhantomSpec, record: &MetadataRecord) -> Result<Sample> {
    spec.validate()?;
    let vendor = record
        .label("vendor")
        .ok_or_else(|| Error::Generation("record has no vendor".into()))?;
    let disease = record
        .label("disease")
        .ok_or_else(|| Error::Generation("record has no disease".into()))?;
    let offset = *spec
        .vendor_intensity_offsets
        .get(vendor)
        .ok_or_else(|| Error::Generation(format!("unknown vendor `{vendor}`")))?;
    let contrast = spec.vendor_myo_contrast.get(vendor).copied().unwrap_or(0.2);
    let geom = *spec
        .disease_geometry
        .get(disease)
        .ok_or_else(|| Error::Generation(format!("unknown disease `{disease}`")))?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.image_size;
    let k = spec.scale();
    let mid = (n as f64 - 1.0) / 2.0;

    let body = (
        mid + rng.random_range(-2.0..2.0) * k,
        mid + rng.random_range(-2.0..2.0) * k,
        rng.random_range(24.0..28.0) * k,
        rng.random_range(27.0..30.0) * k,
        rng.random_range(-0.3..0.3),
    );
    let cy = mid + rng.random_range(-5.0..5.0) * k;
    let cx = mid + rng.random_range(-5.0..5.0) * k;
    let r = spec.cavity_radius_px * k * geom.chamber_scale;
    let cav_ry = r * rng.random_range(0.9..1.1);
    let cav_rx = r * rng.random_range(0.9..1.1);
    let lv_angle = rng.random_range(0.0..std::f64::consts::PI);
    let wall = geom.wall_thickness_px * k + rng.random_range(-0.3..0.3);
    let epi_ry = cav_ry + wall;
    let epi_rx = cav_rx + wall;
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let rv_r = 8.0 * k * geom.rv_scale;
    let reach = epi_rx.max(epi_ry) + 0.4 * rv_r;
    let (rv_cy, rv_cx) = (cy + reach * theta.sin(), cx + reach * theta.cos());
    let rv_len = rv_r * rng.random_range(1.2..1.5);
    let rv_wid = rv_r * rng.random_range(0.8..1.0);

    let mut blobs = Vec::with_capacity(spec.distractors);
    let heart_extent = reach + rv_len;
    let mut attempts = 0;
    while blobs.len() < spec.distractors && attempts < 200 {
        attempts += 1;
        let by = mid + rng.random_range(-18.0..18.0) * k;
        let bx = mid + rng.random_range(-18.0..18.0) * k;
        let br = rng.random_range(2.0..4.0) * k;
        let clear = ((by - cy).powi(2) + (bx - cx).powi(2)).sqrt() > heart_extent + br + 2.0;
        if clear && inside(by, bx, body.0, body.1, body.2 - br, body.3 - br, body.4) {
            blobs.push((by, bx, br));
        }
    }

    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Generation(e.to_string()))?;
    let mut image = Vec::with_capacity(n * n);
    let mut labels = Vec::with_capacity(n * n);
    for yi in 0..n {
        for xi in 0..n {
            let (y, x) = (yi as f64, xi as f64);
            let mut v = 0.0;
            let mut label = BACKGROUND;
            if inside(y, x, body.0, body.1, body.2, body.3, body.4) {
                v = TISSUE;
            }
            if blobs.iter().any(|(by, bx, br)| (y - by).powi(2) + (x - bx).powi(2) <= br * br) {
                v = LV_BLOOD;
            }
            let in_epi = inside(y, x, cy, cx, epi_ry, epi_rx, lv_angle);
            if !in_epi && inside(y, x, rv_cy, rv_cx, rv_wid, rv_len, theta + std::f64::consts::FRAC_PI_2) {
                v = RV_BLOOD;
                label = RV;
            }
            if in_epi {
                if inside(y, x, cy, cx, cav_ry, cav_rx, lv_angle) {
                    v = LV_BLOOD;
                    label = LV;
                } else {
                    v = TISSUE + contrast;
                    label = MYO;
                }
            }
            image.push((v + offset + noise.sample(&mut rng)) as f32);
            labels.push(label);
        }
    }
    let super_label = Mask::foreground(n, n, &labels)?;
    let image = FeatureMap::new(Tensor::new(vec![1, 1, n, n], image)?, (spec.spacing_mm, spec.spacing_mm))?;
    Ok(Sample {
        image,
        sub_labels: labels,
        super_label,
        record: record.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Parse(format!("unknown split `{other}`"))),
        }
    }
}

/// Case counts per split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    /// 70/10/20 partition of `total`.
    pub fn proportional(total: usize) -> Self {
        let val = total / 10;
        let test = total / 5;
        Self {
            train: total - val - test,
            val,
            test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub case_id: String,
    pub split: Split,
    pub seed: u64,
    pub sample: Sample,
}

/// Generate consecutive seeds `base_seed..base_seed + total`; the first
/// `train` seeds go to training, then validation, then test.
pub fn generate_cases(spec: &PhantomSpec, sizes: SplitSizes, base_seed: u64) -> Result<Vec<Case>> {
    let mut cases = Vec::with_capacity(sizes.total());
    for i in 0..sizes.total() {
        let seed = base_seed.wrapping_add(i as u64);
        let split = if i < sizes.train {
            Split::Train
        } else if i < sizes.train + sizes.val {
            Split::Val
        } else {
            Split::Test
        };
        // records come from a stream separate from the image so that swapping
        // one metadata value leaves everything else in place
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7265_636f_7264);
        let record = spec.sample_record(&mut rng)?;
        let sample = generate_phantom(&PhantomSpec { seed, ..spec.clone() }, &record)?;
        cases.push(Case {
            case_id: format!("case{i:04}"),
            split,
            seed,
            sample,
        });
    }
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(vendor: &str, disease: &str) -> MetadataRecord {
        MetadataRecord::new().with_label("vendor", vendor).with_label("disease", disease)
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = PhantomSpec {
            seed: 42,
            ..PhantomSpec::default()
        };
        let a = generate_phantom(&spec, &record("GE", "HCM")).unwrap();
        let b = generate_phantom(&spec, &record("GE", "HCM")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn vendor_offset_shifts_mean() {
        let spec = PhantomSpec {
            seed: 7,
            ..PhantomSpec::default()
        };
        let a = generate_phantom(&spec, &record("Philips", "NOR")).unwrap();
        let b = generate_phantom(&spec, &record("Siemens", "NOR")).unwrap();
        let (da, db) = (a.image.data().data(), b.image.data().data());
        let mean = da.iter().zip(db).map(|(x, y)| (x - y) as f64).sum::<f64>() / da.len() as f64;
        let bound = 3.0 * spec.noise_sigma / (da.len() as f64).sqrt();
        assert!((mean - 0.3).abs() < bound, "{mean}");
        assert_eq!(a.sub_labels, b.sub_labels);
    }

    #[test]
    fn super_label_is_foreground_union_and_all_classes_present() {
        for seed in 0..20 {
            let spec = PhantomSpec {
                seed,
                ..PhantomSpec::default()
            };
            for d in ["NOR", "DLV", "HCM", "ARR", "FALL", "CIA"] {
                let s = generate_phantom(&spec, &record("Siemens", d)).unwrap();
                for (l, m) in s.sub_labels.iter().zip(s.super_label.data()) {
                    assert_eq!(*l > 0, *m);
                }
                for c in [LV, RV, MYO] {
                    assert!(s.sub_labels.contains(&c), "seed {seed} {d} lacks class {c}");
                }
            }
        }
    }

    #[test]
    fn thicker_walls_give_more_myocardium() {
        let spec = PhantomSpec {
            seed: 3,
            ..PhantomSpec::default()
        };
        let count = |d| {
            let s = generate_phantom(&spec, &record("GE", d)).unwrap();
            s.sub_labels.iter().filter(|l| **l == MYO).count()
        };
        assert!(count("HCM") > count("NOR"));
    }

    #[test]
    fn unknown_codes_fail() {
        let spec = PhantomSpec::default();
        assert!(matches!(
            generate_phantom(&spec, &record("Toshiba", "NOR")),
            Err(Error::Generation(_))
        ));
        assert!(matches!(
            generate_phantom(&spec, &record("GE", "XYZ")),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn splits_use_disjoint_seed_ranges() {
        let cases = generate_cases(&PhantomSpec::default(), SplitSizes::proportional(20), 100).unwrap();
        assert_eq!(cases.len(), 20);
        let seeds = |s: Split| -> Vec<u64> { cases.iter().filter(|c| c.split == s).map(|c| c.seed).collect() };
        let (tr, va, te) = (seeds(Split::Train), seeds(Split::Val), seeds(Split::Test));
        assert_eq!((tr.len(), va.len(), te.len()), (14, 2, 4));
        assert!(tr.iter().max() < va.iter().min() && va.iter().max() < te.iter().min());
    }
}
