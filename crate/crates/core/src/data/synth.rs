//! Synthetic radiograph generator.
//!
//! Each image is a dark field with a bright thorax, two darker elliptical lungs
//! and horizontal rib striping. Pneumonia adds bright focal opacities inside
//! the lungs; COVID-19 adds a textured band along the lung periphery. A small
//! saturated marker in the top-left corner pins every image's range to
//! exactly `[0, 1]`, so the generated rasters are already canonical.

use std::path::Path;

use chrono::{Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::corpus::{write_manifest, Label, LabeledSample, ManifestRow, TrainingCorpus};
use super::image::{encode_png16, encode_png8, CxrImage};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::par::{self, Execution};
use crate::segmenter::LungMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub normal: usize,
    pub covid: usize,
    pub pneumonia: usize,
}

/// Focal opacity parameters; radii are fractions of the image side.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobParams {
    pub count_min: usize,
    pub count_max: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub intensity_min: f64,
    pub intensity_max: f64,
}

/// Peripheral texture parameters. `band_width` is a fraction of the lung's
/// normalized elliptical radius, `frequency` is in cycles per image side.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovidTexture {
    pub band_width: f64,
    pub frequency: f64,
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub counts: ClassCounts,
    pub image_size: usize,
    pub seed: u64,
    pub blobs: BlobParams,
    pub covid: CovidTexture,
    pub noise_std: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            counts: ClassCounts {
                normal: 50,
                covid: 20,
                pneumonia: 20,
            },
            image_size: crate::CANONICAL_SIZE,
            seed: 7,
            blobs: BlobParams {
                count_min: 1,
                count_max: 4,
                radius_min: 0.05,
                radius_max: 0.09,
                intensity_min: 0.45,
                intensity_max: 0.6,
            },
            covid: CovidTexture {
                band_width: 0.35,
                frequency: 12.0,
                amplitude: 0.3,
            },
            noise_std: 0.01,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let b = &self.blobs;
        let c = &self.covid;
        let checks = [
            (self.image_size >= 16, "image_size must be at least 16"),
            (
                b.count_min >= 1 && b.count_min <= b.count_max,
                "blob count range is invalid",
            ),
            (
                b.radius_min > 0.0 && b.radius_min <= b.radius_max && b.radius_max < 0.25,
                "blob radius range is invalid",
            ),
            (
                b.intensity_min >= 0.0 && b.intensity_min <= b.intensity_max,
                "blob intensity range is invalid",
            ),
            (
                c.band_width > 0.0 && c.band_width <= 1.0,
                "band width must be in (0, 1]",
            ),
            (c.frequency > 0.0, "texture frequency must be positive"),
            (c.amplitude >= 0.0, "texture amplitude must be nonnegative"),
            (self.noise_std >= 0.0, "noise_std must be nonnegative"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::InvalidConfig(format!("synthetic spec: {msg}"))),
            None => Ok(()),
        }
    }

    fn labels(&self) -> Vec<Label> {
        let c = &self.counts;
        std::iter::repeat_n(Label::Normal, c.normal)
            .chain(std::iter::repeat_n(Label::Covid, c.covid))
            .chain(std::iter::repeat_n(Label::NonCovidPneumonia, c.pneumonia))
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    /// Normalized elliptical radius: < 1 inside.
    fn rho(&self, y: f64, x: f64) -> f64 {
        (((y - self.cy) / self.ry).powi(2) + ((x - self.cx) / self.rx).powi(2)).sqrt()
    }
}

pub fn generate_synthetic_corpus(spec: &SyntheticSpec) -> Result<TrainingCorpus> {
    generate_synthetic_corpus_with(spec, Execution::default())
}

/// Samples are generated independently from per-index RNG streams, so the
/// result does not depend on `exec`.
pub fn generate_synthetic_corpus_with(spec: &SyntheticSpec, exec: Execution) -> Result<TrainingCorpus> {
    spec.validate()?;
    let labels = spec.labels();
    let samples = par::map(exec, labels.len(), |i| generate_sample(spec, i, labels[i]));
    Ok(TrainingCorpus::new(samples))
}

fn generate_sample(spec: &SyntheticSpec, index: usize, label: Label) -> LabeledSample {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let s = spec.image_size as f64;
    let mut jitter = |scale: f64| rng.random_range(-scale..scale);

    let body = Ellipse {
        cy: 0.55 * s,
        cx: 0.5 * s,
        ry: 0.45 * s,
        rx: 0.44 * s,
    };
    let lungs = [
        Ellipse {
            cy: (0.50 + jitter(0.02)) * s,
            cx: (0.31 + jitter(0.02)) * s,
            ry: (0.29 + jitter(0.02)) * s,
            rx: (0.135 + jitter(0.012)) * s,
        },
        Ellipse {
            cy: (0.50 + jitter(0.02)) * s,
            cx: (0.69 + jitter(0.02)) * s,
            ry: (0.29 + jitter(0.02)) * s,
            rx: (0.135 + jitter(0.012)) * s,
        },
    ];
    let rib_phase = jitter(std::f64::consts::PI);
    let rib_freq = 9.0 + jitter(1.0);

    struct Blob {
        cy: f64,
        cx: f64,
        r: f64,
        amp: f64,
    }
    let mut blobs = Vec::new();
    if label == Label::NonCovidPneumonia {
        let b = &spec.blobs;
        let n = rng.random_range(b.count_min..=b.count_max);
        for _ in 0..n {
            let lung = lungs[rng.random_range(0..2)];
            let t = rng.random_range(0.0..std::f64::consts::TAU);
            let rr = 0.7 * rng.random::<f64>().sqrt();
            blobs.push(Blob {
                cy: lung.cy + rr * lung.ry * t.sin(),
                cx: lung.cx + rr * lung.rx * t.cos(),
                r: rng.random_range(b.radius_min..=b.radius_max) * s,
                amp: rng.random_range(b.intensity_min..=b.intensity_max),
            });
        }
    }
    let phase_u = rng.random_range(0.0..std::f64::consts::TAU);
    let phase_v = rng.random_range(0.0..std::f64::consts::TAU);
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let marker = (spec.image_size / 32).max(2);

    let n = spec.image_size;
    let mut pixels = Vec::with_capacity(n * n);
    let mut mask = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            let ribs = (std::f64::consts::TAU * rib_freq * fy / s + rib_phase).sin();
            let lung_rho = lungs.iter().map(|l| l.rho(fy, fx)).fold(f64::INFINITY, f64::min);
            let in_lung = lung_rho < 1.0;
            let mut v = if in_lung {
                0.25 + 0.04 * ribs
            } else if body.rho(fy, fx) < 1.0 {
                0.55 + 0.05 * ribs
            } else {
                0.0
            };
            if in_lung {
                for b in &blobs {
                    let d = ((fy - b.cy).powi(2) + (fx - b.cx).powi(2)).sqrt();
                    if d < b.r {
                        v += b.amp * 0.5 * (1.0 + (std::f64::consts::PI * d / b.r).cos());
                    }
                }
                if label == Label::Covid {
                    let c = &spec.covid;
                    let w = ((lung_rho - (1.0 - c.band_width)) / c.band_width).clamp(0.0, 1.0);
                    let tex = 0.5
                        * (1.0
                            + (std::f64::consts::TAU * c.frequency * fx / s + phase_u).sin()
                                * (std::f64::consts::TAU * c.frequency * fy / s + phase_v).sin());
                    v += c.amplitude * w * tex;
                }
            }
            if v > 0.0 && spec.noise_std > 0.0 {
                v += noise.sample(&mut rng);
            }
            if y < marker && x < marker {
                v = 1.0;
            }
            pixels.push(v.clamp(0.0, 1.0));
            mask.push(if in_lung { 1.0 } else { 0.0 });
        }
    }

    let source_id = format!("synth-{}-{index:04}", label.as_str());
    let mut image = CxrImage::new(Grid::new(n, n, pixels).expect("square raster"), source_id.clone());
    let (mut onset, mut confirm) = (None, None);
    if label == Label::Covid {
        let base = NaiveDate::from_ymd_opt(2020, 1, 10).expect("valid date");
        let capture = base + Duration::days(rng.random_range(0..40));
        onset = Some(capture - Duration::days(rng.random_range(0..6)));
        confirm = Some(capture + Duration::days(rng.random_range(-2..12)));
        image.capture_date = Some(capture);
    }
    LabeledSample {
        image,
        label,
        partition: label.default_partition(),
        mask: Some(LungMask::from_binary_unchecked(
            Grid::new(n, n, mask).expect("square raster"),
        )),
        case_id: Some(source_id),
        symptom_onset_date: onset,
        rtpcr_confirm_date: confirm,
    }
}

fn date_str(d: Option<NaiveDate>) -> String {
    d.map(|d| d.format("%Y-%m-%d").to_string()).unwrap_or_default()
}

/// Writes images (16-bit PNG), masks (8-bit PNG) and `manifest.csv` under `dir`.
pub fn write_corpus(corpus: &TrainingCorpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut rows = Vec::with_capacity(corpus.len());
    for s in &corpus.samples {
        let id = s.source_id();
        let path = format!("images/{id}.png");
        std::fs::write(dir.join(&path), encode_png16(&s.image.pixels)?)?;
        let mask_path = match &s.mask {
            Some(m) => {
                let p = format!("masks/{id}.png");
                std::fs::write(dir.join(&p), encode_png8(m.grid())?)?;
                Some(p)
            }
            None => None,
        };
        rows.push(ManifestRow {
            source_id: id.to_string(),
            path,
            label: s.label.as_str().to_string(),
            partition: s.partition.as_str().to_string(),
            capture_date: date_str(s.image.capture_date),
            symptom_onset_date: date_str(s.symptom_onset_date),
            rtpcr_confirm_date: date_str(s.rtpcr_confirm_date),
            mask_path,
            case_id: s.case_id.clone(),
        });
    }
    write_manifest(&dir.join("manifest.csv"), &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(counts: (usize, usize, usize)) -> SyntheticSpec {
        SyntheticSpec {
            counts: ClassCounts {
                normal: counts.0,
                covid: counts.1,
                pneumonia: counts.2,
            },
            image_size: 64,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn empty_counts_give_empty_corpus() {
        assert!(generate_synthetic_corpus(&small_spec((0, 0, 0))).unwrap().is_empty());
    }

    #[test]
    fn generation_is_deterministic_and_mode_independent() {
        let spec = small_spec((2, 2, 2));
        let a = generate_synthetic_corpus_with(&spec, Execution::Sequential).unwrap();
        let b = generate_synthetic_corpus_with(&spec, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        let mut other = spec.clone();
        other.seed += 1;
        assert_ne!(a, generate_synthetic_corpus(&other).unwrap());
    }

    #[test]
    fn images_are_canonical_and_masks_valid() {
        let corpus = generate_synthetic_corpus(&small_spec((2, 2, 2))).unwrap();
        for s in &corpus.samples {
            assert_eq!(s.image.pixels.min_max(), (0.0, 1.0));
            let m = s.mask.as_ref().unwrap();
            assert_eq!(m.grid().shape(), s.image.pixels.shape());
            assert!(m.area() > 0);
            let corner = m.grid().get(0, 0);
            assert_eq!(corner, 0.0);
            assert_eq!(s.label.default_partition(), s.partition);
        }
    }

    #[test]
    fn invalid_spec_is_rejected() {
        let mut spec = small_spec((1, 1, 1));
        spec.blobs.count_min = 5;
        assert!(generate_synthetic_corpus(&spec).is_err());
    }
}
