//! Synthetic visibility impairments (additive Gaussian noise, a smooth fog
//! veil) with controllable severity, plus the condition-mix and severity
//! sweep protocols that chart accuracy degradation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{argmax_maps, NetworkGraph};
use crate::map::ClassMap;
use crate::metrics::ConfusionMatrix;
use crate::tensor::Tensor;
use crate::train::LabeledSample;

/// Maximum noise severity on the sweep scale: sigma reaches a quarter of the
/// dynamic range.
pub const NOISE_SEVERITY_MAX: f64 = 0.25;

/// Brightness of the fog veil, near-white on the [0, 1] range.
pub const FOG_VEIL: f32 = 0.92;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImpairmentKind {
    Fog,
    GaussianNoise,
}

impl std::str::FromStr for ImpairmentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fog" => Ok(ImpairmentKind::Fog),
            "noise" | "gaussian_noise" => Ok(ImpairmentKind::GaussianNoise),
            other => Err(Error::Config(format!("unknown impairment kind '{other}'"))),
        }
    }
}

/// One impairment request: kind, severity, seed.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ImpairmentSpec {
    pub kind: ImpairmentKind,
    pub severity: f64,
    pub seed: u64,
}

pub(crate) fn derive_seed(base: u64, index: u64) -> u64 {
    base.wrapping_add((index.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Seeded smooth low-frequency field in [0, 1]: two octaves of bilinear value
/// noise, min-max normalized so the field attains 0 and 1 exactly.
pub(crate) fn value_noise_field(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut field = vec![0.0f64; h * w];
    let mut amplitude = 1.0;
    for cells in [4usize, 8] {
        let gh = cells + 1;
        let gw = cells + 1;
        let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.gen_range(0.0..1.0)).collect();
        for y in 0..h {
            let fy = y as f64 / h.max(1) as f64 * cells as f64;
            let y0 = (fy.floor() as usize).min(cells - 1);
            let ty = fy - y0 as f64;
            for x in 0..w {
                let fx = x as f64 / w.max(1) as f64 * cells as f64;
                let x0 = (fx.floor() as usize).min(cells - 1);
                let tx = fx - x0 as f64;
                let v00 = lattice[y0 * gw + x0];
                let v01 = lattice[y0 * gw + x0 + 1];
                let v10 = lattice[(y0 + 1) * gw + x0];
                let v11 = lattice[(y0 + 1) * gw + x0 + 1];
                let top = v00 + (v01 - v00) * tx;
                let bot = v10 + (v11 - v10) * tx;
                field[y * w + x] += amplitude * (top + (bot - top) * ty);
            }
        }
        amplitude *= 0.5;
    }
    let min = field.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (max - min).max(f64::MIN_POSITIVE);
    field.iter_mut().for_each(|v| *v = (*v - min) / span);
    field
}

/// Additive Gaussian noise, sigma = severity times the dynamic range, output
/// clamped to [0, 1]. Severity 0 is an exact identity; equal seeds give
/// bitwise-equal outputs.
pub fn apply_noise(image: &Tensor<f32>, severity: f64, seed: u64) -> Result<Tensor<f32>> {
    if !(0.0..=NOISE_SEVERITY_MAX).contains(&severity) {
        return Err(Error::Config(format!(
            "noise severity {severity} outside [0, {NOISE_SEVERITY_MAX}]"
        )));
    }
    if severity == 0.0 {
        return Ok(image.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, severity).expect("positive sigma");
    let mut out = image.clone();
    for v in out.data_mut() {
        *v = (*v + normal.sample(&mut rng) as f32).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Fog veil: `out = t * in + (1 - t) * veil` with `t = 1 - severity * f`,
/// `f` a seeded smooth field in [0, 1]. At severity 1 the pixel where f = 1
/// becomes exactly the veil color. Severity 0 is an exact identity.
pub fn apply_fog(image: &Tensor<f32>, severity: f64, seed: u64) -> Result<Tensor<f32>> {
    if !(0.0..=1.0).contains(&severity) {
        return Err(Error::Config(format!("fog severity {severity} outside [0, 1]")));
    }
    if severity == 0.0 {
        return Ok(image.clone());
    }
    let s = image.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let field = value_noise_field(s.h, s.w, &mut rng);
    let mut out = image.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    let t = (1.0 - severity * field[y * s.w + x]) as f32;
                    let v = t * image.at(n, c, y, x) + (1.0 - t) * FOG_VEIL;
                    out.set(n, c, y, x, v);
                }
            }
        }
    }
    Ok(out)
}

/// Anything that maps an image to a per-pixel class map.
pub trait Predictor {
    fn predict_map(&self, image: &Tensor<f32>) -> Result<ClassMap>;
    fn class_count(&self) -> usize;
}

impl Predictor for NetworkGraph<f32> {
    fn predict_map(&self, image: &Tensor<f32>) -> Result<ClassMap> {
        let logits = self.forward(image)?;
        Ok(argmax_maps(&logits).remove(0))
    }
    fn class_count(&self) -> usize {
        self.num_classes()
    }
}

/// One sweep row: x is the mix fraction or severity.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub x: f64,
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepMeta {
    pub arrangement: String,
    pub protocol: String,
    pub clean_set: String,
    pub adverse_set: String,
    pub seed: u64,
    pub steps: usize,
}

/// Degradation curve: ordered rows (first row at x = 0) plus run metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub meta: SweepMeta,
    pub class_names: Vec<String>,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,miou");
        for name in &self.class_names {
            out.push_str(&format!(",iou_{name}"));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("{:.6},{:.6}", row.x, row.miou));
            for v in &row.per_class_iou {
                match v {
                    Some(v) => out.push_str(&format!(",{v:.6}")),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Two-column data file (x, mIoU) for gnuplot.
    pub fn to_gnuplot(&self) -> String {
        let mut out = format!(
            "# {} {} (seed {})\n# x miou\n",
            self.meta.arrangement, self.meta.protocol, self.meta.seed
        );
        for row in &self.rows {
            out.push_str(&format!("{:.6} {:.6}\n", row.x, row.miou));
        }
        out
    }
}

fn evaluate_set(
    model: &dyn Predictor,
    samples: &[(&LabeledSample, Option<Tensor<f32>>)],
    class_names: &[String],
) -> Result<SweepRow> {
    let mut cm = ConfusionMatrix::new(class_names, Some(crate::map::IGNORE_INDEX));
    for (sample, replacement) in samples {
        let pred = match replacement {
            Some(img) => model.predict_map(img)?,
            None => model.predict_map(&sample.image)?,
        };
        cm.accumulate(&sample.mask, &pred)?;
    }
    let per_class =
        (0..class_names.len()).map(|i| cm.iou_f64(i)).collect::<Result<Vec<_>>>()?;
    Ok(SweepRow { x: 0.0, miou: cm.mean_iou_f64()?, per_class_iou: per_class })
}

/// Evaluates sets that transition incrementally from clean to adverse
/// imagery: fraction f of the set comes from the adverse pool,
/// `ceil((1-f) * set_size)` from the clean pool, drawn seeded without
/// replacement and re-drawn per fraction.
#[allow(clippy::too_many_arguments)]
pub fn condition_mix_sweep(
    model: &dyn Predictor,
    clean: &[LabeledSample],
    adverse: &[LabeledSample],
    steps: usize,
    set_size: usize,
    seed: u64,
    class_names: &[String],
    meta_labels: (&str, &str, &str),
) -> Result<SweepReport> {
    if steps < 2 {
        return Err(Error::Config(format!("condition_mix_sweep: steps {steps} < 2")));
    }
    if clean.is_empty() || adverse.is_empty() {
        return Err(Error::Config("condition_mix_sweep: both pools must be non-empty".into()));
    }
    if set_size > clean.len() || set_size > adverse.len() {
        return Err(Error::Config(format!(
            "condition_mix_sweep: set_size {set_size} exceeds a pool ({} clean, {} adverse) at an extreme fraction",
            clean.len(),
            adverse.len()
        )));
    }
    let mut rows = Vec::with_capacity(steps);
    for k in 0..steps {
        let f = k as f64 / (steps - 1) as f64;
        let clean_count = ((1.0 - f) * set_size as f64).ceil() as usize;
        let adverse_count = set_size - clean_count;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, k as u64));
        let picks_clean = rand::seq::index::sample(&mut rng, clean.len(), clean_count);
        let picks_adverse = rand::seq::index::sample(&mut rng, adverse.len(), adverse_count);
        let set: Vec<(&LabeledSample, Option<Tensor<f32>>)> = picks_clean
            .iter()
            .map(|i| (&clean[i], None))
            .chain(picks_adverse.iter().map(|i| (&adverse[i], None)))
            .collect();
        let mut row = evaluate_set(model, &set, class_names)?;
        row.x = f;
        rows.push(row);
    }
    Ok(SweepReport {
        meta: SweepMeta {
            arrangement: meta_labels.0.to_string(),
            protocol: "condition_mix".to_string(),
            clean_set: meta_labels.1.to_string(),
            adverse_set: meta_labels.2.to_string(),
            seed,
            steps,
        },
        class_names: class_names.to_vec(),
        rows,
    })
}

/// Severity sweep. Noise mode applies severity `s` to every image per step;
/// fog mode replaces an increasing fraction of images with fully-fogged
/// versions (severity fixed at 1 for replaced images).
#[allow(clippy::too_many_arguments)]
pub fn severity_sweep(
    model: &dyn Predictor,
    eval_set: &[LabeledSample],
    kind: ImpairmentKind,
    steps: usize,
    max_severity: f64,
    seed: u64,
    class_names: &[String],
    arrangement: &str,
) -> Result<SweepReport> {
    if steps < 2 {
        return Err(Error::Config(format!("severity_sweep: steps {steps} < 2")));
    }
    if eval_set.is_empty() {
        return Err(Error::Config("severity_sweep: empty evaluation set".into()));
    }
    let mut rows = Vec::with_capacity(steps);
    for k in 0..steps {
        let frac = k as f64 / (steps - 1) as f64;
        let x = frac * max_severity;
        let set: Vec<(&LabeledSample, Option<Tensor<f32>>)> = match kind {
            ImpairmentKind::GaussianNoise => eval_set
                .iter()
                .enumerate()
                .map(|(i, s)| -> Result<_> {
                    let img = if x > 0.0 {
                        Some(apply_noise(
                            &s.image,
                            x,
                            derive_seed(derive_seed(seed, k as u64), i as u64),
                        )?)
                    } else {
                        None
                    };
                    Ok((s, img))
                })
                .collect::<Result<Vec<_>>>()?,
            ImpairmentKind::Fog => {
                let count = (frac * eval_set.len() as f64).round() as usize;
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, k as u64));
                let picks: std::collections::BTreeSet<usize> =
                    rand::seq::index::sample(&mut rng, eval_set.len(), count)
                        .iter()
                        .collect();
                eval_set
                    .iter()
                    .enumerate()
                    .map(|(i, s)| -> Result<_> {
                        let img = if picks.contains(&i) {
                            Some(apply_fog(
                                &s.image,
                                1.0,
                                derive_seed(derive_seed(seed, k as u64), i as u64),
                            )?)
                        } else {
                            None
                        };
                        Ok((s, img))
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };
        let mut row = evaluate_set(model, &set, class_names)?;
        row.x = if kind == ImpairmentKind::Fog { frac } else { x };
        rows.push(row);
    }
    Ok(SweepReport {
        meta: SweepMeta {
            arrangement: arrangement.to_string(),
            protocol: match kind {
                ImpairmentKind::Fog => "severity_fog".to_string(),
                ImpairmentKind::GaussianNoise => "severity_noise".to_string(),
            },
            clean_set: "eval".to_string(),
            adverse_set: "synthetic".to_string(),
            seed,
            steps,
        },
        class_names: class_names.to_vec(),
        rows,
    })
}

/// mIoU drop per condition, in percentage points: first row minus last row.
pub fn degradation_table(reports: &[SweepReport]) -> Result<Vec<(String, f64)>> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Validation("degradation_table: no reports".into()))?;
    let mut out = Vec::with_capacity(reports.len());
    for r in reports {
        if r.meta.arrangement != first.meta.arrangement {
            return Err(Error::Validation(format!(
                "degradation_table: arrangement {} differs from {}",
                r.meta.arrangement, first.meta.arrangement
            )));
        }
        if r.rows.len() < 2 {
            return Err(Error::Validation(format!(
                "degradation_table: report '{}' lacks extreme rows",
                r.meta.protocol
            )));
        }
        if r.rows[0].x != 0.0 {
            return Err(Error::Validation(format!(
                "degradation_table: report '{}' does not start at x = 0",
                r.meta.protocol
            )));
        }
        let drop = (r.rows[0].miou - r.rows.last().unwrap().miou) * 100.0;
        out.push((r.meta.protocol.clone(), drop));
    }
    Ok(out)
}

pub fn degradation_csv(table: &[(String, f64)]) -> String {
    let mut out = String::from("condition,miou_drop_pp\n");
    for (name, drop) in table {
        out.push_str(&format!("{name},{drop:.2}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn mid_gray(h: usize, w: usize) -> Tensor<f32> {
        Tensor::filled(Shape::new(1, 3, h, w), 0.5)
    }

    #[test]
    fn zero_severity_is_exact_identity() {
        let img = mid_gray(8, 8);
        assert_eq!(apply_noise(&img, 0.0, 7).unwrap(), img);
        assert_eq!(apply_fog(&img, 0.0, 7).unwrap(), img);
    }

    #[test]
    fn equal_seeds_are_bitwise_equal() {
        let img = mid_gray(16, 16);
        assert_eq!(
            apply_noise(&img, 0.1, 42).unwrap().data(),
            apply_noise(&img, 0.1, 42).unwrap().data()
        );
        assert_eq!(
            apply_fog(&img, 0.7, 42).unwrap().data(),
            apply_fog(&img, 0.7, 42).unwrap().data()
        );
    }

    #[test]
    fn noise_sample_std_tracks_severity() {
        let img = mid_gray(256, 256);
        let out = apply_noise(&img, 0.1, 3).unwrap();
        let diffs: Vec<f64> =
            out.data().iter().zip(img.data()).map(|(a, b)| (a - b) as f64).collect();
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let var =
            diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (diffs.len() - 1) as f64;
        let std = var.sqrt();
        assert!((std - 0.1).abs() / 0.1 < 0.05, "sample std {std}");
    }

    #[test]
    fn severity_out_of_range_rejected() {
        let img = mid_gray(4, 4);
        assert!(apply_noise(&img, 0.3, 0).is_err());
        assert!(apply_fog(&img, 1.5, 0).is_err());
    }

    #[test]
    fn full_fog_reaches_pure_veil_at_field_max() {
        let img = Tensor::filled(Shape::new(1, 3, 32, 32), 0.1);
        let s = img.shape();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let field = value_noise_field(s.h, s.w, &mut rng);
        let out = apply_fog(&img, 1.0, 9).unwrap();
        let argmax = field
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let (y, x) = (argmax / s.w, argmax % s.w);
        assert_eq!(field[argmax], 1.0);
        for c in 0..3 {
            assert_eq!(out.at(0, c, y, x), FOG_VEIL);
        }
    }

    #[test]
    fn fog_deviation_is_monotone_in_severity() {
        let mut img = mid_gray(32, 32);
        // Textured test image.
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = 0.2 + 0.5 * ((i % 17) as f32 / 17.0);
        }
        let mut last = -1.0f64;
        for severity in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let out = apply_fog(&img, severity, 5).unwrap();
            let mad = out
                .data()
                .iter()
                .zip(img.data())
                .map(|(a, b)| (a - b).abs() as f64)
                .sum::<f64>()
                / img.data().len() as f64;
            assert!(mad >= last, "mad {mad} decreased at severity {severity}");
            last = mad;
        }
    }

    #[test]
    fn impairments_preserve_shape_and_range() {
        let img = mid_gray(16, 16);
        for out in [apply_noise(&img, 0.25, 1).unwrap(), apply_fog(&img, 1.0, 1).unwrap()] {
            assert_eq!(out.shape(), img.shape());
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn degradation_drop_arithmetic() {
        let make = |a: f64, b: f64| SweepReport {
            meta: SweepMeta {
                arrangement: "CM0".into(),
                protocol: "p".into(),
                clean_set: "c".into(),
                adverse_set: "a".into(),
                seed: 0,
                steps: 2,
            },
            class_names: vec![],
            rows: vec![
                SweepRow { x: 0.0, miou: a, per_class_iou: vec![] },
                SweepRow { x: 1.0, miou: b, per_class_iou: vec![] },
            ],
        };
        let t = degradation_table(&[make(0.85, 0.85)]).unwrap();
        assert_eq!(t[0].1, 0.0);
        let t = degradation_table(&[make(0.85, 0.75)]).unwrap();
        assert!((t[0].1 - 10.0).abs() < 1e-9);
        // Endpoints from the worked 4-pixel metric case vs a perfect set.
        let t = degradation_table(&[make(1.0, 7.0 / 12.0)]).unwrap();
        assert!((t[0].1 - (1.0 - 7.0 / 12.0) * 100.0).abs() < 1e-9);
    }
}
