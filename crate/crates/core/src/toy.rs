//! Procedural toy scenes for desk-scale training: a low-contrast curved
//! track band over a same-hue background plus a few obstacle blobs, emitted
//! as image + mask + an equivalent polygon annotation so the parser and
//! rasterizer round-trip.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::Map;

use crate::annotation::{
    self, render_mask, AnnotationDocument, ClassTable, PolygonShape,
};
use crate::error::{Error, Result};
use crate::impair::{derive_seed, value_noise_field};
use crate::map::ClassMap;
use crate::tensor::{Shape, Tensor};
use crate::train::{ConditionTag, LabeledSample};

pub struct ToyDataset {
    pub samples: Vec<LabeledSample>,
    pub docs: Vec<AnnotationDocument>,
}

fn polygon(points: Vec<(f64, f64)>, label: &str) -> PolygonShape {
    let (class, instance) = annotation::split_label(label);
    PolygonShape { points, label: label.to_string(), class, instance, extra: Map::new() }
}

/// Track band outline: top edge left to right, bottom edge right to left.
fn track_polygon(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let wf = w as f64;
    let hf = h as f64;
    let base = rng.gen_range(0.38..0.62) * hf;
    let amp = rng.gen_range(0.06..0.13) * hf;
    let half_width = rng.gen_range(0.14..0.20) * hf;
    let freq = rng.gen_range(0.6..1.4);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let center = |x: f64| base + amp * (std::f64::consts::TAU * freq * x / wf + phase).sin();

    let steps = 16usize;
    let mut points = Vec::with_capacity(2 * (steps + 1));
    for i in 0..=steps {
        let x = i as f64 * wf / steps as f64;
        points.push((x, center(x) - half_width));
    }
    for i in (0..=steps).rev() {
        let x = i as f64 * wf / steps as f64;
        points.push((x, center(x) + half_width));
    }
    points
}

/// Jittered ellipse approximation with `sides` vertices.
fn blob_polygon(
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    sides: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(f64, f64)> {
    (0..sides)
        .map(|i| {
            let a = i as f64 / sides as f64 * std::f64::consts::TAU;
            let jitter = rng.gen_range(0.88..1.12);
            (cx + rx * jitter * a.cos(), cy + ry * jitter * a.sin())
        })
        .collect()
}

/// Base colors per class; the track differs from the background only by a
/// small brightness offset.
fn class_color(name: &str) -> [f32; 3] {
    match name {
        "road" => [0.575, 0.550, 0.515],
        "car" => [0.740, 0.300, 0.240],
        "person" => [0.220, 0.300, 0.740],
        _ => [0.480, 0.460, 0.430],
    }
}

/// Generates `count` seeded scenes. Requires the table to define background,
/// road, car, and person classes.
pub fn generate_toy(
    count: usize,
    width: usize,
    height: usize,
    table: &ClassTable,
    seed: u64,
) -> Result<ToyDataset> {
    if count == 0 {
        return Err(Error::Config("generate_toy: count must be >= 1".into()));
    }
    if width < 32 || height < 24 {
        return Err(Error::Config(format!(
            "generate_toy: canvas {width}x{height} too small for the track band (min 32x24)"
        )));
    }
    table.validate()?;
    for needed in ["background", "road", "car", "person"] {
        if table.id_of(needed).is_none() {
            return Err(Error::Config(format!(
                "generate_toy: class table lacks required class '{needed}'"
            )));
        }
    }

    let mut samples = Vec::with_capacity(count);
    let mut docs = Vec::with_capacity(count);
    for index in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, index as u64));

        let mut shapes = vec![polygon(track_polygon(width, height, &mut rng), "road")];
        let n_obstacles = rng.gen_range(0..=3usize);
        let mut car_count = 0;
        let mut person_count = 0;
        for _ in 0..n_obstacles {
            let cx = rng.gen_range(0.1..0.9) * width as f64;
            // Keep obstacles near the vertical band of the track.
            let cy = rng.gen_range(0.25..0.75) * height as f64;
            if rng.gen_bool(0.5) {
                let rx = rng.gen_range(0.055..0.09) * width as f64;
                let ry = rx * rng.gen_range(0.55..0.75);
                let label = format!("car-{car_count}");
                car_count += 1;
                shapes.push(polygon(blob_polygon(cx, cy, rx, ry, 10, &mut rng), &label));
            } else {
                let rx = rng.gen_range(0.022..0.034) * width as f64;
                let ry = rx * rng.gen_range(2.2..3.0);
                let label = format!("person-{person_count}");
                person_count += 1;
                shapes.push(polygon(blob_polygon(cx, cy, rx, ry, 10, &mut rng), &label));
            }
        }

        let doc = AnnotationDocument {
            image_path: format!("toy_{index:04}.png"),
            shapes,
            extra: Map::new(),
        };
        let mask = render_mask(&doc, table, width, height)?.class_map;

        // Generator contract: both the track and the background are visible.
        let road_id = table.id_of("road").unwrap();
        let road_px = mask.data.iter().filter(|&&v| v == road_id).count();
        let bg_px = mask.data.iter().filter(|&&v| v == table.background).count();
        if road_px == 0 || bg_px == 0 {
            return Err(Error::Validation(format!(
                "generate_toy: scene {index} lost a mandatory region (road {road_px}, background {bg_px})"
            )));
        }

        samples.push(LabeledSample {
            image: synthesize_image(&mask, table, width, height, &mut rng),
            mask,
            condition: ConditionTag::Synthetic,
        });
        docs.push(doc);
    }
    Ok(ToyDataset { samples, docs })
}

fn synthesize_image(
    mask: &ClassMap,
    table: &ClassTable,
    width: usize,
    height: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor<f32> {
    let texture = value_noise_field(height, width, rng);
    let grain = Normal::new(0.0f64, 0.025).expect("positive sigma");
    let mut image = Tensor::zeros(Shape::new(1, 3, height, width));
    for y in 0..height {
        for x in 0..width {
            let name = table
                .def_of_id(mask.at(y, x))
                .map(|d| d.name.as_str())
                .unwrap_or("background");
            let base = class_color(name);
            let tex = (texture[y * width + x] - 0.5) as f32 * 0.08;
            for c in 0..3 {
                let v = base[c] + tex + grain.sample(rng) as f32;
                image.set(0, c, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
    image
}

/// Writes a dataset directory: `images/`, `masks/`, `annotations/`, and
/// `classes.json`.
pub fn save_dataset(dir: &Path, dataset: &ToyDataset, table: &ClassTable) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    std::fs::create_dir_all(dir.join("annotations"))?;
    std::fs::write(dir.join("classes.json"), table.to_json()?)?;
    for (i, (sample, doc)) in dataset.samples.iter().zip(&dataset.docs).enumerate() {
        let stem = format!("toy_{i:04}");
        annotation::write_image_png(&sample.image, &dir.join("images").join(format!("{stem}.png")))?;
        annotation::write_class_mask_png(
            &sample.mask,
            &dir.join("masks").join(format!("{stem}.png")),
        )?;
        std::fs::write(
            dir.join("annotations").join(format!("{stem}.json")),
            doc.to_json()?,
        )?;
    }
    Ok(())
}

/// Reads a dataset directory written by [`save_dataset`] (annotations are
/// optional). Samples are ordered by file name.
pub fn load_dataset(dir: &Path) -> Result<(Vec<LabeledSample>, ClassTable)> {
    let table = ClassTable::from_json(&std::fs::read_to_string(dir.join("classes.json"))?)?;
    let mut stems: Vec<String> = std::fs::read_dir(dir.join("images"))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().to_string();
            name.strip_suffix(".png").map(|s| s.to_string())
        })
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(Error::Validation(format!("no images under {}", dir.display())));
    }
    let mut samples = Vec::with_capacity(stems.len());
    for stem in &stems {
        let image = annotation::read_image_png(&dir.join("images").join(format!("{stem}.png")))?;
        let mask =
            annotation::read_class_mask_png(&dir.join("masks").join(format!("{stem}.png")))?;
        samples.push(LabeledSample { image, mask, condition: ConditionTag::Synthetic });
    }
    Ok((samples, table))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_seed_reproduces_bitwise() {
        let table = ClassTable::default_eval();
        let a = generate_toy(3, 64, 48, &table, 7).unwrap();
        let b = generate_toy(3, 64, 48, &table, 7).unwrap();
        for (sa, sb) in a.samples.iter().zip(&b.samples) {
            assert_eq!(sa.image.data(), sb.image.data());
            assert_eq!(sa.mask, sb.mask);
        }
        assert_eq!(a.docs.len(), b.docs.len());
        for (da, db) in a.docs.iter().zip(&b.docs) {
            assert_eq!(da, db);
        }
    }

    #[test]
    fn every_mask_has_road_and_background() {
        let table = ClassTable::default_eval();
        let ds = generate_toy(12, 96, 64, &table, 123).unwrap();
        let road = table.id_of("road").unwrap();
        for s in &ds.samples {
            assert!(s.mask.data.iter().any(|&v| v == road));
            assert!(s.mask.data.iter().any(|&v| v == table.background));
        }
    }

    #[test]
    fn annotations_roundtrip_through_parser_and_renderer() {
        let table = ClassTable::default_eval();
        let ds = generate_toy(6, 96, 64, &table, 55).unwrap();
        for (doc, sample) in ds.docs.iter().zip(&ds.samples) {
            let reparsed = annotation::parse_annotation(&doc.to_json().unwrap()).unwrap();
            let rendered = render_mask(&reparsed, &table, 96, 64).unwrap().class_map;
            let agree = rendered
                .data
                .iter()
                .zip(&sample.mask.data)
                .filter(|(a, b)| a == b)
                .count();
            let frac = agree as f64 / rendered.data.len() as f64;
            assert!(frac >= 0.99, "round-trip agreement {frac}");
        }
    }

    #[test]
    fn tiny_canvas_is_config_error() {
        let table = ClassTable::default_eval();
        assert!(matches!(generate_toy(1, 8, 8, &table, 0), Err(Error::Config(_))));
    }
}
