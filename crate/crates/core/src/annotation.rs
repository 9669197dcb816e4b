//! LabelMe-style polygon annotations: parsing with opaque retention of
//! auxiliary fields, layered rasterization to class/instance masks, dataset
//! statistics, and PNG input/output.

use std::collections::BTreeSet;
use std::path::Path;

use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::map::{ClassMap, IGNORE_INDEX};
use crate::tensor::{Shape, Tensor};

/// One polygon with its raw label, parsed `(class, instance)` split, and any
/// auxiliary fields preserved untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct PolygonShape {
    pub points: Vec<(f64, f64)>,
    pub label: String,
    pub class: String,
    pub instance: Option<u32>,
    pub extra: Map<String, Value>,
}

/// Parsed annotation document. `extra` holds top-level fields (fillColor,
/// imageData, flags, lineColor, ...) opaquely; they are re-emitted verbatim.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationDocument {
    pub image_path: String,
    pub shapes: Vec<PolygonShape>,
    pub extra: Map<String, Value>,
}

/// Splits `car-0` into `(car, Some(0))`; labels without an all-digit suffix
/// after the last dash keep the whole string as the class.
pub fn split_label(label: &str) -> (String, Option<u32>) {
    if let Some((class, suffix)) = label.rsplit_once('-') {
        if !suffix.is_empty() && suffix.chars().all(|c| c.is_ascii_digit()) {
            if let Ok(n) = suffix.parse() {
                return (class.to_string(), Some(n));
            }
        }
    }
    (label.to_string(), None)
}

/// Parses a LabelMe-style JSON document. Shapes keep file order; polygons
/// with fewer than three points are rejected naming the shape index.
pub fn parse_annotation(text: &str) -> Result<AnnotationDocument> {
    let root: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        location: format!("line {}, column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    let obj = root.as_object().ok_or_else(|| Error::Parse {
        location: "$".into(),
        message: "document root must be a JSON object".into(),
    })?;

    let shapes_val = obj.get("shapes").ok_or_else(|| Error::Parse {
        location: "$.shapes".into(),
        message: "missing \"shapes\" array".into(),
    })?;
    let shapes_arr = shapes_val.as_array().ok_or_else(|| Error::Parse {
        location: "$.shapes".into(),
        message: "\"shapes\" must be an array".into(),
    })?;

    let mut shapes = Vec::with_capacity(shapes_arr.len());
    for (i, sv) in shapes_arr.iter().enumerate() {
        let so = sv.as_object().ok_or_else(|| Error::Parse {
            location: format!("$.shapes[{i}]"),
            message: "shape must be an object".into(),
        })?;
        let label = so
            .get("label")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Parse {
                location: format!("$.shapes[{i}].label"),
                message: "missing string \"label\"".into(),
            })?
            .to_string();
        let points_val = so.get("points").and_then(Value::as_array).ok_or_else(|| Error::Parse {
            location: format!("$.shapes[{i}].points"),
            message: "missing \"points\" array".into(),
        })?;
        let mut points = Vec::with_capacity(points_val.len());
        for (pi, pv) in points_val.iter().enumerate() {
            let pair = pv.as_array().filter(|a| a.len() == 2).ok_or_else(|| Error::Parse {
                location: format!("$.shapes[{i}].points[{pi}]"),
                message: "point must be a [x, y] pair".into(),
            })?;
            let x = pair[0].as_f64().ok_or_else(|| Error::Parse {
                location: format!("$.shapes[{i}].points[{pi}][0]"),
                message: "x must be a number".into(),
            })?;
            let y = pair[1].as_f64().ok_or_else(|| Error::Parse {
                location: format!("$.shapes[{i}].points[{pi}][1]"),
                message: "y must be a number".into(),
            })?;
            points.push((x, y));
        }
        if points.len() < 3 {
            return Err(Error::Validation(format!(
                "shape {i} (label '{label}') has {} points; a polygon needs at least 3",
                points.len()
            )));
        }
        let (class, instance) = split_label(&label);
        let extra: Map<String, Value> = so
            .iter()
            .filter(|(k, _)| k.as_str() != "label" && k.as_str() != "points")
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        shapes.push(PolygonShape { points, label, class, instance, extra });
    }

    let image_path = obj.get("imagePath").and_then(Value::as_str).unwrap_or_default().to_string();
    let extra: Map<String, Value> = obj
        .iter()
        .filter(|(k, _)| k.as_str() != "shapes" && k.as_str() != "imagePath")
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    Ok(AnnotationDocument { image_path, shapes, extra })
}

impl AnnotationDocument {
    /// Re-emits the document as JSON; parse(serialize(doc)) == doc.
    pub fn to_json(&self) -> Result<String> {
        let mut root = self.extra.clone();
        root.insert(
            "shapes".into(),
            Value::Array(
                self.shapes
                    .iter()
                    .map(|s| {
                        let mut o = s.extra.clone();
                        o.insert(
                            "points".into(),
                            Value::Array(
                                s.points
                                    .iter()
                                    .map(|&(x, y)| Value::Array(vec![x.into(), y.into()]))
                                    .collect(),
                            ),
                        );
                        o.insert("label".into(), Value::String(s.label.clone()));
                        Value::Object(o)
                    })
                    .collect(),
            ),
        );
        root.insert("imagePath".into(), Value::String(self.image_path.clone()));
        Ok(serde_json::to_string_pretty(&Value::Object(root))?)
    }

    /// Class names not present in the table, for reporting.
    pub fn unknown_classes(&self, table: &ClassTable) -> Vec<String> {
        let mut seen = BTreeSet::new();
        for s in &self.shapes {
            if table.id_of(&s.class).is_none() {
                seen.insert(s.class.clone());
            }
        }
        seen.into_iter().collect()
    }
}

/// One class: dense id, paint order rank, countability, display color.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ClassDef {
    pub name: String,
    pub id: u8,
    pub render_rank: u32,
    pub countable: bool,
    pub color: [u8; 3],
}

/// Ordered class set with a designated background id and the reserved ignore
/// id. Render ranks decide which class paints over which.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ClassTable {
    pub classes: Vec<ClassDef>,
    pub background: u8,
    #[serde(default = "default_ignore")]
    pub ignore_id: u8,
}

fn default_ignore() -> u8 {
    IGNORE_INDEX
}

impl ClassTable {
    pub fn validate(&self) -> Result<()> {
        let n = self.classes.len();
        let mut ids: Vec<usize> = self.classes.iter().map(|c| c.id as usize).collect();
        ids.sort_unstable();
        if ids != (0..n).collect::<Vec<_>>() {
            return Err(Error::Validation("class ids must be dense from 0".into()));
        }
        let ranks: BTreeSet<u32> = self.classes.iter().map(|c| c.render_rank).collect();
        if ranks.len() != n {
            return Err(Error::Validation("render ranks must be unique".into()));
        }
        if self.classes.iter().all(|c| c.id != self.background) {
            return Err(Error::Validation(format!(
                "background id {} is not in the table",
                self.background
            )));
        }
        if self.classes.iter().any(|c| c.id == self.ignore_id) {
            return Err(Error::Validation(format!(
                "ignore id {} collides with a class id",
                self.ignore_id
            )));
        }
        Ok(())
    }

    pub fn id_of(&self, class: &str) -> Option<u8> {
        self.classes.iter().find(|c| c.name == class).map(|c| c.id)
    }

    pub fn def_of_id(&self, id: u8) -> Option<&ClassDef> {
        self.classes.iter().find(|c| c.id == id)
    }

    pub fn names(&self) -> Vec<String> {
        let mut by_id = self.classes.clone();
        by_id.sort_by_key(|c| c.id);
        by_id.into_iter().map(|c| c.name).collect()
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let table: ClassTable = serde_json::from_str(text)?;
        table.validate()?;
        Ok(table)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Four-class evaluation table: background, road, car, person.
    pub fn default_eval() -> Self {
        let defs = [
            ("background", false, [90u8, 90, 90]),
            ("road", false, [150, 110, 70]),
            ("car", true, [220, 40, 40]),
            ("person", true, [40, 60, 220]),
        ];
        ClassTable {
            classes: defs
                .iter()
                .enumerate()
                .map(|(i, (name, countable, color))| ClassDef {
                    name: name.to_string(),
                    id: i as u8,
                    render_rank: i as u32,
                    countable: *countable,
                    color: *color,
                })
                .collect(),
            background: 0,
            ignore_id: IGNORE_INDEX,
        }
    }

    /// Full ten-class annotation table. Paint order puts the road over the
    /// background, obstacles over the road, and people last.
    pub fn kamino_full() -> Self {
        let defs = [
            ("background", false, [90u8, 90, 90]),
            ("road", false, [150, 110, 70]),
            ("cone", true, [255, 140, 0]),
            ("bike", true, [0, 200, 200]),
            ("moto", true, [150, 0, 150]),
            ("car", true, [220, 40, 40]),
            ("truck", true, [255, 200, 0]),
            ("bus", true, [0, 120, 255]),
            ("animal", true, [0, 160, 0]),
            ("person", true, [40, 60, 220]),
        ];
        ClassTable {
            classes: defs
                .iter()
                .enumerate()
                .map(|(i, (name, countable, color))| ClassDef {
                    name: name.to_string(),
                    id: i as u8,
                    render_rank: i as u32,
                    countable: *countable,
                    color: *color,
                })
                .collect(),
            background: 0,
            ignore_id: IGNORE_INDEX,
        }
    }
}

/// Class mask plus per-shape instance ids (0 = no instance) for countable
/// classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RenderedMask {
    pub class_map: ClassMap,
    pub instance_map: Vec<u16>,
}

/// Polygon/scanline intersections on the row through center `cy`, under the
/// even-odd rule.
fn scanline_spans(points: &[(f64, f64)], cy: f64) -> Vec<f64> {
    let mut xs = Vec::new();
    let n = points.len();
    for i in 0..n {
        let (x0, y0) = points[i];
        let (x1, y1) = points[(i + 1) % n];
        // Half-open vertical interval avoids double counting at vertices.
        if (y0 <= cy && cy < y1) || (y1 <= cy && cy < y0) {
            xs.push(x0 + (cy - y0) * (x1 - x0) / (y1 - y0));
        }
    }
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs
}

fn fill_polygon(
    points: &[(f64, f64)],
    width: usize,
    height: usize,
    mut paint: impl FnMut(usize, usize),
) {
    for y in 0..height {
        let cy = y as f64 + 0.5;
        let xs = scanline_spans(points, cy);
        for pair in xs.chunks_exact(2) {
            // Pixel center x + 0.5 inside [xa, xb).
            let x_start = (pair[0] - 0.5).ceil().max(0.0) as usize;
            let x_end = ((pair[1] - 0.5).ceil().max(0.0) as usize).min(width);
            for x in x_start..x_end {
                paint(x, y);
            }
        }
    }
}

/// Rasterizes a document: pixels start as the background id, polygons fill
/// in ascending render rank (file order breaks rank ties, later shape wins),
/// so obstacle classes always paint over the road regardless of file order.
/// Shapes of unknown classes are reported via `log::warn` and skipped, as
/// are polygons entirely outside the canvas.
pub fn render_mask(
    doc: &AnnotationDocument,
    table: &ClassTable,
    width: usize,
    height: usize,
) -> Result<RenderedMask> {
    if width == 0 || height == 0 {
        return Err(Error::Dimension(format!("render_mask: canvas {width}x{height}")));
    }
    table.validate()?;

    let mut order: Vec<usize> = (0..doc.shapes.len()).collect();
    order.sort_by_key(|&i| {
        let rank = table
            .classes
            .iter()
            .find(|c| c.name == doc.shapes[i].class)
            .map(|c| c.render_rank)
            .unwrap_or(u32::MAX);
        (rank, i)
    });

    let mut class_map = ClassMap::filled(height, width, table.background);
    let mut instance_map = vec![0u16; height * width];
    let mut next_instance: u16 = 0;

    for &si in &order {
        let shape = &doc.shapes[si];
        let Some(def) = table.classes.iter().find(|c| c.name == shape.class) else {
            log::warn!("shape {si}: unknown class '{}' skipped", shape.class);
            continue;
        };
        let outside = shape.points.iter().all(|&(x, _)| x < 0.0 || x >= width as f64)
            || shape.points.iter().all(|&(_, y)| y < 0.0 || y >= height as f64);
        if outside {
            log::warn!(
                "shape {si} (label '{}') lies entirely outside the {width}x{height} canvas",
                shape.label
            );
            continue;
        }
        let instance_id = if def.countable {
            next_instance += 1;
            next_instance
        } else {
            0
        };
        fill_polygon(&shape.points, width, height, |x, y| {
            class_map.set(y, x, def.id);
            instance_map[y * width + x] = instance_id;
        });
    }
    Ok(RenderedMask { class_map, instance_map })
}

/// Per-class statistics over a document set.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassStats {
    pub name: String,
    /// Mean over images of the per-image pixel fraction, times 100.
    pub pixel_avg_pct: f64,
    /// Distinct instance labels summed across documents; for stuff classes,
    /// the number of images where the class occurs.
    pub instances: u64,
}

pub fn dataset_stats(
    items: &[(AnnotationDocument, ClassMap)],
    table: &ClassTable,
) -> Result<Vec<ClassStats>> {
    if items.is_empty() {
        return Err(Error::Validation("dataset_stats: at least one image required".into()));
    }
    table.validate()?;
    let n_cl = table.len();
    let mut fraction_sums = vec![0.0f64; n_cl];
    let mut instances = vec![0u64; n_cl];

    for (doc, mask) in items {
        let total = (mask.h * mask.w) as f64;
        let mut counts = vec![0u64; n_cl];
        for &v in &mask.data {
            if (v as usize) < n_cl {
                counts[v as usize] += 1;
            }
        }
        for (c, &cnt) in counts.iter().enumerate() {
            fraction_sums[c] += cnt as f64 / total;
        }
        for def in &table.classes {
            let idx = def.id as usize;
            if def.countable {
                let mut labels: BTreeSet<String> = BTreeSet::new();
                let mut unnumbered = 0u64;
                for s in &doc.shapes {
                    if s.class == def.name {
                        match s.instance {
                            Some(k) => {
                                labels.insert(k.to_string());
                            }
                            None => unnumbered += 1,
                        }
                    }
                }
                instances[idx] += labels.len() as u64 + unnumbered;
            } else if counts[idx] > 0 {
                instances[idx] += 1;
            }
        }
    }

    let n_images = items.len() as f64;
    let mut by_id: Vec<&ClassDef> = table.classes.iter().collect();
    by_id.sort_by_key(|c| c.id);
    Ok(by_id
        .into_iter()
        .map(|def| ClassStats {
            name: def.name.clone(),
            pixel_avg_pct: fraction_sums[def.id as usize] / n_images * 100.0,
            instances: instances[def.id as usize],
        })
        .collect())
}

pub fn stats_csv(stats: &[ClassStats]) -> String {
    let mut out = String::from("class,pixel_avg_pct,instances\n");
    for s in stats {
        out.push_str(&format!("{},{:.4},{}\n", s.name, s.pixel_avg_pct, s.instances));
    }
    out
}

// ---------------------------------------------------------------------------
// PNG input/output
// ---------------------------------------------------------------------------

pub fn write_class_mask_png(mask: &ClassMap, path: &Path) -> Result<()> {
    let img = image::GrayImage::from_raw(mask.w as u32, mask.h as u32, mask.data.clone())
        .ok_or_else(|| Error::Validation("mask buffer size mismatch".into()))?;
    img.save(path)?;
    Ok(())
}

pub fn read_class_mask_png(path: &Path) -> Result<ClassMap> {
    let img = image::open(path)?.into_luma8();
    ClassMap::from_vec(img.height() as usize, img.width() as usize, img.into_raw())
}

pub fn write_instance_png(
    instances: &[u16],
    width: usize,
    height: usize,
    path: &Path,
) -> Result<()> {
    let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(
        width as u32,
        height as u32,
        instances.to_vec(),
    )
    .ok_or_else(|| Error::Validation("instance buffer size mismatch".into()))?;
    img.save(path)?;
    Ok(())
}

/// Color visualization of a class mask via the table's color map; the ignore
/// id renders black.
pub fn write_color_png(mask: &ClassMap, table: &ClassTable, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(mask.data.len() * 3);
    for &v in &mask.data {
        let color = table.def_of_id(v).map(|d| d.color).unwrap_or([0, 0, 0]);
        buf.extend_from_slice(&color);
    }
    let img = image::RgbImage::from_raw(mask.w as u32, mask.h as u32, buf)
        .ok_or_else(|| Error::Validation("color buffer size mismatch".into()))?;
    img.save(path)?;
    Ok(())
}

/// Writes a `1x3xHxW` tensor with values in [0, 1] as an RGB PNG.
pub fn write_image_png(image: &Tensor<f32>, path: &Path) -> Result<()> {
    let s = image.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::Dimension(format!("write_image_png: expected 1x3xHxW, got {s}")));
    }
    let mut buf = Vec::with_capacity(s.h * s.w * 3);
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                let v = (image.at(0, c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
                buf.push(v);
            }
        }
    }
    let img = image::RgbImage::from_raw(s.w as u32, s.h as u32, buf)
        .ok_or_else(|| Error::Validation("image buffer size mismatch".into()))?;
    img.save(path)?;
    Ok(())
}

pub fn read_image_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(Shape::new(1, 3, h, w));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            t.set(0, c, y as usize, x as usize, p.0[c] as f32 / 255.0);
        }
    }
    Ok(t)
}
