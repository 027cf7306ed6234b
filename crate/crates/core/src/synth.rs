//! Synthetic instances with known answers: images with planted boxes and
//! a pointing dataset built from them.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::evaluation::{AnnotatedImage, ClassAnnotation, ItemSpec, Manifest, ObjectSpec, RegionSpec};
use crate::models::{planted_region_model, save_model, Rect, SequentialModel};
use crate::tensor::Tensor;

/// Brightness added inside a planted box, on top of `[0, 0.2)` noise.
pub const BOX_CONTRAST: f64 = 0.7;

/// Score multiplier of synthetic region models.
pub const REGION_WEIGHT: f64 = 25.0;

/// Dim noise in every channel with each box brightened.
pub fn planted_image(shape: [usize; 3], boxes: &[Rect], seed: u64) -> Result<Tensor> {
    let [c, h, w] = shape;
    if let Some(b) = boxes.iter().find(|b| !b.fits(h, w)) {
        return Err(Error::invalid(format!("box {b:?} outside {h}x{w}")));
    }
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Tensor::random(&shape, 0.0, 0.2, &mut r);
    let d = x.data_mut();
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                if boxes.iter().any(|b| b.contains(y, xx)) {
                    d[(ch * h + y) * w + xx] += BOX_CONTRAST;
                }
            }
        }
    }
    Ok(x)
}

/// A planted-region model together with an image that lights up its box.
#[derive(Clone, Debug)]
pub struct RegionInstance {
    pub model: SequentialModel,
    pub image: Tensor,
    pub rect: Rect,
}

pub fn region_instance(shape: [usize; 3], rect: Rect, seed: u64) -> Result<RegionInstance> {
    Ok(RegionInstance {
        model: planted_region_model(shape, rect, REGION_WEIGHT)?,
        image: planted_image(shape, &[rect], seed)?,
        rect,
    })
}

/// Box with sides in `[lo, hi]` at a random position inside `h x w`.
pub fn random_box(h: usize, w: usize, lo: usize, hi: usize, r: &mut impl Rng) -> Rect {
    let bh = r.gen_range(lo..=hi.min(h));
    let bw = r.gen_range(lo..=hi.min(w));
    Rect::new(r.gen_range(0..=h - bh), r.gen_range(0..=w - bw), bh, bw)
}

fn disjoint(a: &Rect, b: &Rect) -> bool {
    a.y0 + a.height <= b.y0 || b.y0 + b.height <= a.y0 || a.x0 + a.width <= b.x0 || b.x0 + b.width <= a.x0
}

/// An item with the class and box of each of its objects.
pub type PlantedItem = (AnnotatedImage, Vec<(String, Rect)>);

/// Synthetic pointing items: one or two non-overlapping boxes of distinct
/// classes, each scored by its own planted model. Two-object items form the
/// difficult subset. Boxes keep an eighth of the side away from the border,
/// where masks of unconstrained pixels tend to linger.
pub fn pointing_dataset(items: usize, size: usize, seed: u64) -> Result<Vec<PlantedItem>> {
    if size < 16 {
        return Err(Error::invalid(format!(
            "synthetic images need at least 16 px, got {size}"
        )));
    }
    let classes = ["circle", "square", "star"];
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let shape = [3, size, size];
    (0..items)
        .map(|i| {
            let count = if r.gen_bool(0.5) { 2 } else { 1 };
            let mut boxes: Vec<Rect> = Vec::new();
            while boxes.len() < count {
                let pad = size / 8;
                let inner = random_box(size - 2 * pad, size - 2 * pad, size / 5, size * 2 / 5, &mut r);
                let b = Rect::new(inner.y0 + pad, inner.x0 + pad, inner.height, inner.width);
                if boxes.iter().all(|o| disjoint(o, &b)) {
                    boxes.push(b);
                }
            }
            let first = r.gen_range(0..classes.len());
            let objects: Vec<(String, Rect)> = boxes
                .iter()
                .enumerate()
                .map(|(k, b)| (classes[(first + k) % classes.len()].to_string(), *b))
                .collect();
            let image = planted_image(shape, &boxes, r.gen())?;
            let annotations = objects
                .iter()
                .map(|(class, b)| {
                    Ok(ClassAnnotation {
                        class: class.clone(),
                        region: b.indicator(size, size),
                        model: Arc::new(planted_region_model(shape, *b, REGION_WEIGHT)?),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((
                AnnotatedImage {
                    id: format!("item{i:03}"),
                    image,
                    classes: annotations,
                    difficult: count > 1,
                },
                objects,
            ))
        })
        .collect()
}

/// Writes [`pointing_dataset`] as FT1 images, model files and a manifest.
pub fn write_pointing_dataset(dir: impl AsRef<Path>, items: usize, size: usize, seed: u64) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest::default();
    for (item, objects) in pointing_dataset(items, size, seed)? {
        let image = format!("{}.ft1", item.id);
        item.image.save_ft1(dir.join(&image))?;
        let mut specs = Vec::new();
        for (class, rect) in objects {
            let model = format!("{}.{class}.json", item.id);
            save_model(
                &planted_region_model([3, size, size], rect, REGION_WEIGHT)?,
                dir.join(&model),
            )?;
            specs.push(ObjectSpec {
                class,
                region: RegionSpec::Rect { rect },
                model: Some(model.into()),
            });
        }
        manifest.items.push(ItemSpec {
            id: item.id,
            image: image.into(),
            difficult: item.difficult,
            objects: specs,
        });
    }
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(path, e))
}
