//! Pointing-game evaluation and monotonicity statistics.
//!
//! For every (image, class) pair the engine sweeps the area grid, the
//! thresholded masks are summed and blurred into a saliency map, and the
//! pair scores a hit when the saliency maximum falls inside an annotated
//! region of that class.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{check_monotonicity, scores_non_decreasing, Attributor};
use crate::error::{Error, Result};
use crate::imageio::{load_image, load_mask};
use crate::models::{load_model, Rect, ScorerModel};
use crate::perturbation::gaussian_blur;
use crate::tensor::Tensor;

/// Default area grid for pointing.
pub const POINTING_AREAS: [f64; 4] = [0.025, 0.05, 0.1, 0.2];

/// Blur of the saliency map, as a fraction of the shorter image side.
pub const SALIENCY_BLUR: f64 = 0.09;

/// One class present in an image.
#[derive(Clone)]
pub struct ClassAnnotation {
    pub class: String,
    /// Union of the class's regions, `[H, W]` with values in `{0, 1}`.
    pub region: Tensor,
    /// Scorer for this class on this image.
    pub model: Arc<dyn ScorerModel>,
}

#[derive(Clone)]
pub struct AnnotatedImage {
    pub id: String,
    pub image: Tensor,
    pub classes: Vec<ClassAnnotation>,
    /// Member of the difficult subset.
    pub difficult: bool,
}

/// Sum of masks blurred with a standard deviation of 9% of the shorter side.
pub fn saliency_from_masks(masks: &[Tensor]) -> Result<Tensor> {
    let first = masks
        .first()
        .ok_or_else(|| Error::invalid("saliency needs at least one mask"))?;
    let (h, w) = match *first.shape() {
        [h, w] => (h, w),
        _ => return Err(Error::invalid(format!("masks must be [H, W], got {:?}", first.shape()))),
    };
    let mut sum = Tensor::zeros(&[h, w]);
    for m in masks {
        if m.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                op: "saliency_from_masks",
                lhs: first.shape().to_vec(),
                rhs: m.shape().to_vec(),
            });
        }
        for (s, v) in sum.data_mut().iter_mut().zip(m.data()) {
            *s += v;
        }
    }
    gaussian_blur(&sum, SALIENCY_BLUR * h.min(w) as f64)
}

/// Whether the saliency maximum (lowest row-major index on ties) lies in `region`.
pub fn pointing_game(saliency: &Tensor, region: &Tensor) -> Result<bool> {
    if saliency.shape() != region.shape() {
        return Err(Error::ShapeMismatch {
            op: "pointing_game",
            lhs: saliency.shape().to_vec(),
            rhs: region.shape().to_vec(),
        });
    }
    Ok(region.data()[saliency.argmax()] > 0.5)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PointingResult {
    pub hits: usize,
    pub misses: usize,
    /// Hits and misses per class.
    pub per_class: BTreeMap<String, (usize, usize)>,
}

impl PointingResult {
    pub fn record(&mut self, class: &str, hit: bool) {
        let e = self.per_class.entry(class.to_string()).or_default();
        if hit {
            self.hits += 1;
            e.0 += 1;
        } else {
            self.misses += 1;
            e.1 += 1;
        }
    }

    /// `hits / (hits + misses)`; zero when nothing was evaluated.
    pub fn accuracy(&self) -> f64 {
        let n = self.hits + self.misses;
        if n == 0 {
            0.0
        } else {
            self.hits as f64 / n as f64
        }
    }

    /// Mean over classes of the per-class accuracy.
    pub fn mean_class_accuracy(&self) -> f64 {
        if self.per_class.is_empty() {
            return 0.0;
        }
        let sum: f64 = self.per_class.values().map(|&(h, m)| h as f64 / (h + m) as f64).sum();
        sum / self.per_class.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PointingEntry {
    pub item: String,
    pub class: String,
    pub hit: bool,
    pub difficult: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ItemFailure {
    pub item: String,
    pub class: String,
    pub message: String,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct PointingReport {
    pub all: PointingResult,
    pub difficult: PointingResult,
    /// One entry per evaluated pair, in dataset order.
    pub log: Vec<PointingEntry>,
    pub failures: Vec<ItemFailure>,
}

impl PointingReport {
    pub fn from_log(log: Vec<PointingEntry>, failures: Vec<ItemFailure>) -> Self {
        let mut all = PointingResult::default();
        let mut difficult = PointingResult::default();
        for e in &log {
            all.record(&e.class, e.hit);
            if e.difficult {
                difficult.record(&e.class, e.hit);
            }
        }
        PointingReport {
            all,
            difficult,
            log,
            failures,
        }
    }

    /// Table-style summary with an "all" and a "difficult" row.
    pub fn summary(&self) -> serde_json::Value {
        let row = |r: &PointingResult| {
            serde_json::json!({
                "hits": r.hits,
                "misses": r.misses,
                "accuracy": r.accuracy(),
                "mean_class_accuracy": r.mean_class_accuracy(),
            })
        };
        serde_json::json!({
            "all": row(&self.all),
            "difficult": row(&self.difficult),
            "failures": self.failures,
        })
    }
}

/// Sweeps every (image, class) pair, builds its saliency map and plays the
/// pointing game. Failed pairs are reported separately, never dropped.
pub fn run_pointing_benchmark(
    dataset: &[AnnotatedImage],
    attributor: &dyn Attributor,
    areas: &[f64],
) -> Result<PointingReport> {
    if dataset.is_empty() {
        return Err(Error::invalid("pointing dataset is empty"));
    }
    let pairs: Vec<(&AnnotatedImage, &ClassAnnotation)> = dataset
        .iter()
        .flat_map(|item| item.classes.iter().map(move |c| (item, c)))
        .collect();
    let outcomes: Vec<Result<bool>> = pairs
        .par_iter()
        .map(|(item, class)| {
            let sweep = attributor.attribute(class.model.as_ref(), &item.image, areas)?;
            let masks: Vec<Tensor> = sweep
                .records
                .iter()
                .map(|r| r.mask.map(|v| if v > 0.5 { 1.0 } else { 0.0 }))
                .collect();
            if masks.is_empty() {
                return Err(Error::invalid("every area of the sweep failed"));
            }
            pointing_game(&saliency_from_masks(&masks)?, &class.region)
        })
        .collect();
    let mut log = Vec::new();
    let mut failures = Vec::new();
    for ((item, class), outcome) in pairs.into_iter().zip(outcomes) {
        match outcome {
            Ok(hit) => log.push(PointingEntry {
                item: item.id.clone(),
                class: class.class.clone(),
                hit,
                difficult: item.difficult,
            }),
            Err(e) => failures.push(ItemFailure {
                item: item.id.clone(),
                class: class.class.clone(),
                message: e.to_string(),
            }),
        }
    }
    Ok(PointingReport::from_log(log, failures))
}

/// Fraction of images whose sweep is monotone below `a*`. When no area
/// reaches the threshold, the whole recorded curve must be monotone.
pub fn monotonicity_rate(
    cases: &[(Arc<dyn ScorerModel>, Tensor)],
    attributor: &dyn Attributor,
    areas: &[f64],
) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::invalid("monotonicity needs at least one image"));
    }
    let monotone = cases
        .par_iter()
        .map(|(model, image)| {
            let r = attributor.attribute(model.as_ref(), image, areas)?;
            Ok(match r.a_star {
                Some(_) => check_monotonicity(&r)?,
                None => scores_non_decreasing(r.records.iter().map(|rec| rec.criterion(r.objective))),
            })
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(monotone.iter().filter(|&&m| m).count() as f64 / monotone.len() as f64)
}

/// Region of one object in a manifest: a rectangle or a mask file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RegionSpec {
    Rect { rect: Rect },
    Mask { mask: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub class: String,
    #[serde(flatten)]
    pub region: RegionSpec,
    /// Scorer for this object's class on this image; overrides the
    /// manifest-wide class model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemSpec {
    pub id: String,
    pub image: PathBuf,
    #[serde(default)]
    pub difficult: bool,
    pub objects: Vec<ObjectSpec>,
}

/// Dataset manifest. Paths are relative to the manifest file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default)]
    pub class_models: BTreeMap<String, PathBuf>,
    pub items: Vec<ItemSpec>,
}

/// Loads a manifest and everything it references. Errors name the item.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<AnnotatedImage>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut cache: HashMap<PathBuf, Arc<dyn ScorerModel>> = HashMap::new();
    let mut model = |p: &Path| -> Result<Arc<dyn ScorerModel>> {
        let full = dir.join(p);
        if let Some(m) = cache.get(&full) {
            return Ok(Arc::clone(m));
        }
        let m: Arc<dyn ScorerModel> = Arc::new(load_model(&full)?);
        cache.insert(full, Arc::clone(&m));
        Ok(m)
    };
    let mut items = Vec::with_capacity(manifest.items.len());
    for spec in &manifest.items {
        let in_item = |e: Error| Error::invalid(format!("item {:?}: {e}", spec.id));
        let image = load_image(dir.join(&spec.image)).map_err(in_item)?;
        let (h, w) = image.spatial().expect("images are [C, H, W]");
        if spec.objects.is_empty() {
            return Err(in_item(Error::invalid("no annotated objects")));
        }
        let mut classes: Vec<ClassAnnotation> = Vec::new();
        for obj in &spec.objects {
            let region = match &obj.region {
                RegionSpec::Rect { rect } => {
                    if !rect.fits(h, w) {
                        return Err(in_item(Error::invalid(format!("region {rect:?} outside {h}x{w}"))));
                    }
                    rect.indicator(h, w)
                }
                RegionSpec::Mask { mask } => {
                    let m = load_mask(dir.join(mask)).map_err(in_item)?;
                    if m.shape() != [h, w] {
                        return Err(in_item(Error::invalid(format!(
                            "region mask {:?} does not match image {h}x{w}",
                            m.shape()
                        ))));
                    }
                    m.map(|v| if v > 0.5 { 1.0 } else { 0.0 })
                }
            };
            let model_path = obj
                .model
                .as_ref()
                .or_else(|| manifest.class_models.get(&obj.class))
                .ok_or_else(|| in_item(Error::invalid(format!("no model for class {:?}", obj.class))))?;
            let m = model(model_path).map_err(in_item)?;
            match classes.iter_mut().find(|c| c.class == obj.class) {
                Some(c) => {
                    for (a, b) in c.region.data_mut().iter_mut().zip(region.data()) {
                        *a = a.max(*b);
                    }
                }
                None => classes.push(ClassAnnotation {
                    class: obj.class.clone(),
                    region,
                    model: m,
                }),
            }
        }
        items.push(AnnotatedImage {
            id: spec.id.clone(),
            image,
            classes,
            difficult: spec.difficult,
        });
    }
    Ok(items)
}
