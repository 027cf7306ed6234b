//! Local perturbation operators and mask-dosed perturbation through a pyramid.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{CustomOp, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationKind {
    #[default]
    GaussianBlur,
    FadeToBlack,
}

pub const DEFAULT_LEVELS: usize = 8;

/// Maximum blur for an `h x w` image: 9% of the shorter side, at least 2 px.
pub fn default_sigma_max(h: usize, w: usize) -> f64 {
    (0.09 * h.min(w) as f64).max(2.0)
}

/// Unnormalised Gaussian `exp(-d^2 / 2 sigma^2)` sampled at offsets `-r..=r`.
fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// Normalised 1-D correlation along one axis of a row-major plane stack.
/// Taps falling outside the lattice are dropped and the remaining weights
/// renormalised, matching the per-pixel denominator of the blur.
fn blur_axis(data: &[f64], planes: usize, h: usize, w: usize, taps: &[f64], along_rows: bool) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut out = vec![0.0; data.len()];
    let (len, stride_outer, stride_inner) = if along_rows { (h, 1, w) } else { (w, w, 1) };
    let lines = if along_rows { w } else { h };
    for p in 0..planes {
        let base = p * h * w;
        for line in 0..lines {
            let start = base + line * stride_outer;
            for u in 0..len as isize {
                let (mut num, mut den) = (0.0, 0.0);
                for (k, &t) in taps.iter().enumerate() {
                    let v = u + k as isize - r;
                    if v < 0 || v >= len as isize {
                        continue;
                    }
                    num += t * data[start + v as usize * stride_inner];
                    den += t;
                }
                out[start + u as usize * stride_inner] = num / den;
            }
        }
    }
    out
}

/// Normalised Gaussian blur of a `[H, W]` or `[C, H, W]` image.
///
/// `out(u) = sum_v g(u - v) x(v) / sum_v g(u - v)` with the sums restricted
/// to the image and to `|u - v| <= ceil(3 sigma)` per axis. The Gaussian is
/// separable and so is the renormalising denominator.
pub fn gaussian_blur(image: &Tensor, sigma: f64) -> Result<Tensor> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("blur sigma must be >= 0, got {sigma}")));
    }
    let (h, w) = image
        .spatial()
        .ok_or_else(|| Error::invalid("blur needs an image of rank >= 2"))?;
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let planes = image.numel() / (h * w);
    let taps = gaussian_taps(sigma);
    let rows = blur_axis(image.data(), planes, h, w, &taps, true);
    let both = blur_axis(&rows, planes, h, w, &taps, false);
    Ok(Tensor::from_parts(image.shape().to_vec(), both))
}

/// Fade-to-black: uniform scaling by `1 - sigma`.
pub fn fade_to_black(image: &Tensor, sigma: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::invalid(format!("fade sigma must lie in [0, 1], got {sigma}")));
    }
    Ok(image.map(|v| (1.0 - sigma) * v))
}

pub fn perturb(image: &Tensor, sigma: f64, kind: PerturbationKind) -> Result<Tensor> {
    match kind {
        PerturbationKind::GaussianBlur => gaussian_blur(image, sigma),
        PerturbationKind::FadeToBlack => fade_to_black(image, sigma),
    }
}

/// `L + 1` progressively perturbed copies of one image; level `l` has
/// intensity `sigma_max * l / L` and level 0 is the image itself.
#[derive(Clone, Debug)]
pub struct PerturbationPyramid {
    levels: Arc<Vec<Tensor>>,
    sigma_max: f64,
    kind: PerturbationKind,
}

impl PerturbationPyramid {
    pub fn build(image: &Tensor, sigma_max: f64, levels: usize, kind: PerturbationKind) -> Result<Self> {
        if levels == 0 {
            return Err(Error::invalid("pyramid needs at least one perturbed level"));
        }
        if !(sigma_max > 0.0) || !sigma_max.is_finite() {
            return Err(Error::invalid(format!("sigma_max must be > 0, got {sigma_max}")));
        }
        if image.spatial().is_none() {
            return Err(Error::invalid("pyramid needs an image of rank >= 2"));
        }
        let stack = (0..=levels)
            .map(|l| {
                if l == 0 {
                    Ok(image.clone())
                } else {
                    perturb(image, sigma_max * l as f64 / levels as f64, kind)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PerturbationPyramid {
            levels: Arc::new(stack),
            sigma_max,
            kind,
        })
    }

    pub fn levels(&self) -> &[Tensor] {
        &self.levels
    }

    /// Number of perturbed levels `L` (the stack holds `L + 1`).
    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    pub fn kind(&self) -> PerturbationKind {
        self.kind
    }

    pub fn image(&self) -> &Tensor {
        &self.levels[0]
    }

    fn check_mask(&self, mask: &Tensor) -> Result<()> {
        let (h, w) = self.image().spatial().expect("validated at build");
        if mask.shape() != [h, w] {
            return Err(Error::ShapeMismatch {
                op: "apply_mask",
                lhs: self.image().shape().to_vec(),
                rhs: mask.shape().to_vec(),
            });
        }
        const SLACK: f64 = 1e-9;
        if mask.data().iter().any(|&m| !(-SLACK..=1.0 + SLACK).contains(&m)) {
            return Err(Error::invalid("mask values must lie in [0, 1]"));
        }
        Ok(())
    }

    /// `(m (x) x)(u)`: reads the pyramid at continuous level `(1 - m(u)) L`,
    /// interpolating linearly between the two bracketing levels.
    pub fn apply_tensor(&self, mask: &Tensor) -> Result<Tensor> {
        self.check_mask(mask)?;
        Ok(self.interpolate(mask))
    }

    /// Graph version of [`apply_tensor`](Self::apply_tensor), differentiable in the mask.
    pub fn apply(&self, g: &mut Graph, mask: Var) -> Result<Var> {
        let value = g.value(mask);
        self.check_mask(value)?;
        let out = self.interpolate(value);
        // the lookup has a kink at every level boundary
        let l_max = self.depth();
        let cells: Vec<u64> = value.data().iter().map(|&m| cell(m, l_max).0 as u64).collect();
        g.note_branch(cells);
        g.custom(
            &[mask],
            out,
            Arc::new(PyramidLookup {
                levels: Arc::clone(&self.levels),
            }),
        )
    }

    fn interpolate(&self, mask: &Tensor) -> Tensor {
        let first = self.image();
        let plane = mask.numel();
        let planes = first.numel() / plane;
        let l_max = self.depth();
        let mut out = vec![0.0; first.numel()];
        for (u, &m) in mask.data().iter().enumerate() {
            let (lo, t) = cell(m, l_max);
            let (a, b) = (self.levels[lo].data(), self.levels[lo + 1].data());
            for c in 0..planes {
                let i = c * plane + u;
                out[i] = (1.0 - t) * a[i] + t * b[i];
            }
        }
        Tensor::from_parts(first.shape().to_vec(), out)
    }
}

/// Lower level index and interpolation weight for mask value `m`.
#[inline]
fn cell(m: f64, l_max: usize) -> (usize, f64) {
    let level = (1.0 - m.clamp(0.0, 1.0)) * l_max as f64;
    let lo = (level.floor() as usize).min(l_max - 1);
    (lo, level - lo as f64)
}

struct PyramidLookup {
    levels: Arc<Vec<Tensor>>,
}

impl CustomOp for PyramidLookup {
    fn name(&self) -> &'static str {
        "apply_mask"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let mask = inputs[0];
        let plane = mask.numel();
        let planes = grad.numel() / plane;
        let l_max = self.levels.len() - 1;
        let gd = grad.data();
        let dm = mask
            .data()
            .iter()
            .enumerate()
            .map(|(u, &m)| {
                let (lo, _) = cell(m, l_max);
                let (a, b) = (self.levels[lo].data(), self.levels[lo + 1].data());
                (0..planes)
                    .map(|c| {
                        let i = c * plane + u;
                        -(l_max as f64) * (b[i] - a[i]) * gd[i]
                    })
                    .sum()
            })
            .collect();
        vec![Some(Tensor::from_parts(mask.shape().to_vec(), dm))]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn blur_zero_sigma_is_identity() {
        let x = Tensor::random(&[3, 6, 5], 0.0, 1.0, &mut rng());
        assert_eq!(gaussian_blur(&x, 0.0).unwrap(), x);
    }

    #[test]
    fn blur_preserves_constants() {
        let x = Tensor::full(&[2, 9, 7], 0.42);
        let y = gaussian_blur(&x, 5.0).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn blur_rejects_negative_sigma() {
        assert!(gaussian_blur(&Tensor::ones(&[3, 3]), -1.0).is_err());
    }

    #[test]
    fn blur_impulse_matches_normalised_window_sum() {
        let mut x = Tensor::zeros(&[7, 7]);
        x.data_mut()[3 * 7 + 3] = 1.0;
        let y = gaussian_blur(&x, 1.0).unwrap();
        // direct evaluation of the 7x7 Gaussian window sum
        let mut window = 0.0;
        for dy in -3i32..=3 {
            for dx in -3i32..=3 {
                window += (-((dy * dy + dx * dx) as f64) / 2.0).exp();
            }
        }
        assert!((y.data()[3 * 7 + 3] - 1.0 / window).abs() < 1e-12);
    }

    #[test]
    fn blur_matches_normalised_conv2d() {
        // second route: dense 2-D kernel through conv2d, divided by conv2d of ones
        use crate::graph::{Graph, Padding};
        let x = Tensor::random(&[9, 8], -1.0, 1.0, &mut rng());
        let sigma = 1.3;
        let taps = gaussian_taps(sigma);
        let k = taps.len();
        let mut kernel = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                kernel[i * k + j] = taps[i] * taps[j];
            }
        }
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let ones = g.constant(Tensor::ones(&[9, 8]));
        let kv = g.constant(Tensor::new(&[k, k], kernel).unwrap());
        let num = g.conv2d(xv, kv, Padding::Zero).unwrap();
        let den = g.conv2d(ones, kv, Padding::Zero).unwrap();
        let reference = g.div(num, den).unwrap();
        let blurred = gaussian_blur(&x, sigma).unwrap();
        assert!(blurred.max_abs_diff(g.value(reference)) < 1e-12);
    }

    #[test]
    fn fade_examples() {
        let x = Tensor::from_vec(vec![2.0, 4.0]);
        assert_eq!(fade_to_black(&x, 0.0).unwrap(), x);
        assert_eq!(fade_to_black(&x, 1.0).unwrap(), Tensor::zeros(&[2]));
        assert_eq!(fade_to_black(&x, 0.5).unwrap().data(), &[1.0, 2.0]);
        assert!(fade_to_black(&x, 1.5).is_err());
        assert!(fade_to_black(&x, -0.1).is_err());
    }

    #[test]
    fn pyramid_levels() {
        let x = Tensor::random(&[3, 8, 8], 0.0, 1.0, &mut rng());
        let p = PerturbationPyramid::build(&x, 3.0, 1, PerturbationKind::GaussianBlur).unwrap();
        assert_eq!(p.levels().len(), 2);
        assert_eq!(p.levels()[0], x);
        assert_eq!(p.levels()[1], gaussian_blur(&x, 3.0).unwrap());

        let fade = PerturbationPyramid::build(&x, 1.0, 2, PerturbationKind::FadeToBlack).unwrap();
        assert_eq!(fade.levels()[1], x.map(|v| v / 2.0));
        assert_eq!(fade.levels()[2], Tensor::zeros(x.shape()));

        assert!(PerturbationPyramid::build(&x, 3.0, 0, PerturbationKind::GaussianBlur).is_err());
        assert!(PerturbationPyramid::build(&x, 0.0, 4, PerturbationKind::GaussianBlur).is_err());
    }

    fn laplacian_energy(t: &Tensor) -> f64 {
        let (h, w) = t.spatial().unwrap();
        let planes = t.numel() / (h * w);
        let d = t.data();
        let mut e = 0.0;
        for p in 0..planes {
            for y in 1..h - 1 {
                for x in 1..w - 1 {
                    let i = p * h * w + y * w + x;
                    let lap = d[i - w] + d[i + w] + d[i - 1] + d[i + 1] - 4.0 * d[i];
                    e += lap * lap;
                }
            }
        }
        e / (planes * (h - 2) * (w - 2)) as f64
    }

    #[test]
    fn blur_pyramid_energy_is_non_increasing() {
        let x = Tensor::random(&[3, 32, 32], 0.0, 1.0, &mut rng());
        let p = PerturbationPyramid::build(&x, 6.0, 8, PerturbationKind::GaussianBlur).unwrap();
        let energy: Vec<f64> = p.levels().iter().map(laplacian_energy).collect();
        for pair in energy.windows(2) {
            assert!(pair[1] <= pair[0], "{energy:?}");
        }
    }

    #[test]
    fn apply_mask_endpoints_and_midpoint() {
        let x = Tensor::random(&[3, 6, 6], 0.0, 1.0, &mut rng());
        let p = PerturbationPyramid::build(&x, 2.0, 1, PerturbationKind::GaussianBlur).unwrap();
        let ones = p.apply_tensor(&Tensor::ones(&[6, 6])).unwrap();
        assert_eq!(ones, x);
        let zeros = p.apply_tensor(&Tensor::zeros(&[6, 6])).unwrap();
        assert_eq!(zeros, p.levels()[1]);
        let half = p.apply_tensor(&Tensor::full(&[6, 6], 0.5)).unwrap();
        let expected = x.zip_map(&p.levels()[1], |a, b| (a + b) / 2.0).unwrap();
        assert!(half.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn apply_mask_rejects_bad_masks() {
        let x = Tensor::ones(&[3, 4, 4]);
        let p = PerturbationPyramid::build(&x, 2.0, 4, PerturbationKind::GaussianBlur).unwrap();
        assert!(p.apply_tensor(&Tensor::full(&[4, 4], 1.2)).is_err());
        assert!(p.apply_tensor(&Tensor::ones(&[4, 5])).is_err());
    }

    #[test]
    fn apply_mask_gradient_matches_finite_differences() {
        use crate::gradcheck::{check_gradient, GradCheckConfig};
        let mut r = rng();
        let x = Tensor::random(&[3, 6, 7], 0.0, 1.0, &mut r);
        let p = PerturbationPyramid::build(&x, 2.5, 8, PerturbationKind::GaussianBlur).unwrap();
        for _ in 0..10 {
            let m = Tensor::random(&[6, 7], 0.05, 0.95, &mut r);
            let report = check_gradient(&[m], |g, v| p.apply(g, v[0]), &GradCheckConfig::default(), &mut r).unwrap();
            assert!(report.passed(), "{report:?}");
        }
    }

    proptest::proptest! {
        #[test]
        fn fade_apply_is_monotone_in_mask(seed in 0u64..1000, idx in 0usize..25, bump in 0.0f64..1.0) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::random(&[2, 5, 5], 0.0, 1.0, &mut r);
            let p = PerturbationPyramid::build(&x, 1.0, 8, PerturbationKind::FadeToBlack).unwrap();
            let m = Tensor::random(&[5, 5], 0.0, 1.0, &mut r);
            let mut raised = m.clone();
            raised.data_mut()[idx] = (m.data()[idx] + bump).min(1.0);
            let a = p.apply_tensor(&m).unwrap();
            let b = p.apply_tensor(&raised).unwrap();
            for (lo, hi) in a.data().iter().zip(b.data()) {
                proptest::prop_assert!(hi >= &(lo - 1e-15));
            }
        }

        #[test]
        fn apply_stays_within_level_hull(seed in 0u64..1000) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::random(&[3, 6, 6], -1.0, 1.0, &mut r);
            let p = PerturbationPyramid::build(&x, 2.0, 4, PerturbationKind::GaussianBlur).unwrap();
            let m = Tensor::random(&[6, 6], 0.0, 1.0, &mut r);
            let out = p.apply_tensor(&m).unwrap();
            for (i, &v) in out.data().iter().enumerate() {
                let lo = p.levels().iter().map(|l| l.data()[i]).fold(f64::INFINITY, f64::min);
                let hi = p.levels().iter().map(|l| l.data()[i]).fold(f64::NEG_INFINITY, f64::max);
                proptest::prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}
