//! Smooth mask generation.
//!
//! A low-resolution parameter mask (one sample every `step` pixels) is
//! expanded to full resolution by pooling, over a window of nearby samples,
//! the products `k(|u - u_i| / sigma) * m_i`. Pooling with `max` gives the
//! max-convolution; pooling with the temperature-controlled smooth max gives
//! the differentiable generator used during optimisation.
//!
//! The window is realised the way a strided implementation does it: unpool
//! the samples with window `K = 2R + 1` and padding `P`, nearest-neighbour
//! upsample by `step`, pool against precomputed weights `g[k, u]`, and crop
//! an output-sized window offset by the margin `b`. Sample `i` sits at
//! position `b + step * i` of the uncropped lattice, i.e. at `step * i` of
//! the final mask.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{CustomOp, Graph, Var};
use crate::tensor::Tensor;

/// Inverse temperature of the smooth max used during optimisation.
pub const DEFAULT_INV_TEMPERATURE: f64 = 20.0;

/// Radial profile: flat on `[0, 1]`, then `exp(-(z - 1)^2 / 4)`.
pub fn kernel_profile(z: f64) -> Result<f64> {
    if !(z >= 0.0) {
        return Err(Error::invalid(format!("kernel profile needs z >= 0, got {z}")));
    }
    Ok(profile(z))
}

#[inline]
fn profile(z: f64) -> f64 {
    let t = (z - 1.0).max(0.0);
    (-t * t / 4.0).exp()
}

/// `sum f e^{f/T} / sum e^{f/T}`, stabilised by subtracting the maximum.
pub fn smax(values: &[f64], temperature: f64) -> f64 {
    let peak = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut num, mut den) = (0.0, 0.0);
    for &f in values {
        let e = ((f - peak) / temperature).exp();
        num += f * e;
        den += e;
    }
    num / den
}

/// Per-axis geometry of the generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct AxisGeometry {
    /// Parameter samples, `ceil(out / step)`.
    pub n: usize,
    /// Unpool padding, `1 + ceil((sigma + b) / step)`.
    pub p: usize,
    /// Window radius in samples, `1 + ceil(sigma / step)`.
    pub r: usize,
    /// Window size, `2R + 1`.
    pub k: usize,
    /// Unpooled length `W' = N - K + 2P + 1`.
    pub unpooled: usize,
    /// Upsampled length `W'' = step * W'`.
    pub upsampled: usize,
}

pub fn derive_axis(sigma: f64, step: usize, margin: usize, out: usize) -> AxisGeometry {
    let s = step as f64;
    let n = out.div_ceil(step);
    let p = 1 + ((sigma + margin as f64) / s).ceil() as usize;
    let r = 1 + (sigma / s).ceil() as usize;
    let k = 2 * r + 1;
    let unpooled = n + 2 * p + 1 - k;
    AxisGeometry {
        n,
        p,
        r,
        k,
        unpooled,
        upsampled: step * unpooled,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothMaskConfig {
    /// Radius of the flat kernel disk, in output pixels.
    pub sigma: f64,
    /// Distance between parameter samples, in output pixels.
    pub step: usize,
    /// Crop offset, in pixels.
    pub margin: usize,
    pub temperature: f64,
    pub out_h: usize,
    pub out_w: usize,
}

impl SmoothMaskConfig {
    pub fn new(out_h: usize, out_w: usize, sigma: f64, step: usize, margin: usize, temperature: f64) -> Result<Self> {
        let cfg = SmoothMaskConfig {
            sigma,
            step,
            margin,
            temperature,
            out_h,
            out_w,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults: one sample per `min(h, w) / 32` pixels (7 at 224 px) but at
    /// least every other pixel, a flat disk as wide as the sample spacing and
    /// a margin of one radius.
    pub fn for_image(h: usize, w: usize) -> Self {
        // one sample per pixel lets masks cling to the image border
        let step = (h.min(w) / 32).max(2);
        SmoothMaskConfig {
            sigma: step as f64,
            step,
            margin: step,
            temperature: 1.0 / DEFAULT_INV_TEMPERATURE,
            out_h: h,
            out_w: w,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.step == 0 {
            return Err(Error::invalid("mask step must be >= 1"));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::invalid(format!("mask sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::invalid(format!(
                "smax temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if self.out_h == 0 || self.out_w == 0 {
            return Err(Error::invalid("mask extents must be positive"));
        }
        let (gh, gw) = self.geometry();
        for (g, out) in [(gh, self.out_h), (gw, self.out_w)] {
            if g.upsampled < out + self.margin {
                return Err(Error::invalid(format!(
                    "crop of {out} px at offset {} exceeds upsampled extent {}",
                    self.margin, g.upsampled
                )));
            }
        }
        Ok(())
    }

    pub fn geometry(&self) -> (AxisGeometry, AxisGeometry) {
        (
            derive_axis(self.sigma, self.step, self.margin, self.out_h),
            derive_axis(self.sigma, self.step, self.margin, self.out_w),
        )
    }

    /// Shape of the parameter mask.
    pub fn param_shape(&self) -> [usize; 2] {
        let (gh, gw) = self.geometry();
        [gh.n, gw.n]
    }
}

/// Parameter mask: values in `[0, 1]` on the sample lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskParams(Tensor);

impl MaskParams {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::invalid("mask parameters must be a 2-D lattice"));
        }
        if values.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("mask parameters must lie in [0, 1]"));
        }
        Ok(MaskParams(values))
    }

    pub fn ones(shape: [usize; 2]) -> Self {
        MaskParams(Tensor::ones(&shape))
    }

    /// Euclidean projection onto `[0, 1]`.
    pub fn project(values: Tensor) -> Self {
        MaskParams(values.map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

const NO_SAMPLE: u32 = u32::MAX;

struct Lattice {
    h: usize,
    w: usize,
    window: usize,
    /// `window` entries per pixel: flat parameter index or `NO_SAMPLE`.
    sample: Vec<u32>,
    /// Matching weights `g[k, u]`.
    weight: Vec<f64>,
}

/// Expands parameter masks for one [`SmoothMaskConfig`].
#[derive(Clone)]
pub struct MaskGenerator {
    config: SmoothMaskConfig,
    geom: (AxisGeometry, AxisGeometry),
    cutoff: f64,
    /// Pool taps over the whole `W'' x W''` lattice and over the crop.
    full: Arc<Lattice>,
    crop: Arc<Lattice>,
}

impl std::fmt::Debug for MaskGenerator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MaskGenerator")
            .field("config", &self.config)
            .field("geometry", &self.geom)
            .field("cutoff", &self.cutoff)
            .finish()
    }
}

/// Smallest distance, over pixels `u` of the crop, from `u` to the first or
/// last sample of its pooling window along one axis.
fn window_reach(g: &AxisGeometry, step: usize, margin: usize, out: usize) -> f64 {
    let (s, b) = (step as i64, margin as i64);
    (0..out as i64)
        .map(|u| {
            let up = u + b;
            let q = up / s;
            let first = b + s * (q - g.p as i64);
            let last = b + s * (q + g.k as i64 - 1 - g.p as i64);
            (up - first).min(last - up)
        })
        .min()
        .unwrap_or(0) as f64
}

impl MaskGenerator {
    pub fn new(config: SmoothMaskConfig) -> Result<Self> {
        config.validate()?;
        let geom = config.geometry();
        let cutoff = window_reach(&geom.0, config.step, config.margin, config.out_h).min(window_reach(
            &geom.1,
            config.step,
            config.margin,
            config.out_w,
        ));
        let mut gen = MaskGenerator {
            config,
            geom,
            cutoff,
            full: Arc::new(Lattice {
                h: 0,
                w: 0,
                window: 0,
                sample: vec![],
                weight: vec![],
            }),
            crop: Arc::new(Lattice {
                h: 0,
                w: 0,
                window: 0,
                sample: vec![],
                weight: vec![],
            }),
        };
        gen.full = Arc::new(gen.build_lattice(0, geom.0.upsampled, 0, geom.1.upsampled));
        let b = gen.config.margin;
        gen.crop = Arc::new(gen.build_lattice(b, gen.config.out_h, b, gen.config.out_w));
        Ok(gen)
    }

    pub fn config(&self) -> &SmoothMaskConfig {
        &self.config
    }

    pub fn geometry(&self) -> (AxisGeometry, AxisGeometry) {
        self.geom
    }

    pub fn param_shape(&self) -> [usize; 2] {
        [self.geom.0.n, self.geom.1.n]
    }

    /// Radius beyond which the kernel is zero: every sample closer than this
    /// falls inside the pooling window of every output pixel, so the pooled
    /// result is a true (translation-invariant) max-convolution.
    pub fn cutoff_radius(&self) -> f64 {
        self.cutoff
    }

    /// The kernel as realised by the pooling window.
    pub fn effective_kernel(&self, dy: f64, dx: f64) -> f64 {
        let d = (dy * dy + dx * dx).sqrt();
        if d <= self.cutoff {
            profile(d / self.config.sigma)
        } else {
            0.0
        }
    }

    /// Pool taps for rows `y0..y0+h`, columns `x0..x0+w` of the upsampled lattice.
    fn build_lattice(&self, y0: usize, h: usize, x0: usize, w: usize) -> Lattice {
        let (gh, gw) = self.geom;
        let (s, b) = (self.config.step as i64, self.config.margin as i64);
        let window = gh.k * gw.k;
        let mut sample = Vec::with_capacity(h * w * window);
        let mut weight = Vec::with_capacity(h * w * window);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                let (uy, ux) = (y as i64, x as i64);
                for ky in 0..gh.k as i64 {
                    // unpool + nearest upsampling: m''[k, u] = m[floor(u / s) + k - P]
                    let iy = uy / s + ky - gh.p as i64;
                    for kx in 0..gw.k as i64 {
                        let ix = ux / s + kx - gw.p as i64;
                        let dy = (uy - (b + s * iy)) as f64;
                        let dx = (ux - (b + s * ix)) as f64;
                        let inside = (0..gh.n as i64).contains(&iy) && (0..gw.n as i64).contains(&ix);
                        sample.push(if inside {
                            (iy as usize * gw.n + ix as usize) as u32
                        } else {
                            NO_SAMPLE
                        });
                        weight.push(self.effective_kernel(dy, dx));
                    }
                }
            }
        }
        Lattice {
            h,
            w,
            window,
            sample,
            weight,
        }
    }

    /// Precomputed pooling weights `g[k, u]` over the upsampled lattice,
    /// shaped `[K*K, W''_h, W''_w]`.
    pub fn pool_weights(&self) -> Tensor {
        let lat = &self.full;
        let plane = lat.h * lat.w;
        let mut out = vec![0.0; lat.window * plane];
        for u in 0..plane {
            for k in 0..lat.window {
                out[k * plane + u] = lat.weight[u * lat.window + k];
            }
        }
        Tensor::from_parts(vec![lat.window, lat.h, lat.w], out)
    }

    fn check_params(&self, params: &Tensor) -> Result<()> {
        if params.shape() != self.param_shape() {
            return Err(Error::ShapeMismatch {
                op: "mask expand",
                lhs: self.param_shape().to_vec(),
                rhs: params.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn pool(lat: &Lattice, params: &[f64], mut reduce: impl FnMut(&[f64]) -> f64) -> Tensor {
        let mut entries = vec![0.0; lat.window];
        let data = (0..lat.h * lat.w)
            .map(|u| {
                let base = u * lat.window;
                for k in 0..lat.window {
                    let idx = lat.sample[base + k];
                    let m = if idx == NO_SAMPLE { 0.0 } else { params[idx as usize] };
                    entries[k] = lat.weight[base + k] * m;
                }
                reduce(&entries)
            })
            .collect();
        Tensor::from_parts(vec![lat.h, lat.w], data)
    }

    /// Hard max-convolution `m(u) = max_v k(u - v) m(v)`, cropped to the output.
    pub fn max_conv(&self, params: &MaskParams) -> Result<Tensor> {
        self.check_params(params.tensor())?;
        Ok(Self::pool(&self.crop, params.tensor().data(), |e| {
            e.iter().copied().fold(0.0, f64::max)
        }))
    }

    /// Smooth-max pooling over the whole upsampled lattice (before cropping).
    pub fn smax_pool(&self, params: &MaskParams) -> Result<Tensor> {
        self.check_params(params.tensor())?;
        let t = self.config.temperature;
        Ok(Self::pool(&self.full, params.tensor().data(), |e| smax(e, t)))
    }

    /// The full generator without recording gradients.
    pub fn expand_tensor(&self, params: &MaskParams) -> Result<Tensor> {
        self.check_params(params.tensor())?;
        let t = self.config.temperature;
        Ok(Self::pool(&self.crop, params.tensor().data(), |e| smax(e, t)))
    }

    /// The full generator on a graph: `[N_h, N_w]` parameters to an
    /// `[out_h, out_w]` mask, differentiable in the parameters.
    pub fn expand(&self, g: &mut Graph, params: Var) -> Result<Var> {
        let value = g.value(params);
        self.check_params(value)?;
        let t = self.config.temperature;
        let out = Self::pool(&self.crop, value.data(), |e| smax(e, t));
        g.custom(
            &[params],
            out,
            Arc::new(SmaxPoolOp {
                lattice: Arc::clone(&self.crop),
                temperature: t,
            }),
        )
    }

    /// Parameter mask placed on its sample pixels (`step * i`) with zeros in
    /// between, the transposed-convolution upsampling of the lattice.
    pub fn upsample_samples(&self, params: &MaskParams) -> Tensor {
        let (h, w) = (self.config.out_h, self.config.out_w);
        let s = self.config.step;
        let [nh, nw] = self.param_shape();
        let mut out = Tensor::zeros(&[h, w]);
        for iy in 0..nh {
            for ix in 0..nw {
                let (y, x) = (iy * s, ix * s);
                if y < h && x < w {
                    out.data_mut()[y * w + x] = params.tensor().data()[iy * nw + ix];
                }
            }
        }
        out
    }

    /// Largest difference of the effective kernel between horizontally or
    /// vertically adjacent lattice offsets.
    pub fn kernel_lipschitz(&self) -> f64 {
        let reach = self.cutoff.ceil() as i64 + 1;
        let mut worst: f64 = 0.0;
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let k = self.effective_kernel(dy as f64, dx as f64);
                worst = worst
                    .max((k - self.effective_kernel(dy as f64, (dx + 1) as f64)).abs())
                    .max((k - self.effective_kernel((dy + 1) as f64, dx as f64)).abs());
            }
        }
        worst
    }
}

/// Largest difference between horizontally or vertically adjacent pixels.
pub fn empirical_lipschitz(mask: &Tensor) -> f64 {
    let (h, w) = mask.spatial().expect("2-D mask");
    let d = mask.data();
    let mut worst: f64 = 0.0;
    for y in 0..h {
        for x in 0..w {
            let v = d[y * w + x];
            if x + 1 < w {
                worst = worst.max((v - d[y * w + x + 1]).abs());
            }
            if y + 1 < h {
                worst = worst.max((v - d[(y + 1) * w + x]).abs());
            }
        }
    }
    worst
}

struct SmaxPoolOp {
    lattice: Arc<Lattice>,
    temperature: f64,
}

impl CustomOp for SmaxPoolOp {
    fn name(&self) -> &'static str {
        "smax_pool"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let params = inputs[0];
        let lat = &self.lattice;
        let t = self.temperature;
        let p = params.data();
        let mut dp = vec![0.0; params.numel()];
        let mut entries = vec![0.0; lat.window];
        for (u, (&out, &g)) in output.data().iter().zip(grad.data()).enumerate() {
            if g == 0.0 {
                continue;
            }
            let base = u * lat.window;
            for k in 0..lat.window {
                let idx = lat.sample[base + k];
                let m = if idx == NO_SAMPLE { 0.0 } else { p[idx as usize] };
                entries[k] = lat.weight[base + k] * m;
            }
            let peak = entries.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = entries.iter().map(|&f| ((f - peak) / t).exp()).sum();
            for k in 0..lat.window {
                let idx = lat.sample[base + k];
                let wk = lat.weight[base + k];
                if idx == NO_SAMPLE || wk == 0.0 {
                    continue;
                }
                let f = entries[k];
                let softw = ((f - peak) / t).exp() / z;
                // d smax / d f_k = w_k (1 + (f_k - smax) / T)
                dp[idx as usize] += g * softw * (1.0 + (f - out) / t) * wk;
            }
        }
        vec![Some(Tensor::from_parts(params.shape().to_vec(), dp))]
    }
}
