//! Perturbation robustness, trajectory distances and sample-quality proxies.

use std::cell::Cell;
use std::rc::Rc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clockwork::{generate, generate_probed, Pipeline, SampleSpec};
use crate::error::{config_err, Error, Result};
use crate::numerics::layers::{Conv2d, Init};
use crate::numerics::{rng, ParamStore, Tape, Tensor};
use crate::sampler::Trajectory;
use crate::unet::{Probe, Site};

/// Result of [`perturb_feature`].
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbed {
    pub value: Tensor,
    /// Set when the feature (or one of its channels) had zero spread and
    /// `alpha < 1`: the noise term then vanishes.
    pub degenerate: bool,
}

/// `f ← μ + √α·(f − μ) + √(1−α)·z`, `z ~ N(0, σ²)`, with μ and σ taken over
/// the whole tensor, or per channel (axis 1) when `per_channel` is set.
pub fn perturb_feature(f: &Tensor, alpha: f64, seed: u64, per_channel: bool) -> Result<Perturbed> {
    if !(0.0..=1.0).contains(&alpha) {
        return config_err(format!("alpha {alpha} outside [0, 1]"));
    }
    f.ensure_finite("perturbed feature")?;
    if alpha == 1.0 {
        return Ok(Perturbed { value: f.clone(), degenerate: false });
    }
    let groups: Vec<Vec<usize>> = if per_channel && f.rank() >= 2 {
        let (n, c) = (f.shape()[0], f.shape()[1]);
        let inner = f.numel() / (n * c);
        (0..c)
            .map(|ch| (0..n).flat_map(|b| ((b * c + ch) * inner..(b * c + ch + 1) * inner).collect::<Vec<_>>()).collect())
            .collect()
    } else {
        vec![(0..f.numel()).collect()]
    };
    let mut r = rng(seed, 0xfe);
    let (keep, mix) = (alpha.sqrt(), (1.0 - alpha).sqrt());
    let mut out = f.data().to_vec();
    let mut degenerate = false;
    for idx in groups {
        let n = idx.len() as f64;
        let mean = idx.iter().map(|&i| f.data()[i] as f64).sum::<f64>() / n;
        let var = idx.iter().map(|&i| (f.data()[i] as f64 - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        degenerate |= sd == 0.0;
        for &i in &idx {
            let z: f64 = StandardNormal.sample(&mut r);
            out[i] = (mean + keep * (f.data()[i] as f64 - mean) + mix * sd * z) as f32;
        }
    }
    Ok(Perturbed { value: Tensor::from_vec(f.shape(), out)?, degenerate })
}

/// Where, how strongly and from which step a generation is perturbed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    pub site: Site,
    pub alpha: f64,
    /// Number of leading steps left untouched.
    pub start_step: usize,
    pub seed: u64,
    pub per_channel: bool,
}

/// A probe that perturbs one site on one step.
struct PerturbProbe {
    spec: PerturbSpec,
    step: usize,
    degenerate: bool,
}

impl Probe for PerturbProbe {
    fn visit(&mut self, site: Site, value: &Tensor) -> Result<Option<Tensor>> {
        if site != self.spec.site || self.step <= self.spec.start_step {
            return Ok(None);
        }
        let seed = self.spec.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ self.step as u64;
        let p = perturb_feature(value, self.spec.alpha, seed, self.spec.per_channel)?;
        self.degenerate |= p.degenerate;
        Ok(Some(p.value))
    }
}

/// A generation perturbed per `spec`, returning the trajectory and whether
/// any perturbed tensor was degenerate.
pub fn perturbed_generation(
    pipe: Pipeline<'_>,
    sample: &SampleSpec<'_>,
    classes: &[usize],
    sample_seed: u64,
    spec: PerturbSpec,
) -> Result<(Trajectory, bool)> {
    if !(0.0..=1.0).contains(&spec.alpha) {
        return config_err(format!("alpha {} outside [0, 1]", spec.alpha));
    }
    let degenerate = Rc::new(Cell::new(false));
    struct Shared {
        inner: PerturbProbe,
        flag: Rc<Cell<bool>>,
    }
    impl Probe for Shared {
        fn visit(&mut self, site: Site, value: &Tensor) -> Result<Option<Tensor>> {
            let out = self.inner.visit(site, value);
            self.flag.set(self.flag.get() | self.inner.degenerate);
            out
        }
    }
    let g = generate_probed(pipe, sample, classes, sample_seed, &mut |step| {
        let inner = PerturbProbe { spec, step, degenerate: false };
        Box::new(Shared { inner, flag: degenerate.clone() })
    })?;
    Ok((g.trajectory, degenerate.get()))
}

/// L2 norm of `a − b`, averaged over the batch.
pub fn batch_l2(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_shape(b)?;
    let n = a.shape().first().copied().unwrap_or(1).max(1);
    let per = a.numel() / n;
    let d = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).collect::<Vec<_>>();
    Ok(d.chunks(per.max(1)).map(|c| c.iter().sum::<f64>().sqrt()).sum::<f64>() / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub site: Site,
    pub alpha: f64,
    pub start_step: usize,
    pub seed: u64,
    pub l2: f64,
}

/// Grid of perturbation settings for [`perturb_sweep`].
#[derive(Clone, Debug)]
pub struct SweepGrid {
    pub sites: Vec<Site>,
    pub alphas: Vec<f64>,
    pub start_steps: Vec<usize>,
    pub seeds: Vec<u64>,
    pub per_channel: bool,
}

/// Final-output L2 between perturbed and unperturbed generations for every
/// `(site, alpha, start_step, seed)` cell. `class_of(seed)` picks the
/// conditions of each seed's generation. Cells run on the current rayon
/// pool; results do not depend on its size.
pub fn perturb_sweep(
    pipe: Pipeline<'_>,
    sample: &SampleSpec<'_>,
    grid: &SweepGrid,
    class_of: &(dyn Fn(u64) -> Vec<usize> + Sync),
) -> Result<Vec<SweepRow>> {
    let baselines: Vec<Tensor> = grid
        .seeds
        .par_iter()
        .map(|&seed| Ok(generate(pipe, sample, &class_of(seed), seed)?.trajectory.final_latent))
        .collect::<Result<_>>()?;
    let mut cells = Vec::new();
    for &site in &grid.sites {
        for &alpha in &grid.alphas {
            for &start_step in &grid.start_steps {
                for (k, &seed) in grid.seeds.iter().enumerate() {
                    cells.push((PerturbSpec { site, alpha, start_step, seed, per_channel: grid.per_channel }, k));
                }
            }
        }
    }
    cells
        .par_iter()
        .map(|&(spec, k)| {
            let (traj, _) = perturbed_generation(pipe, sample, &class_of(spec.seed), spec.seed, spec)?;
            let l2 = batch_l2(&traj.final_latent, &baselines[k])?;
            Ok(SweepRow { site: spec.site, alpha: spec.alpha, start_step: spec.start_step, seed: spec.seed, l2 })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("site,alpha,start_step,seed,l2\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{:.8}\n", r.site, r.alpha, r.start_step, r.seed, r.l2));
    }
    out
}

/// Per-step latent distance ([`batch_l2`]) between two runs on the same grid.
pub fn l2_curve(a: &Trajectory, b: &Trajectory) -> Result<Vec<f64>> {
    if a.len() != b.len() || a.records.iter().zip(&b.records).any(|(x, y)| x.t != y.t) {
        return config_err("trajectories use different grids");
    }
    a.outputs().into_iter().zip(b.outputs()).map(|(x, y)| batch_l2(x, y)).collect()
}

/// Seed of the random feature network; fixed so scores compare across runs.
pub const RF_SEED: u64 = 20_231_205;
pub const RF_DIM: usize = 64;
pub const RF_MIN_SAMPLES: usize = 64;

/// Three stride-2 random convolutions with SiLU, then global average pooling.
pub struct FeatureNet {
    store: ParamStore,
    convs: Vec<Conv2d>,
}

impl FeatureNet {
    pub fn new() -> Self {
        let mut store = ParamStore::new();
        let r = &mut rng(RF_SEED, 0);
        let widths = [3, 16, 32, RF_DIM];
        let convs = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Conv2d::new(&mut store, &format!("rf.conv{i}"), w[0], w[1], 3, 2, 1, Init::FanIn, r))
            .collect::<Result<Vec<_>>>()
            .expect("static feature net");
        Self { store, convs }
    }

    /// `[N, 3, H, W]` images to `N × 64` features.
    pub fn features(&self, images: &Tensor) -> Result<DMatrix<f64>> {
        let (n, c, _, _) = images.dims4()?;
        if c != 3 {
            return config_err(format!("feature net expects 3 channels, got {c}"));
        }
        let mut tape = Tape::inference();
        let mut h = tape.constant(images.clone());
        for conv in &self.convs {
            h = conv.forward(&mut tape, &self.store, h)?;
            h = tape.silu(h)?;
        }
        let v = tape.value(h);
        let spatial = v.numel() / (n * RF_DIM);
        let d = v.data();
        Ok(DMatrix::from_fn(n, RF_DIM, |i, j| {
            d[(i * RF_DIM + j) * spatial..(i * RF_DIM + j + 1) * spatial].iter().map(|&x| x as f64).sum::<f64>()
                / spatial as f64
        }))
    }
}

impl Default for FeatureNet {
    fn default() -> Self {
        Self::new()
    }
}

fn moments(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mean = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1.0);
    (mean, cov)
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// `‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})` between two feature sets (rows
/// are samples). The cross term is evaluated as `Tr((√Σ₁ Σ₂ √Σ₁)^{1/2})`.
pub fn frechet_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return config_err("feature widths differ");
    }
    for (name, x) in [("first", a), ("second", b)] {
        if x.nrows() < RF_MIN_SAMPLES {
            return Err(Error::Statistical(format!(
                "{name} set has {} samples, at least {RF_MIN_SAMPLES} are needed",
                x.nrows()
            )));
        }
    }
    let (m1, s1) = moments(a);
    let (m2, s2) = moments(b);
    let r1 = sqrt_psd(&s1);
    let cross = sqrt_psd(&(&r1 * &s2 * &r1)).trace();
    let d = (m1 - m2).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// Fréchet distance between random-feature statistics of two image sets.
pub fn rf_fid(net: &FeatureNet, a: &Tensor, b: &Tensor) -> Result<f64> {
    for (name, x) in [("first", a), ("second", b)] {
        if x.shape().first().copied().unwrap_or(0) < RF_MIN_SAMPLES {
            return Err(Error::Statistical(format!(
                "{name} set has {} samples, at least {RF_MIN_SAMPLES} are needed",
                x.shape().first().copied().unwrap_or(0)
            )));
        }
    }
    if a == b {
        return Ok(0.0);
    }
    frechet_distance(&net.features(a)?, &net.features(b)?)
}

/// Mean over samples and pixels of the Euclidean distance between the
/// channel vectors of `a` and `b`.
pub fn mean_pixel_l2(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_shape(b)?;
    let (n, c, h, w) = a.dims4()?;
    let plane = h * w;
    let mut total = 0.0;
    for i in 0..n {
        for p in 0..plane {
            let s: f64 = (0..c)
                .map(|ch| {
                    let k = (i * c + ch) * plane + p;
                    (a.data()[k] as f64 - b.data()[k] as f64).powi(2)
                })
                .sum();
            total += s.sqrt();
        }
    }
    Ok(total / (n * plane) as f64)
}

/// Peak signal-to-noise ratio for images spanning `range`.
pub fn psnr(a: &Tensor, b: &Tensor, range: f64) -> Result<f64> {
    a.expect_same_shape(b)?;
    let mse = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>()
        / a.numel().max(1) as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (range * range / mse).log10() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub rf_fid: f64,
    pub mean_l2: f64,
    pub psnr: Option<f64>,
}

/// Quality of `samples` against `reference`; L2 and PSNR treat the sets as
/// paired, which they are when both come from the same seeds.
pub fn quality(net: &FeatureNet, samples: &Tensor, reference: &Tensor, paired: bool) -> Result<QualityReport> {
    Ok(QualityReport {
        rf_fid: rf_fid(net, samples, reference)?,
        mean_l2: mean_pixel_l2(samples, reference)?,
        psnr: if paired { Some(psnr(samples, reference, 2.0)?) } else { None },
    })
}

/// Maps model space `[-1, 1]` to display space `[0, 1]`.
pub fn to_unit_range(x: &Tensor) -> Tensor {
    x.map(|v| (v + 1.0) * 0.5)
}

/// `epoch,rf_fid` rows.
pub fn fid_csv(rows: &[(usize, f64)]) -> String {
    let mut out = String::from("epoch,rf_fid\n");
    for (e, f) in rows {
        out.push_str(&format!("{e},{f:.6}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_one_is_identity_and_range_checked() {
        let f = Tensor::randn(&[2, 3, 4, 4], &mut rng(0, 0));
        assert_eq!(perturb_feature(&f, 1.0, 3, false).unwrap().value, f);
        assert!(perturb_feature(&f, 1.5, 3, false).is_err());
        assert!(perturb_feature(&f, -0.1, 3, false).is_err());
    }

    #[test]
    fn constant_feature_is_degenerate() {
        let f = Tensor::full(&[1, 2, 2, 2], 0.7);
        let p = perturb_feature(&f, 0.3, 0, false).unwrap();
        assert!(p.degenerate);
        assert!(p.value.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn l2_helpers_by_hand() {
        let a = Tensor::from_vec(&[1, 2, 1, 1], vec![3.0, 0.0]).unwrap();
        let b = Tensor::from_vec(&[1, 2, 1, 1], vec![0.0, 4.0]).unwrap();
        assert!((batch_l2(&a, &b).unwrap() - 5.0).abs() < 1e-12);
        assert!((mean_pixel_l2(&a, &b).unwrap() - 5.0).abs() < 1e-12);
        assert!(psnr(&a, &a, 2.0).unwrap().is_infinite());
    }
}
