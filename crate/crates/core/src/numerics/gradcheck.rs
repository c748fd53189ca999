use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::tape::{ParamStore, Tape, Var};
use crate::numerics::Tensor;

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` builds a graph from the parameters in `store` and returns any output
/// tensor; it is scalarized as `Σ wᵢ·outᵢ` with fixed random weights
/// (accumulated in f64), which is also the seed for the backward pass.
/// The numeric derivative is extrapolated to zero step from several
/// central differences, so truncation error stays small even for steps
/// wide enough to keep f32 rounding in check.
/// Returns the maximum over `coords` sampled parameter coordinates of
/// `|analytic − numeric| / (|numeric| + 1e-8)`.
///
/// The forward pass runs in f32, so a numeric derivative carries an absolute
/// rounding floor of roughly 1e-6 relative to the output scale. Coordinates
/// whose numeric derivative is below [`MEASURABLE_FRACTION`] of the largest
/// sampled one sit under that floor and are left out of the maximum; the
/// selection uses the numeric side only, so a backward that returns zeros
/// is still caught.
/// Central differences taken at `h/K, 2h/K, …, h`.
const FIT_POINTS: usize = 8;

/// Weighted least-squares fit of `D(s) = g + c·s² + d·s⁴` to central
/// differences; returns the intercept `g`. Rounding noise in `D(s)` scales
/// as `1/s`, so each point is weighted by `s²`.
fn extrapolate_to_zero(samples: &[(f64, f64)]) -> f64 {
    let mut ata = Matrix3::<f64>::zeros();
    let mut atb = Vector3::<f64>::zeros();
    for &(s, d) in samples {
        let w = s * s;
        let row = Vector3::new(1.0, s * s, s.powi(4));
        ata += w * row * row.transpose();
        atb += w * d * row;
    }
    match ata.lu().solve(&atb) {
        Some(x) => x[0],
        None => samples[0].1,
    }
}

/// Relative magnitude below which a sampled coordinate is not scored.
pub const MEASURABLE_FRACTION: f64 = 1e-2;

pub fn finite_diff_grad_check<F>(f: F, store: &mut ParamStore, h: f32, coords: usize, seed: u64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    for p in store.iter() {
        p.value.ensure_finite(&p.name)?;
    }
    let eval = |store: &ParamStore| -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = f(&mut tape, store)?;
        Ok(tape.take_value(out))
    };
    let reference = eval(store)?;
    if eval(store)? != reference {
        return Err(Error::InvalidCheck("function is not deterministic".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = if reference.numel() == 1 {
        Tensor::full(reference.shape(), 1.0)
    } else {
        Tensor::randn(reference.shape(), &mut rng)
    };
    let scalarize = |t: &Tensor| -> f64 {
        t.data().iter().zip(probe.data()).map(|(&a, &w)| a as f64 * w as f64).sum()
    };

    store.zero_grad();
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let grads = tape.backward_with(out, probe.clone())?;
    store.accumulate(&tape, &grads)?;

    let sizes: Vec<usize> = store.iter().map(|p| p.value.numel()).collect();
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::InvalidCheck("no parameters to check".into()));
    }
    let ids: Vec<_> = store.ids().collect();
    let mut pairs = Vec::with_capacity(coords);
    for mut flat in rand::seq::index::sample(&mut rng, total, coords.min(total)) {
        let mut which = 0;
        while flat >= sizes[which] {
            flat -= sizes[which];
            which += 1;
        }
        let id = ids[which];
        let original = store.get(id).value.data()[flat];
        let analytic = store.get(id).grad.data()[flat] as f64;
        let mut central = |step: f32| -> Result<f64> {
            store.get_mut(id).value.data_mut()[flat] = original + step;
            let plus = scalarize(&eval(store)?);
            store.get_mut(id).value.data_mut()[flat] = original - step;
            let minus = scalarize(&eval(store)?);
            store.get_mut(id).value.data_mut()[flat] = original;
            // the stored perturbation is what f32 actually represented
            let width = ((original + step) as f64) - ((original - step) as f64);
            Ok((plus - minus) / width)
        };
        let mut samples = Vec::with_capacity(FIT_POINTS);
        for k in 1..=FIT_POINTS {
            let step = h * k as f32 / FIT_POINTS as f32;
            samples.push((step as f64, central(step)?));
        }
        let numeric = extrapolate_to_zero(&samples);
        pairs.push((analytic, numeric));
    }
    let scale = pairs.iter().fold(0.0f64, |m, &(_, n)| m.max(n.abs()));
    let floor = MEASURABLE_FRACTION * scale;
    let mut worst = 0.0f64;
    for (analytic, numeric) in pairs {
        if numeric.abs() < floor {
            continue;
        }
        worst = worst.max((analytic - numeric).abs() / (numeric.abs() + 1e-8));
    }
    Ok(worst)
}

/// Checks the gradient along `directions` random unit directions in the
/// full parameter space: `⟨∇f, v⟩` against the central difference of
/// `f(θ ± s·v)`, extrapolated as in [`finite_diff_grad_check`].
///
/// A directional derivative sums contributions from every parameter, so it
/// sits far above the f32 rounding floor even for deep graphs where single
/// coordinates do not. Returns the maximum relative error.
pub fn directional_grad_check<F>(f: F, store: &mut ParamStore, h: f32, directions: usize, seed: u64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    for p in store.iter() {
        p.value.ensure_finite(&p.name)?;
    }
    let eval = |store: &ParamStore| -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = f(&mut tape, store)?;
        Ok(tape.take_value(out))
    };
    let reference = eval(store)?;
    if eval(store)? != reference {
        return Err(Error::InvalidCheck("function is not deterministic".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = Tensor::randn(reference.shape(), &mut rng);
    let scalarize = |t: &Tensor| -> f64 {
        t.data().iter().zip(probe.data()).map(|(&a, &w)| a as f64 * w as f64).sum()
    };

    store.zero_grad();
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let grads = tape.backward_with(out, probe.clone())?;
    store.accumulate(&tape, &grads)?;

    let ids: Vec<_> = store.ids().collect();
    if ids.is_empty() {
        return Err(Error::InvalidCheck("no parameters to check".into()));
    }
    let originals: Vec<Tensor> = ids.iter().map(|&id| store.get(id).value.clone()).collect();
    let mut worst = 0.0f64;
    for _ in 0..directions {
        let mut dirs: Vec<Tensor> = originals.iter().map(|t| Tensor::randn(t.shape(), &mut rng)).collect();
        let norm = dirs.iter().flat_map(|d| d.data()).map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        for d in &mut dirs {
            *d = d.scale((1.0 / norm) as f32);
        }
        let analytic: f64 = ids
            .iter()
            .zip(&dirs)
            .map(|(&id, d)| {
                store.get(id).grad.data().iter().zip(d.data()).map(|(&g, &v)| g as f64 * v as f64).sum::<f64>()
            })
            .sum();
        let shifted = |sign: f32, step: f32, store: &mut ParamStore| -> Result<f64> {
            for ((&id, o), d) in ids.iter().zip(&originals).zip(&dirs) {
                let dst = store.get_mut(id).value.data_mut();
                for ((x, &a), &v) in dst.iter_mut().zip(o.data()).zip(d.data()) {
                    *x = a + sign * step * v;
                }
            }
            Ok(scalarize(&eval(store)?))
        };
        let mut samples = Vec::with_capacity(FIT_POINTS);
        for k in 1..=FIT_POINTS {
            let step = h * k as f32 / FIT_POINTS as f32;
            let plus = shifted(1.0, step, store)?;
            let minus = shifted(-1.0, step, store)?;
            samples.push((step as f64, (plus - minus) / (2.0 * step as f64)));
        }
        for (&id, o) in ids.iter().zip(&originals) {
            store.get_mut(id).value = o.clone();
        }
        let numeric = extrapolate_to_zero(&samples);
        worst = worst.max((analytic - numeric).abs() / (numeric.abs() + 1e-8));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nondeterministic_function_is_rejected() {
        use std::cell::Cell;
        let mut store = ParamStore::new();
        store.add("x", Tensor::scalar(1.0)).unwrap();
        let calls = Cell::new(0.0f32);
        let f = |tape: &mut Tape, _: &ParamStore| {
            calls.set(calls.get() + 1.0);
            Ok(tape.constant(Tensor::scalar(calls.get())))
        };
        assert!(matches!(
            finite_diff_grad_check(f, &mut store, 1e-3, 4, 0),
            Err(Error::InvalidCheck(_))
        ));
    }
}
