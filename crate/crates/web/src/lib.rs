//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export returns plain numbers or a `Float64Array` so the page needs no
//! glue beyond what `wasm-bindgen` generates. Errors come back as strings.

use csg_emos::dist::{csg_cdf, csg_crps, csg_crps_quadrature, CsgParams};
use csg_emos::emos::{link, EmosCoefficients};
use csg_emos::ensemble::MixtureConfig;
use csg_emos::qm::{fit_beta_weights, quantile_map, ClimCdf, ClosestMemberHistogram};
use wasm_bindgen::prelude::wasm_bindgen;

type Out<T> = Result<T, String>;

fn csg(shape: f64, scale: f64, shift: f64) -> Out<CsgParams> {
    CsgParams::new(shape, scale, shift).map_err(|e| e.to_string())
}

fn grid(max: f64, n: usize) -> impl Iterator<Item = f64> {
    let step = if n > 1 { max / (n - 1) as f64 } else { 0.0 };
    (0..n).map(move |i| i as f64 * step)
}

/// `[P(X = 0), CRPS(y) closed form, CRPS(y) by quadrature, median, 90% quantile]`.
#[wasm_bindgen]
pub fn csg_summary(shape: f64, scale: f64, shift: f64, y: f64) -> Out<Vec<f64>> {
    let p = csg(shape, scale, shift)?;
    let quad = csg_crps_quadrature(&p, y).map_err(|e| e.to_string())?;
    Ok(vec![
        p.point_mass_at_zero(),
        csg_crps(&p, y),
        quad,
        p.quantile(0.5),
        p.quantile(0.9),
    ])
}

/// CDF on `n` evenly spaced points of `[0, x_max]`.
#[wasm_bindgen]
pub fn csg_cdf_curve(shape: f64, scale: f64, shift: f64, x_max: f64, n: usize) -> Out<Vec<f64>> {
    let p = csg(shape, scale, shift)?;
    Ok(grid(x_max, n).map(|x| csg_cdf(&p, x)).collect())
}

/// CRPS as a function of the observation on `n` evenly spaced points of `[0, y_max]`.
#[wasm_bindgen]
pub fn csg_crps_curve(shape: f64, scale: f64, shift: f64, y_max: f64, n: usize) -> Out<Vec<f64>> {
    let p = csg(shape, scale, shift)?;
    Ok(grid(y_max, n).map(|y| csg_crps(&p, y)).collect())
}

/// Predictive distribution from the dual-resolution link.
///
/// Returns `[shape, scale, shift, P(X = 0), median, 90% quantile, overall mean]`.
/// The overall mean pools the two group means by member count, and the
/// coefficient of a group absent from the mixture is zeroed.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn link_explorer(
    a: f64,
    b_high: f64,
    b_low: f64,
    c: f64,
    d: f64,
    delta: f64,
    m_high: u32,
    m_low: u32,
    high_mean: f64,
    low_mean: f64,
) -> Out<Vec<f64>> {
    let mixture = MixtureConfig::new(m_high, m_low).map_err(|e| e.to_string())?;
    let coeffs = EmosCoefficients {
        a,
        b_high,
        b_low,
        c,
        d,
        delta,
    }
    .frozen_for(&mixture);
    let (h, l) = (m_high as f64, m_low as f64);
    let high = if m_high > 0 { high_mean } else { 0.0 };
    let low = if m_low > 0 { low_mean } else { 0.0 };
    let overall = (h * high + l * low) / (h + l);
    let p = link(&coeffs, high, low, overall);
    Ok(vec![
        p.shape(),
        p.scale(),
        p.shift(),
        p.point_mass_at_zero(),
        p.quantile(0.5),
        p.quantile(0.9),
        overall,
    ])
}

/// Beta weights for a sorted `target`-member ensemble from closest-member counts.
///
/// Returns `[alpha, beta, degenerate (0 or 1), w_1, ..., w_target]`; alpha and
/// beta are NaN when the single-bin fallback was used.
#[wasm_bindgen]
pub fn beta_weights(counts: Vec<u32>, target: usize) -> Out<Vec<f64>> {
    let hist = ClosestMemberHistogram {
        counts: counts.into_iter().map(u64::from).collect(),
        mean_bin: None,
    };
    let fit = fit_beta_weights(&hist, target).map_err(|e| e.to_string())?;
    let mut out = vec![fit.alpha, fit.beta, f64::from(u8::from(fit.degenerate))];
    out.extend_from_slice(fit.weights.as_slice());
    Ok(out)
}

fn climatology(p: &CsgParams, n: usize) -> Out<ClimCdf> {
    let samples: Vec<f64> = (0..n).map(|i| p.quantile((i as f64 + 0.5) / n as f64)).collect();
    ClimCdf::build(&samples).map_err(|e| e.to_string())
}

/// Quantile mapping between two CSG climatologies, each represented by `n_clim`
/// evenly spaced quantiles. Evaluated on `n` points of `[0, x_max]`.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn quantile_map_curve(
    fc_shape: f64,
    fc_scale: f64,
    fc_shift: f64,
    obs_shape: f64,
    obs_scale: f64,
    obs_shift: f64,
    n_clim: usize,
    x_max: f64,
    n: usize,
) -> Out<Vec<f64>> {
    let fc = climatology(&csg(fc_shape, fc_scale, fc_shift)?, n_clim)?;
    let obs = climatology(&csg(obs_shape, obs_scale, obs_shift)?, n_clim)?;
    Ok(grid(x_max, n).map(|x| quantile_map(x, &fc, &obs)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_curve_is_monotone_and_starts_at_point_mass() {
        let s = csg_summary(1.5, 2.0, 0.8, 1.0).unwrap();
        let cdf = csg_cdf_curve(1.5, 2.0, 0.8, 20.0, 101).unwrap();
        assert_eq!(cdf.len(), 101);
        assert!((cdf[0] - s[0]).abs() < 1e-15);
        assert!(cdf.windows(2).all(|w| w[0] <= w[1]));
        assert!(*cdf.last().unwrap() > 0.99);
    }

    #[test]
    fn closed_form_crps_matches_quadrature() {
        for y in [0.0, 0.3, 4.0] {
            let s = csg_summary(0.7, 3.0, 0.5, y).unwrap();
            assert!((s[1] - s[2]).abs() < 1e-8, "{y}: {s:?}");
        }
        assert!(csg_summary(0.7, 3.0, -1.0, 0.0).is_err());
    }

    #[test]
    fn crps_curve_is_smallest_near_the_median() {
        let s = csg_summary(3.0, 1.0, 0.5, 0.0).unwrap();
        let curve = csg_crps_curve(3.0, 1.0, 0.5, 10.0, 1001).unwrap();
        let (best, _) = curve
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        assert!((best as f64 * 0.01 - s[3]).abs() < 0.02);
    }

    #[test]
    fn link_ignores_absent_group() {
        let a = link_explorer(0.5, 0.8, 0.6, 0.5, 0.7, 0.4, 50, 0, 3.0, 10.0).unwrap();
        let b = link_explorer(0.5, 0.8, 0.6, 0.5, 0.7, 0.4, 50, 0, 3.0, 99.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[6], 3.0);
        let mixed = link_explorer(0.5, 0.8, 0.6, 0.5, 0.7, 0.4, 10, 30, 2.0, 6.0).unwrap();
        assert_eq!(mixed[6], 5.0);
        assert!(link_explorer(0.5, 0.8, 0.6, 0.5, 0.7, 0.4, 0, 0, 2.0, 6.0).is_err());
    }

    #[test]
    fn flat_histogram_gives_equal_weights() {
        let w = beta_weights(vec![10; 5], 8).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-12 && (w[1] - 1.0).abs() < 1e-12);
        assert_eq!(w[2], 0.0);
        assert!(w[3..].iter().all(|x| (x - 0.125).abs() < 1e-12));
        let spiked = beta_weights(vec![0, 0, 7, 0], 4).unwrap();
        assert_eq!(spiked[2], 1.0);
        assert!(beta_weights(vec![0; 4], 4).is_err());
    }

    #[test]
    fn identical_climatologies_map_to_identity() {
        let m = quantile_map_curve(1.2, 2.0, 0.6, 1.2, 2.0, 0.6, 200, 8.0, 17).unwrap();
        for (i, y) in m.iter().enumerate() {
            assert!((y - i as f64 * 0.5).abs() < 1e-9, "{i}: {y}");
        }
        // A doubled forecast scale roughly halves mapped amounts.
        let h = quantile_map_curve(1.2, 4.0, 1.2, 1.2, 2.0, 0.6, 400, 8.0, 5).unwrap();
        assert!((h[4] / 8.0 - 0.5).abs() < 0.05, "{h:?}");
    }
}
