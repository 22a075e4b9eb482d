//! Goodness-of-fit metrics.

use crate::error::{PrgpError, Result};

/// Entries with `|y| <` this value are excluded from MAPE.
pub const MAPE_GUARD: f64 = 1e-9;

/// Per-entry normalization for [`rmse`].
#[derive(Debug, Clone, Copy)]
pub enum Sigma<'a> {
    Unit,
    Uniform(f64),
    PerEntry(&'a [f64]),
}

/// `sqrt(mean(((y - ŷ) / σ)²))`.
pub fn rmse(y: &[f64], y_hat: &[f64], sigma: Sigma<'_>) -> Result<f64> {
    if y.len() != y_hat.len() {
        return Err(PrgpError::input(format!(
            "rmse: {} targets vs {} predictions",
            y.len(),
            y_hat.len()
        )));
    }
    if y.is_empty() {
        return Err(PrgpError::EmptyData("rmse of zero entries".into()));
    }
    let sigma_at = |i: usize| -> Result<f64> {
        let s = match sigma {
            Sigma::Unit => 1.0,
            Sigma::Uniform(s) => s,
            Sigma::PerEntry(v) => *v
                .get(i)
                .ok_or_else(|| PrgpError::input("rmse: sigma length mismatch"))?,
        };
        if s > 0.0 {
            Ok(s)
        } else {
            Err(PrgpError::input("rmse: sigma entries must be positive"))
        }
    };
    if let Sigma::PerEntry(v) = sigma {
        if v.len() != y.len() {
            return Err(PrgpError::input("rmse: sigma length mismatch"));
        }
    }
    let mut acc = 0.0;
    for (i, (a, b)) in y.iter().zip(y_hat).enumerate() {
        let e = (a - b) / sigma_at(i)?;
        acc += e * e;
    }
    Ok((acc / y.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mape {
    /// Percent.
    pub value: f64,
    pub included: usize,
    pub excluded: usize,
}

/// `(100/n)·Σ|y - ŷ|/|y|` over entries with `|y| ≥` [`MAPE_GUARD`].
pub fn mape(y: &[f64], y_hat: &[f64]) -> Result<Mape> {
    if y.len() != y_hat.len() {
        return Err(PrgpError::input(format!(
            "mape: {} targets vs {} predictions",
            y.len(),
            y_hat.len()
        )));
    }
    let mut acc = 0.0;
    let mut included = 0;
    for (a, b) in y.iter().zip(y_hat) {
        if a.abs() < MAPE_GUARD {
            continue;
        }
        acc += ((a - b) / a).abs();
        included += 1;
    }
    if included == 0 {
        return Err(PrgpError::EmptyData(
            "mape: every target is below the division guard".into(),
        ));
    }
    Ok(Mape {
        value: 100.0 * acc / included as f64,
        included,
        excluded: y.len() - included,
    })
}

/// Sample standard deviation, used for the σ-normalized RMSE option.
pub fn sample_std(y: &[f64]) -> Option<f64> {
    if y.len() < 2 {
        return None;
    }
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    Some((y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

/// Least-squares trend line `ŷ ≈ slope·y + intercept`.
pub fn trend_line(y: &[f64], y_hat: &[f64]) -> Option<(f64, f64)> {
    if y.len() != y_hat.len() || y.len() < 2 {
        return None;
    }
    let n = y.len() as f64;
    let mx = y.iter().sum::<f64>() / n;
    let my = y_hat.iter().sum::<f64>() / n;
    let sxx: f64 = y.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = y.iter().zip(y_hat).map(|(x, z)| (x - mx) * (z - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rmse_values() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0], Sigma::Unit).unwrap(), 0.0);
        assert_eq!(rmse(&[0.0, 0.0], &[3.0, 4.0], Sigma::Unit).unwrap(), 12.5f64.sqrt());
        assert_eq!(
            rmse(&[0.0, 0.0], &[3.0, 4.0], Sigma::Uniform(2.0)).unwrap(),
            12.5f64.sqrt() / 2.0
        );
        assert!(rmse(&[0.0], &[3.0, 4.0], Sigma::Unit).is_err());
        assert!(rmse(&[0.0], &[3.0], Sigma::Uniform(0.0)).is_err());
    }

    #[test]
    fn mape_values() {
        assert_eq!(mape(&[3.0, 4.0], &[3.0, 4.0]).unwrap().value, 0.0);
        assert_eq!(mape(&[10.0], &[11.0]).unwrap().value, 10.0);
        let m = mape(&[0.0, 10.0], &[5.0, 10.0]).unwrap();
        assert_eq!(m.value, 0.0);
        assert_eq!(m.excluded, 1);
        assert!(matches!(mape(&[0.0], &[1.0]), Err(PrgpError::EmptyData(_))));
    }

    #[test]
    fn trend_of_identity() {
        let y = [1.0, 2.5, 4.0, 7.0];
        let (s, i) = trend_line(&y, &y).unwrap();
        assert!((s - 1.0).abs() < 1e-9 && i.abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn permutation_invariant(pairs in proptest::collection::vec((1.0f64..100.0, -100.0f64..100.0), 1..30), seed in 0u64..1000) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let (y, yh): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let (ys, yhs): (Vec<f64>, Vec<f64>) = shuffled.into_iter().unzip();
            let a = rmse(&y, &yh, Sigma::Unit).unwrap();
            let b = rmse(&ys, &yhs, Sigma::Unit).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a));
            let a = mape(&y, &yh).unwrap().value;
            let b = mape(&ys, &yhs).unwrap().value;
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a));
        }

        #[test]
        fn sigma_normalization(triples in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0, 0.1f64..10.0), 1..30)) {
            let y: Vec<f64> = triples.iter().map(|t| t.0).collect();
            let yh: Vec<f64> = triples.iter().map(|t| t.1).collect();
            let s: Vec<f64> = triples.iter().map(|t| t.2).collect();
            let a = rmse(&y, &yh, Sigma::PerEntry(&s)).unwrap();
            let yn: Vec<f64> = y.iter().zip(&s).map(|(v, s)| v / s).collect();
            let yhn: Vec<f64> = yh.iter().zip(&s).map(|(v, s)| v / s).collect();
            let b = rmse(&yn, &yhn, Sigma::Unit).unwrap();
            prop_assert!((a - b).abs() <= 1e-10 * (1.0 + a));
        }
    }
}
