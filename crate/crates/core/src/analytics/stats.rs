use super::AnalyticsError;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample Pearson correlation, computed on mean-centred values.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, AnalyticsError> {
    if x.len() != y.len() {
        return Err(AnalyticsError::LengthMismatch { x: x.len(), y: y.len() });
    }
    if x.len() < 2 {
        return Err(AnalyticsError::TooFewPoints(x.len()));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(AnalyticsError::UndefinedCorrelation);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// Textbook single-pass formula, as an independent oracle.
    fn oracle(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let sx: f64 = x.iter().sum();
        let sy: f64 = y.iter().sum();
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        let sxx: f64 = x.iter().map(|a| a * a).sum();
        let syy: f64 = y.iter().map(|b| b * b).sum();
        (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
    }

    #[test]
    fn perfect_and_undefined() {
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(AnalyticsError::UndefinedCorrelation));
        assert_eq!(pearson(&[1.0], &[1.0]), Err(AnalyticsError::TooFewPoints(1)));
    }

    #[test]
    fn random_samples_match_oracle() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        for _ in 0..100 {
            let x: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..100.0)).collect();
            let y: Vec<f64> = x.iter().map(|v| v * 0.3 + rng.random_range(-40.0..40.0)).collect();
            let r = pearson(&x, &y).unwrap();
            assert!((r - oracle(&x, &y)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn symmetric_bounded_affine_invariant(
            pts in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 3..40),
            a in 0.1f64..10.0, b in -100.0f64..100.0,
        ) {
            let x: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let y: Vec<f64> = pts.iter().map(|p| p.1).collect();
            if let Ok(r) = pearson(&x, &y) {
                prop_assert!((-1.0..=1.0).contains(&r));
                prop_assert!((pearson(&y, &x).unwrap() - r).abs() < 1e-12);
                let xs: Vec<f64> = x.iter().map(|v| a * v + b).collect();
                prop_assert!((pearson(&xs, &y).unwrap() - r).abs() < 1e-9);
            }
        }
    }
}
