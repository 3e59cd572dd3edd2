use crate::error::{Error, Result};

/// Pearson correlation of a series against its index `0..n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correlation {
    pub r: f64,
    /// The series had zero variance; `r` is reported as 0.
    pub degenerate: bool,
}

pub fn pearson_r(series: &[f64]) -> Result<Correlation> {
    let n = series.len();
    if n < 3 {
        return Err(Error::InsufficientData { need: 3, got: n });
    }
    let nf = n as f64;
    let mean_t = (nf - 1.0) / 2.0;
    let mean_y = series.iter().sum::<f64>() / nf;
    let (mut sty, mut syy, mut stt) = (0.0, 0.0, 0.0);
    for (i, &y) in series.iter().enumerate() {
        let dt = i as f64 - mean_t;
        let dy = y - mean_y;
        sty += dt * dy;
        syy += dy * dy;
        stt += dt * dt;
    }
    if syy == 0.0 || !syy.is_finite() {
        return Ok(Correlation { r: 0.0, degenerate: true });
    }
    Ok(Correlation { r: (sty / (stt * syy).sqrt()).clamp(-1.0, 1.0), degenerate: false })
}

/// True when the series shows a significant downward trend:
/// `r < −λ/√(n−2)`. Short or constant series never expand.
pub fn should_expand(ell_val: &[f64], lambda: f64) -> bool {
    match pearson_r(ell_val) {
        Ok(c) if !c.degenerate => c.r < -lambda / ((ell_val.len() - 2) as f64).sqrt(),
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_cases() {
        assert_eq!(pearson_r(&[3.0, 2.0, 1.0]).unwrap().r, -1.0);
        assert_eq!(pearson_r(&[1.0, 2.0, 3.0]).unwrap().r, 1.0);
        // t̄ = 1.5, ȳ = 2.5; Σdt·dy = 4, Σdt² = 5, Σdy² = 5 → 4/5
        assert!((pearson_r(&[1.0, 3.0, 2.0, 4.0]).unwrap().r - 0.8).abs() < 1e-12);
        let c = pearson_r(&[2.0; 5]).unwrap();
        assert!(c.degenerate && c.r == 0.0);
        assert!(matches!(pearson_r(&[1.0, 2.0]), Err(Error::InsufficientData { need: 3, got: 2 })));
    }

    #[test]
    fn linear_decrease_fires_first_at_28() {
        let first = (3..60).find(|&n| should_expand(&(0..n).map(|i| -(i as f64)).collect::<Vec<_>>(), 5.0));
        assert_eq!(first, Some(28));
    }

    #[test]
    fn flat_and_rising_never_fire() {
        assert!(!should_expand(&[1.0; 100], 0.1));
        assert!(!should_expand(&(0..100).map(|i| i as f64).collect::<Vec<_>>(), 0.1));
        assert!(!should_expand(&[2.0, 1.0], 0.0));
    }
}
