use super::BenchError;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SummaryStats {
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    pub min: f64,
    /// Population standard deviation.
    pub stddev: f64,
}

pub fn summarize(values: &[f64]) -> Result<SummaryStats, BenchError> {
    if values.is_empty() {
        return Err(BenchError::Empty);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(BenchError::NotFinite);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let median = if n % 2 == 1 { sorted[n / 2] } else { (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0 };
    let var = sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    Ok(SummaryStats { mean, median, max: sorted[n - 1], min: sorted[0], stddev: var.sqrt() })
}

/// Mean over series of the minimum over each series' runs.
pub fn mean_of_minima(series: &[Vec<f64>]) -> Option<f64> {
    let minima: Vec<f64> =
        series.iter().filter_map(|runs| runs.iter().copied().min_by(f64::total_cmp)).collect();
    if minima.is_empty() {
        return None;
    }
    Some(minima.iter().sum::<f64>() / minima.len() as f64)
}

/// `(secure - insecure) / insecure`, the latency penalty.
pub fn latency_penalty(insecure: f64, secure: f64) -> f64 {
    (secure - insecure) / insecure
}

/// `(insecure - secure) / insecure`, the throughput penalty.
pub fn throughput_penalty(insecure: f64, secure: f64) -> f64 {
    (insecure - secure) / insecure
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_values() {
        let s = summarize(&[3.0, 1.0, 2.0]).unwrap();
        assert_eq!((s.mean, s.median, s.min, s.max), (2.0, 2.0, 1.0, 3.0));
        assert!((s.stddev - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn single_and_even() {
        let s = summarize(&[4.5]).unwrap();
        assert_eq!(s, SummaryStats { mean: 4.5, median: 4.5, max: 4.5, min: 4.5, stddev: 0.0 });
        assert_eq!(summarize(&[1.0, 2.0, 10.0, 4.0]).unwrap().median, 3.0);
        assert_eq!(summarize(&[]), Err(BenchError::Empty));
        assert_eq!(summarize(&[f64::NAN]), Err(BenchError::NotFinite));
    }

    #[test]
    fn series_minima_fixture() {
        // Minima 2, 1 and 6 average to 3.
        let series = vec![vec![5.0, 2.0, 3.0], vec![1.0, 4.0], vec![6.0, 7.0, 9.0]];
        assert_eq!(mean_of_minima(&series), Some(3.0));
        assert_eq!(mean_of_minima(&[vec![], vec![8.0]]), Some(8.0));
        assert_eq!(mean_of_minima(&[]), None);
    }

    #[test]
    fn penalty_signs() {
        assert!((latency_penalty(0.002, 0.0025) - 0.25).abs() < 1e-12);
        assert!((throughput_penalty(8000.0, 6000.0) - 0.25).abs() < 1e-12);
    }
}
