//! Small statistical helpers shared by the tests, the IOR test and the
//! Monte Carlo harness.

use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Two-sided 95% normal critical value.
pub const Z_95: f64 = 1.96;

/// Upper tail probability of a chi-square variate.
pub fn chi_square_sf(stat: f64, df: usize) -> f64 {
    if df == 0 {
        return 1.0;
    }
    let dist = ChiSquared::new(df as f64).expect("positive degrees of freedom");
    dist.sf(stat.max(0.0)).clamp(0.0, 1.0)
}

/// Pearson goodness-of-fit test of observed counts against cell probabilities.
/// Returns `(statistic, df, p-value)`. Cells with zero expected count must
/// also have zero observed count and are skipped.
pub fn chi_square_gof(observed: &[u64], probs: &[f64]) -> (f64, usize, f64) {
    let total: u64 = observed.iter().sum();
    let mut stat = 0.0;
    let mut cells = 0usize;
    for (&o, &p) in observed.iter().zip(probs) {
        let e = p * total as f64;
        if e > 0.0 {
            stat += (o as f64 - e).powi(2) / e;
            cells += 1;
        }
    }
    let df = cells.saturating_sub(1);
    (stat, df, chi_square_sf(stat, df))
}

/// Pearson test of homogeneity for an `r x c` contingency table given as rows.
pub fn chi_square_homogeneity(table: &[Vec<u64>]) -> (f64, usize, f64) {
    let ncol = table.first().map_or(0, Vec::len);
    let row_tot: Vec<f64> = table.iter().map(|r| r.iter().sum::<u64>() as f64).collect();
    let col_tot: Vec<f64> = (0..ncol)
        .map(|j| table.iter().map(|r| r[j]).sum::<u64>() as f64)
        .collect();
    let total: f64 = row_tot.iter().sum();
    let live_cols = col_tot.iter().filter(|&&c| c > 0.0).count();
    let live_rows = row_tot.iter().filter(|&&r| r > 0.0).count();
    let mut stat = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &o) in row.iter().enumerate() {
            let e = row_tot[i] * col_tot[j] / total;
            if e > 0.0 {
                stat += (o as f64 - e).powi(2) / e;
            }
        }
    }
    let df = live_rows.saturating_sub(1) * live_cols.saturating_sub(1);
    (stat, df, chi_square_sf(stat, df))
}

/// Mean and sample standard deviation (divisor `n - 1`).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
