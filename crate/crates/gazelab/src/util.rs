//! Small shared numerics: seed derivation, float formatting, medians, and a
//! dense 3x3 solver for the calibration normal equations.

use crate::error::{Error, Result};

/// SplitMix64 step; the standard finalizer used to derive stream seeds.
fn splitmix64(state: &mut u64) {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    let _ = z ^ (z >> 31);
}

/// Derives a child seed from a base seed and a tag path. Used so every
/// recording / subject / purpose gets an independent, reproducible stream.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut state = base;
    splitmix64(&mut state);
    let mut acc = state;
    for &t in tags {
        let mut s = acc ^ t.wrapping_mul(0x9e3779b97f4a7c15);
        splitmix64(&mut s);
        acc = s
            .rotate_left(17)
            .wrapping_mul(0xd6e8feb86659fd93)
            .wrapping_add(t);
    }
    // Final avalanche.
    let mut z = acc;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Renders a float with 9 significant digits, the samples-file contract.
/// `quantize_sig9` round-trips through the same representation so in-memory
/// values equal their serialized form bit for bit.
pub fn format_sig9(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else {
        format!("{:.8e}", x)
    }
}

pub fn quantize_sig9(x: f64) -> f64 {
    if x.is_nan() {
        f64::NAN
    } else {
        format!("{:.8e}", x).parse().expect("sig9 round-trip")
    }
}

/// Median of a slice; ignores nothing (caller filters). Errors when empty.
pub fn median(values: &mut Vec<f64>) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::numeric("median of empty set"));
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("median input must be finite"));
    let n = values.len();
    Ok(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Mean and sample standard deviation (n-1 denominator).
pub fn mean_sample_sd(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::validation(format!(
            "need >= 2 values for mean/sd, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    Ok((mean, (ss / (n - 1.0)).sqrt()))
}

/// Solves A x = b for a 3x3 system with partial pivoting.
pub fn solve3(a: [[f64; 3]; 3], b: [f64; 3]) -> Result<[f64; 3]> {
    let mut m = [[0.0f64; 4]; 3];
    for r in 0..3 {
        m[r][..3].copy_from_slice(&a[r]);
        m[r][3] = b[r];
    }
    for col in 0..3 {
        let pivot = (col..3)
            .max_by(|&i, &j| {
                m[i][col]
                    .abs()
                    .partial_cmp(&m[j][col].abs())
                    .expect("finite pivot")
            })
            .expect("non-empty pivot range");
        if m[pivot][col].abs() < 1e-12 {
            return Err(Error::numeric("singular normal equations"));
        }
        m.swap(col, pivot);
        for row in (col + 1)..3 {
            let f = m[row][col] / m[col][col];
            for k in col..4 {
                m[row][k] -= f * m[col][k];
            }
        }
    }
    let mut x = [0.0f64; 3];
    for row in (0..3).rev() {
        let mut acc = m[row][3];
        for k in (row + 1)..3 {
            acc -= m[row][k] * x[k];
        }
        x[row] = acc / m[row][row];
    }
    Ok(x)
}
