//! Shared aggregation arithmetic.

use crate::error::{contract, Result};
use crate::model::ClientUpdate;

/// Middle element of the sorted values; mean of the two middle elements for
/// even lengths.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(contract("median of an empty set"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    Ok(if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    })
}

/// Convex combination `Σ_k coeffs[k] · deltas[k]` for coefficients summing to
/// one. Evaluated relative to the first delta, so mixing identical deltas
/// returns that delta bit for bit.
pub fn mix_deltas(coeffs: &[f64], deltas: &[&[f64]]) -> Result<Vec<f64>> {
    if coeffs.len() != deltas.len() {
        return Err(contract(format!(
            "{} mixing coefficients for {} deltas",
            coeffs.len(),
            deltas.len()
        )));
    }
    let Some(first) = deltas.first() else {
        return Err(contract("nothing to mix"));
    };
    if let Some(bad) = deltas.iter().find(|d| d.len() != first.len()) {
        return Err(contract(format!(
            "delta length {} differs from {}",
            bad.len(),
            first.len()
        )));
    }
    let mut out = first.to_vec();
    for (k, value) in out.iter_mut().enumerate() {
        let base = *value;
        let offset = coeffs
            .iter()
            .zip(deltas)
            .fold(0.0, |acc, (c, d)| acc + c * (d[k] - base));
        *value = base + offset;
    }
    Ok(out)
}

/// Sample-size-weighted mean of client deltas: `Σ_k (n_k / Σ n) · Δθ_k`.
pub fn fedavg_aggregate(updates: &[ClientUpdate]) -> Result<Vec<f64>> {
    if updates.is_empty() {
        return Err(contract("cannot average an empty update list"));
    }
    if updates.iter().any(|u| u.train_size == 0) {
        return Err(contract("client update with zero training samples"));
    }
    let total: usize = updates.iter().map(|u| u.train_size).sum();
    let coeffs: Vec<f64> = updates
        .iter()
        .map(|u| u.train_size as f64 / total as f64)
        .collect();
    let deltas: Vec<&[f64]> = updates.iter().map(|u| u.delta.as_slice()).collect();
    mix_deltas(&coeffs, &deltas)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn update(client_id: usize, delta: Vec<f64>, train_size: usize) -> ClientUpdate {
        ClientUpdate {
            client_id,
            delta,
            train_size,
        }
    }

    fn sorted_median(values: &[f64]) -> f64 {
        let mut v = values.to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[0.5]).unwrap(), 0.5);
        assert_eq!(median(&[0.6, 0.8]).unwrap(), sorted_median(&[0.6, 0.8]));
        assert!((median(&[0.6, 0.8]).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(median(&[0.9, 0.1, 0.5]).unwrap(), 0.5);
        assert!(median(&[]).is_err());
    }

    #[test]
    fn fedavg_examples() {
        let same = vec![
            update(0, vec![0.3, -1.7], 5),
            update(1, vec![0.3, -1.7], 11),
            update(2, vec![0.3, -1.7], 2),
        ];
        assert_eq!(fedavg_aggregate(&same).unwrap(), vec![0.3, -1.7]);

        let mixed = vec![update(0, vec![1.0, 0.0], 1), update(1, vec![0.0, 1.0], 3)];
        assert_eq!(fedavg_aggregate(&mixed).unwrap(), vec![0.25, 0.75]);

        let single = vec![update(4, vec![2.5, -0.125, 7.0], 9)];
        assert_eq!(fedavg_aggregate(&single).unwrap(), vec![2.5, -0.125, 7.0]);

        assert!(fedavg_aggregate(&[]).is_err());
    }

    #[test]
    fn mix_agrees_with_naive_sum() {
        let deltas = [
            vec![0.1, -0.4, 2.0],
            vec![1.5, 0.2, -0.3],
            vec![-0.7, 0.9, 0.05],
        ];
        let refs: Vec<&[f64]> = deltas.iter().map(|d| d.as_slice()).collect();
        let coeffs = [0.2, 0.5, 0.3];
        let mixed = mix_deltas(&coeffs, &refs).unwrap();
        for k in 0..3 {
            let naive: f64 = (0..3).map(|j| coeffs[j] * deltas[j][k]).sum();
            assert!((mixed[k] - naive).abs() < 1e-15);
        }
    }
}
