//! Straightforward reimplementations used as oracles by the acceptance
//! checks. Nothing here calls into the optimized code paths.

/// Median by full sort; mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite accuracies"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Shift by the accuracy's distance from the median, clamp at zero,
/// normalize, fall back to uniform.
pub fn weight_update(prev: &[f64], accs: &[f64], eta: f64) -> Vec<f64> {
    let m = median(accs);
    let mut raw = Vec::with_capacity(prev.len());
    for k in 0..prev.len() {
        let v = prev[k] + eta * (accs[k] - m);
        raw.push(if v > 0.0 { v } else { 0.0 });
    }
    let mut total = 0.0;
    for v in &raw {
        total += v;
    }
    if total == 0.0 {
        return vec![1.0 / prev.len() as f64; prev.len()];
    }
    raw.iter().map(|v| v / total).collect()
}

/// A validation example: features and a 0/1 label.
pub type Labeled = (Vec<f64>, u8);

/// `params` holds the weights followed by the bias.
pub fn accuracy(params: &[f64], data: &[Labeled]) -> f64 {
    let d = params.len() - 1;
    let mut correct = 0;
    for (x, y) in data {
        let mut z = params[d];
        for k in 0..d {
            z += params[k] * x[k];
        }
        let p = 1.0 / (1.0 + (-z).exp());
        let predicted = if p >= 0.5 { 1 } else { 0 };
        if predicted == *y {
            correct += 1;
        }
    }
    correct as f64 / data.len() as f64
}

/// One FedSmart round for every client: score each peer's delta on the
/// client's own validation data, update the weights, apply the weighted sum
/// of deltas.
pub fn fedsmart_round(
    models: &[Vec<f64>],
    weights: &[Vec<f64>],
    deltas: &[Vec<f64>],
    validation: &[Vec<Labeled>],
    eta: f64,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = models.len();
    let mut new_models = Vec::with_capacity(n);
    let mut new_weights = Vec::with_capacity(n);
    for i in 0..n {
        let mut accs = Vec::with_capacity(n);
        for delta in deltas {
            let candidate: Vec<f64> = models[i].iter().zip(delta).map(|(a, b)| a + b).collect();
            accs.push(accuracy(&candidate, &validation[i]));
        }
        let w = weight_update(&weights[i], &accs, eta);
        let mut model = models[i].clone();
        for (j, delta) in deltas.iter().enumerate() {
            for k in 0..model.len() {
                model[k] += w[j] * delta[k];
            }
        }
        new_models.push(model);
        new_weights.push(w);
    }
    (new_models, new_weights)
}

/// Mean cross-entropy of a logistic model, written out term by term.
pub fn loss(params: &[f64], data: &[Labeled]) -> f64 {
    let d = params.len() - 1;
    let mut total = 0.0;
    for (x, y) in data {
        let mut z = params[d];
        for k in 0..d {
            z += params[k] * x[k];
        }
        let p = 1.0 / (1.0 + (-z).exp());
        total -= if *y == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    total / data.len() as f64
}

/// Central finite differences of `f` at `at`.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> f64, at: &[f64], h: f64) -> Vec<f64> {
    (0..at.len())
        .map(|k| {
            let mut up = at.to_vec();
            let mut down = at.to_vec();
            up[k] += h;
            down[k] -= h;
            (f(&up) - f(&down)) / (2.0 * h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_by_hand() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn weight_update_by_hand() {
        // accs [0.9, 0.5, 0.7, 0.3]: median 0.6, η = 0.5
        let w = weight_update(&[0.25; 4], &[0.9, 0.5, 0.7, 0.3], 0.5);
        let expected = [0.4, 0.2, 0.3, 0.1];
        for (a, b) in w.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(
            weight_update(&[0.5, 0.5], &[0.0, 1.0], 10.0),
            vec![0.0, 1.0]
        );
    }

    #[test]
    fn numeric_gradient_of_a_quadratic() {
        let g = numeric_gradient(|v| v[0] * v[0] + 3.0 * v[1], &[2.0, 5.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }
}
