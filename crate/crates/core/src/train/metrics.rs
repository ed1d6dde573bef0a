use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

fn check(logits: &Tensor, labels: &[usize], mask: &[usize]) -> Result<()> {
    if mask.is_empty() {
        return invalid("empty evaluation mask");
    }
    if labels.len() != logits.rows() {
        return Err(Error::shape("metrics", format!("{} labels for {} logit rows", labels.len(), logits.rows())));
    }
    if let Some(&i) = mask.iter().find(|&&i| i >= logits.rows() || labels[i] >= logits.cols()) {
        return invalid(format!("mask entry {i} is out of range"));
    }
    Ok(())
}

/// Mean `−log softmax(logits_i)[y_i]` over `mask`.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize], mask: &[usize]) -> Result<f64> {
    check(logits, labels, mask)?;
    let total: f64 = mask
        .iter()
        .map(|&i| {
            let row = logits.row_slice(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[labels[i]]
        })
        .sum();
    Ok(total / mask.len() as f64)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Share of `mask` whose argmax logit equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize], mask: &[usize]) -> Result<f64> {
    check(logits, labels, mask)?;
    let hits = mask.iter().filter(|&&i| argmax(logits.row_slice(i)) == labels[i]).count();
    Ok(hits as f64 / mask.len() as f64)
}

/// `counts[true][predicted]` over `mask`.
pub fn confusion(logits: &Tensor, labels: &[usize], mask: &[usize]) -> Result<Vec<Vec<usize>>> {
    check(logits, labels, mask)?;
    let c = logits.cols();
    let mut counts = vec![vec![0; c]; c];
    for &i in mask {
        counts[labels[i]][argmax(logits.row_slice(i))] += 1;
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn uniform_logits_cost_log_classes() {
        let logits = Tensor::zeros(3, 5);
        let loss = cross_entropy_loss(&logits, &[0, 3, 4], &[0, 1, 2]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_logit_costs_nothing() {
        let logits = Tensor::matrix(1, 3, vec![0.0, 800.0, 0.0]).unwrap();
        assert!(cross_entropy_loss(&logits, &[1], &[0]).unwrap() < 1e-300);
    }

    #[test]
    fn matches_tape_and_independent_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = Tensor::matrix(20, 4, (0..80).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap();
        let labels: Vec<usize> = (0..20).map(|_| rng.random_range(0..4)).collect();
        let mask: Vec<usize> = (0..20).step_by(3).collect();
        let ours = cross_entropy_loss(&logits, &labels, &mask).unwrap();
        let oracle: f64 = mask
            .iter()
            .map(|&i| {
                let z: f64 = logits.row_slice(i).iter().map(|v| v.exp()).sum();
                -(logits.get(i, labels[i]).exp() / z).ln()
            })
            .sum::<f64>()
            / mask.len() as f64;
        assert!((ours - oracle).abs() < 1e-12);
        let mut tape = Tape::new();
        let v = tape.constant(logits.clone());
        let l = tape.softmax_cross_entropy(v, &mask, &mask.iter().map(|&i| labels[i]).collect::<Vec<_>>()).unwrap();
        assert!((tape.value(l).item() - ours).abs() < 1e-12);
    }

    #[test]
    fn perfect_logits_and_tie_break() {
        let logits = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(accuracy(&logits, &[0, 1], &[0, 1]).unwrap(), 1.0);
        let flat = Tensor::zeros(4, 2);
        // balanced mask: class 0 share is one half
        assert_eq!(accuracy(&flat, &[0, 1, 0, 1], &[0, 1, 2, 3]).unwrap(), 0.5);
        assert!(accuracy(&flat, &[0, 1, 0, 1], &[]).is_err());
    }

    #[test]
    fn accuracy_agrees_with_confusion_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = Tensor::matrix(50, 3, (0..150).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let labels: Vec<usize> = (0..50).map(|_| rng.random_range(0..3)).collect();
        let mask: Vec<usize> = (0..50).collect();
        let cm = confusion(&logits, &labels, &mask).unwrap();
        let diag: usize = (0..3).map(|c| cm[c][c]).sum();
        assert_eq!(accuracy(&logits, &labels, &mask).unwrap(), diag as f64 / 50.0);
    }
}
