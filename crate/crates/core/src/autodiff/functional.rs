//! Checked value-level entry points for the primitives. Each builds a
//! throwaway constant graph so the kernels are exactly the ones used in
//! training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AutodiffError, Float, Graph, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutMode {
    Train,
    Eval,
}

fn finite<T: Float>(t: &Tensor<T>, what: &'static str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(AutodiffError::NonFinite(what))
    }
}

pub fn softmax_rows<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    finite(x, "softmax input")?;
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = g.softmax_rows(v);
    Ok(g.value(y).clone())
}

pub fn layer_norm<T: Float>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    finite(x, "layer norm input")?;
    let h = x.rows_cols().1;
    if gamma.len() != h || beta.len() != h {
        return Err(AutodiffError::ShapeMismatch(format!(
            "layer norm over width {h} with gamma {} / beta {}",
            gamma.len(),
            beta.len()
        )));
    }
    let mut g = Graph::new();
    let (xv, gv, bv) = (g.constant(x.clone()), g.constant(gamma.clone()), g.constant(beta.clone()));
    let y = g.layer_norm(xv, gv, bv, eps);
    Ok(g.value(y).clone())
}

/// Mean over rows of `-log softmax(logits)[gold]`.
pub fn cross_entropy_loss<T: Float>(logits: &Tensor<T>, gold: &[usize]) -> Result<f64> {
    finite(logits, "logits")?;
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let targets: Vec<Option<usize>> = gold.iter().map(|&c| Some(c)).collect();
    let loss = g.cross_entropy(l, &targets)?;
    Ok(g.value(loss).data()[0].to_f64().unwrap())
}

pub fn dropout<T: Float>(x: &Tensor<T>, p: f64, mode: DropoutMode, seed: u64) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(AutodiffError::BadDropout(p));
    }
    if mode == DropoutMode::Eval {
        return Ok(x.clone());
    }
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = g.dropout(v, p, &mut rng);
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor<f64> {
        Tensor::new(&[1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let u = softmax_rows(&row(&[0.0, 0.0, 0.0])).unwrap();
        assert!(u.data().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
        // reference: numpy exp(x - 3) / sum
        let s = softmax_rows(&row(&[1.0, 2.0, 3.0])).unwrap();
        for (p, e) in s.data().iter().zip([0.090_030_57, 0.244_728_47, 0.665_240_96]) {
            assert!((p - e).abs() < 1e-8);
        }
        let shifted = softmax_rows(&row(&[101.0, 102.0, 103.0])).unwrap();
        for (a, b) in s.data().iter().zip(shifted.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(
            softmax_rows(&row(&[f64::NAN, 0.0])).unwrap_err(),
            AutodiffError::NonFinite("softmax input")
        );
    }

    #[test]
    fn layer_norm_examples() {
        let ones = row(&[1.0, 1.0]);
        let zeros = row(&[0.0, 0.0]);
        let c = layer_norm(&row(&[4.0, 4.0]), &ones, &zeros, 1e-12).unwrap();
        assert_eq!(c.data(), &[0.0, 0.0]);
        let y = layer_norm(&row(&[1.0, 3.0]), &ones, &zeros, 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);
        let b = layer_norm(&row(&[1.0, 3.0]), &zeros, &row(&[0.7, 0.7]), 1e-12).unwrap();
        assert_eq!(b.data(), &[0.7, 0.7]);
        assert!(layer_norm(&row(&[1.0, 3.0]), &row(&[1.0]), &zeros, 1e-12).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let confident = Tensor::new(&[1, 2], vec![0.0, -1e4]).unwrap();
        assert!(cross_entropy_loss(&confident, &[0]).unwrap().abs() < 1e-12);
        let uniform = Tensor::new(&[1, 2], vec![0.3, 0.3]).unwrap();
        assert!((cross_entropy_loss(&uniform, &[1]).unwrap() - 0.693_147_180_559_945_3).abs() < 1e-12);
        let one = Tensor::new(&[1, 3], vec![0.1, 0.5, -0.2]).unwrap();
        let two = Tensor::new(&[2, 3], vec![0.1, 0.5, -0.2, 0.1, 0.5, -0.2]).unwrap();
        let a = cross_entropy_loss(&one, &[2]).unwrap();
        let b = cross_entropy_loss(&two, &[2, 2]).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert_eq!(
            cross_entropy_loss(&one, &[3]).unwrap_err(),
            AutodiffError::IndexOutOfRange { index: 3, classes: 3 }
        );
    }

    #[test]
    fn dropout_modes() {
        let x = Tensor::<f64>::full(&[100_000], 1.0);
        assert_eq!(dropout(&x, 0.0, DropoutMode::Train, 1).unwrap(), x);
        assert_eq!(dropout(&x, 0.5, DropoutMode::Eval, 1).unwrap(), x);
        let y = dropout(&x, 0.1, DropoutMode::Train, 7).unwrap();
        let mean = y.data().iter().sum::<f64>() / y.len() as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
        let zeros = y.data().iter().filter(|&&v| v == 0.0).count();
        assert!((9_000..11_000).contains(&zeros));
        assert_eq!(y, dropout(&x, 0.1, DropoutMode::Train, 7).unwrap());
        assert_eq!(dropout(&x, 1.0, DropoutMode::Train, 1).unwrap_err(), AutodiffError::BadDropout(1.0));
    }
}
