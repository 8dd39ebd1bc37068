use crate::error::{Error, Result};
use crate::tensor::{AttnMask, Graph, Scalar, Var};

/// Output of scaled dot-product attention together with its weights.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub output: Var,
    pub weights: Var,
}

/// `softmax(Q Kᵀ / √d_k) · V`, with disallowed (query, key) pairs given zero
/// weight.
///
/// `q` is `[.., tq, d_k]`, `k` is `[.., tk, d_k]` and `v` is `[.., tk, d_v]`
/// with matching leading extents. A query with no allowed key is an error.
pub fn attention<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&AttnMask>,
) -> Result<Attention> {
    let (sq, sk) = (g.shape(q).to_vec(), g.shape(k).to_vec());
    let d_k = *sq.last().ok_or_else(|| Error::contract("attention on a rank-0 query"))?;
    if sk.last() != Some(&d_k) || sq.len() != sk.len() {
        return Err(Error::Shape {
            op: "attention",
            lhs: sq,
            rhs: sk,
        });
    }
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, T::from_f64(1.0 / (d_k as f64).sqrt()));
    let weights = match mask {
        Some(m) => g.masked_softmax(scaled, m)?,
        None => {
            let last = g.shape(scaled).len() - 1;
            g.softmax(scaled, last)?
        }
    };
    let output = g.matmul(weights, v)?;
    Ok(Attention { output, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn c(g: &mut Graph<f64>, shape: &[usize], v: &[f64]) -> Var {
        g.constant(Tensor::from_f64(shape, v).unwrap())
    }

    #[test]
    fn single_key_returns_value() {
        let mut g = Graph::new();
        let q = c(&mut g, &[1, 2], &[0.3, -1.2]);
        let v = c(&mut g, &[1, 3], &[7.0, -2.0, 0.5]);
        let a = attention(&mut g, q, q, v, None).unwrap();
        assert_eq!(g.value(a.output).data(), &[7.0, -2.0, 0.5]);
    }

    #[test]
    fn orthogonal_query_averages_values() {
        let mut g = Graph::new();
        let q = c(&mut g, &[1, 3], &[0.0, 0.0, 1.0]);
        let k = c(&mut g, &[2, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let v = c(&mut g, &[2, 2], &[1.0, 2.0, 3.0, 6.0]);
        let a = attention(&mut g, q, k, v, None).unwrap();
        assert_eq!(g.value(a.output).data(), &[2.0, 4.0]);
    }

    #[test]
    fn closed_form_weights() {
        // d_k = 4, scores (√4, 0) after scaling -> softmax(1, 0)
        let mut g = Graph::new();
        let q = c(&mut g, &[1, 4], &[1.0, 1.0, 1.0, 1.0]);
        let k = c(&mut g, &[2, 4], &[0.5, 0.5, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0]);
        let v = c(&mut g, &[2, 1], &[10.0, -4.0]);
        let a = attention(&mut g, q, k, v, None).unwrap();
        let e = std::f64::consts::E;
        let (w0, w1) = (e / (e + 1.0), 1.0 / (e + 1.0));
        let w = g.value(a.weights).data();
        assert!((w[0] - 0.7311).abs() < 1e-4 && (w[1] - 0.2689).abs() < 1e-4);
        assert!((g.value(a.output).data()[0] - (10.0 * w0 - 4.0 * w1)).abs() < 1e-12);
    }

    #[test]
    fn fully_masked_row_is_rejected() {
        let mut g = Graph::new();
        let q = c(&mut g, &[1, 1, 2], &[1.0, 0.0]);
        let mask = AttnMask::from_key_presence(1, 1, 1, &[false]).unwrap();
        assert!(matches!(attention(&mut g, q, q, q, Some(&mask)), Err(Error::Contract(_))));
    }
}
