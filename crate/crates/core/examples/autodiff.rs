//! Reverse-mode gradients of a small expression, checked against central
//! differences.

use trajformer::tensor::{Graph, Tensor};

fn main() -> trajformer::Result<()> {
    let x = Tensor::from_f64(&[2, 3], &[0.5, -1.0, 2.0, 0.1, 0.3, -0.7])?;
    let w = Tensor::from_f64(&[3, 2], &[1.0, 0.2, -0.4, 0.8, 0.6, -1.1])?;

    let loss = |x: &Tensor<f64>| -> trajformer::Result<f64> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let y = g.matmul(xv, wv)?;
        let y = g.relu(y);
        let p = g.softmax(y, 1)?;
        let out = g.sum(p);
        let sq = g.mul(p, p)?;
        let s = g.sum(sq);
        let total = g.add(out, s)?;
        Ok(g.value(total).item())
    };

    let mut g = Graph::new();
    let xv = g.param(&x);
    let wv = g.constant(w.clone());
    let y = g.matmul(xv, wv)?;
    let y = g.relu(y);
    let p = g.softmax(y, 1)?;
    let out = g.sum(p);
    let sq = g.mul(p, p)?;
    let s = g.sum(sq);
    let total = g.add(out, s)?;
    g.backward(total)?;
    let grad = g.grad(xv).expect("x is a parameter");

    println!("loss {:.6}", g.value(total).item());
    let h = 1e-6;
    for i in 0..x.numel() {
        let bump = |d: f64| {
            let mut data = x.to_vec();
            data[i] += d;
            loss(&Tensor::new(x.shape().to_vec(), data).unwrap()).unwrap()
        };
        let numeric = (bump(h) - bump(-h)) / (2.0 * h);
        println!("d/dx[{i}]  backprop {:+.8}  numeric {:+.8}", grad.data()[i], numeric);
    }
    Ok(())
}
