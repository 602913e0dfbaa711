//! Compare tape gradients with central differences on a small expression.
use metaproto::autodiff::{Graph, Tensor};

fn loss(x: &Tensor, w: &Tensor) -> (f64, Vec<f64>) {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.input(w.clone());
    let y = g.matmul(xv, wv).unwrap();
    let y = g.relu(y);
    let ce = g.softmax_cross_entropy(y, &[0, 2]).unwrap();
    let l = g.mean(ce);
    g.backward(l).unwrap();
    (g.value(l).item(), g.grad(wv).unwrap().to_vec())
}

fn main() {
    let x = Tensor::new(vec![2, 3], vec![0.3, -1.2, 0.8, 1.1, 0.4, -0.5]).unwrap();
    let w = Tensor::new(vec![3, 3], (0..9).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
    let (_, grad) = loss(&x, &w);
    let h = 1e-6;
    for j in 0..w.len() {
        let mut p = w.clone();
        p.data_mut()[j] += h;
        let mut m = w.clone();
        m.data_mut()[j] -= h;
        let numeric = (loss(&x, &p).0 - loss(&x, &m).0) / (2.0 * h);
        println!("w[{j}] tape {:+.8} numeric {:+.8}", grad[j], numeric);
    }
}
