//! Builds a small graph by hand, runs reverse mode, and compares every
//! gradient entry with a central finite difference.

use shiftlab::{Graph, Tensor};

fn loss(x: &Tensor, w: &Tensor) -> (f64, Tensor) {
    let mut g = Graph::new(0);
    let xn = g.constant(x.clone());
    let wn = g.input(w.clone());
    let h = g.matmul(xn, wn).unwrap();
    let h = g.relu(h).unwrap();
    let y = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let l = g.softmax_cross_entropy(h, y).unwrap();
    let l = g.scale(l, 3.0).unwrap();
    let value = g.value(l).item();
    let grads = g.backward(l).unwrap();
    (value, grads.get(wn).unwrap().clone())
}

fn main() {
    let x = Tensor::matrix(2, 3, vec![0.3, -1.2, 0.8, 1.5, 0.1, -0.4]).unwrap();
    let w = Tensor::matrix(3, 2, vec![0.7, 0.9, 0.4, 0.9, -1.1, 0.5]).unwrap();
    let (_, analytic) = loss(&x, &w);
    let h = 1e-6;
    for i in 0..w.numel() {
        let mut plus = w.clone();
        plus.data_mut()[i] += h;
        let mut minus = w.clone();
        minus.data_mut()[i] -= h;
        let numeric = (loss(&x, &plus).0 - loss(&x, &minus).0) / (2.0 * h);
        println!("w[{i}] analytic {:+.9} numeric {:+.9}", analytic.data()[i], numeric);
    }
}
