//! Records a small computation on the tape, runs the reverse pass and
//! compares one gradient entry with a central difference.
//!
//! cargo run --example autodiff

use catnet::tensor::{Tape, Tensor};

fn loss(x: &Tensor<f64>, w: &Tensor<f64>) -> catnet::Result<(f64, Tensor<f64>)> {
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let wv = tape.param(w.clone());
    let h = tape.matmul(xv, wv)?;
    let h = tape.sigmoid(h);
    let p = tape.softmax(h, 1)?;
    let sq = tape.mul(p, p)?;
    let l = tape.sum(sq);
    let grads = tape.backward(l)?;
    let gw = Tensor::new(w.dims(), grads.get(wv).expect("w is a parameter").to_vec())?;
    Ok((tape.value(l).data()[0], gw))
}

fn main() -> catnet::Result<()> {
    let x = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.7).sin())?;
    let w = Tensor::from_fn(&[4, 2], |i| (i as f64 * 1.3).cos())?;
    let (value, grad) = loss(&x, &w)?;
    println!("loss = {value:.6}");
    println!("dL/dw = {:?}", grad.data());

    let eps = 1e-5;
    let bump = |delta: f64| {
        let mut w2 = w.clone();
        w2.data_mut()[5] += delta;
        loss(&x, &w2).map(|(v, _)| v)
    };
    let numeric = (bump(eps)? - bump(-eps)?) / (2.0 * eps);
    println!("w[5]: analytic {:.8}  numeric {:.8}", grad.data()[5], numeric);
    Ok(())
}
