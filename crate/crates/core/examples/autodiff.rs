//! Reverse-mode gradients of a small network against central differences.
//!
//! cargo run --release --example autodiff

use cterank::nn::graph::Graph;
use cterank::nn::params::ParamStore;
use cterank::nn::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn loss(params: &ParamStore, x: &Tensor, labels: &[f64]) -> cterank::Result<(f64, cterank::nn::params::Grads)> {
    let mut g = Graph::new(params);
    let ids: Vec<_> = params.ids().collect();
    let x = g.input(x.clone());
    let w1 = g.param(ids[0]);
    let b1 = g.param(ids[1]);
    let w2 = g.param(ids[2]);
    let h = g.matmul(x, w1)?;
    let h = g.add_bias(h, b1)?;
    let h = g.tanh(h);
    let z = g.matmul(h, w2)?;
    let l = g.bce_with_logits(z, labels)?;
    Ok((g.scalar(l), g.backward(&[(l, 1.0)]).into_params()))
}

fn main() -> cterank::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut params = ParamStore::new();
    params.add_glorot("w1", 3, 5, &mut rng);
    params.add_zeros("b1", &[5]);
    params.add_glorot("w2", 5, 1, &mut rng);
    let x = Tensor::matrix(4, 3, vec![0.5, -1.0, 0.2, 1.5, 0.3, -0.7, -0.2, 0.8, 1.1, 0.0, -0.4, 0.9])?;
    let labels = [1.0, 0.0, 1.0, 0.0];
    let (l0, grads) = loss(&params, &x, &labels)?;
    println!("loss {l0:.6}");

    let h = 1e-5;
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let name = params.name(id).to_string();
        for j in 0..params.get(id).len() {
            let mut plus = params.clone();
            plus.get_mut(id).data_mut()[j] += h;
            let mut minus = params.clone();
            minus.get_mut(id).data_mut()[j] -= h;
            let numeric = (loss(&plus, &x, &labels)?.0 - loss(&minus, &x, &labels)?.0) / (2.0 * h);
            let analytic = grads.get(id).data()[j];
            println!("{name}[{j}]  analytic {analytic:+.6e}  numeric {numeric:+.6e}");
        }
    }
    Ok(())
}
