//! Mutual information of correlated Gaussians against the closed form.

use rand_distr::{Distribution, StandardNormal};
use viewlab::eval::{self, MineConfig};
use viewlab::{rng, Result};
use viewlab_autodiff::Tensor;

pub fn run() -> Result<()> {
    let n = 4000;
    let cfg = MineConfig {
        steps: 1000,
        ..MineConfig::default()
    };
    for rho in [0.0, 0.5, 0.9] {
        let mut r = rng::stream(&[3]);
        let (mut u, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for _ in 0..n {
            let a: f64 = StandardNormal.sample(&mut r);
            let b: f64 = StandardNormal.sample(&mut r);
            u.push(a);
            v.push(rho * a + (1.0f64 - rho * rho).sqrt() * b);
        }
        let est = eval::mine_estimate(&Tensor::matrix(n, 1, u), &Tensor::matrix(n, 1, v), &cfg)?;
        let truth = 0.5 * (1.0 / (1.0f64 - rho * rho)).ln();
        println!("rho {rho}: estimate {:.3} nats, analytic {truth:.3}", est.nats);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run()
}
