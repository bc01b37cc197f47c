//! Adadelta on a tilted quadratic bowl, with a projection that keeps the
//! parameters in a box.

use qsense::optimizer::{run_sgd, Evaluation, Objective, Projection, SgdSettings};
use rand_chacha::ChaCha8Rng;

struct Bowl {
    center: Vec<f64>,
}

impl Objective for Bowl {
    fn evaluate(&mut self, theta: &[f64], _rng: &mut ChaCha8Rng) -> qsense::Result<Evaluation> {
        let gradient: Vec<f64> = theta.iter().zip(&self.center).map(|(t, c)| t - c).collect();
        let loss = 0.5 * gradient.iter().map(|g| g * g).sum::<f64>() + 1e-3;
        Ok(Evaluation { loss, eta: loss, gradient, minibatch: Vec::new() })
    }

    fn project(&self, theta: Vec<f64>) -> Projection {
        Projection::identity(theta.into_iter().map(|t| t.clamp(-2.0, 2.0)).collect())
    }
}

fn main() {
    let mut bowl = Bowl { center: vec![1.0, -0.5, 3.0] };
    let settings = SgdSettings { iterations: 2000, record_stride: 250, ..SgdSettings::default() };
    let record = run_sgd(&mut bowl, vec![0.0; 3], &settings).expect("bowl never fails");
    for s in &record.snapshots {
        println!("{:>5}  loss {:.6}  theta {:?}", s.iteration, s.loss, s.theta);
    }
}
