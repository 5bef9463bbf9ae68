//! Finite-difference validation of backward passes.

use super::{backward, Data, Tape, Tensor};

/// Compares analytic gradients of `f` (a scalar-valued graph builder) against
/// central finite differences, elementwise over every input. Returns the
/// worst relative error, with the denominator floored so true-zero gradients
/// compare cleanly.
pub fn grad_check(f: &dyn Fn(&[Tensor]) -> Tensor, inputs: &[Data], base_step: f64) -> f64 {
    let eval = |datas: &[Data]| -> f64 {
        let xs: Vec<Tensor> = datas.iter().map(|d| Tensor::constant(d.clone())).collect();
        f(&xs).item()
    };

    // Analytic gradients from one taped pass.
    let tape = Tape::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|d| tape.leaf(d.clone())).collect();
    let loss = f(&leaves);
    let grads = backward(&loss);

    let mut worst = 0.0f64;
    let mut datas: Vec<Data> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(leaves[i].id().expect("leaf on tape"))
            .cloned()
            .unwrap_or_else(|| Data::zeros(input.raw_dim()));
        for (idx, &x0) in input.indexed_iter() {
            let h = base_step * x0.abs().max(1.0);
            datas[i][&idx] = x0 + h;
            let up = eval(&datas);
            datas[i][&idx] = x0 - h;
            let down = eval(&datas);
            datas[i][&idx] = x0;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[&idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}
