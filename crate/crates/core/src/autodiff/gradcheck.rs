use super::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, coordinate) of the worst disagreement.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences over every coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    grad_check_coords(f, inputs, h, &coords)
}

/// Like [`grad_check`] but only over the listed `(input, coordinate)` pairs.
/// Relative error is `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check_coords<F>(f: F, inputs: &[Tensor<f64>], h: f64, coords: &[(usize, usize)]) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    g.backward(out);
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    drop(g);

    let eval = |point: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = point.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).data()[0]
    };

    let mut point = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for &(i, j) in coords {
        let x0 = point[i].data()[j];
        point[i].data_mut()[j] = x0 + h;
        let plus = eval(&point);
        point[i].data_mut()[j] = x0 - h;
        let minus = eval(&point);
        point[i].data_mut()[j] = x0;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i][j];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        report.checked += 1;
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = (i, j);
        }
    }
    report
}
