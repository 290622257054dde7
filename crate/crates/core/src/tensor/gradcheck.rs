use super::{Result, Tape, Tensor, Var};

/// Outcome of a central-difference gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Max over coordinates of `|a - n| / max(|a|, |n|, 1e-8)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coordinates: usize,
}

impl GradCheck {
    fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck {
            max_rel_error: self.max_rel_error.max(other.max_rel_error),
            max_abs_error: self.max_abs_error.max(other.max_abs_error),
            coordinates: self.coordinates + other.coordinates,
        }
    }
}

/// Compares [`Tape::backward`] against `(f(x + h) - f(x - h)) / 2h` for every
/// coordinate of every input. `f` must build a scalar on the given tape.
pub fn finite_difference_check<Fun>(f: Fun, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheck>
where
    Fun: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = f(&tape, &vars)?;
        tape.backward(loss)?;
        vars.iter().map(|&v| tape.grad(v).expect("leaf gradient")).collect()
    };

    let eval = |point: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = point.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        let value = tape.value(loss).item();
        Ok(value)
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        coordinates: 0,
    };
    let mut point = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for i in 0..point[which].len() {
            let original = point[which].data()[i];
            point[which].data_mut()[i] = original + h;
            let plus = eval(&point)?;
            point[which].data_mut()[i] = original - h;
            let minus = eval(&point)?;
            point[which].data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-8);
            report = report.merge(GradCheck {
                max_rel_error: rel,
                max_abs_error: abs,
                coordinates: 1,
            });
        }
    }
    Ok(report)
}

/// Directional variant for inputs too large to probe coordinate by
/// coordinate: each input tensor `i` is perturbed along `directions[i]` and
/// `<grad_i, u_i>` is compared with the central difference along `u_i`.
/// Reports one coordinate per input.
pub fn directional_check<Fun>(f: Fun, inputs: &[Tensor<f64>], directions: &[Tensor<f64>], h: f64) -> Result<GradCheck>
where
    Fun: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    assert_eq!(inputs.len(), directions.len(), "one direction per input");
    let analytic: Vec<f64> = {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = f(&tape, &vars)?;
        tape.backward(loss)?;
        vars.iter()
            .zip(directions)
            .map(|(&v, u)| tape.grad(v).expect("leaf gradient").dot(u))
            .collect()
    };

    let eval = |point: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = point.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        let value = tape.value(loss).item();
        Ok(value)
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        coordinates: 0,
    };
    let mut point = inputs.to_vec();
    for (which, u) in directions.iter().enumerate() {
        let original = point[which].clone();
        let shifted = |sign: f64| -> Result<Tensor<f64>> {
            let data: Vec<f64> = original.data().iter().zip(u.data()).map(|(x, d)| x + sign * h * d).collect();
            Tensor::new(original.shape(), data)
        };
        point[which] = shifted(1.0)?;
        let plus = eval(&point)?;
        point[which] = shifted(-1.0)?;
        let minus = eval(&point)?;
        point[which] = original;

        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[which];
        let abs = (a - numeric).abs();
        report = report.merge(GradCheck {
            max_rel_error: abs / a.abs().max(numeric.abs()).max(1e-8),
            max_abs_error: abs,
            coordinates: 1,
        });
    }
    Ok(report)
}
