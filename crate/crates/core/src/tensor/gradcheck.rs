use super::{Binding, Graph, Param, ParamSet, Result, TensorError, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

/// Denominator floor of [`grad_check`].
pub const DEFAULT_FLOOR: f64 = 1e-8;

/// Compares `backward` against central differences `(f(p+h) − f(p−h)) / 2h`
/// for every coordinate of every parameter accepted by `select`.
///
/// Relative error uses the denominator `max(|a|, |b|, 1e-8)`. The loss is
/// always evaluated in 64-bit precision.
pub fn grad_check<F, S, E>(params: &ParamSet, h: f64, select: S, f: F) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph, &Binding) -> Result<Var, E>,
    S: Fn(&str, &Param) -> bool,
    E: From<TensorError>,
{
    grad_check_with_floor(params, h, DEFAULT_FLOOR, select, f)
}

/// [`grad_check`] with denominator `max(|a|, |b|, floor)`. Gradients smaller
/// than `floor` are then compared in absolute terms, to `floor · tolerance`;
/// `floor` should sit above the roundoff resolution of the difference
/// quotient, roughly `ε·|f| / h`.
pub fn grad_check_with_floor<F, S, E>(
    params: &ParamSet,
    h: f64,
    floor: f64,
    select: S,
    f: F,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph, &Binding) -> Result<Var, E>,
    S: Fn(&str, &Param) -> bool,
    E: From<TensorError>,
{
    if !(h > 0.0 && floor > 0.0) {
        return Err(TensorError::Invalid("grad_check: h and floor must be positive".into()).into());
    }
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let loss = f(&mut g, &b)?;
    let grads = b.collect(&g.backward(loss)?, params);

    let eval = |ps: &ParamSet| -> Result<f64, E> {
        let mut g = Graph::new();
        let b = ps.bind(&mut g);
        let l = f(&mut g, &b)?;
        let v = g.value(l).item();
        if !v.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" }.into());
        }
        Ok(v)
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    let names: Vec<String> = params
        .iter()
        .filter(|(n, p)| select(n, p))
        .map(|(n, _)| n.clone())
        .collect();
    for name in names {
        let len = params.get(&name)?.value.len();
        for i in 0..len {
            let orig = params.get(&name)?.value.data()[i];
            work.get_mut(&name)?.value.data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(&name)?.value.data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(&name)?.value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads[&name].data()[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            report.coords_checked += 1;
            if rel > report.max_rel_err || report.worst_param.is_empty() {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
