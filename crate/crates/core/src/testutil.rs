use crate::params::ParamSet;

/// Worst relative error between `analytic` and central differences of `f`
/// around `params`, with magnitudes floored at 1e-6.
pub fn worst_fd_error<P: ParamSet + Clone>(params: &P, analytic: &P, h: f64, f: impl Fn(&P) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..params.num_params() {
        let mut plus = params.clone();
        plus.set_flat(i, params.get_flat(i) + h);
        let mut minus = params.clone();
        minus.set_flat(i, params.get_flat(i) - h);
        let fd = (f(&plus) - f(&minus)) / (2.0 * h);
        let an = analytic.get_flat(i);
        worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
    }
    worst
}
