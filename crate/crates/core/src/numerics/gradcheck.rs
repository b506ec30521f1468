use super::{NumericsError, ParamStore, Tape, Tensor, Var};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Smaller steps tried when a coordinate disagrees at `FD_STEP`. A ReLU or
/// max-pool switch inside the probe interval corrupts the difference
/// quotient; shrinking the interval steps off the kink, while a wrong
/// analytic gradient disagrees at every step.
const FD_REFINE: [f64; 2] = [1e-6, 1e-7];

/// Denominator floor so coordinates with near-zero gradient are compared
/// absolutely instead of amplifying round-off.
const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// Label of the worst coordinate, e.g. `enc.w0[17]`.
    pub worst: String,
    pub coords: usize,
    pub passed: bool,
}

impl FdReport {
    fn empty() -> Self {
        Self {
            max_rel_error: 0.0,
            worst: String::new(),
            coords: 0,
            passed: true,
        }
    }

    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        self.coords += 1;
        let err = rel_error(analytic, numeric);
        if !(err <= self.max_rel_error) {
            self.max_rel_error = err;
            self.worst = format!("{} (analytic {analytic:e}, numeric {numeric:e})", label());
        }
    }

    fn merge(&mut self, other: FdReport) {
        self.coords += other.coords;
        if !(other.max_rel_error <= self.max_rel_error) {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }

    fn finish(mut self, tol: f64) -> Self {
        self.passed = self.max_rel_error < tol;
        self
    }
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    if analytic.is_finite() && numeric.is_finite() {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
    } else {
        f64::INFINITY
    }
}

/// Compares `analytic` against central differences of `f` at `x`.
pub fn finite_diff_check(
    mut f: impl FnMut(&Tensor) -> f64,
    x: &Tensor,
    analytic: &Tensor,
    tol: f64,
) -> FdReport {
    let mut report = FdReport::empty();
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        let a = analytic.data().get(i).copied().unwrap_or(f64::NAN);
        let mut central = |h: f64| {
            probe.data_mut()[i] = orig + h;
            let up = f(&probe);
            probe.data_mut()[i] = orig - h;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * h)
        };
        let mut numeric = central(FD_STEP);
        for h in FD_REFINE {
            if rel_error(a, numeric) < tol {
                break;
            }
            numeric = central(h);
        }
        report.record(|| format!("x[{i}]"), a, numeric);
    }
    report.finish(tol)
}

/// Finite-difference check of every coordinate of the selected parameters
/// (all of them when `only` is `None`) for a loss built on a fresh tape.
pub fn check_param_grads<F>(
    store: &ParamStore,
    loss: F,
    only: Option<&[&str]>,
    tol: f64,
) -> Result<FdReport, NumericsError>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var, NumericsError>,
{
    let mut tape = Tape::new();
    let out = loss(&mut tape, store)?;
    let grads = tape.backward(out)?;
    let analytic = tape.param_grads(&grads, store);

    let mut report = FdReport::empty();
    let mut probe = store.clone();
    for (name, g) in &analytic {
        if let Some(names) = only {
            if !names.contains(&name.as_str()) {
                continue;
            }
        }
        let x = store.get(name).expect("grad keys come from the store").clone();
        let sub = finite_diff_check(
            |candidate| {
                *probe.get_mut(name).unwrap() = candidate.clone();
                let mut t = Tape::new();
                loss(&mut t, &probe)
                    .map(|v| t.value(v).item())
                    .unwrap_or(f64::NAN)
            },
            &x,
            g,
            tol,
        );
        *probe.get_mut(name).unwrap() = x;
        let mut sub = sub;
        sub.worst = format!("{name}:{}", sub.worst);
        report.merge(sub);
    }
    Ok(report.finish(tol))
}
