use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Result, SsftError};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Magnitudes below this are compared absolutely: the finite-difference
/// estimate carries roughly `ulp(f) / FD_STEP` of rounding noise.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    /// Entry index, analytic and numeric values at the worst entry.
    pub worst: (usize, f64, f64),
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err < self.tol)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares tape gradients of the scalar built by `f` with central
/// differences, for every entry of every parameter in `ids`.
///
/// `f` must be deterministic; it is called once with backward and then twice
/// per checked entry. Parameter values are restored afterwards.
pub fn grad_check<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    tol: f64,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    store.zero_grads();
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let base = tape.scalar(out);
    if !base.is_finite() {
        return Err(SsftError::NonFinite(
            "grad_check: objective at base point".into(),
        ));
    }
    tape.backward(out, store)?;
    drop(tape);

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let v = f(&mut t, store)?;
        Ok(t.scalar(v))
    };

    let mut params = Vec::with_capacity(ids.len());
    for &id in ids {
        let name = store.leaf(id).name.clone();
        let analytic = store.grad(id).clone();
        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_err: 0.0,
            worst: (0, 0.0, 0.0),
        };
        for k in 0..analytic.data().len() {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + FD_STEP;
            let plus = eval(store);
            store.value_mut(id).data_mut()[k] = orig - FD_STEP;
            let minus = eval(store);
            store.value_mut(id).data_mut()[k] = orig;
            let (plus, minus) = (plus?, minus?);
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic.data()[k];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(SsftError::NonFinite(format!("grad_check: {name}[{k}]")));
            }
            let e = rel_err(a, numeric);
            if e > check.max_rel_err {
                check.max_rel_err = e;
                check.worst = (k, a, numeric);
            }
        }
        params.push(check);
    }
    Ok(GradCheckReport { params, tol })
}
