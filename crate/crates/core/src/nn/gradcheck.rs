//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so that coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares `store`'s accumulated gradients against central differences of
/// `loss` at `probes` coordinates drawn uniformly over all trainable values.
///
/// The store must already hold the analytic gradient of `loss` at the
/// current values. Values are restored after each probe.
pub fn check<F>(
    store: &mut ParamStore<f64>,
    probes: usize,
    eps: f64,
    seed: u64,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>) -> Result<f64>,
{
    let coords: Vec<(ParamId, usize)> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, p)| (id, p.value.numel()))
        .collect();
    let total: usize = coords.iter().map(|c| c.1).sum();
    if total == 0 {
        return Err(Error::Usage("gradient check on a store without trainable values".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    for _ in 0..probes {
        let mut flat = rng.random_range(0..total);
        let (id, index) = coords
            .iter()
            .find_map(|&(id, n)| {
                if flat < n {
                    Some((id, flat))
                } else {
                    flat -= n;
                    None
                }
            })
            .expect("flat index within total");
        let analytic = store.get(id).grad.data()[index];
        let original = store.get(id).value.data()[index];

        store.get_mut(id).value.data_mut()[index] = original + eps;
        let plus = loss(store)?;
        store.get_mut(id).value.data_mut()[index] = original - eps;
        let minus = loss(store)?;
        store.get_mut(id).value.data_mut()[index] = original;

        let numeric = (plus - minus) / (2.0 * eps);
        report.probes.push(Probe {
            param: store.get(id).name.clone(),
            index,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric),
        });
    }
    Ok(report)
}
