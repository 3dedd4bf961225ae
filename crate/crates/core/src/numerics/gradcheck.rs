//! Central finite-difference checks of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Gradients, ParamId, ParameterStore};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `(parameter name, relative error)` per checked parameter.
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

/// Compares analytic gradients with central differences on up to
/// `samples` randomly chosen entries of each parameter in `ids`.
///
/// The error per parameter is `‖a − n‖ / max(‖a‖, ‖n‖, floor)` over the
/// sampled entries, where `floor` keeps vanishing gradients from producing
/// spurious large ratios.
pub fn check<E, F>(
    store: &mut ParameterStore,
    ids: &[ParamId],
    samples: usize,
    h: f64,
    floor: f64,
    seed: u64,
    mut eval: F,
) -> Result<GradCheckReport, E>
where
    F: FnMut(&ParameterStore, bool) -> Result<(f64, Option<Gradients>), E>,
{
    let (_, grads) = eval(store, true)?;
    let grads = grads.expect("eval must return gradients when asked");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_param = Vec::with_capacity(ids.len());
    for &id in ids {
        let analytic = grads.dense(store, id);
        let n = analytic.numel();
        let picks: Vec<usize> = if n <= samples {
            (0..n).collect()
        } else {
            (0..samples).map(|_| rng.random_range(0..n)).collect()
        };
        let (mut diff, mut an, mut nn) = (0.0, 0.0, 0.0);
        for &i in &picks {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + h;
            let (lp, _) = eval(store, false)?;
            store.value_mut(id).data_mut()[i] = orig - h;
            let (lm, _) = eval(store, false)?;
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic.data()[i];
            diff += (a - numeric).powi(2);
            an += a * a;
            nn += numeric * numeric;
        }
        let denom = an.sqrt().max(nn.sqrt()).max(floor);
        per_param.push((store.name(id).to_string(), diff.sqrt() / denom));
    }
    Ok(GradCheckReport { per_param })
}
