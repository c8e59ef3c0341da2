//! Central-difference gradient checking against the analytic backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

use crate::store::ParameterStore;
use crate::{Error, Result};

/// Worst relative error over `probe_count` randomly chosen scalar parameters.
///
/// `loss_fn` must be deterministic; it computes the loss and accumulates
/// analytic gradients into the store (the store is zeroed before each call).
/// Numeric gradients use central differences with the actually-realized f32
/// perturbation, so relative error reflects the analytic path, not f32
/// rounding of eps. Frozen parameters are skipped.
pub fn grad_check<F>(
    mut loss_fn: F,
    store: &mut ParameterStore,
    probe_count: usize,
    eps: f32,
    seed: u64,
) -> Result<f64>
where
    F: FnMut(&mut ParameterStore) -> Result<f64>,
{
    store.zero_grad();
    let base1 = loss_fn(store)?;
    let analytic: BTreeMap<String, Vec<f32>> = store
        .names()
        .map(|n| (n.to_string(), store.grad_of(n).unwrap().to_vec()))
        .collect();
    store.zero_grad();
    let base2 = loss_fn(store)?;
    if base1.to_bits() != base2.to_bits() {
        return Err(Error::NonDeterministic {
            first: base1 as f32,
            second: base2 as f32,
        });
    }

    let coords: Vec<(String, usize)> = store
        .names()
        .filter(|n| !store.is_frozen(n))
        .map(|n| (n.to_string(), store.get(n).unwrap().numel()))
        .collect();
    let total: usize = coords.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::TrainingState(
            "no trainable parameters to probe".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..probe_count {
        let mut flat = rng.gen_range(0..total);
        let (name, idx) = coords
            .iter()
            .find_map(|(n, sz)| {
                if flat < *sz {
                    Some((n.clone(), flat))
                } else {
                    flat -= sz;
                    None
                }
            })
            .expect("flat index in range");

        let original = store.get(&name)?.data[idx];
        let plus = original + eps;
        let minus = original - eps;

        store.get_mut(&name)?.data[idx] = plus;
        store.zero_grad();
        let f_plus = loss_fn(store)?;
        store.get_mut(&name)?.data[idx] = minus;
        store.zero_grad();
        let f_minus = loss_fn(store)?;
        store.get_mut(&name)?.data[idx] = original;

        let h = plus as f64 - minus as f64;
        let numeric = (f_plus - f_minus) / h;
        let a = analytic[&name][idx] as f64;
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > worst {
            worst = rel;
        }
    }
    store.zero_grad();
    Ok(worst)
}
