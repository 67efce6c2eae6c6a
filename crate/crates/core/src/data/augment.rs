use bigfair_tensor::Rng;

use super::DataError;

/// Drops `round(p * n)` behaviors chosen uniformly without replacement and
/// keeps the rest in their original order. At least one behavior always
/// survives. `round` is half away from zero.
///
/// An empty history is returned unchanged; callers skip augmentation for
/// such users.
pub fn drop_behaviors<T: Clone>(history: &[T], p: f64, rng: &mut Rng) -> Result<Vec<T>, DataError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(DataError::InvalidDropRatio(p));
    }
    let n = history.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let dropped = (p * n as f64).round() as usize;
    let keep = n.saturating_sub(dropped).max(1);
    if keep == n {
        return Ok(history.to_vec());
    }
    let mut kept = rng.sample_distinct(n, keep);
    kept.sort_unstable();
    Ok(kept.into_iter().map(|i| history[i].clone()).collect())
}
