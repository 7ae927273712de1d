use crate::error::{Error, Result};
use crate::util::{seeded_rng, shuffled_indices};

const SPLIT_STREAM: u64 = (1 << 40) + (1 << 39);

/// Seeded shuffle-then-cut split. The two fractions must sum to 1; the parts
/// are disjoint and cover the input.
pub fn split<T: Clone>(
    items: &[T],
    train_fraction: f64,
    eval_fraction: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>)> {
    if (train_fraction + eval_fraction - 1.0).abs() > 1e-9
        || !(0.0..=1.0).contains(&train_fraction)
    {
        return Err(Error::InvalidArgument(format!(
            "fractions must sum to 1, got {train_fraction} + {eval_fraction}"
        )));
    }
    let mut rng = seeded_rng(seed, SPLIT_STREAM);
    let order = shuffled_indices(&mut rng, items.len());
    let cut = (items.len() as f64 * train_fraction).round() as usize;
    let train = order[..cut].iter().map(|&i| items[i].clone()).collect();
    let eval = order[cut..].iter().map(|&i| items[i].clone()).collect();
    Ok((train, eval))
}
