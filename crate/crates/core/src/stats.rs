/// Median with the lower-middle convention for even counts.
///
/// Shared by label-time priors and the median time delay error so that both
/// agree exactly on even-sized samples.
pub fn lower_median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(sorted[(sorted.len() - 1) / 2])
}
