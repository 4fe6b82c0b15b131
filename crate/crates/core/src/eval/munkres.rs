/// Minimum-cost perfect assignment on a square cost matrix given as rows.
/// Returns `assign[row] = column`.
///
/// Shortest augmenting path formulation with row and column potentials,
/// `O(n^3)`.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    debug_assert!(cost.iter().all(|r| r.len() == n));
    // 1-based arrays; index 0 is the virtual start column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if owner[j] > 0 {
            assign[owner[j] - 1] = j - 1;
        }
    }
    assign
}

/// Mapping from predicted cluster id to true class id that maximizes the
/// number of agreeing nodes. Predicted ids left without a true class (more
/// clusters than classes) map to ids at or above the number of true classes.
pub fn munkres_match(pred: &[usize], truth: &[usize]) -> Vec<usize> {
    let np = pred.iter().max().map_or(0, |m| m + 1);
    let nt = truth.iter().max().map_or(0, |m| m + 1);
    let n = np.max(nt);
    let mut counts = vec![vec![0.0; n]; n];
    for (&p, &t) in pred.iter().zip(truth) {
        counts[p][t] += 1.0;
    }
    let cost: Vec<Vec<f64>> = counts
        .iter()
        .map(|r| r.iter().map(|&c| -c).collect())
        .collect();
    let mut assign = hungarian(&cost);
    assign.truncate(np);
    assign
}

/// Relabels `pred` through a matching from [`munkres_match`].
pub fn apply_matching(pred: &[usize], matching: &[usize]) -> Vec<usize> {
    pred.iter().map(|&p| matching[p]).collect()
}
