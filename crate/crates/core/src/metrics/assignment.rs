//! Linear assignment solvers over dense square cost matrices.

/// Minimum-cost perfect assignment by shortest augmenting paths with dual
/// potentials (Hungarian method), O(n³).
///
/// `cost(i, j)` is evaluated lazily and must be finite. Returns
/// `assignment[i] = j`.
pub fn optimal_assignment(n: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    // 1-based arrays with a virtual column 0, following the classic
    // formulation.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0f64; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|f| *f = false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
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
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[owner[j] - 1] = j - 1;
    }
    assignment
}

/// Minimum-cost assignment by the forward auction algorithm with ε-scaling.
///
/// The returned assignment costs at most `n · epsilon` more than the
/// optimum.
pub fn auction_assignment(n: usize, cost: impl Fn(usize, usize) -> f64, epsilon: f64) -> Vec<usize> {
    assert!(epsilon > 0.0, "epsilon must be positive");
    if n == 0 {
        return Vec::new();
    }
    // Benefits are negated costs; cache them since every bid scans a row.
    let benefit: Vec<f64> = (0..n * n).map(|k| -cost(k / n, k % n)).collect();
    let spread = benefit.iter().fold(0.0f64, |m, b| m.max(b.abs()));
    let mut prices = vec![0.0f64; n];
    let mut person_of = vec![usize::MAX; n];
    let mut object_of = vec![usize::MAX; n];

    let mut eps = (spread / 4.0).max(epsilon);
    loop {
        person_of.iter_mut().for_each(|p| *p = usize::MAX);
        object_of.iter_mut().for_each(|o| *o = usize::MAX);
        let mut queue: std::collections::VecDeque<usize> = (0..n).collect();
        while let Some(i) = queue.pop_front() {
            let row = &benefit[i * n..(i + 1) * n];
            let mut best = usize::MAX;
            let mut best_val = f64::NEG_INFINITY;
            let mut second_val = f64::NEG_INFINITY;
            for (j, (&a, &p)) in row.iter().zip(&prices).enumerate() {
                let val = a - p;
                if val > best_val {
                    second_val = best_val;
                    best_val = val;
                    best = j;
                } else if val > second_val {
                    second_val = val;
                }
            }
            let increment = if second_val.is_finite() {
                best_val - second_val + eps
            } else {
                eps
            };
            prices[best] += increment;
            let previous = person_of[best];
            person_of[best] = i;
            object_of[i] = best;
            if previous != usize::MAX {
                object_of[previous] = usize::MAX;
                queue.push_back(previous);
            }
        }
        if eps <= epsilon {
            break;
        }
        eps = (eps / 5.0).max(epsilon);
    }
    object_of
}
