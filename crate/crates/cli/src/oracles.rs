//! Reference implementations written directly from the defining formulas.
//! They never call the code they are used to check.

/// Minimum-cost injective assignment of `g` ground truths to `q` queries by
/// enumeration. `cost` is row-major `q × g`. Returns the optimal total and,
/// for each ground truth in order, its query. Among optimal assignments the
/// lexicographically smallest query sequence wins.
pub fn assignment_brute_force(cost: &[f64], q: usize, g: usize) -> (f64, Vec<usize>) {
    fn recurse(
        cost: &[f64],
        q: usize,
        g: usize,
        gt: usize,
        used: &mut [bool],
        acc: f64,
        current: &mut Vec<usize>,
        best: &mut (f64, Vec<usize>),
    ) {
        if gt == g {
            let tol = 1e-10 * (1.0 + best.0.abs().min(1e12));
            if acc < best.0 - tol {
                *best = (acc, current.clone());
            }
            return;
        }
        for query in 0..q {
            if used[query] {
                continue;
            }
            used[query] = true;
            current.push(query);
            recurse(cost, q, g, gt + 1, used, acc + cost[query * g + gt], current, best);
            current.pop();
            used[query] = false;
        }
    }
    assert!(g <= q, "brute force needs g <= q");
    let mut best = (f64::INFINITY, Vec::new());
    recurse(cost, q, g, 0, &mut vec![false; q], 0.0, &mut Vec::with_capacity(g), &mut best);
    if g == 0 {
        best.0 = 0.0;
    }
    best
}

fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    dot / (nu * nv)
}

/// NT-Xent by direct double loop: for every pair `(i, j)` both directed
/// terms `-log(exp(s_ij/τ) / Σ_{k≠i} exp(s_ik/τ))` are averaged.
pub fn nt_xent_double_loop(z: &[Vec<f64>], pairs: &[(usize, usize)], tau: f64) -> f64 {
    let term = |i: usize, j: usize| {
        let num = (cosine(&z[i], &z[j]) / tau).exp();
        let mut den = 0.0;
        for k in 0..z.len() {
            if k != i {
                den += (cosine(&z[i], &z[k]) / tau).exp();
            }
        }
        -(num / den).ln()
    };
    let sum: f64 = pairs.iter().map(|&(i, j)| term(i, j) + term(j, i)).sum();
    sum / (2 * pairs.len()) as f64
}

/// GIoU of two positive-area `[x0, y0, x1, y1]` boxes by coordinate
/// compression: the plane is cut along every box edge and each grid cell's
/// area is attributed to the intersection, union and hull explicitly.
pub fn giou_by_cells(a: [f64; 4], b: [f64; 4]) -> f64 {
    let mut xs = vec![a[0], a[2], b[0], b[2]];
    let mut ys = vec![a[1], a[3], b[1], b[3]];
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let inside = |r: &[f64; 4], x: f64, y: f64| r[0] <= x && x <= r[2] && r[1] <= y && y <= r[3];
    let (mut inter, mut union, mut hull) = (0.0, 0.0, 0.0);
    for i in 0..3 {
        for j in 0..3 {
            let cell = (xs[i + 1] - xs[i]) * (ys[j + 1] - ys[j]);
            if cell == 0.0 {
                continue;
            }
            let (mx, my) = (0.5 * (xs[i] + xs[i + 1]), 0.5 * (ys[j] + ys[j + 1]));
            let (in_a, in_b) = (inside(&a, mx, my), inside(&b, mx, my));
            hull += cell;
            if in_a || in_b {
                union += cell;
            }
            if in_a && in_b {
                inter += cell;
            }
        }
    }
    inter / union - (hull - union) / hull
}

/// Central differences of `f` at `x` with step `h`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-8)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    diff / norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied())).max(1e-8)
}
