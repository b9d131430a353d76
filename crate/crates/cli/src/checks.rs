//! Oracle checks shared by `pairdet selfcheck` and the acceptance suite.

use candle_core::{Device, Tensor, Var};
use pairdet::geometry::{giou, wh_from_pair, BoxCXCYWH, Corners, KeypointPair};
use pairdet::losses::{
    box_regression_loss, box_regression_loss_tensor, focal_loss, focal_loss_tensor, nt_xent, nt_xent_tensor, partners,
    ContrastiveBatch, FocalParams,
};
use pairdet::matching::{hungarian, CostMatrix, MatchAssignment};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::oracles::{assignment_brute_force, central_difference, giou_by_cells, nt_xent_double_loop, relative_error};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, failures: Vec<String>, ok_detail: String) -> Self {
        match failures.first() {
            None => Self { name, passed: true, detail: ok_detail },
            Some(first) => Self { name, passed: false, detail: format!("{} failure(s); first: {first}", failures.len()) },
        }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// Implementations under test. Swapping one out lets tests confirm that a
/// broken implementation is caught by name.
#[derive(Clone, Copy)]
pub struct Subjects {
    pub giou: fn(&Corners, &Corners) -> f64,
    pub hungarian: fn(&CostMatrix) -> MatchAssignment,
    pub nt_xent: fn(&ContrastiveBatch) -> pairdet::Result<f64>,
}

impl Default for Subjects {
    fn default() -> Self {
        Self { giou, hungarian, nt_xent }
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn random_rows(rng: &mut impl Rng, rows: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..dim).map(|_| normal(rng)).collect()).collect()
}

/// `n` random pairs over `2n` shuffled row indices.
fn random_pairs(rng: &mut impl Rng, n: usize) -> Vec<(usize, usize)> {
    let mut idx: Vec<usize> = (0..2 * n).collect();
    idx.shuffle(rng);
    idx.chunks(2).map(|c| (c[0], c[1])).collect()
}

const TEMPERATURES: [f64; 3] = [0.07, 0.5, 1.0];

/// NT-Xent against the double-loop oracle on random batches with
/// `N ≤ 8`, `D ≤ 16`, `τ ∈ {0.07, 0.5, 1}`; absolute tolerance 1e-6.
pub fn check_nt_xent(rng: &mut ChaCha8Rng, batches: usize, subjects: &Subjects) -> CheckResult {
    let mut failures = Vec::new();
    let mut worst = 0f64;
    for b in 0..batches {
        let n = rng.random_range(1..=8);
        let d = rng.random_range(1..=16);
        let tau = TEMPERATURES[rng.random_range(0..3)];
        let z = random_rows(rng, 2 * n, d);
        let pairs = random_pairs(rng, n);
        let expected = nt_xent_double_loop(&z, &pairs, tau);
        let got = ContrastiveBatch::new(z, pairs, tau).and_then(|batch| (subjects.nt_xent)(&batch));
        match got {
            Ok(v) if (v - expected).abs() <= 1e-6 => worst = worst.max((v - expected).abs()),
            Ok(v) => failures.push(format!("batch {b}: N={n} D={d} τ={tau}: {v} vs oracle {expected}")),
            Err(e) => failures.push(format!("batch {b}: {e}")),
        }
    }
    CheckResult::new("nt_xent", failures, format!("{batches} batches, max abs error {worst:.2e}"))
}

/// Hungarian assignment against enumeration on random `Q ≤ 7`, `G ≤ Q`
/// matrices; every fourth matrix has small integer costs to force ties.
pub fn check_hungarian(rng: &mut ChaCha8Rng, matrices: usize, subjects: &Subjects) -> CheckResult {
    let mut failures = Vec::new();
    for m in 0..matrices {
        let q = rng.random_range(1..=7);
        let g = rng.random_range(0..=q);
        let data: Vec<f64> = if m % 4 == 3 {
            (0..q * g).map(|_| rng.random_range(0..3) as f64).collect()
        } else {
            (0..q * g).map(|_| rng.random_range(-1.0..3.0)).collect()
        };
        let (best, queries) = assignment_brute_force(&data, q, g);
        let cost = match CostMatrix::from_rows(q, g, data) {
            Ok(c) => c,
            Err(e) => {
                failures.push(format!("matrix {m}: {e}"));
                continue;
            }
        };
        let got = (subjects.hungarian)(&cost);
        let total = got.total_cost(&cost);
        if got.gt_indices() != (0..g).collect::<Vec<_>>() || got.query_indices() != queries || (total - best).abs() > 1e-9 {
            failures.push(format!("matrix {m} ({q}x{g}): {:?} cost {total} vs oracle {queries:?} cost {best}", got.pairs()));
        }
    }
    CheckResult::new("hungarian", failures, format!("{matrices} matrices agree with enumeration"))
}

fn random_corners(rng: &mut impl Rng) -> Corners {
    let x0 = rng.random_range(-1.0..1.0);
    let y0 = rng.random_range(-1.0..1.0);
    Corners::new(x0, y0, x0 + rng.random_range(0.01..1.0), y0 + rng.random_range(0.01..1.0))
}

/// GIoU: the three worked examples, agreement with the cell oracle,
/// symmetry, bounds and translation invariance on random boxes.
pub fn check_giou(rng: &mut ChaCha8Rng, boxes: usize, subjects: &Subjects) -> CheckResult {
    let f = subjects.giou;
    let mut failures = Vec::new();
    let c = |a: [f64; 4]| Corners::new(a[0], a[1], a[2], a[3]);
    let worked = [
        ([0.0, 0.0, 1.0, 1.0], [0.0, 0.0, 1.0, 1.0], 1.0),
        ([0.0, 0.0, 1.0, 1.0], [1.0, 0.0, 2.0, 1.0], 0.0),
        ([0.0, 0.0, 2.0, 2.0], [1.0, 1.0, 3.0, 3.0], 1.0 / 7.0 - 2.0 / 9.0),
    ];
    for (a, b, expected) in worked {
        let got = f(&c(a), &c(b));
        if (got - expected).abs() > 1e-12 {
            failures.push(format!("worked example {a:?} {b:?}: {got} vs {expected}"));
        }
    }
    for i in 0..boxes {
        let (a, b) = (random_corners(rng), random_corners(rng));
        let ab = f(&a, &b);
        let ba = f(&b, &a);
        let oracle = giou_by_cells([a.x0, a.y0, a.x1, a.y1], [b.x0, b.y0, b.x1, b.y1]);
        let (dx, dy) = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let shifted = f(&a.translate(dx, dy), &b.translate(dx, dy));
        if (ab - oracle).abs() > 1e-9 {
            failures.push(format!("box pair {i}: {ab} vs cell oracle {oracle}"));
        } else if ab != ba {
            failures.push(format!("box pair {i}: asymmetric {ab} vs {ba}"));
        } else if !(-1.0..=1.0).contains(&ab) {
            failures.push(format!("box pair {i}: {ab} out of [-1, 1]"));
        } else if (shifted - ab).abs() > 1e-9 {
            failures.push(format!("box pair {i}: translation changed {ab} to {shifted}"));
        }
    }
    CheckResult::new("giou", failures, format!("3 worked examples and {boxes} random pairs"))
}

/// Width and height recovered from a box's center and top-left corner.
pub fn check_pair_round_trip(rng: &mut ChaCha8Rng, boxes: usize) -> CheckResult {
    let mut failures = Vec::new();
    let mut worst = 0f64;
    for i in 0..boxes {
        let (cx, cy) = (rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0));
        let (w, h) = (rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0));
        let b = BoxCXCYWH { cx, cy, w, h };
        let (rw, rh) = wh_from_pair(&KeypointPair::from_box(&b));
        let err = (rw - w).abs().max((rh - h).abs());
        worst = worst.max(err);
        if err > 1e-9 {
            failures.push(format!("box {i} {:?}: recovered ({rw}, {rh})", b.to_array()));
        }
    }
    CheckResult::new("pair_round_trip", failures, format!("{boxes} boxes, max error {worst:.2e}"))
}

const FD_STEP: f64 = 1e-4;
const GRAD_TOLERANCE: f64 = 1e-3;

fn autograd(values: &[f64], shape: (usize, usize), loss: impl Fn(&Tensor) -> candle_core::Result<Tensor>) -> candle_core::Result<Vec<f64>> {
    let var = Var::from_tensor(&Tensor::from_vec(values.to_vec(), shape, &Device::Cpu)?)?;
    let grads = loss(var.as_tensor())?.backward()?;
    let g = grads.get(var.as_tensor()).ok_or_else(|| candle_core::Error::Msg("no gradient".into()))?;
    g.flatten_all()?.to_vec1::<f64>()
}

fn gradient_result(name: &'static str, instances: usize, errors: Vec<std::result::Result<f64, String>>) -> CheckResult {
    let mut failures = Vec::new();
    let mut worst = 0f64;
    for (i, e) in errors.into_iter().enumerate() {
        match e {
            Ok(r) if r < GRAD_TOLERANCE => worst = worst.max(r),
            Ok(r) => failures.push(format!("instance {i}: relative error {r:.3e}")),
            Err(e) => failures.push(format!("instance {i}: {e}")),
        }
    }
    CheckResult::new(name, failures, format!("{instances} instances, max relative error {worst:.2e}"))
}

/// Autograd gradient of the tensor NT-Xent against central differences of
/// the double-loop oracle.
pub fn check_nt_xent_gradient(rng: &mut ChaCha8Rng, instances: usize) -> CheckResult {
    let errors = (0..instances)
        .map(|_| {
            let n = rng.random_range(1..=6);
            let d = rng.random_range(2..=8);
            let tau = TEMPERATURES[rng.random_range(0..3)];
            let pairs = random_pairs(rng, n);
            let partner = partners(&pairs);
            let flat: Vec<f64> = random_rows(rng, 2 * n, d).concat();
            let analytic = autograd(&flat, (2 * n, d), |z| nt_xent_tensor(z, &partner, tau)).map_err(|e| e.to_string())?;
            let numeric = central_difference(
                |x| nt_xent_double_loop(&x.chunks(d).map(<[f64]>::to_vec).collect::<Vec<_>>(), &pairs, tau),
                &flat,
                FD_STEP,
            );
            Ok(relative_error(&analytic, &numeric))
        })
        .collect();
    gradient_result("nt_xent_gradient", instances, errors)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Autograd gradient of summed focal loss over `sigmoid(logits)` against
/// central differences of the scalar focal loss.
pub fn check_focal_gradient(rng: &mut ChaCha8Rng, instances: usize) -> CheckResult {
    let errors = (0..instances)
        .map(|_| {
            let rows = rng.random_range(1..=6);
            let cols = rng.random_range(1..=5);
            let p = FocalParams { alpha: rng.random_range(0.1..0.9), gamma: [0.0, 1.0, 2.0][rng.random_range(0..3)] };
            let logits: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-4.0..4.0)).collect();
            let labels: Vec<f64> = (0..rows * cols).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
            let targets = Tensor::from_vec(labels.clone(), (rows, cols), &Device::Cpu).map_err(|e| e.to_string())?;
            let analytic = autograd(&logits, (rows, cols), |x| {
                focal_loss_tensor(&sigmoid_tensor(x)?, &targets, &p)?.sum_all()
            })
            .map_err(|e| e.to_string())?;
            let numeric = central_difference(
                |x| x.iter().zip(&labels).map(|(&v, &t)| focal_loss(sigmoid(v), t == 1.0, &p)).sum(),
                &logits,
                FD_STEP,
            );
            Ok(relative_error(&analytic, &numeric))
        })
        .collect();
    gradient_result("focal_gradient", instances, errors)
}

fn sigmoid_tensor(x: &Tensor) -> candle_core::Result<Tensor> {
    (x.neg()?.exp()? + 1.0)?.recip()
}

/// Two boxes whose edges, centers and overlaps are all at least `margin`
/// apart along each axis, so a finite-difference step crosses no kink.
fn well_separated_boxes(rng: &mut impl Rng, margin: f64) -> (BoxCXCYWH, BoxCXCYWH) {
    loop {
        let mut draw = || BoxCXCYWH {
            cx: rng.random_range(0.2..0.8),
            cy: rng.random_range(0.2..0.8),
            w: rng.random_range(0.05..0.5),
            h: rng.random_range(0.05..0.5),
        };
        let (a, b) = (draw(), draw());
        let (ca, cb) = (a.to_corners(), b.to_corners());
        let xs = [ca.x0, ca.x1, cb.x0, cb.x1];
        let ys = [ca.y0, ca.y1, cb.y0, cb.y1];
        let spread = |v: [f64; 4]| (0..4).all(|i| (i + 1..4).all(|j| (v[i] - v[j]).abs() > margin));
        let components = a.to_array().iter().zip(b.to_array()).all(|(x, y)| (x - y).abs() > margin);
        if spread(xs) && spread(ys) && components {
            return (a, b);
        }
    }
}

/// Autograd gradient of the batched L1 + GIoU loss against central
/// differences of the scalar loss.
pub fn check_box_regression_gradient(rng: &mut ChaCha8Rng, instances: usize) -> CheckResult {
    let errors = (0..instances)
        .map(|_| {
            let m = rng.random_range(1..=4);
            let (l1_w, giou_w) = (rng.random_range(0.5..5.0), rng.random_range(0.5..5.0));
            let (preds, gts): (Vec<BoxCXCYWH>, Vec<BoxCXCYWH>) = (0..m).map(|_| well_separated_boxes(rng, 1e-3)).unzip();
            let flat: Vec<f64> = preds.iter().flat_map(|b| b.to_array()).collect();
            let gt_flat: Vec<f64> = gts.iter().flat_map(|b| b.to_array()).collect();
            let gt = Tensor::from_vec(gt_flat, (m, 4), &Device::Cpu).map_err(|e| e.to_string())?;
            let analytic =
                autograd(&flat, (m, 4), |p| box_regression_loss_tensor(p, &gt, l1_w, giou_w)?.sum_all()).map_err(|e| e.to_string())?;
            let numeric = central_difference(
                |x| {
                    x.chunks(4)
                        .zip(&gts)
                        .map(|(p, g)| box_regression_loss(&BoxCXCYWH { cx: p[0], cy: p[1], w: p[2], h: p[3] }, g, l1_w, giou_w))
                        .sum()
                },
                &flat,
                FD_STEP,
            );
            Ok(relative_error(&analytic, &numeric))
        })
        .collect();
    gradient_result("box_regression_gradient", instances, errors)
}

/// The release-gate oracle suite at self-check sizes.
pub fn run_selfcheck(subjects: &Subjects, seed: u64) -> Vec<CheckResult> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        check_hungarian(&mut rng, 200, subjects),
        check_nt_xent(&mut rng, 100, subjects),
        check_giou(&mut rng, 1000, subjects),
        check_pair_round_trip(&mut rng, 1000),
        check_nt_xent_gradient(&mut rng, 20),
        check_focal_gradient(&mut rng, 20),
        check_box_regression_gradient(&mut rng, 20),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selfcheck_passes() {
        let results = run_selfcheck(&Subjects::default(), 0);
        for r in &results {
            assert!(r.passed, "{}", r.line());
        }
        assert_eq!(results.len(), 7);
    }

    #[test]
    fn flipped_giou_is_caught_by_name() {
        let subjects = Subjects { giou: |a, b| -giou(a, b), ..Default::default() };
        let failed: Vec<_> = run_selfcheck(&subjects, 0).into_iter().filter(|r| !r.passed).map(|r| r.name).collect();
        assert_eq!(failed, vec!["giou"]);
    }

    #[test]
    fn wrong_assignment_is_caught() {
        fn last_queries(c: &CostMatrix) -> MatchAssignment {
            let q = c.queries();
            MatchAssignment::new((0..c.gts()).map(|g| (q - 1 - g, g)).collect())
        }
        let subjects = Subjects { hungarian: last_queries, ..Default::default() };
        let failed: Vec<_> = run_selfcheck(&subjects, 0).into_iter().filter(|r| !r.passed).map(|r| r.name).collect();
        assert_eq!(failed, vec!["hungarian"]);
    }
}
