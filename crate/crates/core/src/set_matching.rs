//! Temporal spans, bipartite assignment of ground-truth events to memories,
//! and the supervised event losses.

use serde::{Deserialize, Serialize};

use crate::glance::MemoryBank;
use crate::numerics::{Tensor, Var};
use crate::{Error, Result, Scalar};

/// Denominator guard of the temporal IoU.
pub const IOU_EPS: f64 = 1e-8;

/// Normalized `(center, width)` description of a temporal extent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub center: f64,
    pub width: f64,
}

impl Span {
    pub fn new(center: f64, width: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&center) || !(0.0..=1.0).contains(&width) {
            return Err(Error::contract(format!("span ({center}, {width}) outside [0, 1]")));
        }
        Ok(Self { center, width })
    }

    /// Clamped interval `[max(0, δ - w/2), min(1, δ + w/2)]`.
    pub fn interval(&self) -> (f64, f64) {
        (
            (self.center - self.width / 2.0).max(0.0),
            (self.center + self.width / 2.0).min(1.0),
        )
    }
}

pub fn temporal_iou(a: Span, b: Span) -> f64 {
    let (s1, e1) = a.interval();
    let (s2, e2) = b.interval();
    let inter = (e1.min(e2) - s1.max(s2)).max(0.0);
    let union = (e1 - s1) + (e2 - s2) - inter;
    inter / (union + IOU_EPS)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthEvent {
    /// `None` is the no-event padding symbol.
    pub class: Option<usize>,
    pub span: Span,
}

impl GroundTruthEvent {
    pub fn event(class: usize, span: Span) -> Self {
        Self {
            class: Some(class),
            span,
        }
    }

    pub fn none() -> Self {
        Self {
            class: None,
            span: Span {
                center: 0.0,
                width: 0.0,
            },
        }
    }
}

/// Pads `events` with no-event entries up to `n`.
pub fn pad_events(events: &[GroundTruthEvent], n: usize) -> Result<Vec<GroundTruthEvent>> {
    if events.len() > n {
        return Err(Error::contract(format!(
            "{} ground-truth events exceed {n} memory slots",
            events.len()
        )));
    }
    let mut out = events.to_vec();
    out.resize(n, GroundTruthEvent::none());
    Ok(out)
}

/// One-to-one assignment: ground truth `i` goes to prediction `perm[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub perm: Vec<usize>,
    pub cost: f64,
}

/// Pairwise cost of assigning ground truth `i` (row) to prediction `j` (column).
pub fn matching_cost_matrix<F: Scalar>(
    gt: &[GroundTruthEvent],
    bank: &MemoryBank<'_, F>,
    lambda_cls: f64,
    lambda_l1: f64,
) -> Result<Vec<Vec<f64>>> {
    let (probs, spans) = bank.predictions();
    cost_from_predictions(gt, &probs, &spans, lambda_cls, lambda_l1)
}

pub(crate) fn cost_from_predictions<F: Scalar>(
    gt: &[GroundTruthEvent],
    probs: &Tensor<F>,
    spans: &[Span],
    lambda_cls: f64,
    lambda_l1: f64,
) -> Result<Vec<Vec<f64>>> {
    let n = spans.len();
    if gt.len() != n || probs.rows() != n {
        return Err(Error::contract(format!(
            "{} ground-truth entries for {n} predictions",
            gt.len()
        )));
    }
    gt.iter()
        .map(|g| match g.class {
            None => Ok(vec![0.0; n]),
            Some(c) if c >= probs.cols() => Err(Error::contract(format!(
                "class {c} outside {} predicted classes",
                probs.cols()
            ))),
            Some(c) => Ok((0..n)
                .map(|j| {
                    let l1 = (g.span.center - spans[j].center).abs() + (g.span.width - spans[j].width).abs();
                    -lambda_cls * probs.get(j, c).as_f64() + lambda_l1 * l1
                })
                .collect()),
        })
        .collect()
}

/// Minimum-cost perfect matching on a square matrix.
///
/// Among optimal assignments the lexicographically smallest permutation is
/// returned; costs within a relative `1e-12` of the optimum count as ties.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment> {
    let n = cost.len();
    if n == 0 {
        return Ok(Assignment {
            perm: Vec::new(),
            cost: 0.0,
        });
    }
    if cost.iter().any(|r| r.len() != n) {
        return Err(Error::contract("cost matrix is not square"));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::contract("cost matrix has non-finite entries"));
    }
    let scale = cost.iter().flatten().fold(1.0f64, |m, c| m.max(c.abs()));
    let tol = 1e-12 * scale * n as f64;

    let rows: Vec<usize> = (0..n).collect();
    let mut cols_left: Vec<usize> = (0..n).collect();
    let (best, _) = solve(cost, &rows, &cols_left);
    let mut perm = Vec::with_capacity(n);
    let mut prefix = 0.0;
    for i in 0..n {
        let rest = &rows[i + 1..];
        let mut chosen = None;
        for (k, &j) in cols_left.iter().enumerate() {
            let mut remaining = cols_left.clone();
            remaining.remove(k);
            let (sub, _) = solve(cost, rest, &remaining);
            if prefix + cost[i][j] + sub <= best + tol {
                chosen = Some(k);
                break;
            }
        }
        let k = chosen.expect("an optimal completion always exists");
        let j = cols_left.remove(k);
        prefix += cost[i][j];
        perm.push(j);
    }
    let total = perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    Ok(Assignment { perm, cost: total })
}

/// Shortest-augmenting-path assignment of `rows` onto `cols` (equal counts).
/// Returns the optimal cost and the chosen column per row.
fn solve(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> (f64, Vec<usize>) {
    let n = rows.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    let c = |i: usize, j: usize| cost[rows[i - 1]][cols[j - 1]];
    // 1-based potentials; column 0 is the virtual source.
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
                    let cur = c(i0, j) - u[i0] - v[j];
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
    let mut assigned = vec![0; n];
    for j in 1..=n {
        assigned[owner[j] - 1] = cols[j - 1];
    }
    let total = assigned.iter().zip(rows).map(|(&j, &i)| cost[i][j]).sum();
    (total, assigned)
}

/// Exhaustive search over all permutations; the first minimum in
/// lexicographic order wins.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> Assignment {
    fn rec(cost: &[Vec<f64>], row: usize, used: &mut [bool], cur: &mut Vec<usize>, best: &mut Option<Assignment>) {
        let n = cost.len();
        if row == n {
            let total: f64 = cur.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
            if best.as_ref().is_none_or(|b| total < b.cost) {
                *best = Some(Assignment {
                    perm: cur.clone(),
                    cost: total,
                });
            }
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                cur.push(j);
                rec(cost, row + 1, used, cur, best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut best = None;
    rec(cost, 0, &mut vec![false; cost.len()], &mut Vec::new(), &mut best);
    best.unwrap_or(Assignment {
        perm: Vec::new(),
        cost: 0.0,
    })
}

/// Classification cross-entropy over all matched pairs (no-event targets map
/// to class index `C`, weighted by `eos_weight`) and the mean span L1 error
/// over real events.
pub fn supervised_losses<'t, F: Scalar>(
    gt: &[GroundTruthEvent],
    bank: &MemoryBank<'t, F>,
    assignment: &Assignment,
    eos_weight: f64,
) -> Result<(Var<'t, F>, Var<'t, F>)> {
    let n = bank.len();
    if gt.len() != n || assignment.perm.len() != n {
        return Err(Error::contract(format!(
            "{} ground-truth entries and {} assigned for {n} memories",
            gt.len(),
            assignment.perm.len()
        )));
    }
    let no_event = bank.class_logits.cols() - 1;
    let logits = bank.class_logits.gather_rows(&assignment.perm)?;
    let targets: Vec<usize> = gt.iter().map(|g| g.class.unwrap_or(no_event)).collect();
    let weights: Vec<F> = gt
        .iter()
        .map(|g| F::lit(if g.class.is_some() { 1.0 } else { eos_weight }))
        .collect();
    let l_cls = logits.weighted_cross_entropy(&targets, &weights)?;

    let tape = bank.spans.tape();
    let real = gt.iter().filter(|g| g.class.is_some()).count();
    let l_l1 = if real == 0 {
        tape.constant(Tensor::scalar(F::zero()))
    } else {
        let target: Vec<F> = gt
            .iter()
            .flat_map(|g| [F::lit(g.span.center), F::lit(g.span.width)])
            .collect();
        let mask: Vec<F> = gt
            .iter()
            .flat_map(|g| {
                let m = if g.class.is_some() { F::one() } else { F::zero() };
                [m, m]
            })
            .collect();
        let diff = bank
            .spans
            .gather_rows(&assignment.perm)?
            .sub(tape.constant(Tensor::new(vec![n, 2], target)?))?
            .abs()
            .mul_const(mask)?;
        diff.sum().scale(F::lit(1.0 / real as f64))
    };
    Ok((l_cls, l_l1))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::Tape;

    fn span(c: f64, w: f64) -> Span {
        Span::new(c, w).unwrap()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn iou_examples() {
        assert!((temporal_iou(span(0.4, 0.2), span(0.4, 0.2)) - 1.0).abs() < 1e-6);
        assert_eq!(temporal_iou(span(0.25, 0.5), span(0.75, 0.5)), 0.0);
        assert!((temporal_iou(span(0.3, 0.4), span(0.5, 0.4)) - 1.0 / 3.0).abs() < 1e-7);
        assert!(Span::new(1.2, 0.1).is_err());
    }

    fn bank_fixture<'t>(tape: &'t Tape<f64>, probs: &[&[f64]], spans: &[(f64, f64)]) -> MemoryBank<'t, f64> {
        let logits: Vec<Vec<f64>> = probs
            .iter()
            .map(|r| r.iter().map(|&p| if p > 0.0 { p.ln() } else { -1e3 }).collect())
            .collect();
        let n = probs.len();
        let sp: Vec<f64> = spans.iter().flat_map(|&(c, w)| [c, w]).collect();
        MemoryBank::from_parts(
            tape.constant(Tensor::zeros(&[n, 4])),
            tape.var(Tensor::from_rows(&logits).unwrap()),
            tape.var(Tensor::new(vec![n, 2], sp).unwrap()),
        )
        .unwrap()
    }

    #[test]
    fn cost_matrix_examples() {
        let tape = Tape::new();
        let bank = bank_fixture(
            &tape,
            &[&[0.1, 0.05, 0.8, 0.05], &[0.0, 0.0, 1.0, 0.0]],
            &[(0.6, 0.2), (0.5, 0.2)],
        );
        let gt = [GroundTruthEvent::event(2, span(0.5, 0.2)), GroundTruthEvent::none()];
        let m = matching_cost_matrix(&gt, &bank, 1.0, 5.0).unwrap();
        assert!((m[0][0] - (-0.3)).abs() < 1e-12);
        assert!((m[0][1] - (-1.0)).abs() < 1e-12);
        assert_eq!(m[1], vec![0.0, 0.0]);
        assert!(matching_cost_matrix(&gt[..1], &bank, 1.0, 5.0).is_err());
    }

    #[test]
    fn hungarian_examples() {
        let a = hungarian(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(a.perm, vec![0, 1]);
        assert_eq!(a.cost, 0.0);
        let m = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
        let a = hungarian(&m).unwrap();
        assert_eq!(a.perm, vec![1, 0, 2]);
        assert_eq!(a.cost, 5.0);
        assert_eq!(brute_force_assignment(&m), a);
        assert!(hungarian(&[vec![1.0, 2.0]]).is_err());
        assert!(hungarian(&[vec![f64::NAN]]).is_err());
    }

    #[test]
    fn ties_resolve_to_lexicographically_smallest() {
        let a = hungarian(&vec![vec![0.0; 4]; 4]).unwrap();
        assert_eq!(a.perm, vec![0, 1, 2, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..300 {
            let m: Vec<Vec<f64>> = (0..5)
                .map(|_| (0..5).map(|_| rng.random_range(0..3) as f64).collect())
                .collect();
            assert_eq!(hungarian(&m).unwrap(), brute_force_assignment(&m));
        }
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for n in 1..=7 {
            for _ in 0..100 {
                let m = random_matrix(&mut rng, n);
                let a = hungarian(&m).unwrap();
                assert_eq!(a, brute_force_assignment(&m));
            }
        }
    }

    #[test]
    fn row_and_column_shifts_keep_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let m = random_matrix(&mut rng, 6);
            let base = hungarian(&m).unwrap();
            let (r, k) = (rng.random_range(0..6), rng.random_range(-2.0..2.0));
            let mut shifted = m.clone();
            shifted[r].iter_mut().for_each(|x| *x += k);
            let a = hungarian(&shifted).unwrap();
            assert_eq!(a.perm, base.perm);
            assert!((a.cost - base.cost - k).abs() < 1e-9);
            let c = rng.random_range(0..6);
            let mut shifted = m.clone();
            shifted.iter_mut().for_each(|row| row[c] += k);
            let a = hungarian(&shifted).unwrap();
            assert_eq!(a.perm, base.perm);
            assert!((a.cost - base.cost - k).abs() < 1e-9);
        }
    }

    #[test]
    fn permuting_predictions_permutes_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sigma = [2, 0, 5, 1, 4, 3];
        for _ in 0..100 {
            let m = random_matrix(&mut rng, 6);
            // Column j of the permuted matrix is column sigma[j] of the original.
            let permuted: Vec<Vec<f64>> = m.iter().map(|row| sigma.iter().map(|&s| row[s]).collect()).collect();
            let a = hungarian(&m).unwrap();
            let b = hungarian(&permuted).unwrap();
            let mapped: Vec<usize> = b.perm.iter().map(|&j| sigma[j]).collect();
            assert_eq!(mapped, a.perm);
            assert!((a.cost - b.cost).abs() < 1e-12);
        }
    }

    #[test]
    fn supervised_loss_examples() {
        let tape = Tape::new();
        let bank = bank_fixture(
            &tape,
            &[&[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0], &[1.0, 0.0, 0.0]],
            &[(0.2, 0.1), (0.0, 0.0), (0.7, 0.2)],
        );
        let gt = [
            GroundTruthEvent::event(0, span(0.7, 0.2)),
            GroundTruthEvent::event(1, span(0.2, 0.1)),
            GroundTruthEvent::none(),
        ];
        let cost = matching_cost_matrix(&gt, &bank, 1.0, 5.0).unwrap();
        let a = hungarian(&cost).unwrap();
        assert_eq!(a.perm, vec![2, 0, 1]);
        let (cls, l1) = supervised_losses(&gt, &bank, &a, 1.0).unwrap();
        assert!(cls.item() < 1e-9);
        assert_eq!(l1.item(), 0.0);

        let tape = Tape::new();
        let uniform = [0.25; 4];
        let bank = bank_fixture(&tape, &[&uniform, &uniform], &[(0.5, 0.5), (0.5, 0.5)]);
        let gt = [GroundTruthEvent::none(); 2];
        let a = hungarian(&matching_cost_matrix(&gt, &bank, 1.0, 5.0).unwrap()).unwrap();
        let (cls, l1) = supervised_losses(&gt, &bank, &a, 1.0).unwrap();
        assert!((cls.item() - 4f64.ln()).abs() < 1e-12);
        assert_eq!(l1.item(), 0.0);

        let tape = Tape::new();
        let bank = bank_fixture(&tape, &[&[0.5, 0.5], &[0.5, 0.5]], &[(0.6, 0.25), (0.1, 0.1)]);
        let gt = [GroundTruthEvent::event(0, span(0.5, 0.2)), GroundTruthEvent::none()];
        let a = Assignment {
            perm: vec![0, 1],
            cost: 0.0,
        };
        let (_, l1) = supervised_losses(&gt, &bank, &a, 1.0).unwrap();
        assert!((l1.item() - 0.15).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(c1 in 0.0..=1.0f64, w1 in 0.0..=1.0f64, c2 in 0.0..=1.0f64, w2 in 0.0..=1.0f64) {
            let (a, b) = (span(c1, w1), span(c2, w2));
            let v = temporal_iou(a, b);
            prop_assert_eq!(v, temporal_iou(b, a));
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn hungarian_optimal_up_to_eight(seed in any::<u64>(), n in 1usize..=8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_matrix(&mut rng, n);
            prop_assert_eq!(hungarian(&m).unwrap(), brute_force_assignment(&m));
        }
    }
}
