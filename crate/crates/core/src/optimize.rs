//! Derivative-free minimization with exterior penalties.
//!
//! Nelder–Mead with dimension-adaptive coefficients. Each restart rebuilds
//! the simplex around the incumbent with seeded random step sizes; the
//! penalty weight is escalated when the incumbent is still infeasible.
//! Simplex vertices are evaluated as a batch (in parallel when rayon has
//! threads); results are reduced in index order, so serial and parallel
//! runs agree bit for bit.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Penalties at or below this value count as feasible.
pub const PENALTY_TOL: f64 = 1e-12;

/// Result of one cost evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub objective: f64,
    pub penalty: f64,
    pub feasible: bool,
    pub diagnostics: BTreeMap<String, f64>,
}

impl CostReport {
    pub fn new(objective: f64, penalty: f64) -> Self {
        let penalty = if penalty.is_nan() { f64::INFINITY } else { penalty };
        Self {
            objective,
            penalty,
            feasible: penalty <= PENALTY_TOL,
            diagnostics: BTreeMap::new(),
        }
    }

    /// Report for parameter vectors the chain cannot evaluate at all.
    pub fn failure(reason: &str) -> Self {
        let mut r = Self::new(f64::INFINITY, f64::INFINITY);
        r.diagnostics.insert(format!("failure:{reason}"), 1.0);
        r
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.diagnostics.insert(key.to_string(), value);
        self
    }

    /// Penalized score used by the simplex.
    pub fn score(&self, weight: f64) -> f64 {
        let s = self.objective + weight * self.penalty;
        if s.is_nan() {
            f64::INFINITY
        } else {
            s
        }
    }

    /// Feasible points beat infeasible ones; ties go to the lower score.
    pub fn better_than(&self, other: &CostReport, weight: f64) -> bool {
        match (self.feasible, other.feasible) {
            (true, false) => true,
            (false, true) => false,
            _ => self.score(weight) < other.score(weight),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinimizeOptions {
    pub max_evals: usize,
    pub restarts: usize,
    pub seed: u64,
    /// Initial penalty weight (already multiplied by the objective scale).
    pub penalty_weight: f64,
    /// Edge length of the initial simplex.
    pub initial_step: f64,
    /// Stop a restart once the score spread across the simplex falls below this.
    pub ftol: f64,
    pub record_trace: bool,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self {
            max_evals: 20_000,
            restarts: 8,
            seed: 0,
            penalty_weight: 1e3,
            initial_step: 0.1,
            ftol: 1e-12,
            record_trace: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub eval_index: usize,
    pub objective: f64,
    pub penalty: f64,
    pub feasible: bool,
    pub diagnostics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MinimizeStatus {
    Converged,
    BudgetExhausted,
}

#[derive(Debug, Clone)]
pub struct MinimizeOutcome {
    pub x: Vec<f64>,
    pub report: CostReport,
    pub evals: usize,
    pub status: MinimizeStatus,
    pub penalty_weight: f64,
    pub trace: Vec<TraceRow>,
}

struct Evaluator<'a, F> {
    cost: &'a F,
    evals: usize,
    budget: usize,
    trace: Vec<TraceRow>,
    record: bool,
    best_feasible: Option<(Vec<f64>, CostReport)>,
}

impl<'a, F> Evaluator<'a, F>
where
    F: Fn(&[f64]) -> CostReport + Sync,
{
    fn remaining(&self) -> usize {
        self.budget.saturating_sub(self.evals)
    }

    fn batch(&mut self, points: &[Vec<f64>]) -> Vec<CostReport> {
        let reports: Vec<CostReport> = if points.len() > 1 {
            points.par_iter().map(|p| (self.cost)(p)).collect()
        } else {
            points.iter().map(|p| (self.cost)(p)).collect()
        };
        for (p, r) in points.iter().zip(&reports) {
            if r.feasible
                && self
                    .best_feasible
                    .as_ref()
                    .map_or(true, |(_, b)| r.objective < b.objective)
            {
                self.best_feasible = Some((p.clone(), r.clone()));
            }
            if self.record {
                self.trace.push(TraceRow {
                    eval_index: self.evals,
                    objective: r.objective,
                    penalty: r.penalty,
                    feasible: r.feasible,
                    diagnostics: r.diagnostics.clone(),
                });
            }
            self.evals += 1;
        }
        reports
    }

    fn one(&mut self, p: &[f64]) -> CostReport {
        self.batch(&[p.to_vec()]).pop().unwrap()
    }
}

struct Vertex {
    x: Vec<f64>,
    report: CostReport,
}

/// Minimizes `cost` starting from `x0`; never returns a point worse than `x0`.
pub fn minimize<F>(cost: &F, x0: &[f64], opts: &MinimizeOptions) -> MinimizeOutcome
where
    F: Fn(&[f64]) -> CostReport + Sync,
{
    let mut ev = Evaluator {
        cost,
        evals: 0,
        budget: opts.max_evals.max(1),
        trace: Vec::new(),
        record: opts.record_trace,
        best_feasible: None,
    };
    let mut weight = opts.penalty_weight;
    let mut best_x = x0.to_vec();
    let mut best = ev.one(x0);
    let n = x0.len();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let restarts = opts.restarts.max(1);
    let mut status = MinimizeStatus::Converged;

    if n == 0 {
        return MinimizeOutcome {
            x: best_x,
            report: best,
            evals: ev.evals,
            status,
            penalty_weight: weight,
            trace: ev.trace,
        };
    }

    for round in 0..restarts {
        if ev.remaining() < n + 2 {
            status = MinimizeStatus::BudgetExhausted;
            break;
        }
        if round > 0 && !best.feasible {
            weight *= 10.0;
        }
        let share = ev.remaining() / (restarts - round);
        let round_budget = ev.evals + share.max(n + 2);
        // first round uses the nominal step, later rounds randomize it per axis
        let steps: Vec<f64> = (0..n)
            .map(|_| {
                if round == 0 {
                    opts.initial_step
                } else {
                    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    sign * opts.initial_step * rng.gen_range(0.05..1.0) * 0.5f64.powi((round as i32 - 1) / 2)
                }
            })
            .collect();
        let (x, report, exhausted) = nelder_mead_round(&mut ev, &best_x, &best, &steps, weight, round_budget, opts.ftol);
        if report.score(weight) < best.score(weight) {
            best = report;
            best_x = x;
        }
        if exhausted && ev.remaining() == 0 {
            status = MinimizeStatus::BudgetExhausted;
        }
    }

    // exterior penalties leave the score minimizer slightly infeasible; prefer
    // the best strictly feasible point seen along the way
    if let Some((x, r)) = ev.best_feasible.take() {
        if !best.feasible || r.objective < best.objective {
            best_x = x;
            best = r;
        }
    }
    MinimizeOutcome {
        x: best_x,
        report: best,
        evals: ev.evals,
        status,
        penalty_weight: weight,
        trace: ev.trace,
    }
}

fn nelder_mead_round<F>(
    ev: &mut Evaluator<'_, F>,
    x0: &[f64],
    r0: &CostReport,
    steps: &[f64],
    weight: f64,
    budget: usize,
    ftol: f64,
) -> (Vec<f64>, CostReport, bool)
where
    F: Fn(&[f64]) -> CostReport + Sync,
{
    let n = x0.len();
    let nf = n as f64;
    // adaptive coefficients for high-dimensional simplices
    let alpha = 1.0;
    let gamma = 1.0 + 2.0 / nf;
    let rho = 0.75 - 1.0 / (2.0 * nf);
    let sigma = 1.0 - 1.0 / nf;

    let pts: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut p = x0.to_vec();
            p[i] += steps[i];
            p
        })
        .collect();
    let reps = ev.batch(&pts);
    let mut simplex: Vec<Vertex> = std::iter::once(Vertex {
        x: x0.to_vec(),
        report: r0.clone(),
    })
    .chain(pts.into_iter().zip(reps).map(|(x, report)| Vertex { x, report }))
    .collect();

    let score = |v: &Vertex| v.report.score(weight);
    let mut exhausted = false;
    loop {
        simplex.sort_by(|a, b| score(a).total_cmp(&score(b)));
        let fbest = score(&simplex[0]);
        let fworst = score(&simplex[n]);
        if (fworst - fbest).abs() <= ftol * (1.0 + fbest.abs()) && fworst.is_finite() {
            break;
        }
        if ev.evals + 2 > budget {
            exhausted = true;
            break;
        }
        let mut centroid = vec![0.0; n];
        for v in &simplex[..n] {
            for (c, x) in centroid.iter_mut().zip(&v.x) {
                *c += x / nf;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[n].x)
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };
        let xr = along(alpha);
        let rr = ev.one(&xr);
        let fr = rr.score(weight);
        let fsecond = score(&simplex[n - 1]);
        if fr < fbest {
            let xe = along(alpha * gamma);
            let re = ev.one(&xe);
            simplex[n] = if re.score(weight) < fr {
                Vertex { x: xe, report: re }
            } else {
                Vertex { x: xr, report: rr }
            };
        } else if fr < fsecond {
            simplex[n] = Vertex { x: xr, report: rr };
        } else {
            let (xc, inside) = if fr < fworst {
                (along(alpha * rho), false)
            } else {
                (along(-rho), true)
            };
            let rc = ev.one(&xc);
            let fc = rc.score(weight);
            let accept = if inside { fc < fworst } else { fc <= fr };
            if accept {
                simplex[n] = Vertex { x: xc, report: rc };
            } else {
                if ev.evals + n > budget {
                    exhausted = true;
                    break;
                }
                let best_x = simplex[0].x.clone();
                let shrunk: Vec<Vec<f64>> = simplex[1..]
                    .iter()
                    .map(|v| {
                        best_x
                            .iter()
                            .zip(&v.x)
                            .map(|(b, x)| b + sigma * (x - b))
                            .collect()
                    })
                    .collect();
                let reps = ev.batch(&shrunk);
                for (v, (x, report)) in simplex[1..].iter_mut().zip(shrunk.into_iter().zip(reps)) {
                    *v = Vertex { x, report };
                }
            }
        }
    }
    let best = simplex
        .into_iter()
        .reduce(|a, b| if b.report.score(weight) < a.report.score(weight) { b } else { a })
        .unwrap();
    (best.x, best.report, exhausted)
}

/// CSV rendering of an optimization trace with a fixed diagnostic column order.
pub fn trace_csv(trace: &[TraceRow]) -> String {
    let keys: Vec<String> = trace
        .iter()
        .flat_map(|r| r.diagnostics.keys().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut out = String::from("eval_index,objective,penalty,feasible");
    for k in &keys {
        out.push(',');
        out.push_str(k);
    }
    out.push('\n');
    for r in trace {
        out.push_str(&format!(
            "{},{},{},{}",
            r.eval_index,
            crate::invariant::fmt_f64(r.objective),
            crate::invariant::fmt_f64(r.penalty),
            r.feasible as u8
        ));
        for k in &keys {
            out.push(',');
            if let Some(v) = r.diagnostics.get(k) {
                out.push_str(&crate::invariant::fmt_f64(*v));
            }
        }
        out.push('\n');
    }
    out
}
