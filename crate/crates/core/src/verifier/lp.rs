//! Dense two-phase primal simplex for small bounded problems.
//!
//! Pivoting uses the largest reduced cost and falls back to Bland's rule
//! after a run of degenerate pivots, which rules out cycling.

pub const FEAS_TOL: f64 = 1e-9;
const PIVOT_TOL: f64 = 1e-11;
const DEGENERATE_SWITCH: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Le,
    Ge,
    Eq,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    /// Sparse coefficients `(variable, value)`.
    pub coeffs: Vec<(usize, f64)>,
    pub sense: Sense,
    pub rhs: f64,
}

/// `maximize c'x` subject to row constraints and finite variable bounds.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LinearProgram {
    pub objective: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub constraints: Vec<Constraint>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LpStatus {
    Optimal {
        value: f64,
        x: Vec<f64>,
    },
    Infeasible,
    Unbounded,
    /// Iteration cap reached.
    Stalled,
}

impl LinearProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_var(&mut self, objective: f64, lower: f64, upper: f64) -> usize {
        self.objective.push(objective);
        self.lower.push(lower);
        self.upper.push(upper);
        self.objective.len() - 1
    }

    pub fn add_constraint(&mut self, coeffs: Vec<(usize, f64)>, sense: Sense, rhs: f64) {
        self.constraints.push(Constraint { coeffs, sense, rhs });
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn solve(&self) -> LpStatus {
        Tableau::build(self).map_or(LpStatus::Infeasible, |t| t.run(self))
    }
}

struct Tableau {
    /// `rows x (cols + 1)`; last column is the right-hand side.
    t: Vec<Vec<f64>>,
    basis: Vec<usize>,
    cols: usize,
    n: usize,
    artificial_start: usize,
}

impl Tableau {
    /// Shifts variables to `x' = x - l >= 0`, turns upper bounds into rows
    /// and adds slack, surplus and artificial columns.
    fn build(lp: &LinearProgram) -> Option<Self> {
        let n = lp.num_vars();
        if lp.lower.iter().zip(&lp.upper).any(|(l, u)| l > u) {
            return None;
        }
        let mut rows: Vec<(Vec<f64>, Sense, f64)> = Vec::new();
        for c in &lp.constraints {
            let mut a = vec![0.0; n];
            let mut rhs = c.rhs;
            for &(j, v) in &c.coeffs {
                a[j] += v;
                rhs -= v * lp.lower[j];
            }
            rows.push((a, c.sense, rhs));
        }
        for j in 0..n {
            if lp.upper[j].is_finite() {
                let mut a = vec![0.0; n];
                a[j] = 1.0;
                rows.push((a, Sense::Le, lp.upper[j] - lp.lower[j]));
            }
        }
        for (a, sense, rhs) in &mut rows {
            if *rhs < 0.0 {
                a.iter_mut().for_each(|v| *v = -*v);
                *rhs = -*rhs;
                *sense = match *sense {
                    Sense::Le => Sense::Ge,
                    Sense::Ge => Sense::Le,
                    Sense::Eq => Sense::Eq,
                };
            }
        }
        let m = rows.len();
        let n_slack = rows.iter().filter(|r| r.1 != Sense::Eq).count();
        let n_art = rows.iter().filter(|r| r.1 != Sense::Le).count();
        let artificial_start = n + n_slack;
        let cols = artificial_start + n_art;
        let mut t = vec![vec![0.0; cols + 1]; m];
        let mut basis = vec![0; m];
        let (mut s, mut a) = (n, artificial_start);
        for (i, (coef, sense, rhs)) in rows.into_iter().enumerate() {
            t[i][..n].copy_from_slice(&coef);
            t[i][cols] = rhs;
            match sense {
                Sense::Le => {
                    t[i][s] = 1.0;
                    basis[i] = s;
                    s += 1;
                }
                Sense::Ge => {
                    t[i][s] = -1.0;
                    s += 1;
                    t[i][a] = 1.0;
                    basis[i] = a;
                    a += 1;
                }
                Sense::Eq => {
                    t[i][a] = 1.0;
                    basis[i] = a;
                    a += 1;
                }
            }
        }
        Some(Self {
            t,
            basis,
            cols,
            n,
            artificial_start,
        })
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let w = self.cols + 1;
        let p = self.t[r][c];
        for v in self.t[r].iter_mut() {
            *v /= p;
        }
        let pivot_row = self.t[r].clone();
        for (i, row) in self.t.iter_mut().enumerate() {
            if i == r {
                continue;
            }
            let f = row[c];
            if f != 0.0 {
                for j in 0..w {
                    row[j] -= f * pivot_row[j];
                }
                row[c] = 0.0;
            }
        }
        self.basis[r] = c;
    }

    /// Maximizes `cost . x` over columns `< active_cols`.
    fn optimize(&mut self, cost: &[f64], active_cols: usize, max_iter: usize) -> Result<(), LpStatus> {
        let m = self.t.len();
        let rhs = self.cols;
        let mut degenerate_run = 0;
        for _ in 0..max_iter {
            // Reduced costs r_j = c_j - c_B' column_j.
            let mut enter = None;
            let mut best = FEAS_TOL;
            let bland = degenerate_run >= DEGENERATE_SWITCH;
            for j in 0..active_cols {
                if self.basis.contains(&j) {
                    continue;
                }
                let mut r = cost[j];
                for i in 0..m {
                    let a = self.t[i][j];
                    if a != 0.0 {
                        r -= cost[self.basis[i]] * a;
                    }
                }
                if r > best {
                    enter = Some(j);
                    if bland {
                        break;
                    }
                    best = r;
                }
            }
            let Some(c) = enter else {
                return Ok(());
            };
            let mut leave: Option<usize> = None;
            let mut best_ratio = f64::INFINITY;
            for i in 0..m {
                let a = self.t[i][c];
                if a > PIVOT_TOL {
                    let ratio = self.t[i][rhs] / a;
                    let better = match leave {
                        None => true,
                        Some(l) => {
                            ratio < best_ratio - 1e-12 || (ratio <= best_ratio + 1e-12 && self.basis[i] < self.basis[l])
                        }
                    };
                    if better {
                        best_ratio = ratio;
                        leave = Some(i);
                    }
                }
            }
            let Some(r) = leave else {
                return Err(LpStatus::Unbounded);
            };
            if best_ratio.abs() <= 1e-12 {
                degenerate_run += 1;
            } else {
                degenerate_run = 0;
            }
            self.pivot(r, c);
        }
        Err(LpStatus::Stalled)
    }

    fn run(mut self, lp: &LinearProgram) -> LpStatus {
        let m = self.t.len();
        let max_iter = 50 * (m + self.cols) + 1000;
        if self.artificial_start < self.cols {
            let mut cost = vec![0.0; self.cols];
            for c in cost.iter_mut().skip(self.artificial_start) {
                *c = -1.0;
            }
            if let Err(s) = self.optimize(&cost, self.cols, max_iter) {
                return s;
            }
            let infeasibility: f64 = (0..m)
                .filter(|&i| self.basis[i] >= self.artificial_start)
                .map(|i| self.t[i][self.cols])
                .sum();
            if infeasibility > FEAS_TOL {
                return LpStatus::Infeasible;
            }
            // Drive remaining (zero-valued) artificials out of the basis.
            let mut i = 0;
            while i < self.t.len() {
                if self.basis[i] >= self.artificial_start {
                    let col = (0..self.artificial_start).find(|&j| self.t[i][j].abs() > 1e-9);
                    match col {
                        Some(j) => self.pivot(i, j),
                        None => {
                            self.t.remove(i);
                            self.basis.remove(i);
                            continue;
                        }
                    }
                }
                i += 1;
            }
        }
        let mut cost = vec![0.0; self.cols];
        cost[..self.n].copy_from_slice(&lp.objective);
        if let Err(s) = self.optimize(&cost, self.artificial_start, max_iter) {
            return s;
        }
        let mut x = lp.lower.clone();
        for (i, &b) in self.basis.iter().enumerate() {
            if b < self.n {
                x[b] += self.t[i][self.cols];
            }
        }
        let value = lp.objective.iter().zip(&x).map(|(c, v)| c * v).sum();
        LpStatus::Optimal { value, x }
    }
}
