//! Piecewise-linear networks with skip connections.
//!
//! Every ReLU layer reads the network inputs and all units of earlier
//! layers, so policies, saturation and dynamics fold into one object.

use serde::{Deserialize, Serialize};

use crate::envsim::LinearSystem;
use crate::error::{check_dim, Error, Result};
use crate::neuralnet::{Activation, Layer, MlpNetwork};
use crate::policy::{OptionSemantics, PolicySet};

/// Dense affine map, weights row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl AffineMap {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.weights[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.weights[r * self.cols..(r + 1) * self.cols]
    }

    pub fn apply_row(&self, r: usize, x: &[f64]) -> f64 {
        self.row(r).iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias[r]
    }

    fn validate(&self, context: &'static str) -> Result<()> {
        check_dim(context, self.rows * self.cols, self.weights.len())?;
        check_dim(context, self.rows, self.bias.len())?;
        if self.weights.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(context.into()));
        }
        Ok(())
    }
}

/// Network outputs are `[Z, next state on communicate, next state on hold]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseLinearNet {
    input_dim: usize,
    state_dim: usize,
    layers: Vec<AffineMap>,
    output: AffineMap,
}

/// Exact forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub pre: Vec<f64>,
    pub post: Vec<f64>,
    pub outputs: Vec<f64>,
}

impl Evaluation {
    pub fn z(&self) -> f64 {
        self.outputs[0]
    }

    pub fn communicate_next(&self) -> &[f64] {
        let n = (self.outputs.len() - 1) / 2;
        &self.outputs[1..1 + n]
    }

    pub fn hold_next(&self) -> &[f64] {
        let n = (self.outputs.len() - 1) / 2;
        &self.outputs[1 + n..]
    }
}

impl PiecewiseLinearNet {
    pub fn new(input_dim: usize, state_dim: usize, layers: Vec<AffineMap>, output: AffineMap) -> Result<Self> {
        let mut width = input_dim;
        for l in &layers {
            l.validate("relu layer")?;
            check_dim("relu layer columns", width, l.cols)?;
            width += l.rows;
        }
        output.validate("output layer")?;
        check_dim("output layer columns", width, output.cols)?;
        check_dim("output rows", 1 + 2 * state_dim, output.rows)?;
        Ok(Self {
            input_dim,
            state_dim,
            layers,
            output,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output.rows
    }

    pub fn layers(&self) -> &[AffineMap] {
        &self.layers
    }

    pub fn output(&self) -> &AffineMap {
        &self.output
    }

    pub fn num_relus(&self) -> usize {
        self.layers.iter().map(|l| l.rows).sum()
    }

    pub fn evaluate(&self, input: &[f64]) -> Result<Evaluation> {
        check_dim("verifier input", self.input_dim, input.len())?;
        let mut values = input.to_vec();
        let mut pre = Vec::with_capacity(self.num_relus());
        for l in &self.layers {
            let z: Vec<f64> = (0..l.rows).map(|r| l.apply_row(r, &values)).collect();
            pre.extend_from_slice(&z);
            values.extend(z.iter().map(|v| v.max(0.0)));
        }
        let outputs = (0..self.output.rows)
            .map(|r| self.output.apply_row(r, &values))
            .collect();
        let post = values.split_off(self.input_dim);
        Ok(Evaluation { pre, post, outputs })
    }
}

/// Column offsets of one MLP's hidden layers inside the shared stack.
struct Placement {
    offsets: Vec<usize>,
}

fn check_relu(net: &MlpNetwork, name: &str) -> Result<()> {
    if net.layers().len() > 1 && net.activation() != Activation::Relu {
        return Err(Error::InvalidParameter(format!(
            "{name} network must use ReLU activations for verification"
        )));
    }
    Ok(())
}

fn copy_row(dst: &mut [f64], src: &Layer, r: usize, col_offset: usize, scale: f64) {
    for c in 0..src.cols {
        dst[col_offset + c] += scale * src.weight(r, c);
    }
}

/// Folds the deterministic ETC policy and linear dynamics into one network
/// over `(x, u_prev)`. Saturation to `[-limit, limit]` uses the identity
/// `sat(v) = -limit + relu(v + limit) - relu(v - limit)`.
pub fn compose(ps: &PolicySet, sys: &LinearSystem, action_limit: &[f64]) -> Result<PiecewiseLinearNet> {
    if ps.option_count() != 2 || ps.semantics() != OptionSemantics::Etc {
        return Err(Error::InvalidParameter(
            "verification needs an ETC policy with exactly two options".into(),
        ));
    }
    check_relu(ps.mu(), "option")?;
    check_relu(ps.pi(), "control")?;
    let n = sys.state_dim();
    let m = sys.input_dim();
    check_dim("policy state dimension", n, ps.manifest().state_dim)?;
    check_dim("policy action dimension", m, ps.action_dim())?;
    check_dim("action limit", m, action_limit.len())?;
    if action_limit.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(Error::InvalidParameter(
            "action limit must be finite and non-negative".into(),
        ));
    }
    let input_dim = n + m;

    let mu_hidden = &ps.mu().layers()[..ps.mu().layers().len() - 1];
    let pi_hidden = &ps.pi().layers()[..ps.pi().layers().len() - 1];
    let depth = mu_hidden.len().max(pi_hidden.len());
    let mut layers: Vec<AffineMap> = Vec::with_capacity(depth + 1);
    let mut width = input_dim;
    let mut mu_place = Placement { offsets: Vec::new() };
    let mut pi_place = Placement { offsets: Vec::new() };
    for j in 0..depth {
        let parts: Vec<(&Layer, &mut Placement)> =
            [(mu_hidden.get(j), &mut mu_place), (pi_hidden.get(j), &mut pi_place)]
                .into_iter()
                .filter_map(|(l, p)| l.map(|l| (l, p)))
                .collect();
        let rows: usize = parts.iter().map(|(l, _)| l.rows).sum();
        let mut map = AffineMap::zeros(rows, width);
        let mut r0 = 0;
        let mut next = width;
        for (l, place) in parts {
            let src = if j == 0 { 0 } else { place.offsets[j - 1] };
            for r in 0..l.rows {
                copy_row(map.row_mut(r0 + r), l, r, src, 1.0);
                map.bias[r0 + r] = l.bias[r];
            }
            place.offsets.push(next);
            next += l.rows;
            r0 += l.rows;
        }
        width += rows;
        layers.push(map);
    }
    let last_cols = |place: &Placement| place.offsets.last().copied().unwrap_or(0);

    let pi_out = ps.pi().layers().last().expect("network has an output layer");
    let mut sat = AffineMap::zeros(2 * m, width);
    for a in 0..m {
        for (k, shift) in [(2 * a, action_limit[a]), (2 * a + 1, -action_limit[a])] {
            copy_row(sat.row_mut(k), pi_out, a, last_cols(&pi_place), 1.0);
            sat.bias[k] = pi_out.bias[a] + shift;
        }
    }
    let sat_offset = width;
    width += 2 * m;
    layers.push(sat);

    let mu_out = ps.mu().layers().last().expect("network has an output layer");
    let a_mat = sys.a();
    let b_mat = sys.b();
    let mut out = AffineMap::zeros(1 + 2 * n, width);
    copy_row(out.row_mut(0), mu_out, 0, last_cols(&mu_place), 1.0);
    copy_row(out.row_mut(0), mu_out, 1, last_cols(&mu_place), -1.0);
    out.bias[0] = mu_out.bias[0] - mu_out.bias[1];
    for i in 0..n {
        for j in 0..n {
            out.row_mut(1 + i)[j] = a_mat[(i, j)];
            out.row_mut(1 + n + i)[j] = a_mat[(i, j)];
        }
        for a in 0..m {
            let b = b_mat[(i, a)];
            out.row_mut(1 + i)[sat_offset + 2 * a] += b;
            out.row_mut(1 + i)[sat_offset + 2 * a + 1] -= b;
            out.bias[1 + i] -= b * action_limit[a];
            out.row_mut(1 + n + i)[n + a] = b;
        }
    }
    PiecewiseLinearNet::new(input_dim, n, layers, out)
}
