use crate::ad::{AdResult, Mat, NodeId, Parameterized, Tape};
use serde::{Deserialize, Serialize};

use super::subsystem::{AnalyticSubsystem, BoundSubsystem, Subsystem, SubsystemModel, SubsystemTerms};
use super::ModelError;

/// Interconnected subsystems coupled through a constant matrix `C`.
///
/// `J_c`, `R_c`, `G_c` are block diagonal over the subsystems and
/// `H_c = Σ Hᵢ`. `C` must vanish on the diagonal blocks and, unless the
/// model was built with [`CompositeModel::with_nonskew_coupling`], be
/// skew-symmetric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeModel {
    pub subsystems: Vec<Subsystem>,
    pub interconnection: Mat,
    #[serde(default)]
    pub allow_nonskew: bool,
}

impl CompositeModel {
    pub fn new(subsystems: Vec<Subsystem>, interconnection: Mat) -> Result<Self, ModelError> {
        let m = CompositeModel { subsystems, interconnection, allow_nonskew: false };
        m.validate()?;
        Ok(m)
    }

    /// Composite whose coupling may have a symmetric part. Only meant for
    /// reproducing reference plants that are not power preserving; the
    /// passivity guarantees do not hold for such models.
    pub fn with_nonskew_coupling(subsystems: Vec<Subsystem>, interconnection: Mat) -> Result<Self, ModelError> {
        let m = CompositeModel { subsystems, interconnection, allow_nonskew: true };
        m.validate()?;
        Ok(m)
    }

    pub fn nx(&self) -> usize {
        self.subsystems.iter().map(Subsystem::nx).sum()
    }

    pub fn nu(&self) -> usize {
        self.subsystems.iter().map(Subsystem::nu).sum()
    }

    /// Starting state row of each subsystem.
    pub fn state_offsets(&self) -> Vec<usize> {
        offsets(self.subsystems.iter().map(Subsystem::nx))
    }

    pub fn input_offsets(&self) -> Vec<usize> {
        offsets(self.subsystems.iter().map(Subsystem::nu))
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.subsystems.is_empty() {
            return Err(ModelError::Invalid("composite has no subsystems".into()));
        }
        for s in &self.subsystems {
            s.validate()?;
        }
        let n = self.nx();
        let c = &self.interconnection;
        if c.shape() != (n, n) {
            return Err(ModelError::Dimension { what: "interconnection", expected: (n, n), got: c.shape() });
        }
        if !c.is_finite() {
            return Err(ModelError::Invalid("interconnection has non-finite entries".into()));
        }
        if !self.allow_nonskew {
            for i in 0..n {
                for j in i..n {
                    if c.get(i, j) != -c.get(j, i) {
                        return Err(ModelError::NotSkew { row: i, col: j });
                    }
                }
            }
        }
        for (k, (&off, s)) in self.state_offsets().iter().zip(&self.subsystems).enumerate() {
            let block = c.block(off, off, s.nx(), s.nx());
            if block.data.iter().any(|&v| v != 0.0) {
                return Err(ModelError::DiagonalBlock { subsystem: k });
            }
        }
        Ok(())
    }

    /// Block-diagonal `G_c`.
    pub fn g_c(&self) -> Mat {
        let mut g = Mat::zeros(self.nx(), self.nu());
        for ((s, &xo), &uo) in self.subsystems.iter().zip(&self.state_offsets()).zip(&self.input_offsets()) {
            g.set_block(xo, uo, &s.g());
        }
        g
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundComposite {
        BoundComposite {
            subsystems: self.subsystems.iter().map(|s| s.bind(tape, trainable)).collect(),
            interconnection: tape.constant(self.interconnection.clone()),
            state_offsets: self.state_offsets(),
            input_offsets: self.input_offsets(),
            nx: self.nx(),
            nu: self.nu(),
            nus: self.subsystems.iter().map(Subsystem::nu).collect(),
        }
    }

    fn check_vec(&self, what: &'static str, v: &[f64], n: usize) -> Result<(), ModelError> {
        if v.len() != n {
            return Err(ModelError::Dimension { what, expected: (n, 1), got: (v.len(), 1) });
        }
        Ok(())
    }

    /// Evaluates dynamics, output and energy at a single state.
    pub fn evaluate(&self, x: &[f64], u: &[f64]) -> Result<PointEval, ModelError> {
        self.check_vec("state", x, self.nx())?;
        self.check_vec("input", u, self.nu())?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xi = tape.constant(Mat::col(x));
        let ui = tape.constant(Mat::col(u));
        let ev = bound.eval(&mut tape, xi, Some(ui))?;
        Ok(PointEval {
            x_dot: tape.value(ev.x_dot.expect("input supplied")).data.clone(),
            y: tape.value(ev.y).data.clone(),
            grad_h: tape.value(ev.grad_h).data.clone(),
            hamiltonian: tape.scalar(ev.hamiltonian),
        })
    }

    /// `ẋ_c = (J_c - R_c + C) ∇H_c + G_c u_c`.
    pub fn dynamics(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.evaluate(x, u).map(|e| e.x_dot)
    }

    /// `y_c = G_cᵀ ∇H_c`.
    pub fn output(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_vec("state", x, self.nx())?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xi = tape.constant(Mat::col(x));
        let ev = bound.eval(&mut tape, xi, None)?;
        Ok(tape.value(ev.y).data.clone())
    }

    pub fn hamiltonian(&self, x: &[f64]) -> Result<f64, ModelError> {
        self.check_vec("state", x, self.nx())?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xi = tape.constant(Mat::col(x));
        let ev = bound.eval(&mut tape, xi, None)?;
        Ok(tape.scalar(ev.hamiltonian))
    }
}

fn offsets(sizes: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut acc = 0;
    sizes
        .map(|n| {
            let o = acc;
            acc += n;
            o
        })
        .collect()
}

impl Parameterized for CompositeModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Mat)) {
        for (i, s) in self.subsystems.iter().enumerate() {
            if let Subsystem::Learned(m) = s {
                m.visit(&format!("{prefix}subsystems[{i}]"), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Mat)) {
        for (i, s) in self.subsystems.iter_mut().enumerate() {
            if let Subsystem::Learned(m) = s {
                m.visit_mut(&format!("{prefix}subsystems[{i}]"), f);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointEval {
    pub x_dot: Vec<f64>,
    pub y: Vec<f64>,
    pub grad_h: Vec<f64>,
    pub hamiltonian: f64,
}

/// Composite registered on a tape.
#[derive(Debug, Clone)]
pub struct BoundComposite {
    pub subsystems: Vec<BoundSubsystem>,
    pub interconnection: NodeId,
    pub state_offsets: Vec<usize>,
    pub input_offsets: Vec<usize>,
    pub nx: usize,
    pub nu: usize,
    nus: Vec<usize>,
}

/// Composite quantities at a batch of states.
#[derive(Debug, Clone, Copy)]
pub struct CompositeEval {
    /// Present when an input was supplied.
    pub x_dot: Option<NodeId>,
    pub y: NodeId,
    pub grad_h: NodeId,
    /// `1 × B`
    pub hamiltonian: NodeId,
}

impl BoundComposite {
    /// Trainable leaves in [`Parameterized::visit`] order of the composite.
    pub fn leaf_ids(&self) -> Vec<NodeId> {
        self.subsystems.iter().flat_map(BoundSubsystem::leaf_ids).collect()
    }

    /// Evaluates all subsystems at `x` (`nx × B`) and assembles the composite
    /// output and, when `u` (`nu × B`) is given, the state derivative.
    pub fn eval(&self, tape: &mut Tape, x: NodeId, u: Option<NodeId>) -> AdResult<CompositeEval> {
        let (rows, cols) = tape.shape(x);
        if rows != self.nx {
            return Err(crate::ad::AdError::Shape { op: "composite_state", lhs: (self.nx, cols), rhs: (rows, cols) });
        }
        if let Some(u) = u {
            let shape = tape.shape(u);
            if shape != (self.nu, cols) {
                return Err(crate::ad::AdError::Shape { op: "composite_input", lhs: (self.nu, cols), rhs: shape });
            }
        }
        let single = self.subsystems.len() == 1;
        let mut terms: Vec<SubsystemTerms> = Vec::with_capacity(self.subsystems.len());
        for (s, &off) in self.subsystems.iter().zip(&self.state_offsets) {
            let xi = if single { x } else { tape.row_slice(x, off, s.nx())? };
            terms.push(s.terms(tape, xi)?);
        }
        let grads: Vec<NodeId> = terms.iter().map(|t| t.grad_h).collect();
        let grad_h = if single { grads[0] } else { tape.vstack(&grads)? };

        let mut ys = Vec::with_capacity(terms.len());
        for (s, t) in self.subsystems.iter().zip(&terms) {
            let gt = tape.transpose(s.g());
            ys.push(tape.matmul(gt, t.grad_h)?);
        }
        let y = if single { ys[0] } else { tape.vstack(&ys)? };

        let mut hamiltonian = terms[0].hamiltonian;
        for t in &terms[1..] {
            hamiltonian = tape.add(hamiltonian, t.hamiltonian)?;
        }

        let x_dot = match u {
            None => None,
            Some(u) => {
                let mut parts = Vec::with_capacity(terms.len());
                for (k, (s, t)) in self.subsystems.iter().zip(&terms).enumerate() {
                    let ui = if single { u } else { tape.row_slice(u, self.input_offsets[k], self.nus[k])? };
                    let gu = tape.matmul(s.g(), ui)?;
                    parts.push(tape.add(t.internal_flow, gu)?);
                }
                let local = if single { parts[0] } else { tape.vstack(&parts)? };
                let coupled = tape.matmul(self.interconnection, grad_h)?;
                Some(tape.add(local, coupled)?)
            }
        };
        Ok(CompositeEval { x_dot, y, grad_h, hamiltonian })
    }
}

/// `ẋ_c` as a node, for a state `x_c` and input `u_c` already on the tape.
pub fn composite_dynamics(bound: &BoundComposite, x: NodeId, u: NodeId, tape: &mut Tape) -> AdResult<NodeId> {
    Ok(bound.eval(tape, x, Some(u))?.x_dot.expect("input supplied"))
}

/// `y_c` as a node.
pub fn composite_output(bound: &BoundComposite, x: NodeId, tape: &mut Tape) -> AdResult<NodeId> {
    Ok(bound.eval(tape, x, None)?.y)
}

/// `dH/dt - yᵀu` from the right-hand side of the dissipation balance,
/// `∇Hᵀ(J - R + C)∇H + ∇Hᵀ G u - yᵀu`.
///
/// Non-positive for every skew-coupled composite built from these
/// subsystems, up to rounding.
pub fn passivity_residual(model: &CompositeModel, x: &[f64], u: &[f64]) -> Result<f64, ModelError> {
    let ev = model.evaluate(x, u)?;
    let dh_dt: f64 = ev.grad_h.iter().zip(&ev.x_dot).map(|(g, f)| g * f).sum();
    let supplied: f64 = ev.y.iter().zip(u).map(|(y, u)| y * u).sum();
    Ok(dh_dt - supplied)
}

/// Deep copy of subsystem `index`.
pub fn extract_subsystem(model: &CompositeModel, index: usize) -> Result<Subsystem, ModelError> {
    model
        .subsystems
        .get(index)
        .cloned()
        .ok_or(ModelError::IndexOutOfRange { index, len: model.subsystems.len() })
}

/// Two-subsystem composite `[learned, known]` with
/// `C = [[0, C₁z], [-C₁zᵀ, 0]]`.
pub fn compose_with_known(learned: SubsystemModel, known: AnalyticSubsystem, coupling: &Mat) -> Result<CompositeModel, ModelError> {
    compose_pair(Subsystem::Learned(learned), Subsystem::Analytic(known), coupling)
}

/// Like [`compose_with_known`] for arbitrary members.
pub fn compose_pair(first: Subsystem, second: Subsystem, coupling: &Mat) -> Result<CompositeModel, ModelError> {
    let (n1, nz) = (first.nx(), second.nx());
    if coupling.shape() != (n1, nz) {
        return Err(ModelError::Dimension { what: "coupling block", expected: (n1, nz), got: coupling.shape() });
    }
    let mut c = Mat::zeros(n1 + nz, n1 + nz);
    c.set_block(0, n1, coupling);
    c.set_block(n1, 0, &coupling.transpose().map(|v| -v));
    CompositeModel::new(vec![first, second], c)
}
