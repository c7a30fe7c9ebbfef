use crate::ad::{mlp_eval, mlp_value_and_input_gradient, Activation, AdResult, BoundMlp, Mat, MlpParams, NodeId, Parameterized, Tape};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;

/// Learned port-Hamiltonian subsystem.
///
/// `J = B - Bᵀ` and `R = A Aᵀ` are built from network outputs reshaped
/// row-major to `nx × nx`, so skew-symmetry and positive semi-definiteness
/// hold for every parameter value. The Hamiltonian network ends in an ELU
/// and is shifted by `h_lower_bound`, which bounds `H` below by
/// `h_lower_bound - 1`. `G` is a constant matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsystemModel {
    pub nx: usize,
    pub nu: usize,
    pub b_net: MlpParams,
    pub a_net: MlpParams,
    pub h_net: MlpParams,
    pub h_lower_bound: f64,
    pub g: Mat,
}

impl SubsystemModel {
    /// Fresh subsystem with one tanh hidden layer of `hidden` nodes per network.
    pub fn init<R: Rng>(nx: usize, nu: usize, hidden: usize, h_lower_bound: f64, rng: &mut R) -> Self {
        let tanh_lin = [Activation::Tanh, Activation::Linear];
        SubsystemModel {
            nx,
            nu,
            b_net: MlpParams::init(&[nx, hidden, nx * nx], &tanh_lin, rng),
            a_net: MlpParams::init(&[nx, hidden, nx * nx], &tanh_lin, rng),
            h_net: MlpParams::init(&[nx, hidden, 1], &[Activation::Tanh, Activation::Elu], rng),
            h_lower_bound,
            g: identity_top(nx, nu),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let nets = [("b_net", &self.b_net, self.nx * self.nx), ("a_net", &self.a_net, self.nx * self.nx), ("h_net", &self.h_net, 1)];
        for (name, net, out) in nets {
            net.validate().map_err(|e| ModelError::Invalid(format!("{name}: {e}")))?;
            if net.input_dim() != self.nx || net.output_dim() != out {
                return Err(ModelError::Invalid(format!(
                    "{name}: maps {} -> {}, expected {} -> {out}",
                    net.input_dim(),
                    net.output_dim(),
                    self.nx
                )));
            }
        }
        if self.h_net.layers.last().map(|l| l.activation) != Some(Activation::Elu) {
            return Err(ModelError::Invalid("h_net: last layer must use the ELU activation".into()));
        }
        if self.g.shape() != (self.nx, self.nu) {
            return Err(ModelError::Dimension { what: "G", expected: (self.nx, self.nu), got: self.g.shape() });
        }
        if !self.g.is_finite() || !self.h_lower_bound.is_finite() {
            return Err(ModelError::Invalid("non-finite G or lower bound".into()));
        }
        Ok(())
    }
}

impl Parameterized for SubsystemModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Mat)) {
        self.b_net.visit(&format!("{prefix}.b_net"), f);
        self.a_net.visit(&format!("{prefix}.a_net"), f);
        self.h_net.visit(&format!("{prefix}.h_net"), f);
        f(format!("{prefix}.g"), &self.g);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Mat)) {
        self.b_net.visit_mut(&format!("{prefix}.b_net"), f);
        self.a_net.visit_mut(&format!("{prefix}.a_net"), f);
        self.h_net.visit_mut(&format!("{prefix}.h_net"), f);
        f(format!("{prefix}.g"), &mut self.g);
    }
}

/// `nx × nu` matrix with an identity in its leading square block.
pub fn identity_top(nx: usize, nu: usize) -> Mat {
    Mat::from_fn(nx, nu, |i, j| if i == j { 1.0 } else { 0.0 })
}

/// Subsystem with closed-form structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AnalyticSubsystem {
    /// Mass with a spring to the previous node and absolute cubic damping.
    /// State `(e, p)`: spring elongation and momentum.
    /// `H = ½k e² + p²/(2m)`, `J = [[0,1],[-1,0]]`, `R = diag(0, d (p/m)²)`, `G = (0,1)ᵀ`.
    MassSpring { stiffness: f64, mass: f64, damping: f64 },
    /// Isothermal ideal-gas reservoir with state `V`.
    /// `H = γ ln V`, `J = R = 0`, `G = 1`.
    IdealGas { gamma: f64 },
    /// `H = ½‖x‖²`, `J = R = 0`, `G` identity on its leading block.
    Quadratic { nx: usize, nu: usize },
}

impl AnalyticSubsystem {
    pub fn nx(&self) -> usize {
        match self {
            AnalyticSubsystem::MassSpring { .. } => 2,
            AnalyticSubsystem::IdealGas { .. } => 1,
            AnalyticSubsystem::Quadratic { nx, .. } => *nx,
        }
    }

    pub fn nu(&self) -> usize {
        match self {
            AnalyticSubsystem::MassSpring { .. } | AnalyticSubsystem::IdealGas { .. } => 1,
            AnalyticSubsystem::Quadratic { nu, .. } => *nu,
        }
    }

    pub fn g(&self) -> Mat {
        match self {
            AnalyticSubsystem::MassSpring { .. } => Mat::col(&[0.0, 1.0]),
            AnalyticSubsystem::IdealGas { .. } => Mat::scalar(1.0),
            AnalyticSubsystem::Quadratic { nx, nu } => identity_top(*nx, *nu),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = match *self {
            AnalyticSubsystem::MassSpring { stiffness, mass, damping } => stiffness > 0.0 && mass > 0.0 && damping >= 0.0,
            AnalyticSubsystem::IdealGas { gamma } => gamma > 0.0,
            AnalyticSubsystem::Quadratic { nx, nu } => nx > 0 && nu > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(ModelError::Invalid(format!("invalid analytic subsystem parameters: {self:?}")))
        }
    }

    /// Closed-form `J(x)`.
    pub fn j(&self, _x: &[f64]) -> Mat {
        match self {
            AnalyticSubsystem::MassSpring { .. } => Mat::from_rows(&[vec![0.0, 1.0], vec![-1.0, 0.0]]),
            _ => Mat::zeros(self.nx(), self.nx()),
        }
    }

    /// Closed-form `R(x)`.
    pub fn r(&self, x: &[f64]) -> Mat {
        match *self {
            AnalyticSubsystem::MassSpring { mass, damping, .. } => {
                let v = x[1] / mass;
                Mat::from_rows(&[vec![0.0, 0.0], vec![0.0, damping * v * v]])
            }
            _ => Mat::zeros(self.nx(), self.nx()),
        }
    }

    /// Closed-form `H(x)`.
    pub fn hamiltonian(&self, x: &[f64]) -> f64 {
        match *self {
            AnalyticSubsystem::MassSpring { stiffness, mass, .. } => 0.5 * stiffness * x[0] * x[0] + x[1] * x[1] / (2.0 * mass),
            AnalyticSubsystem::IdealGas { gamma } => gamma * x[0].ln(),
            AnalyticSubsystem::Quadratic { .. } => 0.5 * x.iter().map(|v| v * v).sum::<f64>(),
        }
    }

    /// Closed-form `∇H(x)`.
    pub fn grad_h(&self, x: &[f64]) -> Vec<f64> {
        match *self {
            AnalyticSubsystem::MassSpring { stiffness, mass, .. } => vec![stiffness * x[0], x[1] / mass],
            AnalyticSubsystem::IdealGas { gamma } => vec![gamma / x[0]],
            AnalyticSubsystem::Quadratic { .. } => x.to_vec(),
        }
    }
}

/// Learned or analytic member of a composite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Subsystem {
    Learned(SubsystemModel),
    Analytic(AnalyticSubsystem),
}

impl Subsystem {
    pub fn nx(&self) -> usize {
        match self {
            Subsystem::Learned(m) => m.nx,
            Subsystem::Analytic(a) => a.nx(),
        }
    }

    pub fn nu(&self) -> usize {
        match self {
            Subsystem::Learned(m) => m.nu,
            Subsystem::Analytic(a) => a.nu(),
        }
    }

    pub fn g(&self) -> Mat {
        match self {
            Subsystem::Learned(m) => m.g.clone(),
            Subsystem::Analytic(a) => a.g(),
        }
    }

    pub fn is_learned(&self) -> bool {
        matches!(self, Subsystem::Learned(_))
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            Subsystem::Learned(m) => m.validate(),
            Subsystem::Analytic(a) => a.validate(),
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundSubsystem {
        match self {
            Subsystem::Learned(m) => BoundSubsystem::Learned {
                nx: m.nx,
                b_net: m.b_net.bind(tape, trainable),
                a_net: m.a_net.bind(tape, trainable),
                h_net: m.h_net.bind(tape, trainable),
                h_lower_bound: m.h_lower_bound,
                g: if trainable { tape.var(m.g.clone()) } else { tape.constant(m.g.clone()) },
            },
            Subsystem::Analytic(a) => BoundSubsystem::Analytic { model: a.clone(), g: tape.constant(a.g()) },
        }
    }
}

/// Subsystem registered on a tape.
#[derive(Debug, Clone)]
pub enum BoundSubsystem {
    Learned { nx: usize, b_net: BoundMlp, a_net: BoundMlp, h_net: BoundMlp, h_lower_bound: f64, g: NodeId },
    Analytic { model: AnalyticSubsystem, g: NodeId },
}

/// Per-subsystem quantities at a batch of states (`nx × B` each, `H` is `1 × B`).
#[derive(Debug, Clone, Copy)]
pub struct SubsystemTerms {
    pub grad_h: NodeId,
    /// `(J(x) - R(x)) ∇H(x)`
    pub internal_flow: NodeId,
    pub hamiltonian: NodeId,
}

impl BoundSubsystem {
    pub fn nx(&self) -> usize {
        match self {
            BoundSubsystem::Learned { nx, .. } => *nx,
            BoundSubsystem::Analytic { model, .. } => model.nx(),
        }
    }

    pub fn g(&self) -> NodeId {
        match self {
            BoundSubsystem::Learned { g, .. } | BoundSubsystem::Analytic { g, .. } => *g,
        }
    }

    /// Trainable leaves in [`Parameterized::visit`] order.
    pub fn leaf_ids(&self) -> Vec<NodeId> {
        match self {
            BoundSubsystem::Learned { b_net, a_net, h_net, g, .. } => {
                let mut ids = b_net.leaf_ids();
                ids.extend(a_net.leaf_ids());
                ids.extend(h_net.leaf_ids());
                ids.push(*g);
                ids
            }
            BoundSubsystem::Analytic { .. } => Vec::new(),
        }
    }

    pub fn terms(&self, tape: &mut Tape, x: NodeId) -> AdResult<SubsystemTerms> {
        match self {
            BoundSubsystem::Learned { nx, b_net, a_net, h_net, h_lower_bound, .. } => {
                let n = *nx;
                let (h_raw, grad_h) = mlp_value_and_input_gradient(tape, h_net, x)?;
                let hamiltonian = tape.offset(h_raw, *h_lower_bound);
                let b = mlp_eval(tape, b_net, x)?;
                let a = mlp_eval(tape, a_net, x)?;
                let bg = tape.batch_matvec(b, grad_h, n, false)?;
                let btg = tape.batch_matvec(b, grad_h, n, true)?;
                let jg = tape.sub(bg, btg)?;
                let atg = tape.batch_matvec(a, grad_h, n, true)?;
                let rg = tape.batch_matvec(a, atg, n, false)?;
                let internal_flow = tape.sub(jg, rg)?;
                Ok(SubsystemTerms { grad_h, internal_flow, hamiltonian })
            }
            BoundSubsystem::Analytic { model, .. } => analytic_terms(tape, model, x),
        }
    }
}

fn analytic_terms(tape: &mut Tape, model: &AnalyticSubsystem, x: NodeId) -> AdResult<SubsystemTerms> {
    match *model {
        AnalyticSubsystem::MassSpring { stiffness, mass, damping } => {
            let e = tape.row_slice(x, 0, 1)?;
            let p = tape.row_slice(x, 1, 1)?;
            let force = tape.scale(e, stiffness);
            let velocity = tape.scale(p, 1.0 / mass);
            let grad_h = tape.vstack(&[force, velocity])?;
            // ṗ internal = -k e - d v³
            let v3 = tape.cube(velocity);
            let damp = tape.scale(v3, damping);
            let neg_force = tape.neg(force);
            let p_flow = tape.sub(neg_force, damp)?;
            let internal_flow = tape.vstack(&[velocity, p_flow])?;
            let e2 = tape.square(e);
            let p2 = tape.square(p);
            let pe = tape.scale(e2, 0.5 * stiffness);
            let ke = tape.scale(p2, 0.5 / mass);
            let hamiltonian = tape.add(pe, ke)?;
            Ok(SubsystemTerms { grad_h, internal_flow, hamiltonian })
        }
        AnalyticSubsystem::IdealGas { gamma } => {
            let inv = tape.recip(x);
            let grad_h = tape.scale(inv, gamma);
            let lnv = tape.ln(x);
            let hamiltonian = tape.scale(lnv, gamma);
            let cols = tape.shape(x).1;
            let internal_flow = tape.constant(Mat::zeros(1, cols));
            Ok(SubsystemTerms { grad_h, internal_flow, hamiltonian })
        }
        AnalyticSubsystem::Quadratic { nx, .. } => {
            let sq = tape.square(x);
            let s = tape.sum_rows(sq);
            let hamiltonian = tape.scale(s, 0.5);
            let cols = tape.shape(x).1;
            let internal_flow = tape.constant(Mat::zeros(nx, cols));
            Ok(SubsystemTerms { grad_h: x, internal_flow, hamiltonian })
        }
    }
}

/// Node-level `J`, `R`, `∇H`, `H` of a learned subsystem at one state.
#[derive(Debug, Clone, Copy)]
pub struct Structure {
    pub j: NodeId,
    pub r: NodeId,
    pub grad_h: NodeId,
    pub h: NodeId,
}

/// Builds `J(x)`, `R(x)`, `∇H(x)` and `H(x)` of a learned subsystem on the tape,
/// with all parameters registered as variables.
pub fn eval_structure(sub: &SubsystemModel, x: &[f64], tape: &mut Tape) -> Result<Structure, ModelError> {
    if x.len() != sub.nx {
        return Err(ModelError::Dimension { what: "state", expected: (sub.nx, 1), got: (x.len(), 1) });
    }
    let n = sub.nx;
    let b_net = sub.b_net.bind(tape, true);
    let a_net = sub.a_net.bind(tape, true);
    let h_net = sub.h_net.bind(tape, true);
    let xi = tape.constant(Mat::col(x));
    let b_raw = mlp_eval(tape, &b_net, xi)?;
    let b = tape.reshape(b_raw, n, n)?;
    let bt = tape.transpose(b);
    let j = tape.sub(b, bt)?;
    let a_raw = mlp_eval(tape, &a_net, xi)?;
    let a = tape.reshape(a_raw, n, n)?;
    let at = tape.transpose(a);
    let r = tape.matmul(a, at)?;
    let (h_raw, grad_h) = mlp_value_and_input_gradient(tape, &h_net, xi)?;
    let h = tape.offset(h_raw, sub.h_lower_bound);
    Ok(Structure { j, r, grad_h, h })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_h_net_gives_zero_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut sub = SubsystemModel::init(2, 1, 16, 0.0, &mut rng);
        sub.h_net = MlpParams::zeros(&[2, 16, 1], &[Activation::Tanh, Activation::Elu]);
        for x in [[0.0, 0.0], [3.0, -1.5], [-100.0, 40.0]] {
            let mut t = Tape::new();
            let s = eval_structure(&sub, &x, &mut t).unwrap();
            assert_eq!(t.scalar(s.h), 0.0);
        }
    }

    #[test]
    fn structure_is_skew_and_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sub = SubsystemModel::init(3, 2, 16, 0.0, &mut rng);
        sub.validate().unwrap();
        let mut t = Tape::new();
        let s = eval_structure(&sub, &[0.3, -1.0, 2.0], &mut t).unwrap();
        let j = t.value(s.j);
        let r = t.value(s.r);
        for i in 0..3 {
            for k in 0..3 {
                assert_eq!(j.get(i, k) + j.get(k, i), 0.0);
                assert_eq!(r.get(i, k), r.get(k, i));
            }
        }
        let v = [0.7, -0.2, 1.1];
        let rv = r.matvec(&v);
        assert!(v.iter().zip(&rv).map(|(a, b)| a * b).sum::<f64>() >= -1e-12);
    }

    #[test]
    fn init_places_identity_in_g() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sub = SubsystemModel::init(2, 1, 16, 0.0, &mut rng);
        assert_eq!(sub.g.data, vec![1.0, 0.0]);
        assert_eq!(identity_top(2, 3).data, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn wrong_state_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sub = SubsystemModel::init(2, 1, 4, 0.0, &mut rng);
        let mut t = Tape::new();
        assert!(matches!(eval_structure(&sub, &[1.0], &mut t), Err(ModelError::Dimension { .. })));
    }

    #[test]
    fn analytic_tape_terms_match_closed_form() {
        let models = [
            AnalyticSubsystem::MassSpring { stiffness: 1.5, mass: 2.0, damping: 0.5 },
            AnalyticSubsystem::IdealGas { gamma: 1.3 },
            AnalyticSubsystem::Quadratic { nx: 3, nu: 1 },
        ];
        let states: [&[f64]; 3] = [&[0.4, -1.2], &[2.0], &[1.0, -2.0, 0.5]];
        for (m, x) in models.iter().zip(states) {
            let mut t = Tape::new();
            let xi = t.constant(Mat::col(x));
            let terms = analytic_terms(&mut t, m, xi).unwrap();
            let g = m.grad_h(x);
            assert_eq!(t.value(terms.grad_h).data, g);
            assert!((t.scalar(terms.hamiltonian) - m.hamiltonian(x)).abs() < 1e-14);
            let jr = m.j(x).zip_map(&m.r(x), |a, b| a - b);
            let flow = jr.matvec(&g);
            for (a, b) in t.value(terms.internal_flow).data.iter().zip(&flow) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }
}
