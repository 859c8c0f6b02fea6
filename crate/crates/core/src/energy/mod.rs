//! The self-supervised objective over bidirectional flow and two depth
//! fields, with analytic (sub)gradients.
//!
//! ```text
//! total = λ_flow  (photo    + λ_sm_flow  smooth_flow)
//!       + λ_depth (depth_l1 + λ_sm_depth smooth_depth)
//!       + static + cycle
//! ```
//!
//! Photometric, smoothness and depth terms are averaged over the two
//! directions (frames), and the cycle term over both composition orders, so
//! exchanging the frames exchanges the roles of the variables exactly.

mod photometric;
mod regularizers;

use serde::{Deserialize, Serialize};

pub use photometric::{photometric_loss, PhotometricTarget, SSIM_C1, SSIM_C2};
pub use regularizers::{
    cycle_loss, depth_loss, smoothness_loss, static_loss, EdgeWeights,
};

use crate::error::{Error, Result};
use crate::geom::SparseRangeMap;
use crate::raster::Field;

/// Loss weights and term toggles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_flow: f64,
    pub lambda_depth: f64,
    pub lambda_smooth_flow: f64,
    pub lambda_smooth_depth: f64,
    pub beta: f64,
    pub enable_static: bool,
    pub enable_cycle: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_flow: 0.9,
            lambda_depth: 0.1,
            lambda_smooth_flow: 0.15,
            lambda_smooth_depth: 0.1,
            beta: 10.0,
            enable_static: true,
            enable_cycle: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_flow,
            self.lambda_depth,
            self.lambda_smooth_flow,
            self.lambda_smooth_depth,
            self.beta,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be finite and nonnegative: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Value of a term and its gradient w.r.t. one variable.
#[derive(Debug, Clone)]
pub struct TermGradient {
    pub value: f64,
    pub grad: Field,
}

/// Value of a term and its gradients w.r.t. two variables, in argument order.
#[derive(Debug, Clone)]
pub struct JointGradient {
    pub value: f64,
    pub first: Field,
    pub second: Field,
}

/// Per-term energies of one evaluation. `total` satisfies the weighted-sum
/// identity exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub photo: f64,
    pub smooth_flow: f64,
    pub depth_l1: f64,
    pub smooth_depth: f64,
    pub static_term: f64,
    pub cycle: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl EnergyReport {
    pub fn combine(
        weights: &LossWeights,
        photo: f64,
        smooth_flow: f64,
        depth_l1: f64,
        smooth_depth: f64,
        static_term: f64,
        cycle: f64,
    ) -> Self {
        let total = weights.lambda_flow * (photo + weights.lambda_smooth_flow * smooth_flow)
            + weights.lambda_depth * (depth_l1 + weights.lambda_smooth_depth * smooth_depth)
            + static_term
            + cycle;
        Self {
            photo,
            smooth_flow,
            depth_l1,
            smooth_depth,
            static_term,
            cycle,
            total,
            weights: weights.clone(),
        }
    }
}

/// Optimization variables for one frame pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairState {
    pub flow_fwd: Field,
    pub flow_bwd: Field,
    pub depth_t: Field,
    pub depth_t1: Field,
}

impl PairState {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            flow_fwd: Field::zeros(width, height, 2),
            flow_bwd: Field::zeros(width, height, 2),
            depth_t: Field::zeros(width, height, 1),
            depth_t1: Field::zeros(width, height, 1),
        }
    }

    pub fn fields(&self) -> [&Field; 4] {
        [&self.flow_fwd, &self.flow_bwd, &self.depth_t, &self.depth_t1]
    }

    pub fn fields_mut(&mut self) -> [&mut Field; 4] {
        [
            &mut self.flow_fwd,
            &mut self.flow_bwd,
            &mut self.depth_t,
            &mut self.depth_t1,
        ]
    }
}

/// Gradient of the total energy, laid out like [`PairState`].
pub type StateGradient = PairState;

/// Frame pair and depth supervision the energy is evaluated against.
#[derive(Debug, Clone)]
pub struct EnergyInputs {
    pub image_t: Field,
    pub image_t1: Field,
    pub supervision_t: SparseRangeMap,
    pub supervision_t1: SparseRangeMap,
}

/// Energy with the flow-independent parts of each term precomputed.
#[derive(Debug, Clone)]
pub struct EnergyModel {
    weights: LossWeights,
    image_t: Field,
    image_t1: Field,
    target_t: PhotometricTarget,
    target_t1: PhotometricTarget,
    edges_t: EdgeWeights,
    edges_t1: EdgeWeights,
    supervision_t: SparseRangeMap,
    supervision_t1: SparseRangeMap,
    flow_eps: f64,
    depth_eps: f64,
}

impl EnergyModel {
    pub fn new(inputs: &EnergyInputs, weights: &LossWeights) -> Result<Self> {
        weights.validate()?;
        let it = &inputs.image_t;
        it.check_same_dims(&inputs.image_t1, "energy images")?;
        for s in [&inputs.supervision_t, &inputs.supervision_t1] {
            if s.width() != it.width() || s.height() != it.height() {
                return Err(Error::Shape("energy: range map size differs from images".into()));
            }
        }
        Ok(Self {
            weights: weights.clone(),
            image_t: inputs.image_t.clone(),
            image_t1: inputs.image_t1.clone(),
            target_t: PhotometricTarget::new(&inputs.image_t),
            target_t1: PhotometricTarget::new(&inputs.image_t1),
            edges_t: EdgeWeights::new(&inputs.image_t, weights.beta),
            edges_t1: EdgeWeights::new(&inputs.image_t1, weights.beta),
            supervision_t: inputs.supervision_t.clone(),
            supervision_t1: inputs.supervision_t1.clone(),
            flow_eps: 0.0,
            depth_eps: 0.0,
        })
    }

    /// Replaces every absolute value by a Huber penalty of the given width,
    /// in pixels for flow terms and meters for depth terms. Zero restores the
    /// exact energy.
    pub fn set_l1_smoothing(&mut self, flow_eps: f64, depth_eps: f64) {
        self.flow_eps = flow_eps.max(0.0);
        self.depth_eps = depth_eps.max(0.0);
    }

    pub fn weights(&self) -> &LossWeights {
        &self.weights
    }

    /// Switches the static and cycle terms on or off.
    pub fn set_toggles(&mut self, enable_static: bool, enable_cycle: bool) {
        self.weights.enable_static = enable_static;
        self.weights.enable_cycle = enable_cycle;
    }

    pub fn width(&self) -> usize {
        self.image_t.width()
    }

    pub fn height(&self) -> usize {
        self.image_t.height()
    }

    /// Flow-dependent terms: photometric, flow smoothness and cycle.
    pub fn evaluate_flow(
        &self,
        flow_fwd: &Field,
        flow_bwd: &Field,
        with_grad: bool,
    ) -> Result<FlowTerms> {
        let wts = &self.weights;
        let (fwd, bwd) = rayon::join(
            || self.target_t.evaluate(&self.image_t1, flow_fwd, with_grad),
            || self.target_t1.evaluate(&self.image_t, flow_bwd, with_grad),
        );
        let ((pf, gpf), (pb, gpb)) = (fwd?, bwd?);
        let eps = self.flow_eps;
        let (sf, gsf) = self.edges_t.evaluate_robust(flow_fwd, eps, with_grad)?;
        let (sb, gsb) = self.edges_t1.evaluate_robust(flow_bwd, eps, with_grad)?;
        let cyc = if wts.enable_cycle {
            let (a, ga) = regularizers::cycle_term(flow_fwd, flow_bwd, eps, with_grad)?;
            let (b, gb) = regularizers::cycle_term(flow_bwd, flow_fwd, eps, with_grad)?;
            Some((a, ga, b, gb))
        } else {
            None
        };
        let photo = 0.5 * (pf + pb);
        let smooth_flow = 0.5 * (sf + sb);
        let cycle = cyc.as_ref().map_or(0.0, |c| 0.5 * (c.0 + c.2));
        check_finite(&[("photo", photo), ("smooth_flow", smooth_flow), ("cycle", cycle)])?;

        let grads = if with_grad {
            let flow_photo = 0.5 * wts.lambda_flow;
            let flow_smooth = 0.5 * wts.lambda_flow * wts.lambda_smooth_flow;
            let mut g_f = combine(&[(flow_photo, gpf.unwrap()), (flow_smooth, gsf.unwrap())]);
            let mut g_b = combine(&[(flow_photo, gpb.unwrap()), (flow_smooth, gsb.unwrap())]);
            if let Some((_, ga, _, gb)) = cyc {
                let (ga_f, ga_b) = ga.unwrap();
                let (gb_b, gb_f) = gb.unwrap();
                // Pair the two contributions first so that exchanging the
                // frames reproduces the same floating-point sums.
                add_scaled(&mut g_f, 0.5, &ga_f.axpy(1.0, &gb_f)?);
                add_scaled(&mut g_b, 0.5, &ga_b.axpy(1.0, &gb_b)?);
            }
            if !(g_f.is_finite() && g_b.is_finite()) {
                return Err(Error::Numerical { term: "flow gradient" });
            }
            Some((g_f, g_b))
        } else {
            None
        };
        Ok(FlowTerms {
            photo,
            smooth_flow,
            cycle,
            energy: wts.lambda_flow * (photo + wts.lambda_smooth_flow * smooth_flow) + cycle,
            grads,
        })
    }

    /// Depth-dependent terms: LiDAR L1, depth smoothness and static term.
    pub fn evaluate_depth(
        &self,
        depth_t: &Field,
        depth_t1: &Field,
        mask: &Field,
        with_grad: bool,
    ) -> Result<DepthTerms> {
        let wts = &self.weights;
        let eps = self.depth_eps;
        let (dt, gdt) = regularizers::depth_term(depth_t, &self.supervision_t, eps, with_grad)?;
        let (dt1, gdt1) = regularizers::depth_term(depth_t1, &self.supervision_t1, eps, with_grad)?;
        let (sdt, gsdt) = self.edges_t.evaluate_robust(depth_t, eps, with_grad)?;
        let (sdt1, gsdt1) = self.edges_t1.evaluate_robust(depth_t1, eps, with_grad)?;
        let stat = if wts.enable_static {
            Some(regularizers::static_term(depth_t, depth_t1, mask, eps)?)
        } else {
            None
        };
        let depth_l1 = 0.5 * (dt + dt1);
        let smooth_depth = 0.5 * (sdt + sdt1);
        let static_term = stat.as_ref().map_or(0.0, |s| s.value);
        check_finite(&[
            ("depth_l1", depth_l1),
            ("smooth_depth", smooth_depth),
            ("static", static_term),
        ])?;
        let grads = if with_grad {
            let depth_data = 0.5 * wts.lambda_depth;
            let depth_smooth = 0.5 * wts.lambda_depth * wts.lambda_smooth_depth;
            let mut g_t = combine(&[(depth_data, gdt.unwrap()), (depth_smooth, gsdt.unwrap())]);
            let mut g_t1 =
                combine(&[(depth_data, gdt1.unwrap()), (depth_smooth, gsdt1.unwrap())]);
            if let Some(s) = stat {
                add_scaled(&mut g_t, 1.0, &s.first);
                add_scaled(&mut g_t1, 1.0, &s.second);
            }
            if !(g_t.is_finite() && g_t1.is_finite()) {
                return Err(Error::Numerical { term: "depth gradient" });
            }
            Some((g_t, g_t1))
        } else {
            None
        };
        Ok(DepthTerms {
            depth_l1,
            smooth_depth,
            static_term,
            energy: wts.lambda_depth * (depth_l1 + wts.lambda_smooth_depth * smooth_depth)
                + static_term,
            grads,
        })
    }

    /// Evaluates every term; `mask` marks static pixels for the static term.
    pub fn evaluate(
        &self,
        state: &PairState,
        mask: &Field,
        with_grad: bool,
    ) -> Result<(EnergyReport, Option<StateGradient>)> {
        let f = self.evaluate_flow(&state.flow_fwd, &state.flow_bwd, with_grad)?;
        let d = self.evaluate_depth(&state.depth_t, &state.depth_t1, mask, with_grad)?;
        let report = self.report(&f, &d);
        let grad = match (f.grads, d.grads) {
            (Some((flow_fwd, flow_bwd)), Some((depth_t, depth_t1))) => Some(PairState {
                flow_fwd,
                flow_bwd,
                depth_t,
                depth_t1,
            }),
            _ => None,
        };
        Ok((report, grad))
    }

    pub fn report(&self, flow: &FlowTerms, depth: &DepthTerms) -> EnergyReport {
        EnergyReport::combine(
            &self.weights,
            flow.photo,
            flow.smooth_flow,
            depth.depth_l1,
            depth.smooth_depth,
            depth.static_term,
            flow.cycle,
        )
    }
}

/// Flow half of the energy; `energy` is its weighted contribution.
#[derive(Debug, Clone)]
pub struct FlowTerms {
    pub photo: f64,
    pub smooth_flow: f64,
    pub cycle: f64,
    pub energy: f64,
    /// Gradients w.r.t. the forward and backward flow.
    pub grads: Option<(Field, Field)>,
}

/// Depth half of the energy; `energy` is its weighted contribution.
#[derive(Debug, Clone)]
pub struct DepthTerms {
    pub depth_l1: f64,
    pub smooth_depth: f64,
    pub static_term: f64,
    pub energy: f64,
    /// Gradients w.r.t. the depth at `t` and `t+1`.
    pub grads: Option<(Field, Field)>,
}

fn check_finite(terms: &[(&'static str, f64)]) -> Result<()> {
    match terms.iter().find(|(_, v)| !v.is_finite()) {
        Some((name, _)) => Err(Error::Numerical { term: name }),
        None => Ok(()),
    }
}

fn combine(parts: &[(f64, Field)]) -> Field {
    let mut out = parts[0].1.map(|x| parts[0].0 * x);
    for (s, f) in &parts[1..] {
        add_scaled(&mut out, *s, f);
    }
    out
}

fn add_scaled(acc: &mut Field, s: f64, f: &Field) {
    for (a, b) in acc.data_mut().iter_mut().zip(f.data()) {
        *a += s * b;
    }
}

/// Total energy and gradient of `state` with the given static `mask`.
pub fn total_energy(
    state: &PairState,
    inputs: &EnergyInputs,
    weights: &LossWeights,
    mask: &Field,
) -> Result<(EnergyReport, StateGradient)> {
    let model = EnergyModel::new(inputs, weights)?;
    let (report, grad) = model.evaluate(state, mask, true)?;
    Ok((report, grad.expect("gradient requested")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert_eq!((w.lambda_flow, w.lambda_depth), (0.9, 0.1));
        assert_eq!((w.lambda_smooth_flow, w.lambda_smooth_depth, w.beta), (0.15, 0.1, 10.0));
        assert!(w.enable_static && w.enable_cycle);
    }

    #[test]
    fn zero_state_on_constant_frames_is_zero() {
        let img = Field::filled(16, 16, 1, 0.4);
        let inputs = EnergyInputs {
            image_t: img.clone(),
            image_t1: img,
            supervision_t: SparseRangeMap::empty(16, 16),
            supervision_t1: SparseRangeMap::empty(16, 16),
        };
        let mask = Field::filled(16, 16, 1, 1.0);
        let (r, g) =
            total_energy(&PairState::zeros(16, 16), &inputs, &LossWeights::default(), &mask)
                .unwrap();
        assert_eq!(r.total, 0.0);
        assert!(g.fields().iter().all(|f| f.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn negative_weight_is_rejected() {
        let w = LossWeights {
            lambda_flow: -0.1,
            ..Default::default()
        };
        assert!(w.validate().is_err());
    }

    #[test]
    fn nan_state_names_the_term() {
        let img = Field::filled(8, 8, 1, 0.4);
        let inputs = EnergyInputs {
            image_t: img.clone(),
            image_t1: img,
            supervision_t: SparseRangeMap::empty(8, 8),
            supervision_t1: SparseRangeMap::empty(8, 8),
        };
        let mut state = PairState::zeros(8, 8);
        state.depth_t.set(3, 3, 0, f64::NAN);
        state.depth_t.set(3, 4, 0, 1.0);
        let mask = Field::zeros(8, 8, 1);
        let err = total_energy(&state, &inputs, &LossWeights::default(), &mask).unwrap_err();
        assert!(matches!(err, Error::Numerical { term: "smooth_depth" }));
    }
}
