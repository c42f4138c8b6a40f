//! Half-quadratic splitting with proximal-gradient updates.
//!
//! Minimises
//!
//! ```text
//! ½‖X − DKZ‖² + (η/2)‖Y − PZ‖² + (β₁/2)‖U − Z‖² + (β₂/2)‖V − Z‖² + λ₁‖U‖₁ + λ₂‖V‖₁
//! ```
//!
//! by alternating a proximal step on each auxiliary variable with an explicit
//! gradient step on `Z`. A conjugate-gradient solve of the normal equations
//! serves as an independent reference for the `λ₁ = λ₂ = 0` case.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::degradation::{bicubic_resize, DegradationOp, LinearCrossModalOp, ReconProblem, ResizeDirection};
use crate::error::{Error, Result};
use crate::metrics;
use crate::parallel;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct SolverParams {
    /// Guide-fidelity weight η.
    pub eta: f32,
    pub lambda1: f32,
    pub lambda2: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub delta1: f32,
    pub delta2: f32,
    /// Step on `Z`; `None` selects `0.9 / L` from a power-iteration estimate of `L`.
    pub delta3: Option<f32>,
    pub iters: usize,
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams {
            eta: 1.0,
            lambda1: 1e-3,
            lambda2: 1e-3,
            beta1: 1.0,
            beta2: 1.0,
            delta1: 1.0,
            delta2: 1.0,
            delta3: None,
            iters: 100,
        }
    }
}

impl SolverParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("eta", self.eta),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("delta1", self.delta1),
            ("delta2", self.delta2),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be non-negative, got {v}")));
            }
        }
        if let Some(d) = self.delta3 {
            if !(d >= 0.0) || !d.is_finite() {
                return Err(Error::InvalidArgument(format!("delta3 must be non-negative, got {d}")));
            }
        }
        Ok(())
    }
}

/// The observation operators shared by every problem in a run.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationModel {
    pub dk: DegradationOp,
    pub p: LinearCrossModalOp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HqsState {
    pub z: Tensor,
    pub u: Tensor,
    pub v: Tensor,
    pub t: usize,
}

impl HqsState {
    /// `Z⁽⁰⁾ = U⁽⁰⁾ = V⁽⁰⁾ = bicubic(X)`.
    pub fn bicubic_init(problem: &ReconProblem) -> Result<Self> {
        let z = bicubic_resize(&problem.x, problem.scale, ResizeDirection::Up)?;
        Ok(HqsState {
            u: z.clone(),
            v: z.clone(),
            z,
            t: 0,
        })
    }
}

/// Soft-thresholding `sign(v)·max(|v| − threshold, 0)`.
pub fn prox_l1(v: &Tensor, threshold: f32) -> Tensor {
    v.map(|x| {
        let m = x.abs() - threshold;
        if m > 0.0 {
            x.signum() * m
        } else {
            0.0
        }
    })
}

fn aux_update(prev: &Tensor, z: &Tensor, beta: f32, delta: f32, lambda: f32) -> Result<Tensor> {
    let step = prev.zip_map(z, "aux_update", |a, zz| a - delta * (beta * (a - zz)))?;
    Ok(prox_l1(&step, delta * lambda))
}

/// `U ← prox_{δ₁λ₁‖·‖₁}(U − δ₁β₁(U − Z))`.
pub fn update_u(state: &HqsState, params: &SolverParams) -> Result<Tensor> {
    aux_update(&state.u, &state.z, params.beta1, params.delta1, params.lambda1)
}

/// `V ← prox_{δ₂λ₂‖·‖₁}(V − δ₂β₂(V − Z))`.
pub fn update_v(state: &HqsState, params: &SolverParams) -> Result<Tensor> {
    aux_update(&state.v, &state.z, params.beta2, params.delta2, params.lambda2)
}

/// `(DK)ᵀ(DKZ − X) + ηPᵀ(PZ − Y) + β₁(Z − U) + β₂(Z − V)`.
pub fn grad_z(
    state: &HqsState,
    problem: &ReconProblem,
    model: &ObservationModel,
    params: &SolverParams,
) -> Result<Tensor> {
    let z = &state.z;
    let data = model.dk.adjoint(&model.dk.apply(z)?.sub(&problem.x)?)?;
    let guide = model.p.adjoint(&model.p.apply(z)?.sub(&problem.y)?)?;
    let mut g = data;
    g.axpy(params.eta, &guide)?;
    g.axpy(params.beta1, &z.sub(&state.u)?)?;
    g.axpy(params.beta2, &z.sub(&state.v)?)?;
    Ok(g)
}

/// One explicit gradient step `Z − δ₃ ∇_Z`.
pub fn update_z(
    state: &HqsState,
    problem: &ReconProblem,
    model: &ObservationModel,
    params: &SolverParams,
    delta3: f32,
) -> Result<Tensor> {
    let g = grad_z(state, problem, model, params)?;
    let mut z = state.z.clone();
    z.axpy(-delta3, &g)?;
    Ok(z)
}

fn sq_dist(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::mismatch("objective", a.shape(), b.shape()));
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum())
}

fn l1(t: &Tensor) -> f64 {
    t.data().iter().map(|&v| (v as f64).abs()).sum()
}

/// The split objective, accumulated in `f64`.
pub fn objective(
    state: &HqsState,
    problem: &ReconProblem,
    model: &ObservationModel,
    params: &SolverParams,
) -> Result<f64> {
    let z = &state.z;
    let data = sq_dist(&problem.x, &model.dk.apply(z)?)?;
    let guide = sq_dist(&problem.y, &model.p.apply(z)?)?;
    Ok(0.5 * data
        + 0.5 * params.eta as f64 * guide
        + 0.5 * params.beta1 as f64 * sq_dist(&state.u, z)?
        + 0.5 * params.beta2 as f64 * sq_dist(&state.v, z)?
        + params.lambda1 as f64 * l1(&state.u)
        + params.lambda2 as f64 * l1(&state.v))
}

/// Applies `(DK)ᵀDK + ηPᵀP + (β₁ + β₂)·shift_weight·I` plane by plane in `f64`.
fn normal_operator(model: &ObservationModel, shape: Shape, eta: f64, shift: f64) -> impl Fn(&[f64]) -> Vec<f64> + '_ {
    move |x: &[f64]| {
        let p = shape.plane();
        let mut out = Vec::with_capacity(x.len());
        for plane in x.chunks(p) {
            let dk = model
                .dk
                .adjoint_plane_f64(&model.dk.apply_plane_f64(plane, shape.h, shape.w), shape.h, shape.w);
            let pp = model
                .p
                .adjoint_plane_f64(&model.p.apply_plane_f64(plane, shape.h, shape.w), shape.h, shape.w);
            out.extend(
                plane
                    .iter()
                    .zip(dk.iter().zip(&pp))
                    .map(|(&xi, (&a, &b))| a + eta * b + shift * xi),
            );
        }
        out
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Power-iteration estimate of the largest eigenvalue of the `Z`-Hessian
/// `(DK)ᵀDK + ηPᵀP + (β₁ + β₂)I` at the given HR shape.
pub fn lipschitz_estimate(model: &ObservationModel, shape: Shape, params: &SolverParams) -> f64 {
    let op = normal_operator(model, shape, params.eta as f64, (params.beta1 + params.beta2) as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut x = Tensor::uniform(shape, -1.0, 1.0, &mut rng)
        .data()
        .iter()
        .map(|&v| v as f64)
        .collect::<Vec<_>>();
    let mut lambda = 0.0;
    for _ in 0..200 {
        let n = norm(&x);
        x.iter_mut().for_each(|v| *v /= n);
        let ax = op(&x);
        let next = dot(&x, &ax);
        x = ax;
        if (next - lambda).abs() <= 1e-10 * next.abs() {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub objective: f64,
    pub psnr: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SolveOutput {
    pub state: HqsState,
    pub trace: Vec<TraceRow>,
    pub delta3: f32,
}

impl SolveOutput {
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iteration,objective,psnr\n");
        for r in &self.trace {
            match r.psnr {
                Some(p) => out.push_str(&format!("{},{:.12e},{:.6}\n", r.iteration, r.objective, p)),
                None => out.push_str(&format!("{},{:.12e},\n", r.iteration, r.objective)),
            }
        }
        out
    }
}

/// Runs `params.iters` rounds of `(update_u, update_v, update_z)` from the
/// bicubic initialisation. The trace holds the objective before the first
/// round and after every `Z` update.
pub fn solve(problem: &ReconProblem, model: &ObservationModel, params: &SolverParams) -> Result<SolveOutput> {
    let state = HqsState::bicubic_init(problem)?;
    solve_from(state, problem, model, params)
}

pub fn solve_from(
    mut state: HqsState,
    problem: &ReconProblem,
    model: &ObservationModel,
    params: &SolverParams,
) -> Result<SolveOutput> {
    params.validate()?;
    if state.z.shape() != problem.hr_shape() {
        return Err(Error::mismatch("solve", state.z.shape(), problem.hr_shape()));
    }
    let delta3 = match params.delta3 {
        Some(d) => d,
        None => (0.9 / lipschitz_estimate(model, problem.hr_shape(), params)) as f32,
    };
    let psnr_of = |z: &Tensor| -> Result<Option<f64>> {
        problem.z.as_ref().map(|truth| metrics::psnr(z, truth, 1.0)).transpose()
    };
    let initial = objective(&state, problem, model, params)?;
    let mut trace = vec![TraceRow {
        iteration: 0,
        objective: initial,
        psnr: psnr_of(&state.z)?,
    }];
    for it in 1..=params.iters {
        state.u = update_u(&state, params)?;
        state.v = update_v(&state, params)?;
        state.z = update_z(&state, problem, model, params, delta3)?;
        state.t = it;
        let obj = objective(&state, problem, model, params)?;
        if !obj.is_finite() || (initial > 0.0 && obj > 1e6 * initial) {
            return Err(Error::Diverged {
                iter: it,
                reason: format!("objective {obj:e} exceeds 1e6 × initial {initial:e}; reduce delta3"),
            });
        }
        trace.push(TraceRow {
            iteration: it,
            objective: obj,
            psnr: psnr_of(&state.z)?,
        });
    }
    Ok(SolveOutput { state, trace, delta3 })
}

/// Solves independent problems concurrently; results are in input order.
pub fn solve_batch(
    problems: &[ReconProblem],
    model: &ObservationModel,
    params: &SolverParams,
) -> Vec<Result<SolveOutput>> {
    parallel::map(problems, |p| solve(p, model, params))
}

/// Result of [`conjugate_gradient`].
#[derive(Debug, Clone)]
pub struct CgSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// `‖b − A x‖₂` recomputed from the returned `x`.
    pub residual: f64,
}

/// Conjugate gradients for a symmetric positive (semi-)definite operator,
/// stopping when `‖r‖₂ < tol`.
pub fn conjugate_gradient(
    apply: impl Fn(&[f64]) -> Vec<f64>,
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<CgSolution> {
    let mut x = vec![0.0; b.len()];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let mut it = 0;
    while rr.sqrt() >= tol {
        if it >= max_iter {
            return Err(Error::NoConvergence {
                iters: it,
                residual: rr.sqrt(),
            });
        }
        let ap = apply(&p);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(Error::NoConvergence {
                iters: it,
                residual: rr.sqrt(),
            });
        }
        let alpha = rr / pap;
        x.iter_mut().zip(&p).for_each(|(xi, pi)| *xi += alpha * pi);
        r.iter_mut().zip(&ap).for_each(|(ri, api)| *ri -= alpha * api);
        let next = dot(&r, &r);
        let beta = next / rr;
        p.iter_mut().zip(&r).for_each(|(pi, ri)| *pi = ri + beta * *pi);
        rr = next;
        it += 1;
        // Refresh the recursive residual periodically to avoid drift.
        if it % 50 == 0 {
            let ax = apply(&x);
            r = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
            rr = dot(&r, &r);
        }
    }
    let ax = apply(&x);
    let residual = norm(&b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect::<Vec<_>>());
    Ok(CgSolution {
        x,
        iterations: it,
        residual,
    })
}

fn widen(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Exact solution of the quadratic part of the problem for `λ₁ = λ₂ = 0`.
///
/// With `aux = Some((U, V))` this solves the `Z` sub-problem
/// `((DK)ᵀDK + ηPᵀP + (β₁+β₂)I) Z = (DK)ᵀX + ηPᵀY + β₁U + β₂V`.
/// With `aux = None` it solves for the joint minimiser, where `U = V = Z` and
/// the coupling terms cancel: `((DK)ᵀDK + ηPᵀP) Z = (DK)ᵀX + ηPᵀY`.
pub fn cg_quadratic_oracle(
    problem: &ReconProblem,
    model: &ObservationModel,
    params: &SolverParams,
    aux: Option<(&Tensor, &Tensor)>,
) -> Result<Tensor> {
    if params.lambda1 != 0.0 || params.lambda2 != 0.0 {
        return Err(Error::InvalidArgument(
            "the CG oracle requires lambda1 = lambda2 = 0".into(),
        ));
    }
    let shape = problem.hr_shape();
    let (h, w) = (shape.h, shape.w);
    let eta = params.eta as f64;
    let x = widen(&problem.x);
    let y = widen(&problem.y);
    let mut b = Vec::with_capacity(shape.len());
    for (xp, yp) in x.chunks(problem.x.shape().plane()).zip(y.chunks(shape.plane())) {
        let dx = model.dk.adjoint_plane_f64(xp, h, w);
        let py = model.p.adjoint_plane_f64(yp, h, w);
        b.extend(dx.iter().zip(&py).map(|(a, c)| a + eta * c));
    }
    let shift = match aux {
        Some((u, v)) => {
            if u.shape() != shape || v.shape() != shape {
                return Err(Error::mismatch("cg_quadratic_oracle", u.shape(), shape));
            }
            for ((bi, &ui), &vi) in b.iter_mut().zip(u.data()).zip(v.data()) {
                *bi += params.beta1 as f64 * ui as f64 + params.beta2 as f64 * vi as f64;
            }
            (params.beta1 + params.beta2) as f64
        }
        None => {
            if !(eta > 0.0) {
                return Err(Error::InvalidArgument("joint oracle needs eta > 0".into()));
            }
            0.0
        }
    };
    let op = normal_operator(model, shape, eta, shift);
    let sol = conjugate_gradient(op, &b, 1e-8, 10 * shape.len())?;
    Tensor::from_vec(shape, sol.x.iter().map(|&v| v as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degradation::{synth_problem, PhantomSpec};
    use proptest::prelude::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn model(scale: usize) -> ObservationModel {
        ObservationModel {
            dk: DegradationOp::new(scale, 1.0, 0.0).unwrap(),
            p: LinearCrossModalOp::gaussian(0.5, 0.8, 0.0).unwrap(),
        }
    }

    fn random_state(shape: Shape, seed: u64) -> HqsState {
        let mut r = rng(seed);
        HqsState {
            z: Tensor::uniform(shape, 0.0, 1.0, &mut r),
            u: Tensor::uniform(shape, -1.0, 1.0, &mut r),
            v: Tensor::uniform(shape, -1.0, 1.0, &mut r),
            t: 0,
        }
    }

    fn problem(scale: usize, seed: u64) -> ReconProblem {
        synth_problem(&PhantomSpec::new(seed, 32, 32), &model(scale).dk, &model(scale).p).unwrap()
    }

    #[test]
    fn prox_examples() {
        let t = Tensor::from_vec([1, 1, 1, 2], vec![2.0, -0.3]).unwrap();
        assert_eq!(prox_l1(&t, 0.5).data(), &[1.5, 0.0]);
        assert_eq!(prox_l1(&t, 0.0), t);
    }

    #[test]
    fn aux_updates_degenerate_cases() {
        let s = random_state(Shape::new(1, 1, 8, 8), 1);
        let p = SolverParams {
            lambda1: 0.0,
            lambda2: 0.0,
            beta1: 2.0,
            delta1: 0.5,
            beta2: 4.0,
            delta2: 0.25,
            ..SolverParams::default()
        };
        assert!(update_u(&s, &p).unwrap().max_abs_diff(&s.z).unwrap() < 1e-6);
        assert!(update_v(&s, &p).unwrap().max_abs_diff(&s.z).unwrap() < 1e-6);
        let frozen = SolverParams {
            delta1: 0.0,
            delta2: 0.0,
            ..SolverParams::default()
        };
        assert_eq!(update_u(&s, &frozen).unwrap(), s.u);
        assert_eq!(update_v(&s, &frozen).unwrap(), s.v);
    }

    #[test]
    fn aux_updates_match_scalar_loop() {
        let s = random_state(Shape::new(1, 1, 8, 8), 2);
        let p = SolverParams {
            lambda1: 0.2,
            lambda2: 0.05,
            beta1: 1.5,
            beta2: 0.7,
            delta1: 0.3,
            delta2: 0.9,
            ..SolverParams::default()
        };
        let soft = |x: f64, t: f64| x.signum() * (x.abs() - t).max(0.0);
        let u = update_u(&s, &p).unwrap();
        let v = update_v(&s, &p).unwrap();
        for i in 0..64 {
            let (z, u0, v0) = (s.z.data()[i] as f64, s.u.data()[i] as f64, s.v.data()[i] as f64);
            let eu = soft(u0 - 0.3 * 1.5 * (u0 - z), 0.3 * 0.2);
            let ev = soft(v0 - 0.9 * 0.7 * (v0 - z), 0.9 * 0.05);
            assert!((u.data()[i] as f64 - eu).abs() < 1e-6);
            assert!((v.data()[i] as f64 - ev).abs() < 1e-6);
        }
    }

    #[test]
    fn gradient_vanishes_at_noise_free_truth() {
        let m = model(2);
        let prob = problem(2, 3);
        let z = prob.z.clone().unwrap();
        let s = HqsState {
            u: z.clone(),
            v: z.clone(),
            z,
            t: 0,
        };
        let g = grad_z(&s, &prob, &m, &SolverParams::default()).unwrap();
        assert!(g.data().iter().all(|v| v.abs() < 1e-5), "{}", g.min_max().1);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = model(2);
        let prob = problem(2, 4);
        let params = SolverParams {
            lambda1: 0.0,
            lambda2: 0.0,
            eta: 0.7,
            beta1: 0.3,
            beta2: 0.6,
            ..SolverParams::default()
        };
        let s = random_state(prob.hr_shape(), 5);
        let g = grad_z(&s, &prob, &m, &params).unwrap();
        // Central differences of the f64 objective on a handful of pixels.
        let h = 1e-2f32;
        let mut worst: f64 = 0.0;
        for idx in [0usize, 17, 100, 333, 511, 700, 1023] {
            let mut plus = s.clone();
            plus.z.data_mut()[idx] += h;
            let mut minus = s.clone();
            minus.z.data_mut()[idx] -= h;
            let fd = (objective(&plus, &prob, &m, &params).unwrap() - objective(&minus, &prob, &m, &params).unwrap())
                / (2.0 * h as f64);
            let rel = (fd - g.data()[idx] as f64).abs() / fd.abs().max(1e-3);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-3, "{worst}");
    }

    #[test]
    fn pure_data_fidelity_gradient() {
        let m = model(2);
        let prob = problem(2, 6);
        let s = random_state(prob.hr_shape(), 7);
        let p = SolverParams {
            eta: 0.0,
            beta1: 0.0,
            beta2: 0.0,
            ..SolverParams::default()
        };
        let g = grad_z(&s, &prob, &m, &p).unwrap();
        let expect = m.dk.adjoint(&m.dk.apply(&s.z).unwrap().sub(&prob.x).unwrap()).unwrap();
        assert!(g.max_abs_diff(&expect).unwrap() < 1e-7);
    }

    #[test]
    fn objective_examples() {
        let m = model(2);
        let prob = problem(2, 8);
        let z = prob.z.clone().unwrap();
        let truth = HqsState {
            u: z.clone(),
            v: z.clone(),
            z,
            t: 0,
        };
        let mut p = SolverParams {
            lambda1: 0.0,
            lambda2: 0.0,
            ..SolverParams::default()
        };
        assert!(objective(&truth, &prob, &m, &p).unwrap() < 1e-9);

        let s = random_state(prob.hr_shape(), 9);
        let base = objective(&s, &prob, &m, &p).unwrap();
        p.eta *= 2.0;
        let doubled = objective(&s, &prob, &m, &p).unwrap();
        let guide = 0.5 * sq_dist(&prob.y, &m.p.apply(&s.z).unwrap()).unwrap();
        assert!((doubled - base - guide).abs() < 1e-9 * base.max(1.0));
    }

    #[test]
    fn objective_matches_loop_oracle() {
        let m = model(2);
        let prob = problem(2, 10);
        let s = random_state(prob.hr_shape(), 11);
        let p = SolverParams {
            eta: 0.8,
            lambda1: 0.05,
            lambda2: 0.02,
            beta1: 0.4,
            beta2: 1.3,
            ..SolverParams::default()
        };
        let dkz = m.dk.apply(&s.z).unwrap();
        let pz = m.p.apply(&s.z).unwrap();
        let mut expect = 0.0f64;
        for i in 0..dkz.len() {
            expect += 0.5 * (prob.x.data()[i] as f64 - dkz.data()[i] as f64).powi(2);
        }
        for i in 0..pz.len() {
            let (z, u, v) = (s.z.data()[i] as f64, s.u.data()[i] as f64, s.v.data()[i] as f64);
            expect += 0.4 * (prob.y.data()[i] as f64 - pz.data()[i] as f64).powi(2);
            expect += 0.2 * (u - z).powi(2) + 0.65 * (v - z).powi(2);
            expect += 0.05 * u.abs() + 0.02 * v.abs();
        }
        let got = objective(&s, &prob, &m, &p).unwrap();
        assert!((got - expect).abs() / expect < 1e-6);
    }

    #[test]
    fn zero_step_and_fixed_point() {
        let m = model(2);
        let prob = problem(2, 12);
        let s = random_state(prob.hr_shape(), 13);
        let p = SolverParams::default();
        assert_eq!(update_z(&s, &prob, &m, &p, 0.0).unwrap(), s.z);

        let z = prob.z.clone().unwrap();
        let p0 = SolverParams {
            lambda1: 0.0,
            lambda2: 0.0,
            ..SolverParams::default()
        };
        let at_truth = HqsState {
            u: z.clone(),
            v: z.clone(),
            z: z.clone(),
            t: 0,
        };
        let out = solve_from(at_truth, &prob, &m, &SolverParams { iters: 1, ..p0 }).unwrap();
        assert!(out.state.z.max_abs_diff(&z).unwrap() < 1e-6);
        assert!(out.state.u.max_abs_diff(&z).unwrap() < 1e-6);
        assert!(out.state.v.max_abs_diff(&z).unwrap() < 1e-6);
    }

    #[test]
    fn one_step_decreases_objective() {
        let m = model(2);
        let prob = problem(2, 14);
        let p = SolverParams::default();
        let s = HqsState::bicubic_init(&prob).unwrap();
        let l = lipschitz_estimate(&m, prob.hr_shape(), &p);
        let before = objective(&s, &prob, &m, &p).unwrap();
        let mut next = s.clone();
        next.z = update_z(&s, &prob, &m, &p, (0.9 / l) as f32).unwrap();
        assert!(objective(&next, &prob, &m, &p).unwrap() < before);
    }

    #[test]
    fn lipschitz_bounds_rayleigh_quotients() {
        let m = model(2);
        let shape = Shape::new(1, 1, 16, 16);
        let p = SolverParams::default();
        let l = lipschitz_estimate(&m, shape, &p);
        let op = normal_operator(&m, shape, p.eta as f64, (p.beta1 + p.beta2) as f64);
        for seed in 0..5 {
            let x: Vec<f64> = Tensor::randn(shape, 1.0, &mut rng(seed))
                .data()
                .iter()
                .map(|&v| v as f64)
                .collect();
            assert!(dot(&x, &op(&x)) / dot(&x, &x) <= l * (1.0 + 1e-9));
        }
        // The quadratic Hessian is bounded by 1 + η·gain² + β₁ + β₂.
        assert!(l <= 1.0 + 0.64 + 2.0 + 1e-9);
        assert!(l > 2.0);
    }

    #[test]
    fn zero_iterations_return_bicubic() {
        let m = model(2);
        let prob = problem(2, 15);
        let out = solve(
            &prob,
            &m,
            &SolverParams {
                iters: 0,
                ..SolverParams::default()
            },
        )
        .unwrap();
        let bic = bicubic_resize(&prob.x, 2, ResizeDirection::Up).unwrap();
        assert_eq!(out.state.z, bic);
        assert_eq!(out.trace.len(), 1);
    }

    #[test]
    fn divergence_is_reported() {
        let m = model(2);
        let prob = problem(2, 16);
        let p = SolverParams {
            delta3: Some(5.0),
            iters: 200,
            ..SolverParams::default()
        };
        assert!(matches!(solve(&prob, &m, &p), Err(Error::Diverged { .. })));
    }

    #[test]
    fn cg_identity_system_with_zero_operator() {
        let w: Vec<f64> = (0..64).map(|i| (i as f64).sin()).collect();
        let b: Vec<f64> = w.iter().map(|v| 2.0 * v).collect();
        // DK = 0 stub, η = 0, β₁ = β₂ = 1: the system is 2I.
        let sol = conjugate_gradient(|x| x.iter().map(|v| 2.0 * v).collect(), &b, 1e-8, 640).unwrap();
        assert!(sol.residual < 1e-8);
        assert!(sol.x.iter().zip(&w).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn cg_oracle_residual_and_subproblem_consistency() {
        let m = model(2);
        let prob = problem(2, 17);
        let p = SolverParams {
            lambda1: 0.0,
            lambda2: 0.0,
            delta3: Some(0.2),
            ..SolverParams::default()
        };
        let s = random_state(prob.hr_shape(), 18);
        let z = cg_quadratic_oracle(&prob, &m, &p, Some((&s.u, &s.v))).unwrap();
        // The sub-problem minimiser has zero Z-gradient.
        let at = HqsState { z, ..s };
        let g = grad_z(&at, &prob, &m, &p).unwrap();
        assert!(g.norm() < 1e-5, "{}", g.norm());
        let bad = SolverParams { lambda1: 0.1, ..p };
        assert!(cg_quadratic_oracle(&prob, &m, &bad, None).is_err());
    }

    #[test]
    fn recovers_truth_with_identity_guide() {
        let m = ObservationModel {
            dk: DegradationOp::new(2, 1.0, 0.0).unwrap(),
            p: LinearCrossModalOp::identity(),
        };
        let prob = synth_problem(&PhantomSpec::new(19, 32, 32), &m.dk, &m.p).unwrap();
        let p = SolverParams {
            eta: 10.0,
            lambda1: 0.0,
            lambda2: 0.0,
            iters: 300,
            ..SolverParams::default()
        };
        let out = solve(&prob, &m, &p).unwrap();
        let psnr = metrics::psnr(&out.state.z, prob.z.as_ref().unwrap(), 1.0).unwrap();
        assert!(psnr > 40.0, "{psnr}");
        let oracle = cg_quadratic_oracle(&prob, &m, &p, None).unwrap();
        assert!(metrics::psnr(&oracle, prob.z.as_ref().unwrap(), 1.0).unwrap() > 40.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn soft_threshold_is_non_expansive(seed in any::<u64>(), t in 0.0f32..2.0) {
            let mut r = rng(seed);
            let a = Tensor::randn([1, 1, 4, 4], 1.0, &mut r);
            let b = Tensor::randn([1, 1, 4, 4], 1.0, &mut r);
            let lhs = prox_l1(&a, t).sub(&prox_l1(&b, t)).unwrap().norm();
            prop_assert!(lhs <= a.sub(&b).unwrap().norm() + 1e-9);
        }
    }
}
