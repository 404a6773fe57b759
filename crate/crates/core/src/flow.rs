//! Flow-matching policy over action chunks.
//!
//! The network predicts a velocity `v(s, a^m, m)` that transports Gaussian
//! noise `a^0` to an action chunk `a^1` along the straight path
//! `a^m = (1 - m) a^0 + m a^1`. Sampling integrates that field with fixed-step
//! forward Euler; training regresses the field onto `a^1 - a^0`.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Error, Result};
use crate::numerics::checkpoint::Checkpoint;
use crate::numerics::{backward, forward_batch, forward_trace, MlpSpec, Objective, ParamSet, Trace};

/// A flattened `T x A` chunk, row-major over (chunk step, action dim).
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk(pub Vec<f64>);

impl ActionChunk {
    pub fn zeros(len: usize) -> Self {
        ActionChunk(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// The action for chunk step `t`.
    pub fn step(&self, t: usize, action_dim: usize) -> &[f64] {
        &self.0[t * action_dim..(t + 1) * action_dim]
    }

    pub fn in_bounds(&self) -> bool {
        self.0.iter().all(|x| x.is_finite() && (-1.0..=1.0).contains(x))
    }
}

/// Flow time and source noise for one flow-matching regression term.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowDraw {
    pub m: f64,
    pub a0: Vec<f64>,
}

impl FlowDraw {
    pub fn new(m: f64, a0: Vec<f64>) -> Result<Self> {
        check_time(m)?;
        Ok(FlowDraw { m, a0 })
    }

    /// `m ~ U[0, 1)`, `a0 ~ N(0, I)`.
    pub fn sample<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let m = rng.random::<f64>();
        let a0 = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        FlowDraw { m, a0 }
    }
}

fn check_time(m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::InvalidArgument(format!("flow time {m} outside [0, 1]")));
    }
    Ok(())
}

/// Point at time `m` on the straight path from `a0` to `a1`. Not clamped.
pub fn interpolate(a0: &[f64], a1: &[f64], m: f64) -> Result<Vec<f64>> {
    check_time(m)?;
    if a0.len() != a1.len() {
        return Err(shape_err(format!("interpolate: {} vs {} entries", a0.len(), a1.len())));
    }
    Ok(a0.iter().zip(a1).map(|(x0, x1)| (1.0 - m) * x0 + m * x1).collect())
}

/// Anything that can supply a velocity for a batch of (state, partial chunk).
///
/// The flow policy is the production implementation; tests plug in
/// analytic fields.
pub trait VelocityField {
    fn state_dim(&self) -> usize;
    fn chunk_dim(&self) -> usize;
    fn flow_steps(&self) -> usize;
    /// `states` is `(B, state_dim)`, `chunks` is `(B, chunk_dim)`.
    fn velocity(&self, states: ArrayView2<f64>, chunks: ArrayView2<f64>, m: f64) -> Result<Array2<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowPolicy {
    pub spec: MlpSpec,
    pub params: ParamSet,
    pub state_dim: usize,
    /// Chunk horizon `T`.
    pub horizon: usize,
    pub action_dim: usize,
    /// Euler steps `K`.
    pub flow_steps: usize,
}

impl FlowPolicy {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        horizon: usize,
        action_dim: usize,
        flow_steps: usize,
        hidden_dims: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if horizon == 0 || action_dim == 0 || state_dim == 0 {
            return Err(Error::InvalidArgument("flow policy dimensions must be positive".into()));
        }
        if flow_steps == 0 {
            return Err(Error::InvalidArgument(
                "flow policy needs at least one Euler step".into(),
            ));
        }
        let spec = MlpSpec::new(
            state_dim + horizon * action_dim + 1,
            hidden_dims,
            horizon * action_dim,
            false,
        )?;
        let params = ParamSet::init(&spec, rng);
        Ok(FlowPolicy {
            spec,
            params,
            state_dim,
            horizon,
            action_dim,
            flow_steps,
        })
    }

    pub fn chunk_dim(&self) -> usize {
        self.horizon * self.action_dim
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new();
        ckpt.set_meta("kind", "policy")?;
        ckpt.set_meta("T", self.horizon)?;
        ckpt.set_meta("A", self.action_dim)?;
        ckpt.set_meta("K", self.flow_steps)?;
        ckpt.set_meta("state_dim", self.state_dim)?;
        ckpt.put_spec("actor", &self.spec)?;
        ckpt.put_params("actor", &self.params);
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta("kind")? != "policy" {
            return Err(Error::Checkpoint("not a policy checkpoint".into()));
        }
        let spec = ckpt.spec("actor")?;
        let policy = FlowPolicy {
            params: ckpt.params("actor", &spec)?,
            state_dim: ckpt.meta_parse("state_dim")?,
            horizon: ckpt.meta_parse("T")?,
            action_dim: ckpt.meta_parse("A")?,
            flow_steps: ckpt.meta_parse("K")?,
            spec,
        };
        if policy.spec.input_dim != policy.state_dim + policy.chunk_dim() + 1
            || policy.spec.output_dim != policy.chunk_dim()
            || policy.flow_steps == 0
        {
            return Err(Error::Checkpoint(
                "policy header inconsistent with network shape".into(),
            ));
        }
        Ok(policy)
    }

    /// Velocity network input rows `[s, a^m, m]`.
    pub fn net_input(
        &self,
        states: ArrayView2<f64>,
        chunks: ArrayView2<f64>,
        times: &Array1<f64>,
    ) -> Result<Array2<f64>> {
        let b = states.nrows();
        if states.ncols() != self.state_dim || chunks.dim() != (b, self.chunk_dim()) || times.len() != b {
            return Err(shape_err(format!(
                "flow input: states {:?}, chunks {:?}, times {}",
                states.dim(),
                chunks.dim(),
                times.len()
            )));
        }
        let t = times.view().insert_axis(Axis(1));
        concatenate(Axis(1), &[states, chunks, t]).map_err(|e| shape_err(e.to_string()))
    }
}

impl VelocityField for FlowPolicy {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn chunk_dim(&self) -> usize {
        FlowPolicy::chunk_dim(self)
    }

    fn flow_steps(&self) -> usize {
        self.flow_steps
    }

    fn velocity(&self, states: ArrayView2<f64>, chunks: ArrayView2<f64>, m: f64) -> Result<Array2<f64>> {
        let input = self.net_input(states, chunks, &Array1::from_elem(states.nrows(), m))?;
        forward_batch(&self.spec, &self.params, input.view())
    }
}

/// Draw one chunk per row of `states`.
///
/// Noise is drawn row by row from `rng`; the ODE runs for `K` Euler steps of
/// size `1/K`, evaluated at the left endpoint of each step, and the result is
/// clamped to `[-1, 1]` only at the end.
pub fn sample_chunks<F, R>(field: &F, states: ArrayView2<f64>, rng: &mut R) -> Result<Array2<f64>>
where
    F: VelocityField + ?Sized,
    R: Rng + ?Sized,
{
    if states.ncols() != field.state_dim() {
        return Err(shape_err(format!(
            "sampler: state has {} entries, policy expects {}",
            states.ncols(),
            field.state_dim()
        )));
    }
    let dim = field.chunk_dim();
    let steps = field.flow_steps();
    if steps == 0 {
        return Err(Error::InvalidArgument("flow_steps must be at least 1".into()));
    }
    let mut a = Array2::from_shape_simple_fn((states.nrows(), dim), || rng.sample(StandardNormal));
    let dt = 1.0 / steps as f64;
    for k in 0..steps {
        let m = k as f64 * dt;
        let v = field.velocity(states, a.view(), m)?;
        if v.dim() != a.dim() {
            return Err(shape_err(format!(
                "velocity {:?} does not match chunk {:?}",
                v.dim(),
                a.dim()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericalOverflow(format!(
                "non-finite velocity at flow step {k} (m = {m})"
            )));
        }
        a.scaled_add(dt, &v);
    }
    a.mapv_inplace(|x| x.clamp(-1.0, 1.0));
    Ok(a)
}

pub fn sample_chunk<F, R>(field: &F, state: &[f64], rng: &mut R) -> Result<ActionChunk>
where
    F: VelocityField + ?Sized,
    R: Rng + ?Sized,
{
    let states = ArrayView2::from_shape((1, state.len()), state).map_err(|e| shape_err(e.to_string()))?;
    let out = sample_chunks(field, states, rng)?;
    Ok(ActionChunk(out.into_raw_vec_and_offset().0))
}

/// `n` independent chunks for one state.
pub fn sample_candidates<F, R>(field: &F, state: &[f64], n: usize, rng: &mut R) -> Result<Vec<ActionChunk>>
where
    F: VelocityField + ?Sized,
    R: Rng + ?Sized,
{
    if n == 0 {
        return Err(Error::InvalidArgument("candidate count must be at least 1".into()));
    }
    let states = ArrayView2::from_shape((1, state.len()), state).map_err(|e| shape_err(e.to_string()))?;
    let states = states.broadcast((n, state.len())).expect("broadcast one row");
    let out = sample_chunks(field, states, rng)?;
    Ok(out.rows().into_iter().map(|r| ActionChunk(r.to_vec())).collect())
}

/// `n` candidates for every state in a batch, as a `(B * n, chunk_dim)`
/// matrix grouped by state.
pub fn sample_candidates_batch<F, R>(field: &F, states: ArrayView2<f64>, n: usize, rng: &mut R) -> Result<Array2<f64>>
where
    F: VelocityField + ?Sized,
    R: Rng + ?Sized,
{
    if n == 0 {
        return Err(Error::InvalidArgument("candidate count must be at least 1".into()));
    }
    let repeated = repeat_rows(states, n);
    sample_chunks(field, repeated.view(), rng)
}

/// Each row of `x` repeated `n` times consecutively.
pub fn repeat_rows(x: ArrayView2<f64>, n: usize) -> Array2<f64> {
    let mut out = Array2::zeros((x.nrows() * n, x.ncols()));
    for (i, row) in x.rows().into_iter().enumerate() {
        for j in 0..n {
            out.row_mut(i * n + j).assign(&row);
        }
    }
    out
}

/// Flow-matching regression terms, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowBatch {
    pub states: Array2<f64>,
    pub targets: Array2<f64>,
    pub noise: Array2<f64>,
    pub times: Array1<f64>,
}

impl FlowBatch {
    pub fn new(states: Array2<f64>, targets: Array2<f64>, noise: Array2<f64>, times: Array1<f64>) -> Result<Self> {
        let b = states.nrows();
        if targets.nrows() != b || noise.dim() != targets.dim() || times.len() != b {
            return Err(shape_err("flow batch rows disagree"));
        }
        if times.iter().any(|&m| !(0.0..=1.0).contains(&m)) {
            return Err(Error::InvalidArgument("flow time outside [0, 1]".into()));
        }
        Ok(FlowBatch {
            states,
            targets,
            noise,
            times,
        })
    }

    /// Fresh independent draws for every (state, target) row.
    pub fn with_draws<R: Rng + ?Sized>(states: Array2<f64>, targets: Array2<f64>, rng: &mut R) -> Result<Self> {
        let b = targets.nrows();
        let dim = targets.ncols();
        let mut noise = Array2::zeros((b, dim));
        let mut times = Array1::zeros(b);
        for i in 0..b {
            let draw = FlowDraw::sample(dim, rng);
            times[i] = draw.m;
            noise.row_mut(i).assign(&Array1::from(draw.a0));
        }
        FlowBatch::new(states, targets, noise, times)
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows `[a, b)` as a new batch.
    pub fn slice(&self, a: usize, b: usize) -> FlowBatch {
        FlowBatch {
            states: self.states.slice(s![a..b, ..]).to_owned(),
            targets: self.targets.slice(s![a..b, ..]).to_owned(),
            noise: self.noise.slice(s![a..b, ..]).to_owned(),
            times: self.times.slice(s![a..b]).to_owned(),
        }
    }

    /// Stack two batches.
    pub fn concat(&self, other: &FlowBatch) -> Result<FlowBatch> {
        let cat = |a: &Array2<f64>, b: &Array2<f64>| {
            concatenate(Axis(0), &[a.view(), b.view()]).map_err(|e| shape_err(e.to_string()))
        };
        FlowBatch::new(
            cat(&self.states, &other.states)?,
            cat(&self.targets, &other.targets)?,
            cat(&self.noise, &other.noise)?,
            concatenate(Axis(0), &[self.times.view(), other.times.view()]).map_err(|e| shape_err(e.to_string()))?,
        )
    }

    fn interpolated(&self) -> Array2<f64> {
        let m = self.times.view().insert_axis(Axis(1));
        &self.noise * &(1.0 - &m) + &self.targets * &m
    }

    fn velocity_targets(&self) -> Array2<f64> {
        &self.targets - &self.noise
    }
}

/// Forward pass over a [`FlowBatch`], kept for the backward pass.
pub struct BcForward {
    trace: Trace,
    residual: Array2<f64>,
    /// Per-row loss: mean over chunk dims of the squared velocity residual.
    pub losses: Vec<f64>,
}

fn row_losses(residual: &Array2<f64>) -> Vec<f64> {
    let dim = residual.ncols() as f64;
    residual
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|x| x * x).sum::<f64>() / dim)
        .collect()
}

fn check_batch(policy: &FlowPolicy, batch: &FlowBatch) -> Result<()> {
    if batch.targets.ncols() != policy.chunk_dim() {
        return Err(shape_err(format!(
            "target chunk has {} entries, policy emits {}",
            batch.targets.ncols(),
            policy.chunk_dim()
        )));
    }
    Ok(())
}

/// Per-row flow-matching losses by plain forward evaluation.
pub fn bc_losses(policy: &FlowPolicy, params: &ParamSet, batch: &FlowBatch) -> Result<Vec<f64>> {
    check_batch(policy, batch)?;
    let input = policy.net_input(batch.states.view(), batch.interpolated().view(), &batch.times)?;
    let v = forward_batch(&policy.spec, params, input.view())?;
    Ok(row_losses(&(v - batch.velocity_targets())))
}

pub fn bc_forward(policy: &FlowPolicy, params: &ParamSet, batch: &FlowBatch) -> Result<BcForward> {
    check_batch(policy, batch)?;
    let input = policy.net_input(batch.states.view(), batch.interpolated().view(), &batch.times)?;
    let trace = forward_trace(&policy.spec, params, input.view())?;
    let residual = trace.output() - &batch.velocity_targets();
    let losses = row_losses(&residual);
    Ok(BcForward {
        trace,
        residual,
        losses,
    })
}

/// Gradient of `sum_i coeffs[i] * losses[i]`.
pub fn bc_backward(params: &ParamSet, fwd: &BcForward, coeffs: &[f64]) -> Result<ParamSet> {
    if coeffs.len() != fwd.losses.len() {
        return Err(shape_err("one coefficient per flow row required"));
    }
    let scale = 2.0 / fwd.residual.ncols() as f64;
    let mut grad_out = fwd.residual.clone();
    for (mut row, &c) in grad_out.rows_mut().into_iter().zip(coeffs) {
        row *= c * scale;
    }
    let mut grads = params.zeros_like();
    backward(params, &fwd.trace, grad_out.view(), &mut grads)?;
    Ok(grads)
}

/// Single-term flow-matching loss.
pub fn bc_loss(policy: &FlowPolicy, state: &[f64], target: &ActionChunk, draw: &FlowDraw) -> Result<f64> {
    check_time(draw.m)?;
    if draw.a0.len() != target.len() {
        return Err(shape_err("noise and target lengths differ"));
    }
    let row = |v: &[f64]| Array2::from_shape_vec((1, v.len()), v.to_vec()).map_err(|e| shape_err(e.to_string()));
    let batch = FlowBatch::new(
        row(state)?,
        row(target.as_slice())?,
        row(&draw.a0)?,
        Array1::from_elem(1, draw.m),
    )?;
    Ok(bc_losses(policy, &policy.params, &batch)?[0])
}

/// Batch-mean flow-matching loss as an [`Objective`] over the policy weights.
pub struct BcObjective<'a> {
    pub policy: &'a FlowPolicy,
    pub batch: &'a FlowBatch,
}

impl Objective for BcObjective<'_> {
    fn value(&self, params: &ParamSet) -> Result<f64> {
        let losses = bc_losses(self.policy, params, self.batch)?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    fn value_and_grad(&self, params: &ParamSet) -> Result<(f64, ParamSet)> {
        let fwd = bc_forward(self.policy, params, self.batch)?;
        let n = fwd.losses.len() as f64;
        let coeffs = vec![1.0 / n; fwd.losses.len()];
        let grads = bc_backward(params, &fwd, &coeffs)?;
        Ok((fwd.losses.iter().sum::<f64>() / n, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// v(a^m, m) = (a1 - a^m) / (1 - m): the exact straight-line field, which
    /// is constant along the Euler path and equals a1 - a0.
    struct ToTarget(Vec<f64>, usize);
    impl VelocityField for ToTarget {
        fn state_dim(&self) -> usize {
            1
        }
        fn chunk_dim(&self) -> usize {
            self.0.len()
        }
        fn flow_steps(&self) -> usize {
            self.1
        }
        fn velocity(&self, _: ArrayView2<f64>, chunks: ArrayView2<f64>, m: f64) -> Result<Array2<f64>> {
            let target = Array1::from(self.0.clone());
            Ok((&target - &chunks) / (1.0 - m))
        }
    }

    struct Zero(usize);
    impl VelocityField for Zero {
        fn state_dim(&self) -> usize {
            1
        }
        fn chunk_dim(&self) -> usize {
            self.0
        }
        fn flow_steps(&self) -> usize {
            3
        }
        fn velocity(&self, _: ArrayView2<f64>, chunks: ArrayView2<f64>, _: f64) -> Result<Array2<f64>> {
            Ok(Array2::zeros(chunks.raw_dim()))
        }
    }

    struct Exploding;
    impl VelocityField for Exploding {
        fn state_dim(&self) -> usize {
            1
        }
        fn chunk_dim(&self) -> usize {
            2
        }
        fn flow_steps(&self) -> usize {
            4
        }
        fn velocity(&self, _: ArrayView2<f64>, chunks: ArrayView2<f64>, m: f64) -> Result<Array2<f64>> {
            let v = if m > 0.4 { f64::NAN } else { 1.0 };
            Ok(Array2::from_elem(chunks.raw_dim(), v))
        }
    }

    #[test]
    fn interpolate_endpoints_and_midpoint() {
        let a0 = [0.3, -2.0];
        let a1 = [1.0, 0.5];
        assert_eq!(interpolate(&a0, &a1, 0.0).unwrap(), a0.to_vec());
        assert_eq!(interpolate(&a0, &a1, 1.0).unwrap(), a1.to_vec());
        assert_eq!(interpolate(&[0.0; 3], &[1.0; 3], 0.5).unwrap(), vec![0.5; 3]);
        assert!(interpolate(&a0, &a1, 1.1).is_err());
        assert!(interpolate(&a0, &a1, -0.1).is_err());
    }

    #[test]
    fn euler_is_exact_on_straight_field() {
        let target = vec![0.25, -0.5, 0.9, 0.0];
        for k in [1, 2, 10] {
            let field = ToTarget(target.clone(), k);
            let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
            let chunk = sample_chunk(&field, &[0.0], &mut rng).unwrap();
            for (a, b) in chunk.as_slice().iter().zip(&target) {
                assert!((a - b).abs() < 1e-12, "K={k}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_field_returns_clamped_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let chunk = sample_chunk(&Zero(50), &[0.0], &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise: Vec<f64> = (0..50)
            .map(|_| rng.sample::<f64, _>(StandardNormal).clamp(-1.0, 1.0))
            .collect();
        assert_eq!(chunk.0, noise);
    }

    #[test]
    fn non_finite_velocity_names_the_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = sample_chunk(&Exploding, &[0.0], &mut rng).unwrap_err();
        assert!(err.to_string().contains("flow step 2"), "{err}");
    }

    fn small_policy(seed: u64) -> FlowPolicy {
        FlowPolicy::new(2, 3, 2, 10, &[16, 16], &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn candidates_are_deterministic_and_bounded() {
        let policy = small_policy(1);
        let state = [0.2, -0.4];
        let a = sample_candidates(&policy, &state, 32, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_candidates(&policy, &state, 32, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 32);
        assert!(a.iter().all(|c| c.len() == 6 && c.in_bounds()));

        let one = sample_candidates(&policy, &state, 1, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let single = sample_chunk(&policy, &state, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(one, vec![single]);
        assert!(sample_candidates(&policy, &state, 0, &mut ChaCha8Rng::seed_from_u64(8)).is_err());
        assert!(sample_chunk(&policy, &[0.0], &mut ChaCha8Rng::seed_from_u64(8)).is_err());
    }

    #[test]
    fn bc_loss_perfect_fit_and_unit_residual() {
        let mut policy = small_policy(2);
        for layer in &mut policy.params.layers {
            layer.weight.fill(0.0);
            layer.bias.fill(0.0);
        }
        let target = ActionChunk(vec![1.0; 6]);
        let draw = FlowDraw::new(0.37, vec![0.0; 6]).unwrap();
        assert_eq!(bc_loss(&policy, &[0.1, 0.1], &target, &draw).unwrap(), 1.0);

        // Output bias equal to the residual target is a perfect fit.
        let a0 = vec![0.2, -0.1, 0.0, 0.4, 0.5, -0.3];
        let draw = FlowDraw::new(0.8, a0.clone()).unwrap();
        let last = policy.params.layers.len() - 1;
        policy.params.layers[last].bias = Array1::from_iter(target.0.iter().zip(&a0).map(|(t, n)| t - n));
        assert_eq!(bc_loss(&policy, &[0.1, 0.1], &target, &draw).unwrap(), 0.0);
    }

    #[test]
    fn batch_helpers() {
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(
            repeat_rows(x.view(), 2),
            array![[1.0, 2.0], [1.0, 2.0], [3.0, 4.0], [3.0, 4.0]]
        );
        let policy = small_policy(3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let states = Array2::from_shape_fn((4, 2), |(i, j)| (i + j) as f64 * 0.1);
        let targets = Array2::from_shape_fn((4, 6), |(i, j)| ((i * j) as f64 * 0.1).sin());
        let batch = FlowBatch::with_draws(states, targets, &mut rng).unwrap();
        let whole = bc_losses(&policy, &policy.params, &batch).unwrap();
        let joined = batch.slice(0, 1).concat(&batch.slice(1, 4)).unwrap();
        assert_eq!(joined, batch);
        let fwd = bc_forward(&policy, &policy.params, &batch).unwrap();
        assert_eq!(fwd.losses, whole);
        assert!(whole.iter().all(|&l| l >= 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let policy = small_policy(4);
        let ckpt = policy.to_checkpoint().unwrap();
        let back = FlowPolicy::from_checkpoint(&Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.params, crate::numerics::checkpoint::quantize(&policy.params));
        assert_eq!(
            (back.horizon, back.action_dim, back.flow_steps, back.state_dim),
            (3, 2, 10, 2)
        );
    }
}
