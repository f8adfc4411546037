//! Schedule-driven forward passes, logit-lens readouts, trajectory capture,
//! multiple-choice scoring and greedy decoding.

use crate::error::{Error, Result};
use crate::model::{self, KvSlot, ModelSpec, WeightStore};
use crate::regularize::{regularize_step, RegularizerConfig, StateCache};
use crate::schedule::{LoopSchedule, StepPhase};
use crate::tensor::{self, Tensor};

/// Which token's hidden state a trajectory follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CapturePosition {
    #[default]
    Last,
    Index(usize),
}

#[derive(Debug, Clone)]
pub struct ForwardOptions {
    pub schedule: LoopSchedule,
    pub regularizer: RegularizerConfig,
    pub capture_trajectory: bool,
    pub capture_position: CapturePosition,
    /// Record a logit-lens readout at every captured entry.
    pub capture_lens: bool,
}

impl ForwardOptions {
    pub fn new(schedule: LoopSchedule, regularizer: RegularizerConfig) -> Self {
        Self {
            schedule,
            regularizer,
            capture_trajectory: false,
            capture_position: CapturePosition::Last,
            capture_lens: false,
        }
    }

    /// Schedule-free forward.
    pub fn baseline(spec: &ModelSpec) -> Result<Self> {
        Ok(Self::new(
            LoopSchedule::identity(spec.n_layers)?,
            RegularizerConfig::default(),
        ))
    }

    pub fn with_trajectory(mut self, position: CapturePosition) -> Self {
        self.capture_trajectory = true;
        self.capture_position = position;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TracePhase {
    Embedding,
    PreLoop,
    /// Pass number over the loop range, from 1.
    Loop(usize),
    PostLoop,
    /// Regularized state after boundary event `t` (from 1).
    Boundary(usize),
}

impl TracePhase {
    pub fn label(&self) -> &'static str {
        match self {
            TracePhase::Embedding => "embedding",
            TracePhase::PreLoop => "pre_loop",
            TracePhase::Loop(_) => "loop",
            TracePhase::PostLoop => "post_loop",
            TracePhase::Boundary(_) => "boundary",
        }
    }

    /// Loop pass or boundary index, when the phase has one.
    pub fn rep(&self) -> Option<usize> {
        match self {
            TracePhase::Loop(r) | TracePhase::Boundary(r) => Some(*r),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEntry {
    /// Schedule step; `None` for the embedding state.
    pub step: Option<usize>,
    /// Block applied at that step; `None` for the embedding state.
    pub block: Option<usize>,
    pub phase: TracePhase,
    pub hidden: Vec<f32>,
    pub lens_logits: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub n_layers: usize,
    pub schedule: (usize, usize, usize),
    /// Absolute token position that was followed.
    pub position: usize,
    pub entries: Vec<TrajectoryEntry>,
    pub final_logits: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub trajectory: Option<TrajectoryRecord>,
    /// Number of regularizer invocations (`R - 1`).
    pub boundary_events: usize,
    /// `‖ĥ − h⁽⁰⁾‖` (Frobenius, all rows) after the last boundary event.
    pub final_boundary_shift: Option<f64>,
}

/// Applies the final norm and unembedding to an intermediate state.
pub fn logit_lens(h: &Tensor, store: &WeightStore, spec: &ModelSpec) -> Result<Tensor> {
    model::readout(h, store, spec)
}

/// Stateful decoder: one KV slot per schedule step, so the same block seen
/// on different passes keeps separate caches.
pub struct Session<'a> {
    spec: &'a ModelSpec,
    store: &'a WeightStore,
    opts: ForwardOptions,
    kv: Vec<KvSlot>,
    len: usize,
}

impl<'a> Session<'a> {
    pub fn new(spec: &'a ModelSpec, store: &'a WeightStore, opts: ForwardOptions) -> Result<Self> {
        opts.schedule.validate_against(spec)?;
        opts.regularizer.validate()?;
        let kv = (0..opts.schedule.total_steps())
            .map(|_| KvSlot::new(spec))
            .collect();
        Ok(Self {
            spec,
            store,
            opts,
            kv,
            len: 0,
        })
    }

    /// Tokens consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Runs the schedule over `tokens`, which continue the sequence seen so far.
    pub fn feed(&mut self, tokens: &[u32]) -> Result<ForwardOutput> {
        if tokens.is_empty() {
            return Err(Error::Input("cannot run a forward pass on zero tokens".into()));
        }
        let (spec, store, opts) = (self.spec, self.store, &self.opts);
        let capture_row = match opts.capture_position {
            CapturePosition::Last => tokens.len() - 1,
            CapturePosition::Index(i) if i < tokens.len() => i,
            CapturePosition::Index(i) => {
                return Err(Error::Input(format!(
                    "capture position {i} is past the {} input tokens",
                    tokens.len()
                )))
            }
        };
        let positions: Vec<usize> = (self.len..self.len + tokens.len()).collect();
        let schedule = &opts.schedule;
        let mut entries = Vec::new();
        let record = |entries: &mut Vec<TrajectoryEntry>,
                      h: &Tensor,
                      step: Option<usize>,
                      phase: TracePhase|
         -> Result<()> {
            if !opts.capture_trajectory {
                return Ok(());
            }
            let row = h.slice_rows(capture_row, capture_row + 1);
            let lens_logits = if opts.capture_lens {
                Some(logit_lens(&row, store, spec)?.into_data())
            } else {
                None
            };
            entries.push(TrajectoryEntry {
                step,
                block: step.map(|k| schedule.steps()[k]),
                phase,
                hidden: row.into_data(),
                lens_logits,
            });
            Ok(())
        };

        let mut h = model::embed(tokens, store, spec)?;
        record(&mut entries, &h, None, TracePhase::Embedding)?;

        let exits = schedule.loop_exit_steps();
        let mut cache: Option<StateCache> = None;
        let mut events = 0;
        let mut shift = None;
        for (k, &block) in schedule.steps().iter().enumerate() {
            h = model::apply_block(&h, block, store, spec, &mut self.kv[k], &positions)?;
            let phase = match schedule.phase(k) {
                StepPhase::PreLoop => TracePhase::PreLoop,
                StepPhase::Loop(r) => TracePhase::Loop(r),
                StepPhase::PostLoop => TracePhase::PostLoop,
            };
            record(&mut entries, &h, Some(k), phase)?;
            if let Some(pass) = exits.iter().position(|&x| x == k) {
                if pass == 0 {
                    cache = Some(StateCache::with_positions(h.clone(), positions.clone()));
                } else {
                    let c = cache.as_mut().expect("cache set at first exit");
                    h = regularize_step(c, h, &opts.regularizer, pass)?;
                    events += 1;
                    shift = Some(frobenius_distance(&h, c.baseline()));
                    record(&mut entries, &h, Some(k), TracePhase::Boundary(pass))?;
                }
            }
        }

        let logits = model::readout(&h, store, spec)?;
        self.len += tokens.len();
        let trajectory = opts.capture_trajectory.then(|| TrajectoryRecord {
            n_layers: spec.n_layers,
            schedule: (schedule.start(), schedule.end(), schedule.repeats()),
            position: positions[capture_row],
            entries,
            final_logits: logits.row(capture_row).to_vec(),
        });
        Ok(ForwardOutput {
            logits,
            trajectory,
            boundary_events: events,
            final_boundary_shift: shift,
        })
    }
}

fn frobenius_distance(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Full-sequence forward pass from position 0.
pub fn forward(
    tokens: &[u32],
    store: &WeightStore,
    spec: &ModelSpec,
    opts: &ForwardOptions,
) -> Result<ForwardOutput> {
    Session::new(spec, store, opts.clone())?.feed(tokens)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceScores {
    /// Mean log-probability per choice token.
    pub scores: Vec<f64>,
    pub best: usize,
}

/// Length-normalized teacher-forced likelihood of each continuation.
pub fn score_multiple_choice(
    context: &[u32],
    choices: &[Vec<u32>],
    store: &WeightStore,
    spec: &ModelSpec,
    opts: &ForwardOptions,
) -> Result<ChoiceScores> {
    if choices.len() < 2 {
        return Err(Error::Input(format!("need at least 2 choices, got {}", choices.len())));
    }
    if context.is_empty() {
        return Err(Error::Input("choice scoring needs a nonempty context".into()));
    }
    let mut scores = Vec::with_capacity(choices.len());
    for (ci, choice) in choices.iter().enumerate() {
        if choice.is_empty() {
            return Err(Error::Input(format!("choice {ci} is empty")));
        }
        let mut seq = context.to_vec();
        seq.extend_from_slice(choice);
        let out = forward(&seq, store, spec, opts)?;
        let mut total = 0.0f64;
        for (j, &tok) in choice.iter().enumerate() {
            // logits row p predicts the token at p + 1
            let row = context.len() + j - 1;
            let lp = tensor::log_softmax(out.logits.row(row));
            total += lp[tok as usize] as f64;
        }
        scores.push(total / choice.len() as f64);
    }
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    Ok(ChoiceScores { scores, best })
}

/// Greedy decoding with incremental KV caches. Returns only the new tokens;
/// stops after `max_new` tokens or before emitting `eos`.
pub fn generate_greedy(
    prompt: &[u32],
    store: &WeightStore,
    spec: &ModelSpec,
    opts: &ForwardOptions,
    max_new: usize,
    eos: Option<u32>,
) -> Result<Vec<u32>> {
    if max_new == 0 {
        return Err(Error::Input("max_new must be >= 1".into()));
    }
    let mut opts = opts.clone();
    opts.capture_trajectory = false;
    let mut session = Session::new(spec, store, opts)?;
    let mut out = session.feed(prompt)?;
    let mut generated = Vec::new();
    loop {
        let last = out.logits.n_rows() - 1;
        let next = argmax(out.logits.row(last)) as u32;
        if Some(next) == eos {
            break;
        }
        generated.push(next);
        if generated.len() == max_new {
            break;
        }
        out = session.feed(&[next])?;
    }
    Ok(generated)
}
