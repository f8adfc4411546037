//! Middle-looping step schedules.
//!
//! A schedule `(s, e, R)` over `L` blocks runs blocks `[0, s)` once, the
//! range `[s, e)` `R` times in a row, then `[e, L)` once. `e` is exclusive
//! and `R` counts total passes, so `R = 1` is the ordinary forward pass.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelSpec;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoopSchedule {
    start: usize,
    end: usize,
    repeats: usize,
    n_layers: usize,
    steps: Vec<usize>,
    loop_exit_steps: Vec<usize>,
}

/// Which part of the schedule a step belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepPhase {
    PreLoop,
    /// Pass number within the loop range, starting at 1.
    Loop(usize),
    PostLoop,
}

impl LoopSchedule {
    pub fn new(start: usize, end: usize, repeats: usize, n_layers: usize) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::Config("L must be >= 1".into()));
        }
        if start >= end {
            return Err(Error::Config(format!(
                "loop start s={start} must satisfy s < e (e={end})"
            )));
        }
        if end > n_layers {
            return Err(Error::Config(format!(
                "loop end e={end} exceeds the number of layers L={n_layers}"
            )));
        }
        if repeats == 0 {
            return Err(Error::Config("repetition count R must be >= 1".into()));
        }
        let n = end - start;
        let k_total = n_layers + (repeats - 1) * n;
        let steps = (0..k_total)
            .map(|k| {
                if k < start {
                    k
                } else if k < start + repeats * n {
                    start + (k - start) % n
                } else {
                    k - (repeats - 1) * n
                }
            })
            .collect();
        let loop_exit_steps = (1..=repeats).map(|r| start + r * n - 1).collect();
        Ok(Self {
            start,
            end,
            repeats,
            n_layers,
            steps,
            loop_exit_steps,
        })
    }

    /// The schedule-free forward pass over `n_layers` blocks.
    pub fn identity(n_layers: usize) -> Result<Self> {
        Self::new(0, n_layers, 1, n_layers)
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn end(&self) -> usize {
        self.end
    }

    pub fn repeats(&self) -> usize {
        self.repeats
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    /// Loop length `N = e - s`.
    pub fn loop_len(&self) -> usize {
        self.end - self.start
    }

    /// Total block applications `K = L + (R - 1)N`.
    pub fn total_steps(&self) -> usize {
        self.steps.len()
    }

    /// Materialized step → block map.
    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    /// Step indices at which a full pass over `[s, e)` completes, one per pass.
    pub fn loop_exit_steps(&self) -> &[usize] {
        &self.loop_exit_steps
    }

    /// First step of the second pass, i.e. the first step whose input
    /// differs from a schedule-free forward. `None` when `R = 1`.
    pub fn first_repeat_step(&self) -> Option<usize> {
        (self.repeats > 1).then(|| self.start + self.loop_len())
    }

    pub fn phase(&self, step: usize) -> StepPhase {
        let n = self.loop_len();
        if step < self.start {
            StepPhase::PreLoop
        } else if step < self.start + self.repeats * n {
            StepPhase::Loop((step - self.start) / n + 1)
        } else {
            StepPhase::PostLoop
        }
    }

    /// How many times each block is applied.
    pub fn application_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for &b in &self.steps {
            *counts.entry(b).or_insert(0) += 1;
        }
        counts
    }

    /// Checks that the schedule was built for `spec`'s depth and returns the
    /// per-block application histogram.
    pub fn validate_against(&self, spec: &ModelSpec) -> Result<BTreeMap<usize, usize>> {
        if self.n_layers != spec.n_layers {
            return Err(Error::Config(format!(
                "schedule built for L={} but model has {} layers",
                self.n_layers, spec.n_layers
            )));
        }
        Ok(self.application_counts())
    }
}

/// Textual `s:e:R` triple, resolved against a depth later.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleArg {
    pub start: usize,
    pub end: usize,
    pub repeats: usize,
}

impl ScheduleArg {
    pub fn build(&self, n_layers: usize) -> Result<LoopSchedule> {
        LoopSchedule::new(self.start, self.end, self.repeats, n_layers)
    }
}

impl FromStr for ScheduleArg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let [a, b, c] = parts.as_slice() else {
            return Err(Error::Config(format!("schedule `{s}` is not of the form s:e:R")));
        };
        let num = |name: &str, v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("schedule {name} `{v}` is not a non-negative integer")))
        };
        let arg = ScheduleArg {
            start: num("s", a)?,
            end: num("e", b)?,
            repeats: num("R", c)?,
        };
        if arg.start >= arg.end {
            return Err(Error::Config(format!(
                "schedule `{s}`: loop start s must satisfy s < e"
            )));
        }
        if arg.repeats == 0 {
            return Err(Error::Config(format!("schedule `{s}`: R must be >= 1")));
        }
        Ok(arg)
    }
}

impl fmt::Display for ScheduleArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.start, self.end, self.repeats)
    }
}

impl fmt::Display for LoopSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.start, self.end, self.repeats)
    }
}
