//! Exact path simulation by thinning and level-passage detection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::{Side, ValidatedModel};

/// How a sojourn ends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SojournEnd {
    Jump(usize),
    Killed,
    Horizon,
}

/// The chain sits in `state` on `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sojourn {
    pub state: usize,
    pub start: f64,
    pub end: f64,
    pub exit: SojournEnd,
}

/// Anything that yields a path one sojourn at a time.
///
/// `cut_at` moves the start of the current sojourn forward; it is how a
/// passage found in the middle of a sojourn hands the rest of the path to the
/// next stage of a composite functional.
pub trait SojournSource {
    fn current(&self) -> Option<Sojourn>;
    fn advance(&mut self);
    fn cut_at(&mut self, t: f64);
}

/// Lazily simulates one path of a (possibly time-inhomogeneous) chain.
///
/// Within each schedule segment candidate events arrive at the constant rate
/// `max_j -Λ(j, j)` of that segment; a candidate at time `u` in state `j` is
/// accepted with probability `-Λ_u(j, j) / rate`, and an accepted event moves
/// to `k ≠ j` with probability `Λ_u(j, k) / -Λ_u(j, j)`, the row-sum deficit
/// going to the coffin state.
pub struct PathWalker<'a, R: Rng> {
    model: &'a ValidatedModel,
    rng: R,
    horizon: f64,
    rates: &'a [f64],
    current: Option<Sojourn>,
}

/// Per-segment dominating rates, `max_j -Λ(j, j)`.
pub fn segment_rates(model: &ValidatedModel) -> Vec<f64> {
    model
        .segments()
        .iter()
        .map(|g| (0..g.rows()).fold(0.0, |a: f64, j| a.max(-g[(j, j)])))
        .collect()
}

impl<'a, R: Rng> PathWalker<'a, R> {
    /// `rates` must come from [`segment_rates`] for the same model.
    pub fn new(
        model: &'a ValidatedModel,
        rates: &'a [f64],
        s: f64,
        state: usize,
        horizon: f64,
        rng: R,
    ) -> Self {
        let mut w = PathWalker {
            model,
            rng,
            horizon,
            rates,
            current: None,
        };
        w.current = Some(w.draw_sojourn(state, s));
        w
    }

    /// Simulates the holding period that starts in `state` at time `t`.
    fn draw_sojourn(&mut self, state: usize, start: f64) -> Sojourn {
        let mut t = start;
        loop {
            if t >= self.horizon {
                return Sojourn {
                    state,
                    start,
                    end: self.horizon,
                    exit: SojournEnd::Horizon,
                };
            }
            let seg = self.model.segment_index(t);
            let seg_end = self
                .model
                .breakpoints()
                .get(seg)
                .copied()
                .unwrap_or(f64::INFINITY);
            let rate = self.rates[seg];
            let candidate = if rate > 0.0 {
                let u: f64 = self.rng.random();
                t - (1.0 - u).ln() / rate
            } else {
                f64::INFINITY
            };
            if candidate >= seg_end {
                // no event in this segment; restart the clock at the breakpoint
                t = seg_end;
                continue;
            }
            if candidate >= self.horizon {
                t = candidate;
                continue;
            }
            t = candidate;
            let g = &self.model.segments()[seg];
            let out = -g[(state, state)];
            let u: f64 = self.rng.random::<f64>() * rate;
            if u >= out {
                continue;
            }
            // u is uniform on [0, out): pick the target by cumulative rates
            let mut acc = 0.0;
            for k in 0..g.rows() {
                if k == state {
                    continue;
                }
                acc += g[(state, k)];
                if u < acc {
                    return Sojourn {
                        state,
                        start,
                        end: t,
                        exit: SojournEnd::Jump(k),
                    };
                }
            }
            return Sojourn {
                state,
                start,
                end: t,
                exit: SojournEnd::Killed,
            };
        }
    }
}

impl<R: Rng> SojournSource for PathWalker<'_, R> {
    fn current(&self) -> Option<Sojourn> {
        self.current
    }

    fn advance(&mut self) {
        self.current = match self.current {
            Some(Sojourn {
                end,
                exit: SojournEnd::Jump(k),
                ..
            }) => Some(self.draw_sojourn(k, end)),
            _ => None,
        };
    }

    fn cut_at(&mut self, t: f64) {
        if let Some(s) = self.current.as_mut() {
            s.start = t;
        }
    }
}

/// One simulated trajectory up to its kill time or the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PathSample {
    pub start_time: f64,
    pub start_state: usize,
    /// `epochs[0]` is the start time; later entries are jump times.
    pub epochs: Vec<f64>,
    /// `states[k]` is occupied from `epochs[k]` on.
    pub states: Vec<usize>,
    pub killed_at: Option<f64>,
    pub horizon: f64,
}

impl PathSample {
    /// State at time `t`, `None` once killed or outside `[start, horizon]`.
    pub fn state_at(&self, t: f64) -> Option<usize> {
        if t < self.start_time || t > self.horizon || self.killed_at.is_some_and(|k| t >= k) {
            return None;
        }
        let k = self.epochs.partition_point(|&e| e <= t);
        Some(self.states[k - 1])
    }

    pub fn cursor(&self) -> PathCursor<'_> {
        PathCursor {
            path: self,
            index: 0,
            cut: None,
        }
    }
}

/// Replays a stored [`PathSample`] as a [`SojournSource`].
pub struct PathCursor<'a> {
    path: &'a PathSample,
    index: usize,
    cut: Option<f64>,
}

impl SojournSource for PathCursor<'_> {
    fn current(&self) -> Option<Sojourn> {
        let p = self.path;
        if self.index >= p.states.len() {
            return None;
        }
        let start = self.cut.unwrap_or(p.epochs[self.index]);
        let (end, exit) = match p.epochs.get(self.index + 1) {
            Some(&t) => (t, SojournEnd::Jump(p.states[self.index + 1])),
            None => match p.killed_at {
                Some(k) => (k, SojournEnd::Killed),
                None => (p.horizon, SojournEnd::Horizon),
            },
        };
        Some(Sojourn {
            state: p.states[self.index],
            start,
            end,
            exit,
        })
    }

    fn advance(&mut self) {
        self.index += 1;
        self.cut = None;
    }

    fn cut_at(&mut self, t: f64) {
        self.cut = Some(t);
    }
}

/// Simulates a full path from `(s, i)` to the horizon.
pub fn sample_path<R: Rng>(
    model: &ValidatedModel,
    s: f64,
    i: usize,
    horizon: f64,
    rng: R,
) -> PathSample {
    let rates = segment_rates(model);
    let mut walker = PathWalker::new(model, &rates, s, i, horizon, rng);
    let mut path = PathSample {
        start_time: s,
        start_state: i,
        epochs: vec![s],
        states: vec![i],
        killed_at: None,
        horizon,
    };
    while let Some(soj) = walker.current() {
        match soj.exit {
            SojournEnd::Jump(k) => {
                path.epochs.push(soj.end);
                path.states.push(k);
            }
            SojournEnd::Killed => path.killed_at = Some(soj.end),
            SojournEnd::Horizon => {}
        }
        walker.advance();
    }
    path
}

/// Outcome of a two-sided exit search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CrossingKind {
    UpExit,
    DownExit,
    Neither,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossingResult {
    pub kind: CrossingKind,
    /// Exact crossing time; `None` for [`CrossingKind::Neither`].
    pub time: Option<f64>,
    /// State occupied at the crossing.
    pub state: Option<usize>,
}

impl CrossingResult {
    pub const NEITHER: CrossingResult = CrossingResult {
        kind: CrossingKind::Neither,
        time: None,
        state: None,
    };

    pub fn side(&self) -> Option<Side> {
        match self.kind {
            CrossingKind::UpExit => Some(Side::Plus),
            CrossingKind::DownExit => Some(Side::Minus),
            CrossingKind::Neither => None,
        }
    }
}

/// First time the level, started at 0 at the current position of `src`,
/// rises strictly above `up` or falls strictly below `-down`.
///
/// Pass `f64::INFINITY` to disable a barrier. On a crossing the source is
/// cut at the crossing time, so the rest of the path can feed another
/// passage search.
pub fn first_exit<S: SojournSource>(
    src: &mut S,
    velocities: &[f64],
    down: f64,
    up: f64,
) -> CrossingResult {
    let mut level = 0.0;
    while let Some(soj) = src.current() {
        let v = velocities[soj.state];
        let span = soj.end - soj.start;
        // crossing time within the segment; a level already on the barrier
        // and moving outward crosses at once
        let hit = if v > 0.0 {
            let gap = up - level;
            (gap <= 0.0 || v * span > gap)
                .then(|| (CrossingKind::UpExit, soj.start + gap.max(0.0) / v))
        } else {
            let gap = down + level;
            (gap <= 0.0 || -v * span > gap)
                .then(|| (CrossingKind::DownExit, soj.start + gap.max(0.0) / -v))
        };
        if let Some((kind, t)) = hit {
            src.cut_at(t);
            return CrossingResult {
                kind,
                time: Some(t),
                state: Some(soj.state),
            };
        }
        if !matches!(soj.exit, SojournEnd::Jump(_)) {
            // killed or out of time; the final sojourn stays current
            return CrossingResult::NEITHER;
        }
        level += v * span;
        src.advance();
    }
    CrossingResult::NEITHER
}

/// Two-sided exit of a stored path from `[-ℓ⁻, ℓ⁺]`.
pub fn crossing(
    path: &PathSample,
    model: &ValidatedModel,
    lminus: f64,
    lplus: f64,
) -> CrossingResult {
    first_exit(&mut path.cursor(), model.velocities(), lminus, lplus)
}

/// Passage sequence for a chain of one-sided operators, e.g. `J⁻ P⁻_L J⁺ P⁺_L`
/// is `[(Minus, 0), (Minus, L), (Plus, 0), (Plus, L)]`. Returns the time and
/// state after the last passage, or `None` if some passage never happens.
pub fn chained_passages<S: SojournSource>(
    src: &mut S,
    velocities: &[f64],
    stages: &[(Side, f64)],
) -> Option<(f64, usize)> {
    let mut last = None;
    for &(side, level) in stages {
        let r = match side {
            Side::Plus => first_exit(src, velocities, f64::INFINITY, level),
            Side::Minus => first_exit(src, velocities, level, f64::INFINITY),
        };
        last = Some((r.time?, r.state?));
    }
    last
}
