//! Synthetic tree-building sessions rendered as frames and token streams.
//!
//! A session is a sequence of ticks. At every tick the learner either
//! pauses, tests the tree, removes an occupied leaf or places a filter into
//! a legal empty slot. The board is a complete binary tree of depth 3
//! (slots 0..7 in breadth-first order). After each action the session ends
//! if the tree is complete or the tick cap is reached, and otherwise quits
//! with probability `1 / session_len`.
//!
//! Per tick, with the class policy `p`:
//!
//! ```text
//! PAUSE                  p_pause
//! TEST                   (1 - p_pause) p_test
//! REMOVE (board ≠ ∅)     (1 - p_pause)(1 - p_test) p_remove, leaf chosen uniformly
//! PLACE                  the remainder; slot = first legal slot with prob.
//!                        order_bias, else uniform over legal slots;
//!                        filter uniform over F
//! ```

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, contract_err, Error, Result};
use crate::rng::{derive_seed, CounterRng};

pub const NUM_SLOTS: usize = 7;
/// Intensity levels including empty.
pub const LEVELS: u32 = 4;
pub const PAD: u32 = 0;
pub const REMOVE_TOKEN: u32 = 1;
pub const TEST_TOKEN: u32 = 2;
pub const FILTER_TOKEN_BASE: u32 = 3;

pub const CLASS_NAMES: [&str; 3] = [
    "thoughtful_tinkering",
    "trial_error_tinkering",
    "structured_problem_solving",
];

const FULL_BOARD: u8 = 0b111_1111;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Place,
    Remove,
    Test,
    Pause,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionEvent {
    pub kind: ActionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slot: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter: Option<u8>,
    pub tick: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassPolicy {
    pub class: usize,
    pub p_remove: f64,
    pub p_test: f64,
    pub p_pause: f64,
    pub order_bias: f64,
    pub session_len: f64,
    /// Filters drawn preferentially: with probability `filter_bias` a
    /// placement picks uniformly from this set, otherwise from all filters.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub preferred_filters: Vec<usize>,
    #[serde(default)]
    pub filter_bias: f64,
}

pub const DEFAULT_SESSION_LEN: f64 = 20.0;
/// Longer expected session for the pausing class so that its number of
/// non-pause actions matches the other classes.
pub const THOUGHTFUL_SESSION_LEN: f64 = 33.5;
pub const DEFAULT_FILTER_BIAS: f64 = 0.7;

impl ClassPolicy {
    pub fn default_for(class: usize) -> Self {
        // Classes 0 and 1 share token statistics and differ in timing and
        // placement order; classes 1 and 2 share what the frames show and
        // differ in which filters they favour (same display levels).
        let (order_bias, p_pause, session_len, preferred) = match class {
            0 => (0.20, 0.45, THOUGHTFUL_SESSION_LEN, vec![0, 3, 6]),
            1 => (0.90, 0.06, DEFAULT_SESSION_LEN, vec![0, 3, 6]),
            _ => (0.90, 0.06, DEFAULT_SESSION_LEN, vec![2, 5, 7]),
        };
        Self {
            class,
            p_remove: 0.25,
            p_test: 0.25,
            p_pause,
            order_bias,
            session_len,
            preferred_filters: preferred,
            filter_bias: DEFAULT_FILTER_BIAS,
        }
    }

    /// Probability of drawing filter `f` for a placement. Preferred entries
    /// outside `0..num_filters` are ignored.
    pub fn filter_prob(&self, f: usize, num_filters: usize) -> f64 {
        let k = self.preferred_filters.iter().filter(|&&g| g < num_filters).count();
        if k == 0 || f >= num_filters {
            return if f < num_filters { 1.0 / num_filters as f64 } else { 0.0 };
        }
        let hit = if self.preferred_filters.contains(&f) { self.filter_bias / k as f64 } else { 0.0 };
        (1.0 - self.filter_bias) / num_filters as f64 + hit
    }

    fn draw_filter(&self, num_filters: usize, rng: &mut CounterRng) -> usize {
        let pref: Vec<usize> = self.preferred_filters.iter().copied().filter(|&g| g < num_filters).collect();
        if !pref.is_empty() && rng.bernoulli(self.filter_bias) {
            pref[rng.below(pref.len())]
        } else {
            rng.below(num_filters)
        }
    }

    pub fn defaults() -> [Self; 3] {
        [Self::default_for(0), Self::default_for(1), Self::default_for(2)]
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("p_remove", self.p_remove),
            ("p_test", self.p_test),
            ("p_pause", self.p_pause),
            ("order_bias", self.order_bias),
            ("filter_bias", self.filter_bias),
        ];
        for (k, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(config_err!("datagen.policies[{}].{k} must lie in [0, 1], got {p}", self.class));
            }
        }
        // a session must be able to make progress
        if self.p_pause >= 1.0 || self.p_test >= 1.0 {
            return Err(config_err!("datagen.policies[{}] never places a filter", self.class));
        }
        if !(self.session_len >= 1.0) {
            return Err(config_err!(
                "datagen.policies[{}].session_len must be >= 1, got {}",
                self.class,
                self.session_len
            ));
        }
        Ok(())
    }

    fn quit(&self) -> f64 {
        1.0 / self.session_len
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub per_class: usize,
    pub frames: usize,
    pub frame_hw: usize,
    /// Ticks between consecutive frames.
    pub frame_stride: usize,
    pub max_len: usize,
    pub num_filters: usize,
    pub length_cap: usize,
    pub policies: [ClassPolicy; 3],
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            per_class: 120,
            frames: 12,
            frame_hw: 32,
            frame_stride: 2,
            max_len: 40,
            num_filters: 8,
            length_cap: 200,
            policies: ClassPolicy::defaults(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.per_class < 10 {
            return Err(config_err!("datagen.per_class must be >= 10, got {}", self.per_class));
        }
        if self.frame_hw < 16 {
            return Err(config_err!("datagen.frame_hw must be >= 16, got {}", self.frame_hw));
        }
        if self.frames == 0 || self.frame_stride == 0 || self.max_len == 0 || self.length_cap == 0 {
            return Err(config_err!("datagen frames, frame_stride, max_len and length_cap must be positive"));
        }
        if self.num_filters == 0 || self.num_filters > 250 {
            return Err(config_err!("datagen.num_filters must lie in [1, 250]"));
        }
        for (i, p) in self.policies.iter().enumerate() {
            if p.class != i {
                return Err(config_err!("datagen.policies[{i}].class must be {i}"));
            }
            p.validate()?;
            if let Some(f) = p.preferred_filters.iter().find(|&&f| f >= self.num_filters) {
                return Err(config_err!(
                    "datagen.policies[{i}].preferred_filters contains {f}, outside 0..{}",
                    self.num_filters
                ));
            }
        }
        Ok(())
    }

    /// Token vocabulary size implied by the filter count.
    pub fn vocab(&self) -> usize {
        FILTER_TOKEN_BASE as usize + self.num_filters
    }

    /// SHA-256 of the canonical (sorted-key) JSON form.
    pub fn hash(&self) -> String {
        canonical_hash(self)
    }
}

/// SHA-256 of the compact JSON form of `value` with object keys sorted.
pub fn canonical_hash<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("serializable");
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

fn parent(slot: usize) -> Option<usize> {
    (slot > 0).then(|| (slot - 1) / 2)
}

fn children(slot: usize) -> impl Iterator<Item = usize> {
    [2 * slot + 1, 2 * slot + 2].into_iter().filter(|&c| c < NUM_SLOTS)
}

fn occupied(mask: u8, slot: usize) -> bool {
    mask & (1 << slot) != 0
}

/// Empty slots whose parent is occupied (or the root), ascending.
pub fn legal_slots(mask: u8) -> Vec<usize> {
    (0..NUM_SLOTS)
        .filter(|&s| !occupied(mask, s) && parent(s).is_none_or(|p| occupied(mask, p)))
        .collect()
}

/// Occupied slots without occupied children, ascending.
pub fn removable_slots(mask: u8) -> Vec<usize> {
    (0..NUM_SLOTS)
        .filter(|&s| occupied(mask, s) && children(s).all(|c| !occupied(mask, c)))
        .collect()
}

/// Checks the tree legality invariants of an action log.
pub fn check_legal(actions: &[ActionEvent], num_filters: usize) -> Result<()> {
    let mut mask = 0u8;
    let mut last: Option<u32> = None;
    for (i, a) in actions.iter().enumerate() {
        if last.is_some_and(|t| a.tick <= t) {
            return Err(contract_err!("action {i}: ticks must strictly increase"));
        }
        last = Some(a.tick);
        match a.kind {
            ActionKind::Place => {
                let s = a.slot.ok_or_else(|| contract_err!("action {i}: place without slot"))? as usize;
                let f = a.filter.ok_or_else(|| contract_err!("action {i}: place without filter"))? as usize;
                if !legal_slots(mask).contains(&s) || f >= num_filters {
                    return Err(contract_err!("action {i}: illegal place at slot {s}"));
                }
                mask |= 1 << s;
            }
            ActionKind::Remove => {
                let s = a.slot.ok_or_else(|| contract_err!("action {i}: remove without slot"))? as usize;
                if !removable_slots(mask).contains(&s) || a.filter.is_some() {
                    return Err(contract_err!("action {i}: illegal remove at slot {s}"));
                }
                mask &= !(1 << s);
            }
            ActionKind::Test | ActionKind::Pause => {
                if a.slot.is_some() || a.filter.is_some() {
                    return Err(contract_err!("action {i}: {:?} carries a slot or filter", a.kind));
                }
            }
        }
    }
    Ok(())
}

/// Draws one session. Deterministic in `(policy, seed)`.
pub fn simulate_session(policy: &ClassPolicy, num_filters: usize, length_cap: usize, seed: u64) -> Vec<ActionEvent> {
    let mut rng = CounterRng::new(seed);
    let mut mask = 0u8;
    let mut out = Vec::new();
    loop {
        let tick = out.len() as u32;
        let ev = if rng.bernoulli(policy.p_pause) {
            ActionEvent {
                kind: ActionKind::Pause,
                slot: None,
                filter: None,
                tick,
            }
        } else if rng.bernoulli(policy.p_test) {
            ActionEvent {
                kind: ActionKind::Test,
                slot: None,
                filter: None,
                tick,
            }
        } else if mask != 0 && rng.bernoulli(policy.p_remove) {
            let leaves = removable_slots(mask);
            let s = leaves[rng.below(leaves.len())];
            mask &= !(1 << s);
            ActionEvent {
                kind: ActionKind::Remove,
                slot: Some(s as u8),
                filter: None,
                tick,
            }
        } else {
            let legal = legal_slots(mask);
            let s = if rng.bernoulli(policy.order_bias) {
                legal[0]
            } else {
                legal[rng.below(legal.len())]
            };
            let f = policy.draw_filter(num_filters, &mut rng) as u8;
            mask |= 1 << s;
            ActionEvent {
                kind: ActionKind::Place,
                slot: Some(s as u8),
                filter: Some(f),
                tick,
            }
        };
        out.push(ev);
        if mask == FULL_BOARD || out.len() >= length_cap || rng.bernoulli(policy.quit()) {
            return out;
        }
    }
}

/// Quantized display level (1..=3) of a filter; 0 is reserved for empty.
pub fn filter_level(filter: usize, num_filters: usize) -> u8 {
    ((3 * (filter + 1) + num_filters) / (num_filters + 1)) as u8
}

/// Board as one display level per slot.
type Levels = [u8; NUM_SLOTS];

/// Board levels and flash flag after each action.
fn replay(actions: &[ActionEvent], num_filters: usize) -> Vec<(Levels, bool)> {
    let mut board = [0u8; NUM_SLOTS];
    actions
        .iter()
        .map(|a| {
            match a.kind {
                ActionKind::Place => {
                    board[a.slot.unwrap_or(0) as usize] = filter_level(a.filter.unwrap_or(0) as usize, num_filters)
                }
                ActionKind::Remove => board[a.slot.unwrap_or(0) as usize] = 0,
                _ => {}
            }
            (board, a.kind == ActionKind::Test)
        })
        .collect()
}

/// Screen-space rectangle `(y0, y1, x0, x1)` of a slot.
pub fn slot_rect(slot: usize, h: usize, w: usize) -> (usize, usize, usize, usize) {
    let depth = (usize::BITS - 1 - (slot + 1).leading_zeros()) as usize;
    let index = slot + 1 - (1 << depth);
    let cy = h * (depth + 1) / 4;
    let cx = (w * (2 * index + 1)) >> (depth + 1);
    let (rh, rw) = (h / 16, w / 16);
    (cy - rh, cy + rh, cx - rw, cx + rw)
}

/// The tick shown by frame `j`.
pub fn frame_tick(j: usize, stride: usize) -> usize {
    (j + 1) * stride - 1
}

/// Renders `t` frames of `h×w`, one every `stride` ticks. Slots show their
/// quantized level, a TEST tick lights the one-pixel border, and after the
/// session ends the final board persists.
pub fn render_frames(actions: &[ActionEvent], t: usize, h: usize, w: usize, stride: usize, num_filters: usize) -> Vec<f32> {
    let states = replay(actions, num_filters);
    let mut out = vec![0f32; t * h * w];
    for (j, frame) in out.chunks_exact_mut(h * w).enumerate() {
        let tick = frame_tick(j, stride);
        let (board, flash) = match states.get(tick) {
            Some(&s) => s,
            None => states.last().map_or(([0; NUM_SLOTS], false), |&(b, _)| (b, false)),
        };
        for (slot, &lvl) in board.iter().enumerate() {
            if lvl == 0 {
                continue;
            }
            let (y0, y1, x0, x1) = slot_rect(slot, h, w);
            let v = lvl as f32 / (LEVELS - 1) as f32;
            for y in y0..y1 {
                frame[y * w + x0..y * w + x1].fill(v);
            }
        }
        if flash {
            frame[..w].fill(1.0);
            frame[(h - 1) * w..].fill(1.0);
            for y in 0..h {
                frame[y * w] = 1.0;
                frame[y * w + w - 1] = 1.0;
            }
        }
    }
    out
}

/// PLACE f → 3+f, REMOVE → 1, TEST → 2, PAUSE → nothing; truncated or
/// padded with PAD to `len`.
pub fn tokenize(actions: &[ActionEvent], len: usize) -> Vec<u32> {
    let mut out: Vec<u32> = actions
        .iter()
        .filter_map(|a| match a.kind {
            ActionKind::Place => Some(FILTER_TOKEN_BASE + a.filter.unwrap_or(0) as u32),
            ActionKind::Remove => Some(REMOVE_TOKEN),
            ActionKind::Test => Some(TEST_TOKEN),
            ActionKind::Pause => None,
        })
        .take(len)
        .collect();
    out.resize(len, PAD);
    out
}

fn ln(p: f64) -> f64 {
    if p > 0.0 {
        p.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Exact log-likelihood of a full action log under one policy.
pub fn action_loglik(actions: &[ActionEvent], policy: &ClassPolicy, num_filters: usize, length_cap: usize) -> f64 {
    let p = policy;
    let mut mask = 0u8;
    let mut ll = 0.0;
    for (i, a) in actions.iter().enumerate() {
        ll += match a.kind {
            ActionKind::Pause => ln(p.p_pause),
            ActionKind::Test => ln(1.0 - p.p_pause) + ln(p.p_test),
            ActionKind::Remove => {
                let leaves = removable_slots(mask).len();
                mask &= !(1 << a.slot.unwrap_or(0));
                ln(1.0 - p.p_pause) + ln(1.0 - p.p_test) + ln(p.p_remove) - (leaves as f64).ln()
            }
            ActionKind::Place => {
                let legal = legal_slots(mask);
                let s = a.slot.unwrap_or(0) as usize;
                let mut ps = (1.0 - p.order_bias) / legal.len() as f64;
                if legal.first() == Some(&s) {
                    ps += p.order_bias;
                }
                let stay = if mask != 0 { ln(1.0 - p.p_remove) } else { 0.0 };
                mask |= 1 << s;
                let pf = p.filter_prob(a.filter.unwrap_or(0) as usize, num_filters);
                ln(1.0 - p.p_pause) + ln(1.0 - p.p_test) + stay + ln(ps) + ln(pf)
            }
        };
        let forced_end = mask == FULL_BOARD || i + 1 >= length_cap;
        if !forced_end {
            ll += if i + 1 == actions.len() {
                ln(p.quit())
            } else {
                ln(1.0 - p.quit())
            };
        }
    }
    ll
}

/// Log-likelihood of a padded token stream under one policy, with the
/// unobserved pauses and slot choices summed out. The tick cap is ignored.
pub fn token_loglik(tokens: &[u32], policy: &ClassPolicy, num_filters: usize) -> f64 {
    let p = policy;
    let q = p.quit();
    let n = tokens.iter().take_while(|&&t| t != PAD).count();
    // probability that, starting at a fresh tick, a non-pause action occurs
    // before the session quits
    let reach_fresh = (1.0 - p.p_pause) / (1.0 - p.p_pause * (1.0 - q));
    let mut ll = 0.0;
    let mut count = 0usize;
    for (i, &tok) in tokens[..n].iter().enumerate() {
        ll += if i == 0 {
            ln(reach_fresh)
        } else {
            ln((1.0 - q) * reach_fresh)
        };
        ll += match tok {
            TEST_TOKEN => ln(p.p_test),
            REMOVE_TOKEN => {
                count = count.saturating_sub(1);
                ln(1.0 - p.p_test) + ln(p.p_remove)
            }
            _ => {
                let stay = if count > 0 { ln(1.0 - p.p_remove) } else { 0.0 };
                count += 1;
                let pf = p.filter_prob((tok - FILTER_TOKEN_BASE) as usize, num_filters);
                ln(1.0 - p.p_test) + stay + ln(pf)
            }
        };
    }
    if n < tokens.len() && count < NUM_SLOTS {
        // the stream ended: no further non-pause action happened
        ll += if n == 0 {
            ln(1.0 - reach_fresh)
        } else {
            ln(1.0 - (1.0 - q) * reach_fresh)
        };
    }
    ll
}

/// What the visual stream reveals at one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameObservation {
    pub levels: Levels,
    pub flash: bool,
}

/// Reads slot levels and the border flash back out of rendered frames.
pub fn decode_frames(frames: &[f32], t: usize, h: usize, w: usize) -> Vec<FrameObservation> {
    frames
        .chunks_exact(h * w)
        .take(t)
        .map(|f| {
            let mut levels = [0u8; NUM_SLOTS];
            for (slot, l) in levels.iter_mut().enumerate() {
                let (y0, _, x0, _) = slot_rect(slot, h, w);
                *l = (f[y0 * w + x0] * (LEVELS - 1) as f32).round() as u8;
            }
            FrameObservation { levels, flash: f[0] == 1.0 }
        })
        .collect()
}

fn encode_levels(b: &Levels) -> usize {
    b.iter().enumerate().fold(0, |acc, (i, &l)| acc | (l as usize) << (2 * i))
}

fn decode_levels(code: usize) -> Levels {
    std::array::from_fn(|i| ((code >> (2 * i)) & 3) as u8)
}

fn mask_of(b: &Levels) -> u8 {
    b.iter()
        .enumerate()
        .fold(0, |m, (i, &l)| if l > 0 { m | 1 << i } else { m })
}

/// Exact log-likelihood of a frame sequence under one policy: a forward
/// pass over hidden (board levels, session alive) states, conditioned on
/// the board shown at every sampled tick.
pub fn frame_loglik(obs: &[FrameObservation], policy: &ClassPolicy, num_filters: usize, stride: usize, length_cap: usize) -> f64 {
    let p = policy;
    let q = p.quit();
    let level_probs: Vec<f64> = (1..LEVELS as u8)
        .map(|l| {
            (0..num_filters)
                .filter(|&f| filter_level(f, num_filters) == l)
                .map(|f| p.filter_prob(f, num_filters))
                .sum()
        })
        .collect();
    const CODES: usize = 1 << (2 * NUM_SLOTS);
    // index = code * 2 + alive
    let mut cur = vec![0.0f64; 2 * CODES];
    let mut next = vec![0.0f64; 2 * CODES];
    let mut active: Vec<usize> = vec![1];
    cur[1] = 1.0;
    let mut ll = 0.0;
    let ticks = obs.len() * stride;
    let mut touched = Vec::new();
    for t in 0..ticks {
        let sampled = (t + 1) % stride == 0;
        let want = sampled.then(|| obs[(t + 1) / stride - 1]);
        let want_code = want.map(|o| encode_levels(&o.levels));
        touched.clear();
        let push = |next: &mut Vec<f64>, touched: &mut Vec<usize>, idx: usize, w: f64| {
            if next[idx] == 0.0 {
                touched.push(idx);
            }
            next[idx] += w;
        };
        for &idx in &active {
            let w = cur[idx];
            cur[idx] = 0.0;
            let code = idx >> 1;
            if idx & 1 == 0 {
                if want.is_none_or(|o| !o.flash && want_code == Some(code)) {
                    push(&mut next, &mut touched, idx, w);
                }
                continue;
            }
            let board = decode_levels(code);
            let mask = mask_of(&board);
            let emit = |next: &mut Vec<f64>, touched: &mut Vec<usize>, nb: usize, flash: bool, pr: f64| {
                if pr == 0.0 {
                    return;
                }
                if let Some(o) = want {
                    if o.flash != flash || want_code != Some(nb) {
                        return;
                    }
                }
                let full = decode_levels(nb).iter().all(|&l| l > 0);
                if full || t + 1 >= length_cap {
                    push(next, touched, nb << 1, w * pr);
                } else {
                    push(next, touched, nb << 1 | 1, w * pr * (1.0 - q));
                    push(next, touched, nb << 1, w * pr * q);
                }
            };
            emit(&mut next, &mut touched, code, false, p.p_pause);
            let mut rest = 1.0 - p.p_pause;
            emit(&mut next, &mut touched, code, true, rest * p.p_test);
            rest *= 1.0 - p.p_test;
            if mask != 0 {
                let leaves = removable_slots(mask);
                for &s in &leaves {
                    let mut nb = board;
                    nb[s] = 0;
                    emit(&mut next, &mut touched, encode_levels(&nb), false, rest * p.p_remove / leaves.len() as f64);
                }
                rest *= 1.0 - p.p_remove;
            }
            let legal = legal_slots(mask);
            for (k, &s) in legal.iter().enumerate() {
                let mut ps = (1.0 - p.order_bias) / legal.len() as f64;
                if k == 0 {
                    ps += p.order_bias;
                }
                for (li, &pl) in level_probs.iter().enumerate() {
                    let mut nb = board;
                    nb[s] = li as u8 + 1;
                    emit(&mut next, &mut touched, encode_levels(&nb), false, rest * ps * pl);
                }
            }
        }
        let total: f64 = touched.iter().map(|&i| next[i]).sum();
        if total <= 0.0 {
            for &i in &touched {
                next[i] = 0.0;
            }
            return f64::NEG_INFINITY;
        }
        ll += total.ln();
        active.clear();
        for &i in &touched {
            cur[i] = next[i] / total;
            next[i] = 0.0;
            active.push(i);
        }
    }
    ll
}

/// Argmax over per-class log-likelihoods, ties to the lowest class.
pub fn argmax_loglik(ll: &[f64; 3]) -> usize {
    let mut best = 0;
    for k in 1..3 {
        if ll[k] > ll[best] {
            best = k;
        }
    }
    best
}

/// Bayes classification from the full action log.
pub fn oracle_classify(actions: &[ActionEvent], policies: &[ClassPolicy; 3], num_filters: usize, length_cap: usize) -> (usize, [f64; 3]) {
    let ll = std::array::from_fn(|k| action_loglik(actions, &policies[k], num_filters, length_cap));
    (argmax_loglik(&ll), ll)
}

/// Bayes classification from the token stream alone.
pub fn textual_oracle(tokens: &[u32], policies: &[ClassPolicy; 3], num_filters: usize) -> (usize, [f64; 3]) {
    let ll = std::array::from_fn(|k| token_loglik(tokens, &policies[k], num_filters));
    (argmax_loglik(&ll), ll)
}

/// Bayes classification from the rendered frames alone.
pub fn visual_oracle(frames: &[f32], cfg: &GenConfig) -> (usize, [f64; 3]) {
    let obs = decode_frames(frames, cfg.frames, cfg.frame_hw, cfg.frame_hw);
    let ll = std::array::from_fn(|k| frame_loglik(&obs, &cfg.policies[k], cfg.num_filters, cfg.frame_stride, cfg.length_cap));
    (argmax_loglik(&ll), ll)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSample {
    pub id: usize,
    pub label: usize,
    pub seed: u64,
    pub actions: Vec<ActionEvent>,
    pub tokens: Vec<u32>,
    /// `[T×H×W]`
    pub frames: Vec<f32>,
}

/// Sample `i` of a dataset: label `i mod 3`, seed derived from `(seed, i)`.
pub fn generate_sample(cfg: &GenConfig, seed: u64, id: usize) -> SessionSample {
    let label = id % 3;
    let s = derive_seed(seed, id as u64);
    let actions = simulate_session(&cfg.policies[label], cfg.num_filters, cfg.length_cap, s);
    SessionSample {
        id,
        label,
        seed: s,
        tokens: tokenize(&actions, cfg.max_len),
        frames: render_frames(&actions, cfg.frames, cfg.frame_hw, cfg.frame_hw, cfg.frame_stride, cfg.num_filters),
        actions,
    }
}

/// Accuracy of the three oracles on `n` freshly generated samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleAccuracy {
    pub n: usize,
    pub full: f64,
    pub visual: f64,
    pub textual: f64,
}

pub fn oracle_accuracy(cfg: &GenConfig, n: usize, seed: u64) -> OracleAccuracy {
    let hits: Vec<[bool; 3]> = (0..n)
        .into_par_iter()
        .map(|i| {
            let s = generate_sample(cfg, seed, i);
            [
                oracle_classify(&s.actions, &cfg.policies, cfg.num_filters, cfg.length_cap).0 == s.label,
                visual_oracle(&s.frames, cfg).0 == s.label,
                textual_oracle(&s.tokens, &cfg.policies, cfg.num_filters).0 == s.label,
            ]
        })
        .collect();
    let frac = |k: usize| hits.iter().filter(|h| h[k]).count() as f64 / n as f64;
    OracleAccuracy {
        n,
        full: frac(0),
        visual: frac(1),
        textual: frac(2),
    }
}

pub const FRAMES_MAGIC: &[u8; 4] = b"FUSD";
const MANIFEST_FORMAT: &str = "fusionbench-dataset";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: usize,
    pub label: usize,
    pub seed: u64,
    /// Element offset of the sample in `frames.bin` (after the header).
    pub frames_offset: usize,
    /// Element offset of the sample in `tokens.bin`.
    pub tokens_offset: usize,
    /// Zero-based line in `actions.jsonl`.
    pub actions_line: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub global_seed: u64,
    pub config: GenConfig,
    pub class_counts: [usize; 3],
    pub samples: Vec<SampleRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<SessionSample>,
}

impl Dataset {
    pub fn generate(cfg: &GenConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let n = 3 * cfg.per_class;
        let samples: Vec<SessionSample> = (0..n).into_par_iter().map(|i| generate_sample(cfg, seed, i)).collect();
        let frame_len = cfg.frames * cfg.frame_hw * cfg.frame_hw;
        let records = samples
            .iter()
            .map(|s| SampleRecord {
                id: s.id,
                label: s.label,
                seed: s.seed,
                frames_offset: s.id * frame_len,
                tokens_offset: s.id * cfg.max_len,
                actions_line: s.id,
            })
            .collect();
        let mut class_counts = [0; 3];
        samples.iter().for_each(|s| class_counts[s.label] += 1);
        Ok(Self {
            manifest: DatasetManifest {
                format: MANIFEST_FORMAT.into(),
                version: 1,
                config_hash: cfg.hash(),
                global_seed: seed,
                config: cfg.clone(),
                class_counts,
                samples: records,
            },
            samples,
        })
    }

    pub fn config(&self) -> &GenConfig {
        &self.manifest.config
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg = self.config();
        let write = |name: &str, bytes: &[u8]| -> Result<()> {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
        };

        let mut frames = Vec::with_capacity(20 + 4 * self.samples.iter().map(|s| s.frames.len()).sum::<usize>());
        frames.extend_from_slice(FRAMES_MAGIC);
        for v in [self.len(), cfg.frames, cfg.frame_hw, cfg.frame_hw] {
            frames.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for s in &self.samples {
            s.frames.iter().for_each(|v| frames.extend_from_slice(&v.to_le_bytes()));
        }
        write("frames.bin", &frames)?;

        let tokens: Vec<u8> = self
            .samples
            .iter()
            .flat_map(|s| s.tokens.iter().flat_map(|t| t.to_le_bytes()))
            .collect();
        write("tokens.bin", &tokens)?;

        let mut actions = Vec::new();
        for s in &self.samples {
            serde_json::to_writer(&mut actions, &s.actions).expect("serializable");
            actions.write_all(b"\n").expect("in-memory write");
        }
        write("actions.jsonl", &actions)?;

        let manifest = serde_json::to_vec_pretty(&self.manifest).expect("serializable");
        write("manifest.json", &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<(PathBuf, Vec<u8>)> {
            let path = dir.join(name);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            Ok((path, bytes))
        };
        let (mpath, mbytes) = read("manifest.json")?;
        let manifest: DatasetManifest =
            serde_json::from_slice(&mbytes).map_err(|e| Error::format(&mpath, format!("manifest: {e}")))?;
        if manifest.format != MANIFEST_FORMAT || manifest.version != 1 {
            return Err(Error::format(&mpath, "unsupported dataset format"));
        }
        let cfg = &manifest.config;
        cfg.validate()?;
        if manifest.config_hash != cfg.hash() {
            return Err(Error::format(&mpath, "config hash does not match embedded config"));
        }
        let n = manifest.samples.len();
        let frame_len = cfg.frames * cfg.frame_hw * cfg.frame_hw;

        let (fpath, fbytes) = read("frames.bin")?;
        if fbytes.len() < 20 || &fbytes[..4] != FRAMES_MAGIC {
            return Err(Error::format(&fpath, "missing FUSD header"));
        }
        let header: Vec<usize> = fbytes[4..20]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
            .collect();
        if header != [n, cfg.frames, cfg.frame_hw, cfg.frame_hw] {
            return Err(Error::format(&fpath, format!("header {header:?} disagrees with manifest")));
        }
        if fbytes.len() != 20 + 4 * n * frame_len {
            return Err(Error::format(&fpath, "unexpected file length"));
        }
        let frames: Vec<f32> = fbytes[20..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();

        let (tpath, tbytes) = read("tokens.bin")?;
        if tbytes.len() != 4 * n * cfg.max_len {
            return Err(Error::format(&tpath, "unexpected file length"));
        }
        let tokens: Vec<u32> = tbytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();

        let (apath, abytes) = read("actions.jsonl")?;
        let text = std::str::from_utf8(&abytes).map_err(|e| Error::format(&apath, e.to_string()))?;
        let lines: Vec<&str> = text.lines().collect();

        let mut samples = Vec::with_capacity(n);
        for r in &manifest.samples {
            let fr = frames
                .get(r.frames_offset..r.frames_offset + frame_len)
                .ok_or_else(|| Error::format(&fpath, format!("sample {} out of range", r.id)))?;
            let tk = tokens
                .get(r.tokens_offset..r.tokens_offset + cfg.max_len)
                .ok_or_else(|| Error::format(&tpath, format!("sample {} out of range", r.id)))?;
            let line = lines
                .get(r.actions_line)
                .ok_or_else(|| Error::format(&apath, format!("sample {} missing", r.id)))?;
            let actions: Vec<ActionEvent> = serde_json::from_str(line)
                .map_err(|e| Error::format(&apath, format!("line {}: {e}", r.actions_line + 1)))?;
            if r.label > 2 || tk.iter().any(|&t| t as usize >= cfg.vocab()) {
                return Err(Error::format(&mpath, format!("sample {} has an invalid label or token", r.id)));
            }
            samples.push(SessionSample {
                id: r.id,
                label: r.label,
                seed: r.seed,
                actions,
                tokens: tk.to_vec(),
                frames: fr.to_vec(),
            });
        }
        Ok(Self { manifest, samples })
    }
}
