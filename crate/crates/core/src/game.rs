//! Banach–Mazur game on the unit ball of `M_1`, with player II answering
//! every move by a spike followed by a mass-push cascade.
//!
//! Moves are basic open sets `A(f, n, ε) = {g : ‖g_i - f_i‖_1 < ε, i <= n}`.

use std::io::{BufRead, Write};
use std::rc::Rc;

use num::{One, Signed, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constructions::cascade::cascade_on;
use crate::error::{Error, Result};
use crate::filtration::{CellId, Filtration};
use crate::martingale::{ClassTag, Exponent, LevelEval, LevelFunction, Martingale};
use crate::rational::{self, Rational};

#[derive(Clone, Debug)]
pub struct BasicOpenSet {
    pub anchor: Martingale,
    pub n: usize,
    pub eps: Rational,
}

impl BasicOpenSet {
    pub fn new(anchor: Martingale, n: usize, eps: Rational) -> Result<Self> {
        if !eps.is_positive() {
            return Err(Error::param("radius must be positive"));
        }
        Ok(BasicOpenSet { anchor, n, eps })
    }
}

fn l1_distance(a: &Martingale, b: &Martingale, level: usize) -> Result<Rational> {
    let diff = Martingale::combine(a, b, Rational::one(), -Rational::one())?;
    Ok(diff.lp_norm(level, &Exponent::One)?.exact.expect("L1 norm is exact"))
}

/// Sufficient condition for `next ⊆ prev`: `next.n >= prev.n` and
/// `‖next.f_i - prev.f_i‖_1 + next.ε <= prev.ε` for `1 <= i <= prev.n`.
/// Conservative: some contained sets are rejected.
pub fn containment(prev: &BasicOpenSet, next: &BasicOpenSet) -> Result<std::result::Result<(), String>> {
    if next.n < prev.n {
        return Ok(Err(format!("depth {} is below the previous depth {}", next.n, prev.n)));
    }
    for i in 1..=prev.n {
        let d = l1_distance(&next.anchor, &prev.anchor, i)?;
        if &d + &next.eps > prev.eps {
            return Ok(Err(format!(
                "level {i}: distance {} + radius {} exceeds {}",
                rational::format(&d),
                rational::format(&next.eps),
                rational::format(&prev.eps)
            )));
        }
    }
    Ok(Ok(()))
}

pub fn validate_move(prev: &BasicOpenSet, next: &BasicOpenSet) -> Result<bool> {
    Ok(containment(prev, next)?.is_ok())
}

/// Player II's martingale up to its spike level: the anchor below `q`,
/// two spiked children of `d` at level `q`, other cells frozen at `q - 1`.
struct SpikeEval {
    anchor: Martingale,
    q: usize,
    d: CellId,
    a: CellId,
    b: CellId,
    va: Rational,
    vb: Rational,
}

impl LevelEval for SpikeEval {
    fn value(&self, filt: &Filtration, c: CellId, _: Option<&Rational>) -> Result<Rational> {
        if filt.level(c) < self.q {
            return self.anchor.value(c);
        }
        let at_q = filt.ancestor_at(c, self.q);
        if at_q == self.a {
            Ok(self.va.clone())
        } else if at_q == self.b {
            Ok(self.vb.clone())
        } else {
            self.anchor.value(filt.ancestor_at(c, self.q - 1))
        }
    }
    fn constant_below(&self, filt: &Filtration, c: CellId) -> Result<Option<Rational>> {
        if filt.level(c) >= self.q {
            return self.value(filt, c, None).map(Some);
        }
        if filt.within(self.d, c) {
            return Ok(None);
        }
        self.anchor.constant_below(c)
    }
    fn describe(&self) -> String {
        format!("spike(q={}, +{})", self.q, rational::format(&self.va))
    }
}

/// Smallest `x >= 0` with
/// `rest + |v + x| P(a) + |v - x P(a)/P(b)| P(b) = 1`, where the left side
/// is convex piecewise linear in `x` and at most 1 at `x = 0`.
fn solve_spike(rest: &Rational, v: &Rational, pa: &Rational, pb: &Rational) -> Rational {
    let one = Rational::one();
    let phi = |x: &Rational| rest + (v + x).abs() * pa + (v - x * pa / pb).abs() * pb;
    let mut points = vec![Rational::zero()];
    for t in [-v.clone(), v * pb / pa] {
        if t.is_positive() {
            points.push(t);
        }
    }
    points.sort();
    let mut prev: Option<(Rational, Rational)> = None;
    for t in points {
        let y = phi(&t);
        if y >= one {
            return match prev {
                None => t,
                Some((t0, y0)) => &t0 + (&t - &t0) * (&one - &y0) / (&y - &y0),
            };
        }
        prev = Some((t, y));
    }
    let (t, y) = prev.expect("at least one point");
    // past every kink the slope is 2 P(a)
    &t + (&one - &y) / (Rational::from_integer(2.into()) * pa)
}

#[derive(Clone, Debug)]
pub struct StageRecord {
    pub k: usize,
    pub n: usize,
    pub eps: Rational,
    pub q: usize,
    pub spike_cell: CellId,
    pub spike: (Rational, Rational),
    pub norm_at_q: Rational,
    pub m: usize,
    pub delta: Rational,
    /// `P(g_i != 0)` for `q <= i <= m`.
    pub support: Vec<(usize, Rational)>,
    pub g: Martingale,
}

#[derive(Clone, Debug)]
pub enum Player {
    I,
    II,
}

#[derive(Clone, Debug)]
pub struct GameState {
    pub filt: Rc<Filtration>,
    /// Alternating moves, player I first.
    pub transcript: Vec<(Player, BasicOpenSet)>,
    pub stages: Vec<StageRecord>,
}

impl GameState {
    pub fn new(filt: Rc<Filtration>) -> Self {
        GameState { filt, transcript: Vec::new(), stages: Vec::new() }
    }

    pub fn last(&self) -> Option<&BasicOpenSet> {
        self.transcript.last().map(|(_, s)| s)
    }

    pub fn stage(&self, k: usize) -> Option<&StageRecord> {
        self.stages.get(k.checked_sub(1)?)
    }

    /// Player II's answer to `mv`, appended to the transcript together
    /// with `mv`.
    pub fn respond(&mut self, mv: BasicOpenSet) -> Result<BasicOpenSet> {
        if let Some(prev) = self.last() {
            if let Err(why) = containment(prev, &mv)? {
                return Err(Error::InvalidMove(why));
            }
        }
        let k = self.stages.len() + 1;
        let record = strategy(&self.filt, &mv, k)?;
        let answer = BasicOpenSet::new(record.g.clone(), record.m, record.delta.clone())?;
        self.transcript.push((Player::I, mv));
        self.transcript.push((Player::II, answer.clone()));
        self.stages.push(record);
        Ok(answer)
    }
}

fn strategy(filt: &Rc<Filtration>, mv: &BasicOpenSet, k: usize) -> Result<StageRecord> {
    let f = &mv.anchor;
    let n = mv.n;
    let norm_n = f.lp_norm(n, &Exponent::One)?.exact.expect("exact");
    if norm_n > Rational::one() {
        return Err(Error::NormOverflow { level: n, norm: rational::format(&norm_n) });
    }
    let bound = filt.branching_bound();
    let width = filt.level_cells(n)?.len();
    let mut q = n + 1;
    while filt.level_cells(q)?.len() == width {
        q += 1;
        if q > n + bound {
            return Err(Error::AssumptionViolation {
                cell: format!("level {n}"),
                detail: format!("no split within {bound} levels"),
            });
        }
    }
    // D_{q-1} = D_n, so cells of level q - 1 are unary copies of level n
    let level = filt.level_cells(q - 1)?;
    let mut d = None;
    for &c in level.iter() {
        if filt.is_split(c)? && d.map_or(true, |e| filt.mass(c) < filt.mass(e)) {
            d = Some(c);
        }
    }
    let d = d.expect("a split exists at q - 1");
    let ch = filt.children(d)?;
    let (a, b) = (ch[0], ch[1]);
    let (pa, pb) = (filt.mass(a), filt.mass(b));
    let v = f.value(d)?;
    let rest = &norm_n - v.abs() * filt.mass(d);
    let x = solve_spike(&rest, &v, &pa, &pb);
    let va = &v + &x;
    let vb = &v - &x * &pa / &pb;
    let head = Martingale::new(
        filt.clone(),
        SpikeEval { anchor: f.clone(), q, d, a, b, va: va.clone(), vb: vb.clone() },
        ClassTag::Untagged,
    );
    let g = cascade_on(head, q);
    let norm_at_q = g.lp_norm(q, &Exponent::One)?.exact.expect("exact");

    let limit = Rational::new(1.into(), (k as i64).into());
    let budget = q + bound * (2 + usize::BITS as usize - k.leading_zeros() as usize) * 2;
    let mut support = Vec::new();
    let mut m = q;
    loop {
        let s = g.support_mass(m)?;
        let done = s < limit;
        support.push((m, s));
        if done {
            break;
        }
        m += 1;
        if m > budget {
            return Err(Error::AssumptionViolation {
                cell: filt.label(d),
                detail: "cascade support does not shrink".into(),
            });
        }
    }
    let k2 = Rational::new(1.into(), ((k * k) as i64).into());
    let delta = rational::min(&k2, &mv.eps) / rational::int(2);
    Ok(StageRecord {
        k,
        n,
        eps: mv.eps.clone(),
        q,
        spike_cell: d,
        spike: (va, vb),
        norm_at_q,
        m,
        delta,
        support,
        g,
    })
}

// ------------------------------------------------------------ player I

/// One scripted move. Levels in `anchor_edits` define an explicit anchor
/// (frozen past its last level); with no edits the anchor is player II's
/// previous martingale, or zero on the first move.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MoveSpec {
    #[serde(default)]
    pub anchor_edits: Vec<AnchorEdit>,
    pub n: usize,
    pub eps: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnchorEdit {
    pub level: usize,
    pub values: Vec<String>,
}

impl MoveSpec {
    pub fn realize(&self, state: &GameState) -> Result<BasicOpenSet> {
        let eps = rational::parse(&self.eps)?;
        let anchor = if self.anchor_edits.is_empty() {
            match state.last() {
                Some(s) => s.anchor.clone(),
                None => Martingale::zero(state.filt.clone()),
            }
        } else {
            let mut levels = Vec::new();
            for e in &self.anchor_edits {
                let values = e.values.iter().map(|v| rational::parse(v)).collect::<Result<_>>()?;
                levels.push(LevelFunction { level: e.level, values });
            }
            levels.sort_by_key(|l| l.level);
            Martingale::explicit(state.filt.clone(), levels, ClassTag::Untagged)?
        };
        BasicOpenSet::new(anchor, self.n, eps)
    }
}

pub fn opening_move() -> MoveSpec {
    MoveSpec { anchor_edits: Vec::new(), n: 2, eps: "1/10".into() }
}

pub trait Adversary {
    fn name(&self) -> &'static str;
    /// Next move, or `None` to stop early.
    fn next_move(&mut self, state: &GameState) -> Result<Option<BasicOpenSet>>;
    /// Whether an illegal move may be retried.
    fn retries(&self) -> bool {
        false
    }
    fn rejected(&mut self, _reason: &str) -> Result<()> {
        Ok(())
    }
}

pub struct Scripted {
    moves: std::vec::IntoIter<MoveSpec>,
}

impl Scripted {
    pub fn new(moves: Vec<MoveSpec>) -> Self {
        Scripted { moves: moves.into_iter() }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(Self::new(serde_json::from_str(text)?))
    }
}

impl Adversary for Scripted {
    fn name(&self) -> &'static str {
        "scripted"
    }
    fn next_move(&mut self, state: &GameState) -> Result<Option<BasicOpenSet>> {
        self.moves.next().map(|m| m.realize(state)).transpose()
    }
}

/// Replays player II's last answer unchanged.
pub struct Passive;

impl Adversary for Passive {
    fn name(&self) -> &'static str {
        "passive"
    }
    fn next_move(&mut self, state: &GameState) -> Result<Option<BasicOpenSet>> {
        match state.last() {
            None => opening_move().realize(state).map(Some),
            Some(s) => Ok(Some(s.clone())),
        }
    }
}

/// Shrinks toward II's answer by `λ = δ/8` and adds a random frozen level
/// function of norm at most `λ`; radius `δ/2`.
pub struct RandomPlayer {
    rng: ChaCha8Rng,
}

impl RandomPlayer {
    pub fn new(seed: u64) -> Self {
        RandomPlayer { rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

/// Deepest level the random adversary perturbs.
const RANDOM_LEVEL_CAP: usize = 8;

impl Adversary for RandomPlayer {
    fn name(&self) -> &'static str {
        "random"
    }
    fn next_move(&mut self, state: &GameState) -> Result<Option<BasicOpenSet>> {
        let Some(prev) = state.last() else {
            return opening_move().realize(state).map(Some);
        };
        let filt = &state.filt;
        let lambda = &prev.eps / rational::int(8);
        let n = prev.n + self.rng.gen_range(0..=2);
        let level = self.rng.gen_range(1..=n.min(RANDOM_LEVEL_CAP));
        let cells = filt.level_cells(level)?.len();
        let values: Vec<Rational> = (0..cells)
            .map(|_| rational::ratio(self.rng.gen_range(-8..=8), 8))
            .collect();
        let h = LevelFunction { level, values };
        let raw = h.norm(filt, &Exponent::One)?.exact.expect("exact");
        let scaled = Martingale::combine(
            &prev.anchor,
            &Martingale::zero(filt.clone()),
            Rational::one() - &lambda,
            Rational::zero(),
        )?;
        let anchor = if raw.is_zero() {
            scaled
        } else {
            let u = rational::ratio(self.rng.gen_range(1..=4), 4);
            let p = Martingale::from_level_function(filt.clone(), h, ClassTag::UniformlyIntegrable)?;
            Martingale::combine(&scaled, &p, Rational::one(), &lambda * u / raw)?
        };
        BasicOpenSet::new(anchor, n, &prev.eps / rational::int(2)).map(Some)
    }
}

/// Reads one JSON [`MoveSpec`] per line; an empty line or end of input stops.
pub struct Interactive<R, W> {
    input: R,
    output: W,
}

impl<R: BufRead, W: Write> Interactive<R, W> {
    pub fn new(input: R, output: W) -> Self {
        Interactive { input, output }
    }
}

impl<R: BufRead, W: Write> Adversary for Interactive<R, W> {
    fn name(&self) -> &'static str {
        "interactive"
    }
    fn next_move(&mut self, state: &GameState) -> Result<Option<BasicOpenSet>> {
        loop {
            writeln!(
                self.output,
                "stage {}: move as {{\"anchor_edits\":[{{\"level\":L,\"values\":[\"a/b\",...]}}],\"n\":N,\"eps\":\"a/b\"}}",
                state.stages.len() + 1
            )?;
            if let Some(prev) = state.last() {
                writeln!(self.output, "previous: n={} eps={}", prev.n, rational::format(&prev.eps))?;
            }
            self.output.flush()?;
            let mut line = String::new();
            if self.input.read_line(&mut line)? == 0 || line.trim().is_empty() {
                return Ok(None);
            }
            let parsed = serde_json::from_str::<MoveSpec>(line.trim())
                .map_err(Error::from)
                .and_then(|m| m.realize(state));
            match parsed {
                Ok(mv) => return Ok(Some(mv)),
                Err(e) => writeln!(self.output, "rejected: {e}")?,
            }
        }
    }
    fn retries(&self) -> bool {
        true
    }
    fn rejected(&mut self, reason: &str) -> Result<()> {
        writeln!(self.output, "rejected: {reason}")?;
        Ok(())
    }
}

pub fn run_game(filt: Rc<Filtration>, adversary: &mut dyn Adversary, stages: usize) -> Result<GameState> {
    if stages == 0 {
        return Err(Error::param("stages must be positive"));
    }
    let mut state = GameState::new(filt);
    while state.stages.len() < stages {
        let Some(mv) = adversary.next_move(&state)? else { break };
        match state.respond(mv) {
            Ok(_) => {}
            Err(Error::InvalidMove(why)) if adversary.retries() => adversary.rejected(&why)?,
            Err(e) => return Err(e),
        }
    }
    Ok(state)
}

// ------------------------------------------------------------ tail bounds

/// `h` frozen at its value on first entry into `{|h_j| >= t}`,
/// `from <= j <= to`.
struct StoppedEval {
    h: Martingale,
    from: usize,
    to: usize,
    threshold: Rational,
}

impl StoppedEval {
    fn stopped(&self, filt: &Filtration, c: CellId) -> Result<Option<Rational>> {
        let level = filt.level(c);
        if level < self.from {
            return Ok(None);
        }
        for j in self.from..=level.min(self.to) {
            let v = self.h.value(filt.ancestor_at(c, j))?;
            if v.abs() >= self.threshold {
                return Ok(Some(v));
            }
        }
        Ok(None)
    }
}

impl LevelEval for StoppedEval {
    fn value(&self, filt: &Filtration, c: CellId, _: Option<&Rational>) -> Result<Rational> {
        match self.stopped(filt, c)? {
            Some(v) => Ok(v),
            None => self.h.value(c),
        }
    }
    fn constant_below(&self, filt: &Filtration, c: CellId) -> Result<Option<Rational>> {
        match self.stopped(filt, c)? {
            Some(v) => Ok(Some(v)),
            None => self.h.constant_below(c),
        }
    }
    fn describe(&self) -> String {
        format!("stopped({}, {}..={})", self.h.describe(), self.from, self.to)
    }
}

pub fn stopped(h: &Martingale, from: usize, to: usize, threshold: Rational) -> Martingale {
    let eval = StoppedEval { h: h.clone(), from, to, threshold };
    Martingale::new(h.filtration().clone(), eval, ClassTag::Untagged)
}

#[derive(Clone, Debug)]
pub struct TailReport {
    pub k: usize,
    pub delta: Rational,
    pub threshold: Rational,
    pub bound: Rational,
    /// `(j, P(|h_j| >= kδ))` for `m_k <= j <= j_max`.
    pub step1: Vec<(usize, Rational)>,
    pub r: usize,
    /// `P(|h'_r| >= kδ)` for the stopped martingale.
    pub step2: Rational,
    pub stopped_check: bool,
}

impl TailReport {
    pub fn passed(&self) -> bool {
        self.stopped_check && self.step2 < self.bound && self.step1.iter().all(|(_, p)| p < &self.bound)
    }
}

fn tail_probability(h: &Martingale, j: usize, t: &Rational) -> Result<Rational> {
    Ok(h.blocks(j)?.into_iter().filter(|b| &b.value.abs() >= t).map(|b| b.mass).sum())
}

fn ensure_in_response_set(rec: &StageRecord, h: &Martingale) -> Result<()> {
    for i in 1..=rec.m {
        let d = l1_distance(h, &rec.g, i)?;
        if d >= rec.delta {
            return Err(Error::NotInResponseSet {
                level: i,
                distance: rational::format(&d),
                radius: rational::format(&rec.delta),
            });
        }
    }
    Ok(())
}

/// Exact tail bounds for `h` in player II's stage-`k` answer: the one-level
/// bound for `m_k <= j <= j_max` and the bound on first entry during
/// `[m_k, r]` via the stopped martingale.
pub fn tail_mass_check(state: &GameState, h: &Martingale, k: usize, j_max: usize, r: usize) -> Result<TailReport> {
    let rec = state.stage(k).ok_or_else(|| Error::param(format!("no stage {k}")))?;
    if r < rec.m {
        return Err(Error::param("r must be at least m_k"));
    }
    ensure_in_response_set(rec, h)?;
    let threshold = rational::int(k as i64) * &rec.delta;
    let bound = Rational::new(2.into(), (k as i64).into());
    let mut step1 = Vec::new();
    for j in rec.m..=j_max {
        step1.push((j, tail_probability(h, j, &threshold)?));
    }
    let hs = stopped(h, rec.m, r, threshold.clone());
    ensure_in_response_set(rec, &hs)?;
    let stopped_check = hs.check(r + 2)?.passed();
    let step2 = tail_probability(&hs, r, &threshold)?;
    Ok(TailReport { k, delta: rec.delta.clone(), threshold, bound, step1, r, step2, stopped_check })
}

/// `g + c`, a constant shift.
pub fn shifted(g: &Martingale, c: Rational) -> Result<Martingale> {
    let filt = g.filtration().clone();
    let one = Martingale::from_level_function(
        filt.clone(),
        LevelFunction { level: 0, values: vec![Rational::one()] },
        ClassTag::UniformlyIntegrable,
    )?;
    Martingale::combine(g, &one, Rational::one(), c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rational::{int, ratio};

    #[test]
    fn opening_response_on_dyadic() {
        let f = Filtration::dyadic();
        let mut state = GameState::new(f.clone());
        let mv = opening_move().realize(&state).unwrap();
        let ans = state.respond(mv).unwrap();
        let s = &state.stages[0];
        assert_eq!(s.q, 3);
        assert_eq!(s.spike, (int(4), int(-4)));
        assert_eq!(s.norm_at_q, int(1));
        assert_eq!(s.m, 3);
        assert_eq!(s.support, vec![(3, ratio(1, 4))]);
        assert_eq!(s.delta, ratio(1, 20));
        assert_eq!(ans.n, 3);
        assert!(s.g.check(12).unwrap().passed());
    }

    #[test]
    fn spike_solves_with_existing_mass() {
        // rest 1/4, v = 1: (1 + x)/8 + |1 - x|/8 = 3/4 gives x = 3
        let x = solve_spike(&ratio(1, 4), &int(1), &ratio(1, 8), &ratio(1, 8));
        assert_eq!(x, int(3));
        let x = solve_spike(&int(1), &int(0), &ratio(1, 8), &ratio(1, 8));
        assert_eq!(x, int(0));
    }

    #[test]
    fn containment_rule() {
        let f = Filtration::dyadic();
        let z = Martingale::zero(f.clone());
        let a = BasicOpenSet::new(z.clone(), 2, ratio(1, 10)).unwrap();
        let b = BasicOpenSet::new(z.clone(), 3, ratio(1, 20)).unwrap();
        assert!(validate_move(&a, &b).unwrap());
        let shift = shifted(&z, ratio(1, 10)).unwrap();
        let c = BasicOpenSet::new(shift, 2, ratio(1, 10)).unwrap();
        assert!(!validate_move(&a, &c).unwrap());
    }

    #[test]
    fn passive_run_drives_support_down() {
        let f = Filtration::dyadic();
        let state = run_game(f, &mut Passive, 4).unwrap();
        for (i, s) in state.stages.iter().enumerate() {
            let k = i + 1;
            assert_eq!(s.norm_at_q, int(1));
            assert!(s.support.last().unwrap().1 < ratio(1, k as i64));
            let r = tail_mass_check(&state, &s.g, k, s.m + 4, s.m + 4).unwrap();
            assert!(r.passed(), "{r:?}");
        }
        for w in state.transcript.windows(2) {
            assert!(validate_move(&w[0].1, &w[1].1).unwrap());
        }
    }

    #[test]
    fn random_run_is_reproducible() {
        let f = Filtration::dyadic();
        let a = run_game(f.clone(), &mut RandomPlayer::new(7), 3).unwrap();
        let b = run_game(f, &mut RandomPlayer::new(7), 3).unwrap();
        let key = |s: &GameState| s.stages.iter().map(|r| (r.n, r.q, r.m, r.delta.clone())).collect::<Vec<_>>();
        assert_eq!(key(&a), key(&b));
    }

    #[test]
    fn far_function_is_rejected() {
        let f = Filtration::dyadic();
        let mut state = GameState::new(f.clone());
        state.respond(opening_move().realize(&state).unwrap()).unwrap();
        let far = Martingale::zero(f);
        assert!(matches!(
            tail_mass_check(&state, &far, 1, 4, 4),
            Err(Error::NotInResponseSet { .. })
        ));
    }
}
