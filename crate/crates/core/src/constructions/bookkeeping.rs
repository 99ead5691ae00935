//! Stage bookkeeping for the divergent constructions.
//!
//! Stage `j` picks a pair `(k_j, D_j)`, a cell `A_j ⊆ D_j` of level `n_j`,
//! and two disjoint small cells `B_j` (level `p_j`) and `C_j` (level `q_j`)
//! below `A_j`, with `n_j < p_j < q_j < n_{j+1}`. The martingale moves only on
//! the children of `B_j` and `C_j`.
//!
//! Pairs come from a breadth-first stream over `(level, cell)` interleaved
//! with "service" pairs: after every breadth-first pair, up to
//! [`SERVICE_SLOTS`] pending witness targets `B_j^1` / `C_j^1` are enumerated
//! next. The stream still visits every pair, so each pair has a smallest
//! stage whose `A` lies inside it; the service pairs make that stage appear
//! early enough for witness paths to be built at desk scale.

use std::collections::{HashMap, HashSet, VecDeque};
use std::rc::Rc;

use num::{One, Zero};

use crate::error::{Error, Result};
use crate::filtration::{CellId, Filtration};
use crate::rational::{self, Rational};

pub const SERVICE_SLOTS: usize = 4;
pub const DEFAULT_STAGE_BUDGET: usize = 20_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn both() -> [Sign; 2] {
        [Sign::Plus, Sign::Minus]
    }

    pub fn factor(self) -> Rational {
        match self {
            Sign::Plus => Rational::one(),
            Sign::Minus => -Rational::one(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "plus" | "+" => Ok(Sign::Plus),
            "minus" | "-" => Ok(Sign::Minus),
            other => Err(Error::Parse(format!("sign must be plus or minus, got {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Sign::Plus => "plus",
            Sign::Minus => "minus",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    /// 1-based stage index.
    pub j: usize,
    pub k: usize,
    pub d: CellId,
    pub service: bool,
    pub n: usize,
    pub a: CellId,
    pub p: usize,
    pub q: usize,
    pub b: CellId,
    pub c: CellId,
    pub b0: CellId,
    pub b1: CellId,
    pub c0: CellId,
    pub c1: CellId,
}

impl Stage {
    pub fn target(&self, sign: Sign) -> CellId {
        match sign {
            Sign::Plus => self.b1,
            Sign::Minus => self.c1,
        }
    }
}

/// Which increment a cell receives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    B0(usize),
    B1(usize),
    C0(usize),
    C1(usize),
}

/// Where a witness starting at some cell goes first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FirstAnchor {
    /// The start cell is inside a stage already under way whose jump has
    /// the right sign: use that stage directly.
    Stage(usize),
    /// Ordinary start (or a start moved past a stage jump of the wrong sign).
    Cell(CellId),
}

#[derive(Debug)]
pub struct Bookkeeping {
    filt: Rc<Filtration>,
    min_n: usize,
    mass_bound: bool,
    stages: Vec<Stage>,
    roles: HashMap<CellId, Role>,
    /// B and C cells, for trap detection.
    jump_cells: HashSet<CellId>,
    /// Stages whose `A` lies at or below a cell, in stage order.
    below: HashMap<CellId, Vec<usize>>,
    bfs_level: usize,
    bfs_index: usize,
    slot: usize,
    pending: VecDeque<(CellId, Sign)>,
    pending_live: HashSet<(CellId, Sign)>,
    queued: HashSet<(usize, Sign)>,
    budget: usize,
}

impl Bookkeeping {
    /// `mass_bound` enforces `P(B_j), P(C_j) < 2^{-j}`.
    pub fn new(filt: Rc<Filtration>, min_n: usize, mass_bound: bool) -> Result<Self> {
        if min_n == 0 {
            return Err(Error::param("N must be positive"));
        }
        Ok(Bookkeeping {
            filt,
            min_n,
            mass_bound,
            stages: Vec::new(),
            roles: HashMap::new(),
            jump_cells: HashSet::new(),
            below: HashMap::new(),
            bfs_level: 1,
            bfs_index: 0,
            slot: 0,
            pending: VecDeque::new(),
            pending_live: HashSet::new(),
            queued: HashSet::new(),
            budget: DEFAULT_STAGE_BUDGET,
        })
    }

    pub fn set_budget(&mut self, budget: usize) {
        self.budget = budget;
    }

    pub fn filtration(&self) -> &Rc<Filtration> {
        &self.filt
    }

    pub fn min_n(&self) -> usize {
        self.min_n
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    /// Stage `j` (1-based).
    pub fn stage(&self, j: usize) -> &Stage {
        &self.stages[j - 1]
    }

    pub fn role(&self, c: CellId) -> Option<Role> {
        self.roles.get(&c).copied()
    }

    pub fn is_jump_cell(&self, c: CellId) -> bool {
        self.jump_cells.contains(&c)
    }

    fn last_q(&self) -> usize {
        self.stages.last().map_or(0, |s| s.q)
    }

    /// Materializes stages until every stage with `n_j <= level` exists.
    pub fn ensure_through(&mut self, level: usize) -> Result<()> {
        while self.stages.last().map_or(true, |s| s.n <= level) {
            self.step()?;
        }
        Ok(())
    }

    /// Materializes stages up to index `j`.
    pub fn ensure_stages(&mut self, j: usize) -> Result<()> {
        while self.stages.len() < j {
            self.step()?;
        }
        Ok(())
    }

    fn next_bfs(&mut self) -> Result<(usize, CellId)> {
        loop {
            let cells = self.filt.level_cells(self.bfs_level)?;
            if self.bfs_index < cells.len() {
                let c = cells[self.bfs_index];
                self.bfs_index += 1;
                return Ok((self.bfs_level, c));
            }
            self.bfs_level += 1;
            self.bfs_index = 0;
        }
    }

    fn pop_pending(&mut self) -> Option<(CellId, Sign)> {
        while let Some(t) = self.pending.pop_front() {
            if self.pending_live.remove(&t) {
                return Some(t);
            }
        }
        None
    }

    fn step(&mut self) -> Result<()> {
        if self.stages.len() >= self.budget {
            return Err(Error::WitnessBudget { stages: self.budget });
        }
        let bfs_slot = self.slot % (SERVICE_SLOTS + 1) == 0 || self.pending_live.is_empty();
        self.slot += 1;
        let mut inherited = Vec::new();
        let (k, d, service) = if bfs_slot {
            let (k, d) = self.next_bfs()?;
            (k, d, false)
        } else {
            let (t, sign) = self.pop_pending().expect("pending nonempty");
            inherited.push(sign);
            (self.filt.level(t), t, true)
        };
        let j = self.build_stage(k, d, service)?;
        // pending targets that now contain A_j are served by this stage
        for anc in self.filt.ancestry(self.stage(j).a) {
            for sign in Sign::both() {
                if self.pending_live.remove(&(anc, sign)) {
                    inherited.push(sign);
                }
            }
        }
        inherited.sort();
        inherited.dedup();
        for sign in inherited {
            self.ensure(j, sign)?;
        }
        if bfs_slot {
            for sign in Sign::both() {
                match self.first_anchor(d, sign)? {
                    FirstAnchor::Stage(js) => self.ensure(js, sign)?,
                    FirstAnchor::Cell(e) => self.ensure_target(e, sign, 1)?,
                }
            }
        }
        Ok(())
    }

    fn build_stage(&mut self, k: usize, d: CellId, service: bool) -> Result<usize> {
        let filt = self.filt.clone();
        let j = self.stages.len() + 1;
        let n = k.max(self.min_n).max(self.last_q() + 1);
        let a = filt.canonical_descendant(d, n)?;
        let split = filt.first_split_node(a)?;
        let kids = filt.children(split)?;
        let bound = self.mass_bound.then(|| rational::pow2_neg(j as u32));

        let b_start = match &bound {
            Some(eps) => filt.find_small_descendant(kids[0], eps)?,
            None => kids[0],
        };
        let b = filt.first_split_node(b_start)?;
        let p = filt.level(b);

        // strictly below child 1, so a path through A_j can avoid B_j and C_j
        let mass1 = filt.mass(kids[1]);
        let eps_c = match &bound {
            Some(eps) => rational::min(eps, &mass1),
            None => mass1,
        };
        let mut c = filt.find_small_descendant(kids[1], &eps_c)?;
        loop {
            if filt.level(c) > p && filt.is_split(c)? {
                break;
            }
            c = filt.children(c)?[0];
        }
        let q = filt.level(c);
        let (b0, b1) = heavy_light(&filt, b)?;
        let (c0, c1) = heavy_light(&filt, c)?;

        self.roles.insert(b0, Role::B0(j));
        self.roles.insert(b1, Role::B1(j));
        self.roles.insert(c0, Role::C0(j));
        self.roles.insert(c1, Role::C1(j));
        self.jump_cells.insert(b);
        self.jump_cells.insert(c);
        for anc in filt.ancestry(a) {
            self.below.entry(anc).or_default().push(j);
        }
        self.stages.push(Stage { j, k, d, service, n, a, p, q, b, c, b0, b1, c0, c1 });
        Ok(j)
    }

    /// Smallest materialized stage `j >= lo` with `A_j ⊆ e` and `n_j >= level(e)`.
    pub fn first_inside(&self, e: CellId, lo: usize) -> Option<usize> {
        let list = self.below.get(&e)?;
        let start = list.partition_point(|&j| j < lo);
        list.get(start).copied()
    }

    /// Like [`first_inside`](Self::first_inside), materializing further
    /// stages when needed.
    pub fn find_first_inside(&mut self, e: CellId, lo: usize) -> Result<usize> {
        loop {
            if let Some(j) = self.first_inside(e, lo) {
                return Ok(j);
            }
            self.step()?;
        }
    }

    fn ensure(&mut self, mut j: usize, sign: Sign) -> Result<()> {
        loop {
            if !self.queued.insert((j, sign)) {
                return Ok(());
            }
            let target = self.stage(j).target(sign);
            match self.first_inside(target, j + 1) {
                Some(next) => j = next,
                None => {
                    self.push_pending(target, sign);
                    return Ok(());
                }
            }
        }
    }

    fn ensure_target(&mut self, e: CellId, sign: Sign, lo: usize) -> Result<()> {
        match self.first_inside(e, lo) {
            Some(j) => self.ensure(j, sign),
            None => {
                self.push_pending(e, sign);
                Ok(())
            }
        }
    }

    fn push_pending(&mut self, e: CellId, sign: Sign) {
        if self.pending_live.insert((e, sign)) {
            self.pending.push_back((e, sign));
        }
    }

    /// The stage whose level range `(n_j, q_j]` contains `level`, if any.
    pub fn straddling(&mut self, level: usize) -> Result<Option<usize>> {
        // every stage with n_j < level exists once some stage reaches level
        while self.stages.last().map_or(true, |s| s.n < level) {
            self.step()?;
        }
        let idx = self.stages.partition_point(|s| s.n < level);
        if idx == 0 {
            return Ok(None);
        }
        let s = &self.stages[idx - 1];
        Ok((level <= s.q).then_some(s.j))
    }

    /// First anchor of a witness of the given sign starting at `d`.
    ///
    /// A start inside a stage under way (`n_j < level(d) <= q_j`) that still
    /// lies above `B_j` or `C_j` is handled directly: the matching jump is
    /// used as the first step, and a jump of the opposite sign is passed
    /// through first (the witness then starts below it).
    pub fn first_anchor(&mut self, d: CellId, sign: Sign) -> Result<FirstAnchor> {
        let level = self.filt.level(d);
        let Some(j) = self.straddling(level)? else {
            return Ok(FirstAnchor::Cell(d));
        };
        let s = self.stage(j).clone();
        let meets_b = self.filt.within(s.b, d);
        let meets_c = self.filt.within(s.c, d);
        Ok(match (sign, meets_b, meets_c) {
            (Sign::Plus, true, _) | (Sign::Minus, _, true) => FirstAnchor::Stage(j),
            (Sign::Plus, false, true) => FirstAnchor::Cell(s.c0),
            (Sign::Minus, true, false) => FirstAnchor::Cell(s.b0),
            _ => FirstAnchor::Cell(d),
        })
    }
}

/// `(X^0, X^1)`: the heaviest child, then the lightest of the rest; ties go
/// to the smaller index.
fn heavy_light(filt: &Filtration, x: CellId) -> Result<(CellId, CellId)> {
    let ch = filt.children(x)?;
    let mut heavy = ch[0];
    for &c in &ch[1..] {
        if filt.mass(c) > filt.mass(heavy) {
            heavy = c;
        }
    }
    let mut light: Option<CellId> = None;
    for &c in &ch {
        if c == heavy {
            continue;
        }
        if light.map_or(true, |l| filt.mass(c) < filt.mass(l)) {
            light = Some(c);
        }
    }
    Ok((heavy, light.expect("split cell has two children")))
}

/// Pure breadth-first stream of `(level, cell)` pairs, levels from 1.
pub fn breadth_first_pairs(filt: &Filtration) -> impl Iterator<Item = Result<(usize, CellId)>> + '_ {
    let mut level = 1usize;
    let mut index = 0usize;
    std::iter::from_fn(move || loop {
        let cells = match filt.level_cells(level) {
            Ok(c) => c,
            Err(e) => return Some(Err(e)),
        };
        if index < cells.len() {
            index += 1;
            return Some(Ok((level, cells[index - 1])));
        }
        level += 1;
        index = 0;
    })
}

/// Total `P(B_j) + P(C_j)` over stages `j >= from` that are materialized.
pub fn jump_mass_from(book: &Bookkeeping, from: usize) -> Rational {
    let filt = book.filtration();
    book.stages()
        .iter()
        .filter(|s| s.j >= from)
        .map(|s| filt.mass(s.b) + filt.mass(s.c))
        .fold(Rational::zero(), |a, b| a + b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rational::ratio;

    #[test]
    fn breadth_first_order() {
        let f = Filtration::dyadic();
        let pairs: Vec<_> = breadth_first_pairs(&f).take(7).map(|r| r.unwrap()).collect();
        assert_eq!(pairs[0], (1, f.cell_at(1, 0).unwrap()));
        assert_eq!(pairs[1], (1, f.cell_at(1, 1).unwrap()));
        assert_eq!(pairs[2], (2, f.cell_at(2, 0).unwrap()));
        assert_eq!(pairs[6], (3, f.cell_at(3, 0).unwrap()));
    }

    #[test]
    fn delayed_persisting_cell_appears_per_level() {
        let f = Filtration::delayed(2, 3).unwrap();
        let pairs: Vec<_> = breadth_first_pairs(&f).take(4).map(|r| r.unwrap()).collect();
        assert_eq!(pairs[0].0, 1);
        assert_eq!(pairs[2].0, 2);
        assert_eq!(f.parent(pairs[2].1), Some(pairs[0].1));
    }

    #[test]
    fn stage_invariants() {
        for (f, n) in [
            (Filtration::dyadic(), 1),
            (Filtration::biased(ratio(1, 3)).unwrap(), 3),
            (Filtration::delayed(2, 3).unwrap(), 2),
        ] {
            let mut book = Bookkeeping::new(f.clone(), n, true).unwrap();
            book.ensure_stages(40).unwrap();
            let mut prev_q = 0;
            for s in book.stages() {
                assert!(s.n >= n && s.k <= s.n && s.n < s.p && s.p < s.q);
                assert!(s.n > prev_q);
                prev_q = s.q;
                assert!(f.within(s.a, s.d));
                assert!(f.within(s.b, s.a) && f.within(s.c, s.a));
                assert!(!f.within(s.c, s.b) && !f.within(s.b, s.c));
                assert!(f.mass(s.b) < rational::pow2_neg(s.j as u32));
                assert!(f.mass(s.c) < rational::pow2_neg(s.j as u32));
                assert_eq!(f.level(s.b), s.p);
                assert!(f.is_split(s.b).unwrap() && f.is_split(s.c).unwrap());
                assert!(f.mass(s.b0) >= f.mass(s.b1) && s.b0 != s.b1);
                assert_eq!(f.parent(s.c1), Some(s.c));
            }
        }
    }

    #[test]
    fn every_small_pair_has_a_stage_inside() {
        let f = Filtration::dyadic();
        let mut book = Bookkeeping::new(f.clone(), 1, true).unwrap();
        for level in 1..=3 {
            for &c in f.level_cells(level).unwrap().iter() {
                let j = book.find_first_inside(c, 1).unwrap();
                assert!(f.within(book.stage(j).a, c));
            }
        }
    }
}
