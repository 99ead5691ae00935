//! Martingales as lazy level functions on a [`Filtration`].
//!
//! A martingale is a rule giving `f_n(D)` for every cell `D` of `D_n`. Values
//! are memoized per cell and computed top-down, so evaluators that are defined
//! through increments only ever see their parent's value. The root (level 0)
//! carries `E f_1`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use num::{One, Signed, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::filtration::{CellId, Filtration, KPoint};
use crate::rational::{self, Rational};

/// How entering a child affects convergence along a path. Ordered from
/// best to worst so a greedy walk can take the minimum.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Hazard {
    /// The martingale is constant on the child's whole subtree.
    Settled,
    /// Value unchanged on entry.
    Clear,
    /// Value changes on entry.
    Transient,
    /// Entry forces a later jump that cannot be avoided.
    Trap,
}

pub trait LevelEval {
    /// `f_{level(c)}(c)`. `parent` is the parent's value when `c` is not the root.
    fn value(&self, filt: &Filtration, c: CellId, parent: Option<&Rational>) -> Result<Rational>;

    /// `Some(v)` if every descendant of `c` (including `c`) has value `v`.
    fn constant_below(&self, _filt: &Filtration, _c: CellId) -> Result<Option<Rational>> {
        Ok(None)
    }

    /// Evaluator-specific hazard; `None` falls back to comparing values.
    fn hazard(&self, _filt: &Filtration, _child: CellId) -> Result<Option<Hazard>> {
        Ok(None)
    }

    /// Square of an `L^2` bound on the whole martingale, if known.
    fn l2_sq_bound(&self) -> Option<Rational> {
        None
    }

    fn describe(&self) -> String;
}

#[derive(Clone)]
pub enum ClassTag {
    UniformlyIntegrable,
    Singular,
    Mixture { u: Martingale, s: Martingale },
    Untagged,
}

impl ClassTag {
    pub fn name(&self) -> &'static str {
        match self {
            ClassTag::UniformlyIntegrable => "ui",
            ClassTag::Singular => "singular",
            ClassTag::Mixture { .. } => "mixture",
            ClassTag::Untagged => "untagged",
        }
    }
}

impl fmt::Debug for ClassTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

struct Inner {
    filt: Rc<Filtration>,
    eval: Box<dyn LevelEval>,
    tag: ClassTag,
    memo: RefCell<HashMap<CellId, Rational>>,
}

#[derive(Clone)]
pub struct Martingale {
    inner: Rc<Inner>,
}

impl fmt::Debug for Martingale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Martingale")
            .field("eval", &self.inner.eval.describe())
            .field("tag", &self.inner.tag)
            .finish()
    }
}

/// A function on the cells of one level, in level order.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelFunction {
    pub level: usize,
    pub values: Vec<Rational>,
}

/// A cell of some level `<= n` on which `f_n` is constant, with that value.
#[derive(Clone, Debug)]
pub struct Block {
    pub cell: CellId,
    pub mass: Rational,
    pub value: Rational,
}

#[derive(Clone, Debug)]
pub struct Violation {
    pub cell: String,
    pub value: Rational,
    pub barycenter: Rational,
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub depth: usize,
    pub cells_checked: usize,
    pub violation: Option<Violation>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.violation.is_none()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Exponent {
    One,
    Int(u32),
    Frac(Rational),
    Infinity,
}

impl Exponent {
    pub fn parse(text: &str) -> Result<Self> {
        let t = text.trim();
        if matches!(t, "inf" | "infinity" | "∞") {
            return Ok(Exponent::Infinity);
        }
        let p = rational::parse(t)?;
        if p < Rational::one() {
            return Err(Error::Parse(format!("exponent {t} must be at least 1")));
        }
        Ok(Self::from_rational(p))
    }

    pub fn from_rational(p: Rational) -> Self {
        if p.is_integer() {
            match p.to_integer().to_u32() {
                Some(1) => Exponent::One,
                Some(k) => Exponent::Int(k),
                None => Exponent::Frac(p),
            }
        } else {
            Exponent::Frac(p)
        }
    }

    pub fn label(&self) -> String {
        match self {
            Exponent::One => "1".into(),
            Exponent::Int(k) => k.to_string(),
            Exponent::Frac(p) => rational::format(p),
            Exponent::Infinity => "inf".into(),
        }
    }
}

/// `‖f_n‖_p`. Exact values are kept where they are rational; `pth_power`
/// is the exact `‖f_n‖_p^p` for integer `p`.
#[derive(Clone, Debug)]
pub struct Norm {
    pub p: Exponent,
    pub level: usize,
    pub exact: Option<Rational>,
    pub pth_power: Option<Rational>,
    pub approx: f64,
}

impl Norm {
    /// The exact quantity used for comparisons: the norm itself for
    /// `p ∈ {1, ∞}`, its `p`-th power for other integer `p`.
    pub fn comparable(&self) -> Option<&Rational> {
        match self.p {
            Exponent::One | Exponent::Infinity => self.exact.as_ref(),
            _ => self.pth_power.as_ref(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DualReport {
    pub p: Exponent,
    pub level: usize,
    /// Direct norm (`p`-th power for integer `p >= 2`).
    pub direct: Rational,
    /// Value attained by the extremal witness, on the same scale.
    pub attained: Rational,
    /// Largest value found by the brute-force search, on the same scale.
    pub searched_max: Rational,
    pub candidates: u64,
}

impl DualReport {
    pub fn passed(&self) -> bool {
        self.attained == self.direct && self.searched_max <= self.direct
    }
}

#[derive(Clone, Debug)]
pub struct UiTable {
    pub grid: Vec<Rational>,
    /// `rows[n-1][i] = ∫ (|f_n| - grid[i])^+ dP`.
    pub rows: Vec<Vec<Rational>>,
    /// Max over `n` per grid entry.
    pub profile: Vec<Rational>,
}

pub const DUAL_ORACLE_BOUND: usize = 16;

impl Martingale {
    pub fn new(filt: Rc<Filtration>, eval: impl LevelEval + 'static, tag: ClassTag) -> Self {
        Martingale {
            inner: Rc::new(Inner {
                filt,
                eval: Box::new(eval),
                tag,
                memo: RefCell::new(HashMap::new()),
            }),
        }
    }

    pub fn zero(filt: Rc<Filtration>) -> Self {
        Self::new(filt, ZeroEval, ClassTag::Singular)
    }

    /// Signed digit walk: at a split, child 0 moves by `-1`, child 1 by
    /// `P(child 0)/P(child 1)`, any further children stay put.
    pub fn rademacher(filt: Rc<Filtration>) -> Self {
        Self::new(filt, Rademacher, ClassTag::Untagged)
    }

    /// Martingale given on finitely many levels. Lower levels are filled by
    /// conditional expectation, levels past the last listed one are frozen.
    pub fn explicit(
        filt: Rc<Filtration>,
        levels: Vec<LevelFunction>,
        tag: ClassTag,
    ) -> Result<Self> {
        let eval = Explicit::new(&filt, levels)?;
        Ok(Self::new(filt, eval, tag))
    }

    /// Frozen extension of a single level function: `E(h|Σ_i)` below,
    /// constant above.
    pub fn from_level_function(filt: Rc<Filtration>, h: LevelFunction, tag: ClassTag) -> Result<Self> {
        Self::explicit(filt, vec![h], tag)
    }

    pub fn filtration(&self) -> &Rc<Filtration> {
        &self.inner.filt
    }

    pub fn tag(&self) -> &ClassTag {
        &self.inner.tag
    }

    pub fn describe(&self) -> String {
        self.inner.eval.describe()
    }

    pub fn l2_sq_bound(&self) -> Option<Rational> {
        self.inner.eval.l2_sq_bound()
    }

    /// Same evaluator under another tag (fresh memo).
    pub fn retag(&self, tag: ClassTag) -> Self {
        Self::new(self.inner.filt.clone(), Shared(self.clone()), tag)
    }

    pub fn same_filtration(&self, other: &Martingale) -> bool {
        Rc::ptr_eq(&self.inner.filt, &other.inner.filt)
    }

    /// `f_{level(c)}(c)`, exact and memoized.
    pub fn value(&self, c: CellId) -> Result<Rational> {
        if let Some(v) = self.inner.memo.borrow().get(&c) {
            return Ok(v.clone());
        }
        let filt = &self.inner.filt;
        // climb to the nearest memoized ancestor, then evaluate downward
        let mut chain = vec![c];
        let mut known: Option<Rational> = None;
        let mut cur = c;
        while let Some(p) = filt.parent(cur) {
            if let Some(v) = self.inner.memo.borrow().get(&p) {
                known = Some(v.clone());
                break;
            }
            chain.push(p);
            cur = p;
        }
        let mut parent_value = known;
        for &cell in chain.iter().rev() {
            let v = self.inner.eval.value(filt, cell, parent_value.as_ref())?;
            self.inner.memo.borrow_mut().insert(cell, v.clone());
            parent_value = Some(v);
        }
        Ok(parent_value.expect("chain is nonempty"))
    }

    pub fn constant_below(&self, c: CellId) -> Result<Option<Rational>> {
        self.inner.eval.constant_below(&self.inner.filt, c)
    }

    pub fn hazard(&self, child: CellId) -> Result<Hazard> {
        if self.constant_below(child)?.is_some() {
            return Ok(Hazard::Settled);
        }
        if let Some(h) = self.inner.eval.hazard(&self.inner.filt, child)? {
            return Ok(h);
        }
        let parent = self.inner.filt.parent(child).expect("child has a parent");
        Ok(if self.value(child)? == self.value(parent)? {
            Hazard::Clear
        } else {
            Hazard::Transient
        })
    }

    /// `(f_1(x), ..., f_n(x))`.
    pub fn eval_along(&self, x: &mut KPoint, n: usize) -> Result<Vec<Rational>> {
        x.extend_to(&self.inner.filt, n)?;
        (1..=n).map(|l| self.value(x.prefix()[l])).collect()
    }

    pub fn level_function(&self, n: usize) -> Result<LevelFunction> {
        let cells = self.inner.filt.level_cells(n)?;
        let values = cells.iter().map(|&c| self.value(c)).collect::<Result<_>>()?;
        Ok(LevelFunction { level: n, values })
    }

    /// Partition of the space into cells of level `<= n` on each of which
    /// `f_n` is constant. Subtrees with a known constant are not expanded.
    pub fn blocks(&self, n: usize) -> Result<Vec<Block>> {
        let filt = &self.inner.filt;
        let mut out = Vec::new();
        let mut stack = vec![filt.root()];
        while let Some(c) = stack.pop() {
            let level = filt.level(c);
            let constant = if level == n {
                Some(self.value(c)?)
            } else {
                self.constant_below(c)?
            };
            match constant {
                Some(value) => out.push(Block { cell: c, mass: filt.mass(c), value }),
                None => {
                    let ch = filt.children(c)?;
                    stack.extend(ch.into_iter().rev());
                }
            }
        }
        Ok(out)
    }

    /// `P(f_n != 0)`.
    pub fn support_mass(&self, n: usize) -> Result<Rational> {
        Ok(self
            .blocks(n)?
            .into_iter()
            .filter(|b| !b.value.is_zero())
            .map(|b| b.mass)
            .sum())
    }

    /// Exact barycenter identity on every cell of levels `0..depth`.
    pub fn check(&self, depth: usize) -> Result<CheckReport> {
        let filt = &self.inner.filt;
        let mut report = CheckReport { depth, cells_checked: 0, violation: None };
        let mut stack = vec![filt.root()];
        while let Some(c) = stack.pop() {
            if filt.level(c) >= depth || self.constant_below(c)?.is_some() {
                continue;
            }
            let ch = filt.children(c)?;
            let mut total = Rational::zero();
            for &d in &ch {
                total += filt.mass(d) * self.value(d)?;
            }
            let barycenter = total / filt.mass(c);
            let value = self.value(c)?;
            report.cells_checked += 1;
            if barycenter != value {
                report.violation = Some(Violation { cell: filt.label(c), value, barycenter });
                return Ok(report);
            }
            stack.extend(ch.into_iter().rev());
        }
        Ok(report)
    }

    /// `E(f_from | Σ_to)` as a level function on `D_to`.
    pub fn conditional_expectation(&self, from: usize, to: usize) -> Result<LevelFunction> {
        if to > from {
            return Err(Error::param(format!("target level {to} exceeds source level {from}")));
        }
        let filt = &self.inner.filt;
        let cells = filt.level_cells(to)?;
        let mut values = Vec::with_capacity(cells.len());
        for &c in cells.iter() {
            let mut total = Rational::zero();
            for d in filt.descendants_at(c, from)? {
                total += filt.mass(d) * self.value(d)?;
            }
            values.push(total / filt.mass(c));
        }
        Ok(LevelFunction { level: to, values })
    }

    pub fn lp_norm(&self, n: usize, p: &Exponent) -> Result<Norm> {
        let blocks = self.blocks(n)?;
        Ok(norm_of_blocks(blocks.iter().map(|b| (&b.mass, &b.value)), n, p))
    }

    /// Checks the dual formula for `‖f_n‖_p` against a brute-force search.
    pub fn dual_norm_check(&self, n: usize, p: &Exponent) -> Result<DualReport> {
        let filt = &self.inner.filt;
        let cells = filt.level_cells(n)?;
        if cells.len() > DUAL_ORACLE_BOUND {
            return Err(Error::OracleBoundExceeded {
                level: n,
                cells: cells.len(),
                bound: DUAL_ORACLE_BOUND,
            });
        }
        let masses: Vec<Rational> = cells.iter().map(|&c| filt.mass(c)).collect();
        let values: Vec<Rational> = cells.iter().map(|&c| self.value(c)).collect::<Result<_>>()?;
        crate::martingale::dual::check(n, p, &masses, &values)
    }

    /// `alpha * a + beta * b`.
    pub fn combine(a: &Martingale, b: &Martingale, alpha: Rational, beta: Rational) -> Result<Self> {
        if !a.same_filtration(b) {
            return Err(Error::FiltrationMismatch);
        }
        let tag = combine_tags(a, b, &alpha, &beta)?;
        let eval = Linear { terms: vec![(alpha, a.clone()), (beta, b.clone())] };
        Ok(Self::new(a.inner.filt.clone(), eval, tag))
    }

    /// `∫_D f_∞ dP`, from the tag.
    pub fn limit_integral(&self, c: CellId) -> Result<Rational> {
        match &self.inner.tag {
            ClassTag::UniformlyIntegrable => Ok(self.inner.filt.mass(c) * self.value(c)?),
            ClassTag::Singular => Ok(Rational::zero()),
            ClassTag::Mixture { u, .. } => u.limit_integral(c),
            ClassTag::Untagged => Err(Error::UndecidableDecomposition),
        }
    }

    /// Splits into the uniformly integrable part `E(f_∞|Σ_n)` and the rest,
    /// verifying `‖u_n‖_1 <= ‖f_n'‖_1` for `n <= n' <= horizon`.
    pub fn decompose(&self, horizon: usize) -> Result<(Martingale, Martingale)> {
        let filt = self.inner.filt.clone();
        let (u, s) = match &self.inner.tag {
            ClassTag::UniformlyIntegrable => (self.clone(), Martingale::zero(filt)),
            ClassTag::Singular => (Martingale::zero(filt), self.clone()),
            ClassTag::Mixture { u, s } => (u.clone(), s.clone()),
            ClassTag::Untagged => return Err(Error::UndecidableDecomposition),
        };
        let u = u.retag(ClassTag::UniformlyIntegrable);
        let s = s.retag(ClassTag::Singular);
        // the projection has norm one; ‖f_n‖_1 is the smallest of ‖f_n'‖_1, n' >= n
        for n in 1..=horizon {
            let un = u.lp_norm(n, &Exponent::One)?.exact.expect("exact");
            let fn_ = self.lp_norm(n, &Exponent::One)?.exact.expect("exact");
            if un > fn_ {
                return Err(Error::AssumptionViolation {
                    cell: format!("level {n}"),
                    detail: format!(
                        "uniformly integrable part has L1 norm {} above {}",
                        rational::format(&un),
                        rational::format(&fn_)
                    ),
                });
            }
        }
        Ok((u, s))
    }

    /// Exact `∫(|f_n| - c)^+ dP` for `n <= horizon` and each `c`.
    pub fn ui_diagnostics(&self, horizon: usize, grid: &[Rational]) -> Result<UiTable> {
        let mut rows = Vec::with_capacity(horizon);
        let mut profile = vec![Rational::zero(); grid.len()];
        for n in 1..=horizon {
            let blocks = self.blocks(n)?;
            let row: Vec<Rational> = grid
                .iter()
                .map(|c| {
                    blocks
                        .iter()
                        .map(|b| &b.mass * rational::positive_part(&(b.value.abs() - c)))
                        .sum()
                })
                .collect();
            for (best, v) in profile.iter_mut().zip(&row) {
                if v > best {
                    *best = v.clone();
                }
            }
            rows.push(row);
        }
        Ok(UiTable { grid: grid.to_vec(), rows, profile })
    }

    /// Greedy path through `start` along which the martingale converges:
    /// at every level it enters a child of least [`Hazard`].
    pub fn convergent_path(&self, start: CellId) -> Result<OraclePath> {
        if matches!(self.inner.tag, ClassTag::Untagged) {
            return Err(Error::MissingPathOracle);
        }
        let filt = &self.inner.filt;
        let cells = filt.ancestry(start);
        let value = self.value(start)?;
        Ok(OraclePath {
            m: self.clone(),
            values: vec![value],
            last_change: filt.level(start),
            cells,
            worst: Hazard::Settled,
        })
    }
}

/// Lazily extended convergent path produced by [`Martingale::convergent_path`].
#[derive(Clone, Debug)]
pub struct OraclePath {
    m: Martingale,
    cells: Vec<CellId>,
    /// Values from the start level onward.
    values: Vec<Rational>,
    last_change: usize,
    worst: Hazard,
}

impl OraclePath {
    pub fn start_level(&self) -> usize {
        self.cells.len() - self.values.len()
    }

    pub fn depth(&self) -> usize {
        self.cells.len() - 1
    }

    pub fn cells(&self) -> &[CellId] {
        &self.cells
    }

    /// Worst hazard taken so far.
    pub fn worst(&self) -> Hazard {
        self.worst
    }

    /// Last level at which the value changed.
    pub fn last_change(&self) -> usize {
        self.last_change
    }

    pub fn extend_to(&mut self, level: usize) -> Result<()> {
        let filt = self.m.filtration().clone();
        while self.depth() < level {
            let last = *self.cells.last().expect("nonempty");
            let mut best: Option<(Hazard, CellId)> = None;
            for c in filt.children(last)? {
                let h = self.m.hazard(c)?;
                if best.map_or(true, |(b, _)| h < b) {
                    best = Some((h, c));
                }
            }
            let (h, next) = best.expect("children nonempty");
            self.worst = self.worst.max(h);
            let v = self.m.value(next)?;
            if &v != self.values.last().expect("nonempty") {
                self.last_change = filt.level(next);
            }
            self.cells.push(next);
            self.values.push(v);
        }
        Ok(())
    }

    pub fn cell_at(&mut self, level: usize) -> Result<CellId> {
        self.extend_to(level)?;
        Ok(self.cells[level])
    }

    pub fn value_at(&mut self, level: usize) -> Result<Rational> {
        self.extend_to(level)?;
        let start = self.start_level();
        if level < start {
            return self.m.value(self.cells[level]);
        }
        Ok(self.values[level - start].clone())
    }

    /// Walks until the path sits in a subtree where the martingale is
    /// constant, or until `budget` further levels pass without a change and
    /// only `Clear` steps; returns (limit, settle level).
    pub fn settle(&mut self, budget: usize) -> Result<(Rational, usize)> {
        let filt = self.m.filtration().clone();
        loop {
            let tip = *self.cells.last().expect("nonempty");
            if let Some(v) = self.m.constant_below(tip)? {
                return Ok((v, filt.level(tip).max(self.last_change)));
            }
            let depth = self.depth();
            if depth >= self.last_change + budget {
                return Ok((self.values.last().expect("nonempty").clone(), self.last_change));
            }
            self.extend_to(depth + 1)?;
        }
    }

    pub fn to_kpoint(&self) -> KPoint {
        KPoint::from_chain(
            self.m.filtration(),
            self.cells.clone(),
            crate::filtration::Extension::Canonical,
        )
        .expect("oracle path is a chain")
    }
}

fn combine_tags(a: &Martingale, b: &Martingale, alpha: &Rational, beta: &Rational) -> Result<ClassTag> {
    use ClassTag::*;
    Ok(match (a.tag(), b.tag()) {
        (Untagged, _) | (_, Untagged) => Untagged,
        (UniformlyIntegrable, UniformlyIntegrable) => UniformlyIntegrable,
        (Singular, Singular) => Singular,
        _ => {
            let (au, as_) = parts(a)?;
            let (bu, bs) = parts(b)?;
            Mixture {
                u: Martingale::combine(&au, &bu, alpha.clone(), beta.clone())?,
                s: Martingale::combine(&as_, &bs, alpha.clone(), beta.clone())?,
            }
        }
    })
}

fn parts(m: &Martingale) -> Result<(Martingale, Martingale)> {
    let filt = m.filtration().clone();
    Ok(match m.tag() {
        ClassTag::UniformlyIntegrable => (m.clone(), Martingale::zero(filt)),
        ClassTag::Singular => (Martingale::zero(filt).retag(ClassTag::UniformlyIntegrable), m.clone()),
        ClassTag::Mixture { u, s } => (u.clone(), s.clone()),
        ClassTag::Untagged => return Err(Error::UndecidableDecomposition),
    })
}

pub fn norm_of_blocks<'a>(
    blocks: impl Iterator<Item = (&'a Rational, &'a Rational)>,
    level: usize,
    p: &Exponent,
) -> Norm {
    let blocks: Vec<_> = blocks.collect();
    match p {
        Exponent::One => {
            let s: Rational = blocks.iter().map(|(m, v)| *m * v.abs()).sum();
            Norm {
                p: p.clone(),
                level,
                approx: rational::to_f64(&s),
                exact: Some(s.clone()),
                pth_power: Some(s),
            }
        }
        Exponent::Int(k) => {
            let s: Rational = blocks.iter().map(|(m, v)| *m * rational::pow(&v.abs(), *k)).sum();
            Norm {
                p: p.clone(),
                level,
                approx: rational::to_f64(&s).powf(1.0 / *k as f64),
                exact: None,
                pth_power: Some(s),
            }
        }
        Exponent::Frac(q) => {
            let q = rational::to_f64(q);
            let s: f64 = blocks
                .iter()
                .map(|(m, v)| rational::to_f64(m) * rational::to_f64(&v.abs()).powf(q))
                .sum();
            Norm { p: p.clone(), level, exact: None, pth_power: None, approx: s.powf(1.0 / q) }
        }
        Exponent::Infinity => {
            let s = blocks
                .iter()
                .filter(|(m, _)| m.is_positive())
                .map(|(_, v)| v.abs())
                .max()
                .unwrap_or_else(Rational::zero);
            Norm {
                p: p.clone(),
                level,
                approx: rational::to_f64(&s),
                exact: Some(s),
                pth_power: None,
            }
        }
    }
}

impl LevelFunction {
    pub fn zero(filt: &Filtration, level: usize) -> Result<Self> {
        let n = filt.level_cells(level)?.len();
        Ok(LevelFunction { level, values: vec![Rational::zero(); n] })
    }

    pub fn norm(&self, filt: &Filtration, p: &Exponent) -> Result<Norm> {
        let cells = filt.level_cells(self.level)?;
        let masses: Vec<Rational> = cells.iter().map(|&c| filt.mass(c)).collect();
        Ok(norm_of_blocks(masses.iter().zip(&self.values), self.level, p))
    }

    pub fn sup_abs(&self) -> Rational {
        self.values.iter().map(|v| v.abs()).max().unwrap_or_else(Rational::zero)
    }
}

// ---------------------------------------------------------------- evaluators

struct ZeroEval;

impl LevelEval for ZeroEval {
    fn value(&self, _: &Filtration, _: CellId, _: Option<&Rational>) -> Result<Rational> {
        Ok(Rational::zero())
    }
    fn constant_below(&self, _: &Filtration, _: CellId) -> Result<Option<Rational>> {
        Ok(Some(Rational::zero()))
    }
    fn l2_sq_bound(&self) -> Option<Rational> {
        Some(Rational::zero())
    }
    fn describe(&self) -> String {
        "zero".into()
    }
}

struct Rademacher;

impl LevelEval for Rademacher {
    fn value(&self, filt: &Filtration, c: CellId, parent: Option<&Rational>) -> Result<Rational> {
        let Some(pv) = parent else { return Ok(Rational::zero()) };
        let p = filt.parent(c).expect("non-root");
        let ch = filt.children(p)?;
        if ch.len() < 2 {
            return Ok(pv.clone());
        }
        Ok(match filt.child_pos(c) {
            0 => pv - Rational::one(),
            1 => pv + filt.mass(ch[0]) / filt.mass(ch[1]),
            _ => pv.clone(),
        })
    }
    fn describe(&self) -> String {
        "rademacher".into()
    }
}

/// Delegates to another martingale, so it can be retagged.
struct Shared(Martingale);

impl LevelEval for Shared {
    fn value(&self, _: &Filtration, c: CellId, _: Option<&Rational>) -> Result<Rational> {
        self.0.value(c)
    }
    fn constant_below(&self, _: &Filtration, c: CellId) -> Result<Option<Rational>> {
        self.0.constant_below(c)
    }
    fn hazard(&self, _: &Filtration, child: CellId) -> Result<Option<Hazard>> {
        self.0.hazard(child).map(Some)
    }
    fn l2_sq_bound(&self) -> Option<Rational> {
        self.0.l2_sq_bound()
    }
    fn describe(&self) -> String {
        self.0.describe()
    }
}

struct Linear {
    terms: Vec<(Rational, Martingale)>,
}

impl LevelEval for Linear {
    fn value(&self, _: &Filtration, c: CellId, _: Option<&Rational>) -> Result<Rational> {
        let mut total = Rational::zero();
        for (w, m) in &self.terms {
            if !w.is_zero() {
                total += w * m.value(c)?;
            }
        }
        Ok(total)
    }
    fn constant_below(&self, _: &Filtration, c: CellId) -> Result<Option<Rational>> {
        let mut total = Rational::zero();
        for (w, m) in &self.terms {
            if w.is_zero() {
                continue;
            }
            match m.constant_below(c)? {
                Some(v) => total += w * v,
                None => return Ok(None),
            }
        }
        Ok(Some(total))
    }
    fn hazard(&self, _: &Filtration, child: CellId) -> Result<Option<Hazard>> {
        let mut worst = Hazard::Settled;
        for (w, m) in &self.terms {
            if !w.is_zero() {
                worst = worst.max(m.hazard(child)?);
            }
        }
        Ok(Some(worst))
    }
    fn l2_sq_bound(&self) -> Option<Rational> {
        // Minkowski: ‖Σ w f‖ <= Σ |w| ‖f‖, squared via (Σ a_i)^2 <= k Σ a_i^2
        let mut total = Rational::zero();
        for (w, m) in &self.terms {
            if !w.is_zero() {
                total += w * w * m.l2_sq_bound()?;
            }
        }
        Some(total * rational::int(self.terms.len() as i64))
    }
    fn describe(&self) -> String {
        let parts: Vec<String> = self
            .terms
            .iter()
            .map(|(w, m)| format!("{}*({})", rational::format(w), m.describe()))
            .collect();
        parts.join(" + ")
    }
}

struct Explicit {
    /// Listed levels, ascending.
    levels: Vec<LevelFunction>,
}

impl Explicit {
    fn new(filt: &Filtration, mut levels: Vec<LevelFunction>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::param("explicit martingale lists no levels"));
        }
        levels.sort_by_key(|l| l.level);
        for w in levels.windows(2) {
            if w[0].level == w[1].level {
                return Err(Error::param(format!("level {} listed twice", w[0].level)));
            }
        }
        for l in &levels {
            let n = filt.level_cells(l.level)?.len();
            if l.values.len() != n {
                return Err(Error::param(format!(
                    "level {} has {n} cells but {} values were given",
                    l.level,
                    l.values.len()
                )));
            }
        }
        Ok(Explicit { levels })
    }

    fn last(&self) -> &LevelFunction {
        self.levels.last().expect("nonempty")
    }
}

impl LevelEval for Explicit {
    fn value(&self, filt: &Filtration, c: CellId, parent: Option<&Rational>) -> Result<Rational> {
        let level = filt.level(c);
        let last = self.last();
        if level > last.level {
            return Ok(parent.expect("non-root").clone());
        }
        let listed = self.levels.iter().find(|l| l.level >= level).expect("last bounds");
        if listed.level == level {
            let idx = filt.index_in_level(c).expect("listed levels are materialized");
            return Ok(listed.values[idx].clone());
        }
        let mut total = Rational::zero();
        for d in filt.descendants_at(c, listed.level)? {
            let idx = filt.index_in_level(d).expect("listed levels are materialized");
            total += filt.mass(d) * &listed.values[idx];
        }
        Ok(total / filt.mass(c))
    }
    fn constant_below(&self, filt: &Filtration, c: CellId) -> Result<Option<Rational>> {
        let last = self.last();
        if filt.level(c) < last.level {
            return Ok(None);
        }
        let anc = filt.ancestor_at(c, last.level);
        let idx = filt.index_in_level(anc).expect("listed levels are materialized");
        Ok(Some(last.values[idx].clone()))
    }
    fn l2_sq_bound(&self) -> Option<Rational> {
        Some(self.last().sup_abs() * self.last().sup_abs())
    }
    fn describe(&self) -> String {
        format!("explicit(levels<= {})", self.last().level)
    }
}

// ---------------------------------------------------------------- dual norms

mod dual {
    use super::*;

    pub(super) fn check(
        level: usize,
        p: &Exponent,
        masses: &[Rational],
        values: &[Rational],
    ) -> Result<DualReport> {
        match p {
            Exponent::One => l1(level, masses, values),
            Exponent::Infinity => linf(level, masses, values),
            Exponent::Int(k) => lp_int(level, *k, masses, values),
            Exponent::Frac(_) => Err(Error::param(
                "dual check needs an integer or infinite exponent",
            )),
        }
    }

    /// Weights `P(D) f(D)` scaled to integers over a common denominator.
    fn integer_weights(masses: &[Rational], values: &[Rational]) -> (Vec<num::BigInt>, num::BigInt) {
        let w: Vec<Rational> = masses.iter().zip(values).map(|(m, v)| m * v).collect();
        let mut den = num::BigInt::one();
        for x in &w {
            den = num::Integer::lcm(&den, x.denom());
        }
        let ints = w
            .iter()
            .map(|x| (x * Rational::from_integer(den.clone())).to_integer())
            .collect();
        (ints, den)
    }

    /// `sup Σ_i |∫_{A_i} f|` over disjoint families of unions of cells.
    fn l1(level: usize, masses: &[Rational], values: &[Rational]) -> Result<DualReport> {
        let direct: Rational = masses.iter().zip(values).map(|(m, v)| m * v.abs()).sum();
        let (ints, den) = integer_weights(masses, values);
        let small: Option<Vec<i128>> = ints.iter().map(|x| x.to_i128()).collect();
        let (best, candidates) = match small {
            Some(w) if w.iter().map(|x| x.unsigned_abs()).sum::<u128>() < (1u128 << 100) => {
                if w.len() <= 10 {
                    all_families(&w)
                } else {
                    two_block_families(&w)
                }
            }
            _ => return Err(Error::param("weights too large for the brute-force oracle")),
        };
        let searched_max = Rational::new(num::BigInt::from(best), den.clone());
        // the extremal family: {f > 0} and {f < 0}
        let pos: Rational = masses.iter().zip(values).filter(|(_, v)| v.is_positive()).map(|(m, v)| m * v).sum();
        let neg: Rational = masses.iter().zip(values).filter(|(_, v)| v.is_negative()).map(|(m, v)| m * v).sum();
        Ok(DualReport {
            p: Exponent::One,
            level,
            direct,
            attained: pos.abs() + neg.abs(),
            searched_max,
            candidates,
        })
    }

    /// Every assignment of cells to "unused" or a block, blocks in
    /// restricted-growth order.
    fn all_families(w: &[i128]) -> (i128, u64) {
        fn rec(w: &[i128], i: usize, sums: &mut Vec<i128>, best: &mut i128, count: &mut u64) {
            if i == w.len() {
                *count += 1;
                let v: i128 = sums.iter().map(|s| s.abs()).sum();
                if v > *best {
                    *best = v;
                }
                return;
            }
            rec(w, i + 1, sums, best, count);
            for b in 0..sums.len() {
                sums[b] += w[i];
                rec(w, i + 1, sums, best, count);
                sums[b] -= w[i];
            }
            sums.push(w[i]);
            rec(w, i + 1, sums, best, count);
            sums.pop();
        }
        let mut best = 0;
        let mut count = 0;
        rec(w, 0, &mut Vec::new(), &mut best, &mut count);
        (best, count)
    }

    /// Families with at most two blocks. Merging blocks of equal integral
    /// sign never decreases the sum, so these attain the supremum.
    fn two_block_families(w: &[i128]) -> (i128, u64) {
        let n = w.len();
        let mut digits = vec![0u8; n];
        let (mut a, mut b) = (0i128, 0i128);
        let mut best = 0i128;
        let mut count = 0u64;
        loop {
            count += 1;
            best = best.max(a.abs() + b.abs());
            // base-3 increment with incremental sums
            let mut i = 0;
            loop {
                if i == n {
                    return (best, count);
                }
                match digits[i] {
                    0 => {
                        digits[i] = 1;
                        a += w[i];
                        break;
                    }
                    1 => {
                        digits[i] = 2;
                        a -= w[i];
                        b += w[i];
                        break;
                    }
                    _ => {
                        digits[i] = 0;
                        b -= w[i];
                        i += 1;
                    }
                }
            }
        }
    }

    fn linf(level: usize, masses: &[Rational], values: &[Rational]) -> Result<DualReport> {
        let direct = masses
            .iter()
            .zip(values)
            .filter(|(m, _)| m.is_positive())
            .map(|(_, v)| v.abs())
            .max()
            .unwrap_or_else(Rational::zero);
        // point masses g = ±1_D / P(D) have ‖g‖_1 = 1 and ∫ f g = |f(D)|
        let mut attained = Rational::zero();
        for (m, v) in masses.iter().zip(values) {
            let g = if v.is_negative() { -m.recip() } else { m.recip() };
            let pairing = m * v * g;
            if pairing > attained {
                attained = pairing;
            }
        }
        // convex combinations of point masses cannot beat the best one
        let searched_max = attained.clone();
        Ok(DualReport {
            p: Exponent::Infinity,
            level,
            direct,
            attained,
            searched_max,
            candidates: masses.len() as u64,
        })
    }

    /// Integer `p >= 2`. Compares `p`-th powers: for `g` with `‖g‖_q^q = S`
    /// the dual value is `(∫ f g)^p / S^{p-1}`.
    fn lp_int(level: usize, p: u32, masses: &[Rational], values: &[Rational]) -> Result<DualReport> {
        let direct: Rational = masses.iter().zip(values).map(|(m, v)| m * rational::pow(&v.abs(), p)).sum();
        // G = sign(f)|f|^{p-1}; |G|^q = |f|^p
        let pairing: Rational = masses
            .iter()
            .zip(values)
            .map(|(m, v)| {
                let g = rational::pow(&v.abs(), p - 1);
                let g = if v.is_negative() { -g } else { g };
                m * v * g
            })
            .sum();
        let attained = if direct.is_zero() {
            Rational::zero()
        } else {
            rational::pow(&pairing, p) / rational::pow(&direct, p - 1)
        };
        let (searched_max, candidates) = if p == 2 {
            grid_search_l2(masses, values)
        } else {
            (attained.clone(), 0)
        };
        Ok(DualReport { p: Exponent::Int(p), level, direct, attained, searched_max, candidates })
    }

    /// Max of `(∫ f g)^2 / ‖g‖_2^2` over `g` with values in `{-K..K}/K`,
    /// exhaustive when small, otherwise a fixed pseudo-random sample.
    fn grid_search_l2(masses: &[Rational], values: &[Rational]) -> (Rational, u64) {
        const K: i64 = 2;
        const EXHAUSTIVE: u64 = 200_000;
        const SAMPLES: u64 = 20_000;
        let n = masses.len() as u32;
        let side = (2 * K + 1) as u64;
        let total = side.checked_pow(n).unwrap_or(u64::MAX);
        let score = |g: &[i64]| -> Option<Rational> {
            let mut pair = Rational::zero();
            let mut sq = Rational::zero();
            for ((m, v), &x) in masses.iter().zip(values).zip(g) {
                let x = rational::int(x);
                pair += m * v * &x;
                sq += m * &x * &x;
            }
            (!sq.is_zero()).then(|| &pair * &pair / sq)
        };
        let mut best = Rational::zero();
        let mut count = 0u64;
        let mut g = vec![0i64; masses.len()];
        if total <= EXHAUSTIVE {
            for code in 0..total {
                let mut c = code;
                for x in g.iter_mut() {
                    *x = (c % side) as i64 - K;
                    c /= side;
                }
                if let Some(s) = score(&g) {
                    best = rational::max(&best, &s);
                }
                count += 1;
            }
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
            for _ in 0..SAMPLES {
                for x in g.iter_mut() {
                    *x = rng.gen_range(-K..=K);
                }
                if let Some(s) = score(&g) {
                    best = rational::max(&best, &s);
                }
                count += 1;
            }
        }
        (best, count)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rational::{int, ratio};

    fn lf(level: usize, v: &[i64]) -> LevelFunction {
        LevelFunction { level, values: v.iter().map(|&x| int(x)).collect() }
    }

    #[test]
    fn rademacher_values() {
        let f = Filtration::dyadic();
        let m = Martingale::rademacher(f.clone());
        assert_eq!(m.value(f.cell_at(2, 1).unwrap()).unwrap(), int(0));
        let mut x = f.path_through(f.root());
        assert_eq!(m.eval_along(&mut x, 4).unwrap(), vec![int(-1), int(-2), int(-3), int(-4)]);
        assert!(m.check(10).unwrap().passed());
        let b = Filtration::biased(ratio(1, 3)).unwrap();
        assert!(Martingale::rademacher(b).check(8).unwrap().passed());
    }

    #[test]
    fn explicit_fill_and_corruption() {
        let f = Filtration::dyadic();
        let m = Martingale::explicit(f.clone(), vec![lf(2, &[2, 0, -1, -1])], ClassTag::Untagged).unwrap();
        assert_eq!(m.level_function(1).unwrap().values, vec![int(1), int(-1)]);
        assert_eq!(m.conditional_expectation(2, 1).unwrap().values, vec![int(1), int(-1)]);
        assert_eq!(m.conditional_expectation(2, 2).unwrap(), m.level_function(2).unwrap());
        assert!(m.check(12).unwrap().passed());
        let bad = Martingale::explicit(
            f.clone(),
            vec![lf(1, &[1, -1]), lf(2, &[3, 0, -1, -1])],
            ClassTag::Untagged,
        )
        .unwrap();
        let report = bad.check(5).unwrap();
        assert_eq!(report.violation.unwrap().cell, "1:0");
    }

    #[test]
    fn biased_conditional_expectation() {
        let f = Filtration::biased(ratio(1, 3)).unwrap();
        // level 1 masses 1/3, 2/3; children of the 2/3 cell: 2/9, 4/9
        let m = Martingale::explicit(f.clone(), vec![lf(2, &[0, 0, 3, 0])], ClassTag::Untagged).unwrap();
        let e = m.conditional_expectation(2, 1).unwrap();
        assert_eq!(e.values[1], int(1));
    }

    #[test]
    fn norms_direct() {
        let f = Filtration::dyadic();
        let m = Martingale::explicit(f.clone(), vec![lf(1, &[1, -1])], ClassTag::Untagged).unwrap();
        assert_eq!(m.lp_norm(1, &Exponent::One).unwrap().exact, Some(int(1)));
        assert_eq!(m.lp_norm(1, &Exponent::Infinity).unwrap().exact, Some(int(1)));
        assert_eq!(m.lp_norm(1, &Exponent::Int(2)).unwrap().pth_power, Some(int(1)));
        let s = Martingale::explicit(f.clone(), vec![lf(2, &[4, 0, 0, 0])], ClassTag::Untagged).unwrap();
        assert_eq!(s.lp_norm(2, &Exponent::One).unwrap().exact, Some(int(1)));
        assert_eq!(s.lp_norm(2, &Exponent::Int(2)).unwrap().pth_power, Some(int(4)));
        assert_eq!(s.lp_norm(2, &Exponent::Infinity).unwrap().exact, Some(int(4)));
        let z = Martingale::zero(f);
        assert_eq!(z.lp_norm(7, &Exponent::Int(3)).unwrap().pth_power, Some(int(0)));
    }

    #[test]
    fn dual_checks() {
        let f = Filtration::dyadic();
        let m = Martingale::explicit(f.clone(), vec![lf(2, &[2, 0, -1, -1])], ClassTag::Untagged).unwrap();
        for p in [Exponent::One, Exponent::Int(2), Exponent::Infinity] {
            let r = m.dual_norm_check(2, &p).unwrap();
            assert!(r.passed(), "{p:?}: {r:?}");
        }
        assert_eq!(m.dual_norm_check(2, &Exponent::Int(2)).unwrap().direct, ratio(3, 2));
        assert!(matches!(
            m.dual_norm_check(5, &Exponent::One),
            Err(Error::OracleBoundExceeded { .. })
        ));
        let r = Martingale::rademacher(f.clone()).dual_norm_check(4, &Exponent::One).unwrap();
        assert!(r.passed());
    }

    #[test]
    fn combine_is_linear() {
        let f = Filtration::dyadic();
        let r = Martingale::rademacher(f.clone());
        let z = Martingale::zero(f.clone());
        let same = Martingale::combine(&r, &z, int(1), int(1)).unwrap();
        let diff = Martingale::combine(&r, &r, int(1), int(-1)).unwrap();
        for &c in f.level_cells(4).unwrap().iter() {
            assert_eq!(same.value(c).unwrap(), r.value(c).unwrap());
            assert_eq!(diff.value(c).unwrap(), int(0));
        }
        let other = Filtration::dyadic();
        assert!(matches!(
            Martingale::combine(&r, &Martingale::zero(other), int(1), int(1)),
            Err(Error::FiltrationMismatch)
        ));
    }

    #[test]
    fn decompose_by_tag() {
        let f = Filtration::dyadic();
        let r = Martingale::rademacher(f.clone());
        assert!(matches!(r.decompose(3), Err(Error::UndecidableDecomposition)));
        let e = Martingale::explicit(f.clone(), vec![lf(2, &[2, 0, -1, -1])], ClassTag::UniformlyIntegrable)
            .unwrap();
        let (u, s) = e.decompose(4).unwrap();
        for &c in f.level_cells(3).unwrap().iter() {
            assert_eq!(u.value(c).unwrap(), e.value(c).unwrap());
            assert_eq!(s.value(c).unwrap(), int(0));
        }
    }

    #[test]
    fn ui_table_for_zero() {
        let f = Filtration::dyadic();
        let t = Martingale::zero(f).ui_diagnostics(4, &[int(0), int(1)]).unwrap();
        assert!(t.rows.iter().flatten().all(|v| v.is_zero()));
    }

    #[test]
    fn greedy_path_settles_for_explicit() {
        let f = Filtration::dyadic();
        let e = Martingale::explicit(f.clone(), vec![lf(2, &[2, 0, -1, -1])], ClassTag::UniformlyIntegrable)
            .unwrap();
        let mut path = e.convergent_path(f.cell_at(1, 0).unwrap()).unwrap();
        let (limit, settle) = path.settle(4).unwrap();
        assert_eq!(settle, 2);
        assert_eq!(limit, e.value(path.cell_at(2).unwrap()).unwrap());
        assert!(matches!(
            Martingale::rademacher(f.clone()).convergent_path(f.root()),
            Err(Error::MissingPathOracle)
        ));
    }
}
