//! Lazily generated refinement tree of a filtration of finite partitions.
//!
//! Level `n` of the tree is the partition `D_n`; level 0 is the single root
//! cell of mass one. A cell with exactly one child stands for a partition
//! element that persists from `D_n` to `D_{n+1}` unchanged. Nodes are created
//! on demand and memoized, so the same sequence of queries always yields the
//! same tree and the same ids.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use num::{One, Signed, Zero};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rational::{self, Rational};

pub const DEFAULT_BRANCHING_BOUND: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellId(usize);

impl CellId {
    pub fn raw(self) -> usize {
        self.0
    }
}

/// Snapshot of one materialized cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub id: CellId,
    pub level: usize,
    pub index: Option<usize>,
    pub mass: Rational,
    pub parent: Option<CellId>,
    pub split: bool,
}

/// What to do with explicit specs past the last listed level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Extend {
    /// Reuse the last listed level, indexed by child position.
    RepeatPattern,
    Error,
}

/// Child-producing rule. Each call returns the children's masses as
/// fractions of the parent's mass.
#[derive(Clone, Debug)]
pub enum Generator {
    Dyadic,
    /// Two children carrying `theta` and `1 - theta` of the parent.
    Biased { theta: Rational },
    /// Cells at levels divisible by `period` halve; all others persist.
    Delayed { period: usize },
    /// `levels[l][i]` are the child fractions of the `i`-th cell of level `l`.
    Explicit {
        levels: Vec<Vec<Vec<Rational>>>,
        extend: Extend,
    },
}

#[derive(Debug)]
struct Node {
    parent: Option<CellId>,
    level: usize,
    pos: usize,
    mass: Rational,
    children: Option<Vec<CellId>>,
}

#[derive(Debug)]
pub struct Filtration {
    generator: Generator,
    branching_bound: usize,
    nodes: RefCell<Vec<Node>>,
    levels: RefCell<Vec<Rc<[CellId]>>>,
    index: RefCell<HashMap<CellId, usize>>,
}

impl Filtration {
    pub fn new(generator: Generator, branching_bound: usize) -> Result<Rc<Self>> {
        if branching_bound == 0 {
            return Err(Error::param("branching bound must be positive"));
        }
        match &generator {
            Generator::Biased { theta } => {
                if !theta.is_positive() || *theta >= Rational::one() {
                    return Err(Error::param(format!(
                        "biased theta {} must lie in (0,1)",
                        rational::format(theta)
                    )));
                }
            }
            Generator::Delayed { period } if *period == 0 => {
                return Err(Error::param("delayed period must be positive"));
            }
            Generator::Explicit { levels, .. } if levels.is_empty() => {
                return Err(Error::param("explicit filtration lists no levels"));
            }
            _ => {}
        }
        let root = Node {
            parent: None,
            level: 0,
            pos: 0,
            mass: Rational::one(),
            children: None,
        };
        let root_id = CellId(0);
        let f = Filtration {
            generator,
            branching_bound,
            nodes: RefCell::new(vec![root]),
            levels: RefCell::new(vec![Rc::from(vec![root_id])]),
            index: RefCell::new(HashMap::from([(root_id, 0)])),
        };
        Ok(Rc::new(f))
    }

    pub fn dyadic() -> Rc<Self> {
        Self::new(Generator::Dyadic, DEFAULT_BRANCHING_BOUND).expect("valid")
    }

    pub fn biased(theta: Rational) -> Result<Rc<Self>> {
        Self::new(Generator::Biased { theta }, DEFAULT_BRANCHING_BOUND)
    }

    pub fn delayed(period: usize, branching_bound: usize) -> Result<Rc<Self>> {
        Self::new(Generator::Delayed { period }, branching_bound)
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn branching_bound(&self) -> usize {
        self.branching_bound
    }

    pub fn root(&self) -> CellId {
        CellId(0)
    }

    /// Number of nodes materialized so far.
    pub fn materialized(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn level(&self, c: CellId) -> usize {
        self.nodes.borrow()[c.0].level
    }

    pub fn mass(&self, c: CellId) -> Rational {
        self.nodes.borrow()[c.0].mass.clone()
    }

    pub fn parent(&self, c: CellId) -> Option<CellId> {
        self.nodes.borrow()[c.0].parent
    }

    /// Position among the parent's children.
    pub fn child_pos(&self, c: CellId) -> usize {
        self.nodes.borrow()[c.0].pos
    }

    /// Position within its level, when that level has been fully listed.
    pub fn index_in_level(&self, c: CellId) -> Option<usize> {
        self.index.borrow().get(&c).copied()
    }

    pub fn cell(&self, c: CellId) -> Result<Cell> {
        let split = self.children(c)?.len() >= 2;
        let nodes = self.nodes.borrow();
        let node = &nodes[c.0];
        Ok(Cell {
            id: c,
            level: node.level,
            index: self.index_in_level(c),
            mass: node.mass.clone(),
            parent: node.parent,
            split,
        })
    }

    /// `level:index` when the index is known, otherwise `level/p0.p1...`
    /// with the child positions from the root.
    pub fn label(&self, c: CellId) -> String {
        let level = self.level(c);
        if let Some(i) = self.index_in_level(c) {
            return format!("{level}:{i}");
        }
        let mut path = Vec::with_capacity(level);
        let mut cur = c;
        while let Some(p) = self.parent(cur) {
            path.push(self.child_pos(cur).to_string());
            cur = p;
        }
        path.reverse();
        format!("{level}/{}", path.join("."))
    }

    /// Children in generator order, materializing them on first use.
    pub fn children(&self, c: CellId) -> Result<Vec<CellId>> {
        if let Some(ch) = &self.nodes.borrow()[c.0].children {
            return Ok(ch.clone());
        }
        let (level, pos, mass) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[c.0];
            (n.level, n.pos, n.mass.clone())
        };
        let fractions = self.fractions(c, level, pos)?;
        let mut total = Rational::zero();
        for f in &fractions {
            if !f.is_positive() {
                return Err(Error::GeneratorViolation {
                    cell: self.label(c),
                    detail: format!("non-positive child fraction {}", rational::format(f)),
                });
            }
            total += f;
        }
        if fractions.is_empty() || !total.is_one() {
            return Err(Error::GeneratorViolation {
                cell: self.label(c),
                detail: format!(
                    "child fractions sum to {} instead of 1",
                    rational::format(&total)
                ),
            });
        }
        let mut nodes = self.nodes.borrow_mut();
        let mut ids = Vec::with_capacity(fractions.len());
        for (i, f) in fractions.into_iter().enumerate() {
            let id = CellId(nodes.len());
            nodes.push(Node {
                parent: Some(c),
                level: level + 1,
                pos: i,
                mass: &mass * f,
                children: None,
            });
            ids.push(id);
        }
        nodes[c.0].children = Some(ids.clone());
        Ok(ids)
    }

    fn fractions(&self, c: CellId, level: usize, pos: usize) -> Result<Vec<Rational>> {
        let half = || vec![rational::ratio(1, 2), rational::ratio(1, 2)];
        Ok(match &self.generator {
            Generator::Dyadic => half(),
            Generator::Biased { theta } => vec![theta.clone(), Rational::one() - theta],
            Generator::Delayed { period } => {
                if level % period == 0 {
                    half()
                } else {
                    vec![Rational::one()]
                }
            }
            Generator::Explicit { levels, extend } => {
                if level < levels.len() {
                    let idx = self.ensure_index(c)?;
                    levels[level].get(idx).cloned().ok_or_else(|| {
                        Error::GeneratorViolation {
                            cell: self.label(c),
                            detail: format!(
                                "level {level} lists {} cells, tree has more",
                                levels[level].len()
                            ),
                        }
                    })?
                } else {
                    match extend {
                        Extend::Error => {
                            return Err(Error::GeneratorViolation {
                                cell: self.label(c),
                                detail: format!("no rule past listed level {}", levels.len() - 1),
                            })
                        }
                        Extend::RepeatPattern => {
                            let last = &levels[levels.len() - 1];
                            last[pos % last.len()].clone()
                        }
                    }
                }
            }
        })
    }

    fn ensure_index(&self, c: CellId) -> Result<usize> {
        if let Some(i) = self.index_in_level(c) {
            return Ok(i);
        }
        let level = self.level(c);
        self.level_cells(level)?;
        self.index_in_level(c).ok_or_else(|| Error::GeneratorViolation {
            cell: self.label(c),
            detail: "cell not found in its level".into(),
        })
    }

    /// The cells of `D_n` in (parent order, child order).
    pub fn level_cells(&self, n: usize) -> Result<Rc<[CellId]>> {
        loop {
            let known = self.levels.borrow().len();
            if known > n {
                return Ok(self.levels.borrow()[n].clone());
            }
            let prev = self.levels.borrow()[known - 1].clone();
            let mut next = Vec::new();
            for &c in prev.iter() {
                next.extend(self.children(c)?);
            }
            {
                let mut index = self.index.borrow_mut();
                for (i, &c) in next.iter().enumerate() {
                    index.insert(c, i);
                }
            }
            self.levels.borrow_mut().push(Rc::from(next));
        }
    }

    pub fn cell_at(&self, level: usize, index: usize) -> Result<CellId> {
        let cells = self.level_cells(level)?;
        cells.get(index).copied().ok_or_else(|| {
            Error::param(format!("level {level} has {} cells, no index {index}", cells.len()))
        })
    }

    pub fn is_split(&self, c: CellId) -> Result<bool> {
        Ok(self.children(c)?.len() >= 2)
    }

    /// Ancestor of `c` at `level` (which must not exceed `c`'s level).
    pub fn ancestor_at(&self, c: CellId, level: usize) -> CellId {
        let nodes = self.nodes.borrow();
        let mut cur = c;
        while nodes[cur.0].level > level {
            cur = nodes[cur.0].parent.expect("non-root has parent");
        }
        cur
    }

    /// True iff `inner` is `outer` or one of its descendants.
    pub fn within(&self, inner: CellId, outer: CellId) -> bool {
        let lo = self.level(outer);
        if self.level(inner) < lo {
            return false;
        }
        self.ancestor_at(inner, lo) == outer
    }

    /// Root-to-`c` chain, root first.
    pub fn ancestry(&self, c: CellId) -> Vec<CellId> {
        let nodes = self.nodes.borrow();
        let mut out = Vec::with_capacity(nodes[c.0].level + 1);
        let mut cur = Some(c);
        while let Some(x) = cur {
            out.push(x);
            cur = nodes[x.0].parent;
        }
        out.reverse();
        out
    }

    /// All descendants of `c` at `level`, in tree order.
    pub fn descendants_at(&self, c: CellId, level: usize) -> Result<Vec<CellId>> {
        let mut frontier = vec![c];
        for _ in self.level(c)..level {
            let mut next = Vec::with_capacity(frontier.len() * 2);
            for x in frontier {
                next.extend(self.children(x)?);
            }
            frontier = next;
        }
        Ok(frontier)
    }

    /// Follows child 0 down to `level`.
    pub fn canonical_descendant(&self, c: CellId, level: usize) -> Result<CellId> {
        let mut cur = c;
        while self.level(cur) < level {
            cur = self.children(cur)?[0];
        }
        Ok(cur)
    }

    /// Smallest `m > level(c)` at which the chain below `c` branches.
    pub fn first_split_level(&self, c: CellId) -> Result<usize> {
        let mut cur = c;
        for _ in 0..self.branching_bound {
            let ch = self.children(cur)?;
            if ch.len() >= 2 {
                return Ok(self.level(cur) + 1);
            }
            cur = ch[0];
        }
        Err(Error::AssumptionViolation {
            cell: self.label(c),
            detail: format!("no split within {} levels", self.branching_bound),
        })
    }

    /// First node at or below `c` that has at least two children.
    pub fn first_split_node(&self, c: CellId) -> Result<CellId> {
        let split = self.first_split_level(c)?;
        self.canonical_descendant(c, split - 1)
    }

    /// Child of minimum mass; ties go to the smaller position.
    pub fn min_mass_child(&self, c: CellId) -> Result<CellId> {
        let ch = self.children(c)?;
        let mut best = ch[0];
        let mut best_mass = self.mass(best);
        for &x in &ch[1..] {
            let m = self.mass(x);
            if m < best_mass {
                best = x;
                best_mass = m;
            }
        }
        Ok(best)
    }

    /// A descendant of `c` (possibly `c`) with mass below `eps`, reached by
    /// descending into a minimum-mass child at every split.
    pub fn find_small_descendant(&self, c: CellId, eps: &Rational) -> Result<CellId> {
        if !eps.is_positive() {
            return Err(Error::param("eps must be positive"));
        }
        let mut cur = c;
        let mut unary_run = 0usize;
        while self.mass(cur) >= *eps {
            let ch = self.children(cur)?;
            if ch.len() >= 2 {
                unary_run = 0;
                cur = self.min_mass_child(cur)?;
            } else {
                unary_run += 1;
                if unary_run > self.branching_bound {
                    return Err(Error::AssumptionViolation {
                        cell: self.label(cur),
                        detail: format!("no split within {} levels", self.branching_bound),
                    });
                }
                cur = ch[0];
            }
        }
        Ok(cur)
    }

    pub fn validate_assumptions(&self, depth: usize) -> ValidationReport {
        let mut report = ValidationReport {
            depth,
            branching_bound: self.branching_bound,
            cells: Vec::new(),
            failure: None,
        };
        for level in 1..=depth {
            let cells = match self.level_cells(level) {
                Ok(c) => c,
                Err(e) => {
                    report.failure = Some(e.to_string());
                    return report;
                }
            };
            let mut total = Rational::zero();
            for &c in cells.iter() {
                let mass = self.mass(c);
                total += &mass;
                let first_split = self.first_split_level(c);
                let entry = CellCheck {
                    cell: self.label(c),
                    mass: mass.clone(),
                    first_split: first_split.as_ref().ok().copied(),
                };
                report.cells.push(entry);
                if !mass.is_positive() {
                    report.failure = Some(format!("cell {} has non-positive mass", self.label(c)));
                    return report;
                }
                if let Err(e) = first_split {
                    report.failure = Some(e.to_string());
                    return report;
                }
            }
            if !total.is_one() {
                report.failure = Some(format!(
                    "level {level} masses sum to {}",
                    rational::format(&total)
                ));
                return report;
            }
        }
        report
    }

    /// A point sampled under the push-forward measure: every step picks a
    /// child with probability `mass(child) / mass(parent)`, exactly.
    pub fn sample_point(&self, depth: usize, seed: u64) -> Result<KPoint> {
        let mut point = KPoint {
            cells: vec![self.root()],
            ext: Extension::Sampled(Box::new(ChaCha8Rng::seed_from_u64(seed))),
        };
        point.extend_to(self, depth)?;
        Ok(point)
    }

    /// Point through `c`: ancestors are forced, below `c` follow child 0.
    pub fn path_through(&self, c: CellId) -> KPoint {
        KPoint {
            cells: self.ancestry(c),
            ext: Extension::Canonical,
        }
    }

    fn sample_child(&self, c: CellId, rng: &mut ChaCha8Rng) -> Result<CellId> {
        let ch = self.children(c)?;
        if ch.len() == 1 {
            return Ok(ch[0]);
        }
        let parent = self.mass(c);
        let fractions: Vec<Rational> = ch.iter().map(|&x| self.mass(x) / &parent).collect();
        let mut common = num::BigInt::one();
        for f in &fractions {
            common = num::Integer::lcm(&common, f.denom());
        }
        let bound = rational::denom_unsigned(&Rational::new(num::BigInt::one(), common.clone()));
        let draw = rational::uniform_below(rng, &bound);
        let mut acc = num::BigUint::zero();
        for (x, f) in ch.iter().zip(&fractions) {
            acc += rational::numer_unsigned(&(f * Rational::from_integer(common.clone())));
            if draw < acc {
                return Ok(*x);
            }
        }
        Ok(*ch.last().expect("nonempty"))
    }
}

#[derive(Clone, Debug)]
pub struct CellCheck {
    pub cell: String,
    pub mass: Rational,
    pub first_split: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct ValidationReport {
    pub depth: usize,
    pub branching_bound: usize,
    pub cells: Vec<CellCheck>,
    pub failure: Option<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

/// How a point continues past its explicit prefix.
#[derive(Clone, Debug)]
pub enum Extension {
    /// Always child 0.
    Canonical,
    /// Child positions to take next; canonical once exhausted.
    Recorded { moves: Vec<usize>, next: usize },
    Sampled(Box<ChaCha8Rng>),
}

/// A point of the inverse-limit space: `cells[l]` is the partition element
/// at level `l` (with `cells[0]` the root), plus a rule for going deeper.
#[derive(Clone, Debug)]
pub struct KPoint {
    cells: Vec<CellId>,
    ext: Extension,
}

impl KPoint {
    /// Builds a point from a root-first chain, checking nesting.
    pub fn from_chain(filt: &Filtration, cells: Vec<CellId>, ext: Extension) -> Result<Self> {
        if cells.first() != Some(&filt.root()) {
            return Err(Error::param("chain must start at the root"));
        }
        for w in cells.windows(2) {
            if filt.parent(w[1]) != Some(w[0]) {
                return Err(Error::param(format!(
                    "{} is not a child of {}",
                    filt.label(w[1]),
                    filt.label(w[0])
                )));
            }
        }
        Ok(KPoint { cells, ext })
    }

    /// Deepest level emitted so far.
    pub fn depth(&self) -> usize {
        self.cells.len() - 1
    }

    pub fn prefix(&self) -> &[CellId] {
        &self.cells
    }

    pub fn extension(&self) -> &Extension {
        &self.ext
    }

    pub fn extend_to(&mut self, filt: &Filtration, level: usize) -> Result<()> {
        while self.depth() < level {
            let last = *self.cells.last().expect("root present");
            let next = match &mut self.ext {
                Extension::Canonical => filt.children(last)?[0],
                Extension::Recorded { moves, next } => {
                    let ch = filt.children(last)?;
                    let pick = moves.get(*next).copied().unwrap_or(0);
                    *next += 1;
                    *ch.get(pick).ok_or_else(|| {
                        Error::param(format!("recorded move {pick} out of range"))
                    })?
                }
                Extension::Sampled(rng) => filt.sample_child(last, rng)?,
            };
            self.cells.push(next);
        }
        Ok(())
    }

    pub fn cell_at(&mut self, filt: &Filtration, level: usize) -> Result<CellId> {
        self.extend_to(filt, level)?;
        Ok(self.cells[level])
    }
}
