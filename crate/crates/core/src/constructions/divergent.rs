//! The two divergent martingales and their witness paths.
//!
//! Both move only at the children of the stage cells `B_j` and `C_j`:
//! `B_j^1` gains, `B_j^0` pays for it so that the barycenter is preserved,
//! and symmetrically for `C_j` with the opposite sign. The `ui` variant
//! moves by `1`; the bounded variant moves by the damping
//! `η(D) = min(1 - f(D), f(D) + 1) / 2`, which keeps `|f| < 1`.

use std::cell::RefCell;
use std::rc::Rc;

use num::{One, Signed, Zero};

use crate::constructions::bookkeeping::{Bookkeeping, FirstAnchor, Role, Sign};
use crate::error::{Error, Result};
use crate::filtration::{CellId, Extension, Filtration, KPoint};
use crate::martingale::{ClassTag, Exponent, Hazard, LevelEval, LevelFunction, Martingale};
use crate::rational::{self, Rational};

pub type SharedBook = Rc<RefCell<Bookkeeping>>;

#[derive(Clone, Debug)]
pub enum DivergentKind {
    /// Unit jumps; `f_1 = ... = f_N = 0`.
    Ui,
    /// Damped jumps starting from `f_N = h`.
    Linfty { h: LevelFunction },
}

#[derive(Clone, Debug)]
pub struct Divergent {
    pub martingale: Martingale,
    pub book: SharedBook,
    pub kind: DivergentKind,
    pub n: usize,
}

struct StageEval {
    book: SharedBook,
    kind: DivergentKind,
    n: usize,
}

impl StageEval {
    fn jump(&self, filt: &Filtration, role: Role, parent: &Rational) -> Rational {
        let book = self.book.borrow();
        let eta = match self.kind {
            DivergentKind::Ui => Rational::one(),
            DivergentKind::Linfty { .. } => damping(parent),
        };
        let ratio = |heavy: CellId, light: CellId| filt.mass(light) / filt.mass(heavy);
        match role {
            Role::B1(_) => eta,
            Role::B0(j) => {
                let s = book.stage(j);
                -(ratio(s.b0, s.b1) * eta)
            }
            Role::C1(_) => -eta,
            Role::C0(j) => {
                let s = book.stage(j);
                ratio(s.c0, s.c1) * eta
            }
        }
    }
}

/// `min(1 - f, f + 1) / 2`.
pub fn damping(f: &Rational) -> Rational {
    let one = Rational::one();
    rational::min(&(&one - f), &(f + &one)) / rational::int(2)
}

impl LevelEval for StageEval {
    fn value(&self, filt: &Filtration, c: CellId, parent: Option<&Rational>) -> Result<Rational> {
        let level = filt.level(c);
        if let DivergentKind::Linfty { h } = &self.kind {
            if level <= self.n {
                return expectation_of(filt, h, c);
            }
        }
        let Some(pv) = parent else { return Ok(Rational::zero()) };
        self.book.borrow_mut().ensure_through(level)?;
        let role = self.book.borrow().role(c);
        Ok(match role {
            Some(role) => pv + self.jump(filt, role, pv),
            None => pv.clone(),
        })
    }

    fn hazard(&self, filt: &Filtration, child: CellId) -> Result<Option<Hazard>> {
        let level = filt.level(child);
        self.book
            .borrow_mut()
            .ensure_through(level + filt.branching_bound() + 1)?;
        let book = self.book.borrow();
        if book.role(child).is_some() && level > self.n {
            return Ok(Some(Hazard::Transient));
        }
        // entering a cell equal (as a set) to some B_j or C_j forces a jump
        let mut cur = child;
        loop {
            if book.is_jump_cell(cur) {
                return Ok(Some(Hazard::Trap));
            }
            let ch = filt.children(cur)?;
            if ch.len() != 1 {
                return Ok(Some(Hazard::Clear));
            }
            cur = ch[0];
        }
    }

    fn l2_sq_bound(&self) -> Option<Rational> {
        Some(match &self.kind {
            // orthogonal increments, each of squared norm < 2^{-j}, twice per stage
            DivergentKind::Ui => rational::int(2),
            DivergentKind::Linfty { .. } => Rational::one(),
        })
    }

    fn describe(&self) -> String {
        match self.kind {
            DivergentKind::Ui => format!("ui_divergent(N={})", self.n),
            DivergentKind::Linfty { .. } => format!("linfty_divergent(N={})", self.n),
        }
    }
}

/// `E(h | Σ_level(c))` on `c`, for `level(c) <= h.level`.
fn expectation_of(filt: &Filtration, h: &LevelFunction, c: CellId) -> Result<Rational> {
    let mut total = Rational::zero();
    filt.level_cells(h.level)?;
    for d in filt.descendants_at(c, h.level)? {
        let idx = filt.index_in_level(d).expect("level listed");
        total += filt.mass(d) * &h.values[idx];
    }
    Ok(total / filt.mass(c))
}

fn check_assumptions(filt: &Filtration, n: usize) -> Result<()> {
    let report = filt.validate_assumptions(n + filt.branching_bound());
    match report.failure {
        None => Ok(()),
        Some(detail) => Err(Error::AssumptionViolation { cell: format!("depth {}", report.depth), detail }),
    }
}

/// Unit-jump construction with `f_1 = ... = f_N = 0`, bounded in every `L^p`.
pub fn build_ui_divergent(filt: Rc<Filtration>, n: usize) -> Result<Divergent> {
    check_assumptions(&filt, n)?;
    let book = Rc::new(RefCell::new(Bookkeeping::new(filt.clone(), n, true)?));
    let eval = StageEval { book: book.clone(), kind: DivergentKind::Ui, n };
    let martingale = Martingale::new(filt, eval, ClassTag::UniformlyIntegrable);
    Ok(Divergent { martingale, book, kind: DivergentKind::Ui, n })
}

/// Damped construction with `f_N = h`, requires `‖h‖_∞ < 1`.
pub fn build_linfty_divergent(filt: Rc<Filtration>, n: usize, h: LevelFunction) -> Result<Divergent> {
    if h.level != n {
        return Err(Error::param(format!("h lives on level {}, expected {n}", h.level)));
    }
    let cells = filt.level_cells(n)?;
    if h.values.len() != cells.len() {
        return Err(Error::param(format!(
            "h has {} values for {} cells",
            h.values.len(),
            cells.len()
        )));
    }
    let sup = h.sup_abs();
    if sup >= Rational::one() {
        return Err(Error::NormViolation { norm: rational::format(&sup) });
    }
    check_assumptions(&filt, n)?;
    let book = Rc::new(RefCell::new(Bookkeeping::new(filt.clone(), n, false)?));
    let kind = DivergentKind::Linfty { h };
    let eval = StageEval { book: book.clone(), kind: kind.clone(), n };
    let martingale = Martingale::new(filt, eval, ClassTag::UniformlyIntegrable);
    Ok(Divergent { martingale, book, kind, n })
}

/// A path through a start cell built from stage jumps of one sign.
#[derive(Clone, Debug)]
pub struct Witness {
    pub sign: Sign,
    pub start: CellId,
    /// `m_1`: the start level, or the level just below a jump of the
    /// opposite sign that the start cell could not avoid.
    pub base_level: usize,
    /// `m_1, ..., m_{R+1}`.
    pub anchors: Vec<usize>,
    /// `j_1, ..., j_R`.
    pub stages: Vec<usize>,
    pub point: KPoint,
}

impl Divergent {
    pub fn filtration(&self) -> &Rc<Filtration> {
        self.martingale.filtration()
    }

    /// Builds a witness with `rounds` jumps through `d`.
    pub fn witness(&self, d: CellId, sign: Sign, rounds: usize) -> Result<Witness> {
        let filt = self.filtration().clone();
        let mut book = self.book.borrow_mut();
        let mut e = d;
        if let DivergentKind::Linfty { .. } = self.kind {
            if filt.level(d) < self.n {
                e = filt.canonical_descendant(d, self.n)?;
            }
        }
        let mut direct = None;
        match book.first_anchor(e, sign)? {
            FirstAnchor::Stage(j) => direct = Some(j),
            FirstAnchor::Cell(x) => e = x,
        }
        let base_level = filt.level(e);
        let mut anchors = vec![base_level];
        let mut stages = Vec::with_capacity(rounds);
        for _ in 0..rounds {
            let j = match direct.take() {
                Some(j) => j,
                None => book.find_first_inside(e, 1)?,
            };
            e = book.stage(j).target(sign);
            anchors.push(filt.level(e));
            stages.push(j);
        }
        let point = KPoint::from_chain(&filt, filt.ancestry(e), Extension::Canonical)?;
        Ok(Witness { sign, start: d, base_level, anchors, stages, point })
    }

    /// `f_i(x) = f_{m_1}(x) ± (r - 1)` on `[m_r, m_{r+1})`, exactly.
    pub fn staircase_holds(&self, w: &Witness) -> Result<bool> {
        let mut x = w.point.clone();
        let last = *w.anchors.last().expect("anchors");
        let values = self.martingale.eval_along(&mut x, last)?;
        let at = |i: usize| &values[i - 1];
        let base = if w.base_level == 0 {
            self.martingale.value(self.filtration().root())?
        } else {
            at(w.base_level).clone()
        };
        let sign = w.sign.factor();
        for r in 1..w.anchors.len() {
            let expected = &base + &sign * rational::int(r as i64 - 1);
            for i in w.anchors[r - 1].max(1)..w.anchors[r] {
                if at(i) != &expected {
                    return Ok(false);
                }
            }
        }
        let expected = &base + &sign * rational::int(w.stages.len() as i64);
        Ok(at(last) == &expected)
    }

    /// Anchor values `f_{m_r}(x)`.
    pub fn anchor_values(&self, w: &Witness) -> Result<Vec<Rational>> {
        let mut x = w.point.clone();
        let filt = self.filtration().clone();
        w.anchors
            .iter()
            .map(|&m| {
                let c = x.cell_at(&filt, m)?;
                self.martingale.value(c)
            })
            .collect()
    }

    /// Two-phase recurrence of the damped construction along a witness:
    /// away from the target the distance to `∓1` grows by `3/2`, then the
    /// distance to `±1` halves at every anchor. Values are constant between
    /// anchors.
    pub fn recurrence_holds(&self, w: &Witness) -> Result<bool> {
        let values = self.anchor_values(w)?;
        let one = Rational::one();
        let half = rational::ratio(1, 2);
        let three_halves = rational::ratio(3, 2);
        for pair in values.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            let ok = match w.sign {
                Sign::Plus if a.is_negative() => b + &one == &three_halves * (a + &one),
                Sign::Plus => &one - b == &half * (&one - a),
                Sign::Minus if a.is_positive() => &one - b == &three_halves * (&one - a),
                Sign::Minus => b + &one == &half * (a + &one),
            };
            if !ok {
                return Ok(false);
            }
        }
        // constant between consecutive anchors
        let mut x = w.point.clone();
        let last = *w.anchors.last().expect("anchors");
        let along = self.martingale.eval_along(&mut x, last)?;
        for win in w.anchors.windows(2) {
            for i in win[0].max(1)..win[1] {
                if along[i - 1] != along[win[0].max(1) - 1] {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }

    /// `‖f_{l+1} - f_l‖_p^p` at `l = p_j` (`at_b`) or `l = q_j`.
    pub fn increment_norm(&self, j: usize, at_b: bool, p: &Exponent) -> Result<Rational> {
        self.book.borrow_mut().ensure_stages(j)?;
        let (cell, _) = {
            let book = self.book.borrow();
            let s = book.stage(j);
            if at_b { (s.b, s.p) } else { (s.c, s.q) }
        };
        let filt = self.filtration().clone();
        let before = self.martingale.value(cell)?;
        let mut total = Rational::zero();
        for ch in filt.children(cell)? {
            let d = (self.martingale.value(ch)? - &before).abs();
            total += filt.mass(ch)
                * match p {
                    Exponent::One => d,
                    Exponent::Int(k) => rational::pow(&d, *k),
                    Exponent::Infinity | Exponent::Frac(_) => {
                        return Err(Error::param("increment norm needs an integer exponent"))
                    }
                };
        }
        Ok(total)
    }
}
