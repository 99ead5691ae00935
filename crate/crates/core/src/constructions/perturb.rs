//! Small `L^1` perturbations that lift a martingale above a level on a small
//! cell, and their iteration into a perturbation that diverges along a path.
//!
//! The general variant adds `α` on a cell `F` and `α'` on a sibling `F'`
//! from level `m` on. The singular variant adds the same pair at level `m`
//! and lets a mass-push cascade carry it, so the perturbation tends to zero
//! almost surely.

use std::rc::Rc;

use num::{One, Signed, Zero};

use crate::constructions::cascade::cascade_on;
use crate::error::{Error, Result};
use crate::filtration::{CellId, Extension, Filtration, KPoint};
use crate::martingale::{ClassTag, Exponent, LevelEval, Martingale};
use crate::rational::{self, Rational};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    General,
    Singular,
}

impl Variant {
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "general" => Ok(Variant::General),
            "singular" => Ok(Variant::Singular),
            other => Err(Error::Parse(format!("variant must be general or singular, got {other:?}"))),
        }
    }
}

/// Levels a convergent path may run without a value change before its
/// current value is taken as the limit, in multiples of the branching bound.
const SETTLE_FACTOR: usize = 4;
/// Levels allowed for the path mass to fall below a threshold, in
/// multiples of the branching bound per halving.
const MASS_FACTOR: usize = 64;

#[derive(Clone, Debug)]
pub struct Perturbation {
    pub g: Martingale,
    pub variant: Variant,
    pub n: usize,
    pub m: usize,
    /// `F`, where the perturbed martingale exceeds `omega`.
    pub f: CellId,
    /// `F'`, the compensating sibling.
    pub f_prime: CellId,
    pub alpha: Rational,
    pub alpha_prime: Rational,
    /// `|α'| P(F') + |α| P(F)`.
    pub norm: Rational,
    pub eps1: Rational,
    pub eps2: Option<Rational>,
    pub m1: usize,
    pub m2: usize,
    /// Limit of `f` along the oracle path.
    pub limit: Rational,
    /// `(f_m + g_m)(F)`.
    pub lifted: Rational,
    /// The oracle path, whose level-`m` cell is `F`.
    pub path: Vec<CellId>,
}

/// `α` on `F`, `α'` on `F'`, from level `m` on; zero elsewhere.
struct PairEval {
    f: CellId,
    f_prime: CellId,
    m: usize,
    alpha: Rational,
    alpha_prime: Rational,
}

impl PairEval {
    fn at(&self, filt: &Filtration, c: CellId) -> Rational {
        if filt.level(c) < self.m {
            Rational::zero()
        } else if filt.within(c, self.f) {
            self.alpha.clone()
        } else if filt.within(c, self.f_prime) {
            self.alpha_prime.clone()
        } else {
            Rational::zero()
        }
    }
}

impl LevelEval for PairEval {
    fn value(&self, filt: &Filtration, c: CellId, _: Option<&Rational>) -> Result<Rational> {
        Ok(self.at(filt, c))
    }
    fn constant_below(&self, filt: &Filtration, c: CellId) -> Result<Option<Rational>> {
        if filt.level(c) >= self.m {
            return Ok(Some(self.at(filt, c)));
        }
        let touches = filt.within(self.f, c) || filt.within(self.f_prime, c);
        Ok((!touches).then(Rational::zero))
    }
    fn l2_sq_bound(&self) -> Option<Rational> {
        let a = self.alpha.abs().max(self.alpha_prime.abs());
        Some(&a * &a)
    }
    fn describe(&self) -> String {
        format!(
            "pair(m={}, alpha={}, alpha'={})",
            self.m,
            rational::format(&self.alpha),
            rational::format(&self.alpha_prime)
        )
    }
}

fn uniform_part(f: &Martingale) -> Result<Option<Martingale>> {
    Ok(match f.tag() {
        ClassTag::UniformlyIntegrable => Some(f.clone()),
        ClassTag::Singular => None,
        ClassTag::Mixture { u, .. } => Some(u.clone()),
        ClassTag::Untagged => return Err(Error::MissingPathOracle),
    })
}

/// First level `> after` at which the path cell is lighter than at `after`.
fn next_split(path: &mut crate::martingale::OraclePath, filt: &Filtration, after: usize) -> Result<usize> {
    let reference = filt.mass(path.cell_at(after)?);
    for level in after + 1..=after + filt.branching_bound() {
        if filt.mass(path.cell_at(level)?) < reference {
            return Ok(level);
        }
    }
    Err(Error::AssumptionViolation {
        cell: filt.label(path.cell_at(after)?),
        detail: format!("no split within {} levels", filt.branching_bound()),
    })
}

/// Builds `g` with `g_1 = ... = g_n = 0`, `‖g‖_1 < eta`, and a cell `F ⊆ E`
/// of some level `m > n` with `(f_m + g_m)(F) > omega`.
pub fn perturb_l1(
    f: &Martingale,
    eta: &Rational,
    omega: &Rational,
    n: usize,
    e: CellId,
    variant: Variant,
) -> Result<Perturbation> {
    let filt = f.filtration().clone();
    if !eta.is_positive() || omega.is_negative() {
        return Err(Error::param("eta must be positive and omega non-negative"));
    }
    if filt.level(e) != n {
        return Err(Error::param(format!("cell {} is not on level {n}", filt.label(e))));
    }
    let u = uniform_part(f)?;
    if variant == Variant::Singular && !matches!(f.tag(), ClassTag::Singular) {
        return Err(Error::AssumptionViolation {
            cell: filt.label(e),
            detail: "singular variant needs a singular martingale".into(),
        });
    }
    let one = Rational::one();
    let two = rational::int(2);
    let nine_tenths = rational::ratio(9, 10);
    let quarter = eta / rational::int(4);
    let eps1 = match variant {
        Variant::General => {
            &nine_tenths * rational::min(&quarter, &(eta / (rational::int(8) * (omega + &two))))
        }
        Variant::Singular => &nine_tenths * rational::min(&quarter, &(eta / (&two * (omega + &one)))),
    };
    let below = filt.canonical_descendant(e, n + 1)?;
    let e1 = filt.find_small_descendant(below, &eps1)?;
    let m1 = filt.level(e1);

    // uniform integrability modulus from an L^2 bound (Cauchy-Schwarz)
    let (e2, eps2) = match variant {
        Variant::General => {
            let l2sq = match &u {
                None => Rational::zero(),
                Some(u) => u.l2_sq_bound().ok_or_else(|| Error::AssumptionViolation {
                    cell: filt.label(e),
                    detail: "no uniform integrability modulus for the uniformly integrable part".into(),
                })?,
            };
            let half = &eps1 / &two;
            let eps2 = if l2sq.is_zero() {
                half
            } else {
                let sixteenth = eta / rational::int(16);
                rational::min(&half, &(&sixteenth * &sixteenth / (&two * l2sq)))
            };
            (filt.find_small_descendant(e1, &eps2)?, Some(eps2))
        }
        Variant::Singular => (e1, None),
    };
    let m2_start = filt.level(e2);

    let mut path = f.convergent_path(e2)?;
    let (limit, settle) = path.settle(SETTLE_FACTOR * filt.branching_bound())?;
    let m2 = m2_start.max(settle);

    let (alpha, anchor) = match variant {
        Variant::General => {
            let alpha = limit.abs() + omega + &two;
            // first level where (|c| + omega + 2) P(F_k) < eta / 8
            let target = eta / rational::int(8);
            let mut k = m2;
            let max_level = m2 + MASS_FACTOR * filt.branching_bound() * (1 + bits_needed(&alpha, &target));
            while &alpha * filt.mass(path.cell_at(k)?) >= target {
                k += 1;
                if k > max_level {
                    return Err(Error::AssumptionViolation {
                        cell: filt.label(path.cell_at(m2)?),
                        detail: "path mass does not tend to zero".into(),
                    });
                }
            }
            (alpha, k)
        }
        Variant::Singular => (omega + &one, m2),
    };
    let m = next_split(&mut path, &filt, anchor)?;
    let f_cell = path.cell_at(m)?;
    let parent = path.cell_at(m - 1)?;
    let f_prime = filt
        .children(parent)?
        .into_iter()
        .find(|&c| c != f_cell)
        .expect("split has a sibling");
    let alpha_prime = -(&alpha * filt.mass(f_cell) / filt.mass(f_prime));
    let norm = alpha_prime.abs() * filt.mass(f_prime) + alpha.abs() * filt.mass(f_cell);
    if &norm >= eta {
        return Err(Error::AssumptionViolation {
            cell: filt.label(f_cell),
            detail: format!("perturbation norm {} is not below eta", rational::format(&norm)),
        });
    }
    let pair = PairEval {
        f: f_cell,
        f_prime,
        m,
        alpha: alpha.clone(),
        alpha_prime: alpha_prime.clone(),
    };
    let g = match variant {
        Variant::General => Martingale::new(filt.clone(), pair, ClassTag::UniformlyIntegrable),
        Variant::Singular => {
            let head = Martingale::new(filt.clone(), pair, ClassTag::Untagged);
            cascade_on(head, m)
        }
    };
    let lifted = f.value(f_cell)? + g.value(f_cell)?;
    if &lifted <= omega {
        return Err(Error::AssumptionViolation {
            cell: filt.label(f_cell),
            detail: format!(
                "lifted value {} does not exceed {}",
                rational::format(&lifted),
                rational::format(omega)
            ),
        });
    }
    Ok(Perturbation {
        g,
        variant,
        n,
        m,
        f: f_cell,
        f_prime,
        alpha,
        alpha_prime,
        norm,
        eps1,
        eps2,
        m1,
        m2,
        limit,
        lifted,
        path: path.cells()[..=m].to_vec(),
    })
}

/// Rough count of halvings for `alpha * 2^{-k} < target`.
fn bits_needed(alpha: &Rational, target: &Rational) -> usize {
    let ratio = alpha / target;
    let bits = ratio.numer().bits() as i64 - ratio.denom().bits() as i64 + 2;
    bits.max(1) as usize
}

#[derive(Clone, Debug)]
pub struct StageRecord {
    pub k: usize,
    pub m: usize,
    pub cell: CellId,
    pub norm: Rational,
    pub bound: Rational,
}

#[derive(Clone, Debug)]
pub struct DivergeNear {
    /// The perturbed martingale after all stages.
    pub g: Martingale,
    pub stages: Vec<StageRecord>,
    /// Sum of the stage perturbation norms, an upper bound for `‖f - g‖_1`.
    pub total_norm: Rational,
    pub point: KPoint,
}

/// Iterates [`perturb_l1`] with `omega = k` and budget `eta / 2^k` at
/// stage `k`, each stage starting at the previous stage's cell.
pub fn diverge_near(
    f: &Martingale,
    eta: &Rational,
    n: usize,
    e: CellId,
    variant: Variant,
    stages: usize,
) -> Result<DivergeNear> {
    let filt: Rc<Filtration> = f.filtration().clone();
    let mut current = f.clone();
    let mut level = n;
    let mut cell = e;
    let mut records = Vec::with_capacity(stages);
    let mut total = Rational::zero();
    for k in 1..=stages {
        let bound = eta * rational::pow2_neg(k as u32);
        let p = perturb_l1(&current, &bound, &rational::int(k as i64), level, cell, variant)?;
        current = Martingale::combine(&current, &p.g, Rational::one(), Rational::one())?;
        total += &p.norm;
        records.push(StageRecord { k, m: p.m, cell: p.f, norm: p.norm.clone(), bound });
        level = p.m;
        cell = p.f;
    }
    let point = KPoint::from_chain(&filt, filt.ancestry(cell), Extension::Canonical)?;
    Ok(DivergeNear { g: current, stages: records, total_norm: total, point })
}

/// `‖g_m‖_1` computed from the martingale itself, for cross-checking the
/// closed form.
pub fn measured_norm(p: &Perturbation, level: usize) -> Result<Rational> {
    Ok(p.g.lp_norm(level, &Exponent::One)?.exact.expect("exact"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rational::{int, ratio};

    #[test]
    fn singular_recipe_on_zero() {
        let f = Filtration::dyadic();
        let zero = Martingale::zero(f.clone());
        let e = f.cell_at(1, 0).unwrap();
        let p = perturb_l1(&zero, &int(1), &int(2), 1, e, Variant::Singular).unwrap();
        assert_eq!(p.alpha, int(3));
        assert_eq!(p.alpha_prime, int(-3));
        assert_eq!(f.mass(p.f), ratio(1, 16));
        assert_eq!(f.mass(p.f_prime), ratio(1, 16));
        assert_eq!(p.norm, ratio(3, 8));
        assert_eq!(p.lifted, int(3));
        assert!(f.within(p.f, e));
        for level in p.m..p.m + 6 {
            assert_eq!(measured_norm(&p, level).unwrap(), ratio(3, 8));
        }
        assert!(p.g.check(12).unwrap().passed());
        let table = p.g.ui_diagnostics(8, &[int(1)]).unwrap();
        assert_eq!(table.rows[3][0], ratio(1, 4));
        // (3·2^j - 1)·2^{-j}/8 after j cascade steps
        assert_eq!(table.rows[5][0], ratio(11, 32));
    }

    #[test]
    fn general_recipe_on_zero() {
        let f = Filtration::dyadic();
        let zero = Martingale::zero(f.clone()).retag(ClassTag::UniformlyIntegrable);
        let e = f.cell_at(2, 3).unwrap();
        let p = perturb_l1(&zero, &ratio(1, 2), &int(0), 2, e, Variant::General).unwrap();
        assert!(p.norm < ratio(1, 2));
        assert!(p.lifted > int(0));
        assert!(p.m > 2);
        assert!(p.g.check(p.m + 3).unwrap().passed());
        assert_eq!(measured_norm(&p, p.m + 2).unwrap(), p.norm);
    }

    #[test]
    fn untagged_is_rejected() {
        let f = Filtration::dyadic();
        let r = Martingale::rademacher(f.clone());
        assert!(matches!(
            perturb_l1(&r, &int(1), &int(1), 0, f.root(), Variant::General),
            Err(Error::MissingPathOracle)
        ));
    }

    #[test]
    fn three_stage_divergence() {
        let f = Filtration::dyadic();
        let zero = Martingale::zero(f.clone());
        let e = f.cell_at(1, 1).unwrap();
        let run = diverge_near(&zero, &int(1), 1, e, Variant::Singular, 3).unwrap();
        let mut x = run.point.clone();
        for s in &run.stages {
            let c = x.cell_at(&f, s.m).unwrap();
            assert!(run.g.value(c).unwrap() > int(s.k as i64));
        }
        assert!(run.total_norm < ratio(7, 8));
        assert!(run.g.check(run.stages[2].m + 2).unwrap().passed());
    }
}
