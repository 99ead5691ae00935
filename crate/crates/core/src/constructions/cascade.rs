//! Mass-push cascade: past a given level, every split moves the whole value
//! of a cell onto one minimum-mass child, scaled by `P(D)/P(D')`, and zeroes
//! the other children. The `L^1` norm is preserved while the support shrinks
//! by at least half at every split, so the martingale tends to zero almost
//! surely.

use std::rc::Rc;

use num::Zero;

use crate::error::Result;
use crate::filtration::{CellId, Filtration};
use crate::martingale::{ClassTag, LevelEval, LevelFunction, Martingale};
use crate::rational::Rational;

/// Cascade on top of `head`, which supplies the values up to level `from`.
pub struct CascadeEval {
    pub head: Martingale,
    pub from: usize,
}

impl CascadeEval {
    /// Value at `c` (level `>= from`) without memo: follow the minimum-mass
    /// chain down from the ancestor at `from`.
    fn direct_value(&self, filt: &Filtration, c: CellId) -> Result<Rational> {
        let chain = filt.ancestry(c);
        let top = chain[self.from];
        let mut value = self.head.value(top)?;
        for w in chain[self.from..].windows(2) {
            if value.is_zero() {
                break;
            }
            let (p, d) = (w[0], w[1]);
            if filt.children(p)?.len() > 1 {
                if filt.min_mass_child(p)? != d {
                    value = Rational::zero();
                } else {
                    value = value * filt.mass(p) / filt.mass(d);
                }
            }
        }
        Ok(value)
    }
}

impl LevelEval for CascadeEval {
    fn value(&self, filt: &Filtration, c: CellId, parent: Option<&Rational>) -> Result<Rational> {
        let level = filt.level(c);
        if level <= self.from {
            return self.head.value(c);
        }
        let pv = parent.expect("non-root");
        if pv.is_zero() {
            return Ok(Rational::zero());
        }
        let p = filt.parent(c).expect("non-root");
        if filt.children(p)?.len() == 1 {
            return Ok(pv.clone());
        }
        if filt.min_mass_child(p)? == c {
            Ok(pv * filt.mass(p) / filt.mass(c))
        } else {
            Ok(Rational::zero())
        }
    }

    fn constant_below(&self, filt: &Filtration, c: CellId) -> Result<Option<Rational>> {
        if filt.level(c) >= self.from {
            let v = self.direct_value(filt, c)?;
            return Ok(v.is_zero().then(Rational::zero));
        }
        match self.head.constant_below(c)? {
            Some(v) if v.is_zero() => Ok(Some(v)),
            _ => Ok(None),
        }
    }

    fn describe(&self) -> String {
        format!("cascade(from={}, head={})", self.from, self.head.describe())
    }
}

/// Cascade started from a level function on `D_from`; levels below `from`
/// carry its conditional expectations.
pub fn mass_push_cascade(filt: Rc<Filtration>, start: LevelFunction) -> Result<Martingale> {
    let from = start.level;
    let head = Martingale::from_level_function(filt.clone(), start, ClassTag::Untagged)?;
    Ok(cascade_on(head, from))
}

/// Cascade tail glued below level `from` of `head`.
pub fn cascade_on(head: Martingale, from: usize) -> Martingale {
    let filt = head.filtration().clone();
    Martingale::new(filt, CascadeEval { head, from }, ClassTag::Singular)
}
