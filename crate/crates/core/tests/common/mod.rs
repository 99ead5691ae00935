//! Brute-force oracles shared by the integration tests. They walk cells
//! directly instead of going through blocks or stage bookkeeping.

#![allow(dead_code)]

use num::{Signed, Zero};

use ktree::martingale::Martingale;
use ktree::rational::{self, Rational};
use ktree::CellId;

/// Largest level width enumerated cell by cell.
pub const BRUTE_WIDTH: usize = 1 << 14;

/// `Σ P(D) |f_n(D)|^k` over every cell of level `n`.
pub fn power_sum(m: &Martingale, n: usize, k: u32) -> Rational {
    let filt = m.filtration();
    let cells = filt.level_cells(n).unwrap();
    assert!(cells.len() <= BRUTE_WIDTH, "level {n} too wide for brute force");
    cells
        .iter()
        .map(|&c| filt.mass(c) * rational::pow(&m.value(c).unwrap().abs(), k))
        .sum()
}

/// `max |f_n(D)|` over every cell of level `n`.
pub fn sup_abs(m: &Martingale, n: usize) -> Rational {
    let filt = m.filtration();
    let cells = filt.level_cells(n).unwrap();
    assert!(cells.len() <= BRUTE_WIDTH);
    cells.iter().map(|&c| m.value(c).unwrap().abs()).max().unwrap()
}

/// `Σ P |f_{l+1} - f_l|^k` over the children of every level-`l` cell.
pub fn increment_power(m: &Martingale, l: usize, k: u32) -> Rational {
    let filt = m.filtration();
    let cells = filt.level_cells(l + 1).unwrap();
    assert!(cells.len() <= BRUTE_WIDTH, "level {} too wide for brute force", l + 1);
    cells
        .iter()
        .map(|&d| {
            let before = m.value(filt.parent(d).unwrap()).unwrap();
            filt.mass(d) * rational::pow(&(m.value(d).unwrap() - before).abs(), k)
        })
        .sum()
}

/// The same sum restricted to the children of one cell.
pub fn increment_below(m: &Martingale, c: CellId, k: u32) -> Rational {
    let filt = m.filtration();
    let before = m.value(c).unwrap();
    filt.children(c)
        .unwrap()
        .into_iter()
        .map(|d| filt.mass(d) * rational::pow(&(m.value(d).unwrap() - &before).abs(), k))
        .sum()
}

/// `P(f_n != 0)`, by walking cells.
pub fn support(m: &Martingale, n: usize) -> Rational {
    let filt = m.filtration();
    let mut total = Rational::zero();
    let mut stack = vec![filt.root()];
    while let Some(c) = stack.pop() {
        let level = filt.level(c);
        let v = if level == n { Some(m.value(c).unwrap()) } else { m.constant_below(c).unwrap() };
        match v {
            Some(v) => {
                if !v.is_zero() {
                    total += filt.mass(c);
                }
            }
            None => stack.extend(filt.children(c).unwrap()),
        }
    }
    total
}

/// `Σ P |f_n|` by walking cells, for levels too wide to enumerate.
pub fn l1_walk(m: &Martingale, n: usize) -> Rational {
    let filt = m.filtration();
    let mut total = Rational::zero();
    let mut stack = vec![filt.root()];
    while let Some(c) = stack.pop() {
        let level = filt.level(c);
        let v = if level == n { Some(m.value(c).unwrap()) } else { m.constant_below(c).unwrap() };
        match v {
            Some(v) => total += filt.mass(c) * v.abs(),
            None => stack.extend(filt.children(c).unwrap()),
        }
    }
    total
}
