mod common;

use num::{One, Zero};
use proptest::prelude::*;

use ktree::analysis::{divergence_certificate, Target, Truncation};
use ktree::constructions::cascade::mass_push_cascade;
use ktree::filtration::{Extend, Generator};
use ktree::martingale::{ClassTag, Exponent, LevelFunction, Martingale};
use ktree::rational::{self, int, ratio, Rational};
use ktree::Filtration;

fn small_rational() -> impl Strategy<Value = Rational> {
    (-40i64..=40, 1i64..=12).prop_map(|(n, d)| ratio(n, d))
}

/// Child fractions for one cell: 2 or 3 positive parts summing to one.
fn fractions() -> impl Strategy<Value = Vec<Rational>> {
    prop::collection::vec(1i64..=5, 2..=3).prop_map(|w| {
        let total: i64 = w.iter().sum();
        w.into_iter().map(|x| ratio(x, total)).collect()
    })
}

/// Explicit generator alternating two splitting rules by child position.
fn explicit_filtration() -> impl Strategy<Value = std::rc::Rc<Filtration>> {
    (fractions(), fractions()).prop_map(|(a, b)| {
        let second = (0..a.len()).map(|i| if i % 2 == 0 { b.clone() } else { a.clone() }).collect();
        let levels = vec![vec![a], second];
        Filtration::new(Generator::Explicit { levels, extend: Extend::RepeatPattern }, 8).unwrap()
    })
}

fn random_martingale(filt: &std::rc::Rc<Filtration>, level: usize, seedvals: &[Rational]) -> Martingale {
    let width = filt.level_cells(level).unwrap().len();
    let values = (0..width).map(|i| seedvals[i % seedvals.len()].clone()).collect();
    Martingale::from_level_function(filt.clone(), LevelFunction { level, values }, ClassTag::Untagged).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rational_round_trip(n in -10_000i64..10_000, d in 1i64..10_000) {
        let r = ratio(n, d);
        prop_assert_eq!(rational::parse(&rational::format(&r)).unwrap(), r);
    }

    #[test]
    fn level_masses_sum_to_one(filt in explicit_filtration(), depth in 1usize..7) {
        let report = filt.validate_assumptions(depth);
        prop_assert!(report.passed(), "{:?}", report.failure);
        for l in 0..=depth {
            let total: Rational = filt.level_cells(l).unwrap().iter().map(|&c| filt.mass(c)).sum();
            prop_assert!(total.is_one());
        }
    }

    #[test]
    fn level_functions_extend_to_martingales(
        filt in explicit_filtration(),
        level in 1usize..5,
        vals in prop::collection::vec(small_rational(), 1..8),
    ) {
        let m = random_martingale(&filt, level, &vals);
        prop_assert!(m.check(level + 3).unwrap().passed());
        // E(f_level | Σ_l) = f_l, computed by hand
        for l in 0..level {
            for &c in filt.level_cells(l).unwrap().iter() {
                let below = filt.descendants_at(c, level).unwrap();
                let avg: Rational = below.iter().map(|&d| filt.mass(d) * m.value(d).unwrap()).sum::<Rational>()
                    / filt.mass(c);
                prop_assert_eq!(avg, m.value(c).unwrap());
            }
        }
    }

    #[test]
    fn lp_powers_are_nondecreasing(
        filt in explicit_filtration(),
        vals in prop::collection::vec(small_rational(), 1..8),
        k in 1u32..4,
    ) {
        let m = random_martingale(&filt, 4, &vals);
        let mut prev = Rational::zero();
        for n in 0..=6 {
            let oracle = common::power_sum(&m, n, k);
            let exp = if k == 1 { Exponent::One } else { Exponent::Int(k) };
            let norm = m.lp_norm(n, &exp).unwrap();
            prop_assert_eq!(norm.comparable(), Some(&oracle));
            prop_assert!(oracle >= prev);
            prev = oracle;
        }
    }

    #[test]
    fn dual_formula_matches_brute_force(vals in prop::collection::vec(small_rational(), 8)) {
        let filt = Filtration::dyadic();
        let m = random_martingale(&filt, 3, &vals);
        for exp in [Exponent::One, Exponent::Int(2), Exponent::Infinity] {
            let d = m.dual_norm_check(3, &exp).unwrap();
            prop_assert!(d.passed(), "{:?}", d);
        }
    }

    #[test]
    fn combinations_are_pointwise(
        a in prop::collection::vec(small_rational(), 4),
        b in prop::collection::vec(small_rational(), 4),
        alpha in small_rational(),
        beta in small_rational(),
    ) {
        let filt = Filtration::biased(ratio(1, 3)).unwrap();
        let f = random_martingale(&filt, 2, &a);
        let g = random_martingale(&filt, 3, &b);
        let h = Martingale::combine(&f, &g, alpha.clone(), beta.clone()).unwrap();
        prop_assert!(h.check(6).unwrap().passed());
        for &c in filt.level_cells(4).unwrap().iter() {
            prop_assert_eq!(h.value(c).unwrap(), &alpha * f.value(c).unwrap() + &beta * g.value(c).unwrap());
        }
    }

    #[test]
    fn sampling_is_reproducible(seed in any::<u64>(), depth in 1usize..30) {
        let filt = Filtration::biased(ratio(2, 7)).unwrap();
        let a = filt.sample_point(depth, seed).unwrap();
        let b = filt.sample_point(depth, seed).unwrap();
        prop_assert_eq!(a.prefix(), b.prefix());
        for w in a.prefix().windows(2) {
            prop_assert_eq!(filt.parent(w[1]), Some(w[0]));
        }
    }

    #[test]
    fn cascade_keeps_norm_and_halves_support(vals in prop::collection::vec(small_rational(), 4)) {
        let filt = Filtration::dyadic();
        let start = LevelFunction { level: 2, values: vals };
        let norm = start.norm(&filt, &Exponent::One).unwrap().exact.unwrap();
        let h = mass_push_cascade(filt.clone(), start).unwrap();
        prop_assert!(h.check(10).unwrap().passed());
        let mut prev = common::support(&h, 2);
        for n in 3..=10 {
            prop_assert_eq!(common::power_sum(&h, n, 1), norm.clone());
            let s = common::support(&h, n);
            prop_assert_eq!(&s * int(2), prev);
            prev = s;
        }
    }

    #[test]
    fn certificates_replay(vals in prop::collection::vec(small_rational(), 8), seed in any::<u64>()) {
        let filt = Filtration::dyadic();
        let m = random_martingale(&filt, 3, &vals);
        let x = filt.sample_point(10, seed).unwrap();
        let target = Target::OscAtLeast(Rational::one());
        let cert = divergence_certificate(&m, &x, target, Truncation::at(10)).unwrap();
        prop_assert!(cert.replay(&m).unwrap());
        // frozen past level 3: oscillation on [4, 10] is zero
        prop_assert!(!cert.passed());
        prop_assert!(cert.evidence[2..].iter().all(|(_, v)| v == &cert.evidence[2].1));
    }

    #[test]
    fn spike_lifts_norm_to_one(vals in prop::collection::vec(small_rational(), 4)) {
        let filt = Filtration::dyadic();
        let raw = LevelFunction { level: 2, values: vals };
        let norm = raw.norm(&filt, &Exponent::One).unwrap().exact.unwrap();
        prop_assume!(!norm.is_zero());
        // scale into the unit ball
        let scale = if norm > Rational::one() { norm.recip() } else { Rational::one() };
        let values = raw.values.iter().map(|v| v * &scale).collect();
        let anchor = Martingale::from_level_function(filt.clone(), LevelFunction { level: 2, values }, ClassTag::Untagged).unwrap();
        let mut state = ktree::game::GameState::new(filt.clone());
        let mv = ktree::game::BasicOpenSet::new(anchor.clone(), 2, ratio(1, 10)).unwrap();
        state.respond(mv).unwrap();
        let s = &state.stages[0];
        prop_assert_eq!(common::power_sum(&s.g, s.q, 1), int(1));
        for &c in filt.level_cells(2).unwrap().iter() {
            prop_assert_eq!(s.g.value(c).unwrap(), anchor.value(c).unwrap());
        }
        prop_assert!(s.g.check(s.q + 4).unwrap().passed());
        let ch = filt.children(s.spike_cell).unwrap();
        let balance = filt.mass(ch[0]) * &s.spike.0 + filt.mass(ch[1]) * &s.spike.1;
        prop_assert_eq!(balance, filt.mass(s.spike_cell) * s.g.value(s.spike_cell).unwrap());
    }
}
