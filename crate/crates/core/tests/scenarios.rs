mod common;

use num::{One, Signed};

use ktree::constructions::{diverge_near, perturb_l1, Variant};
use ktree::game::{opening_move, run_game, shifted, tail_mass_check, validate_move, Passive, RandomPlayer, Scripted};
use ktree::martingale::{ClassTag, LevelFunction, Martingale};
use ktree::rational::{int, ratio, Rational};
use ktree::{Error, Filtration};

#[test]
fn opening_answer_on_the_dyadic_tree() {
    let filt = Filtration::dyadic();
    let state = run_game(filt.clone(), &mut Scripted::new(vec![opening_move()]), 1).unwrap();
    let s = state.stage(1).unwrap();
    assert_eq!((s.q, s.m), (3, 3));
    assert_eq!(s.spike, (int(4), int(-4)));
    assert_eq!(s.delta, ratio(1, 20));
    // ‖g_3‖_1 = 2 · 1/8 · 4
    assert_eq!(common::power_sum(&s.g, 3, 1), int(1));
    assert_eq!(common::support(&s.g, 3), ratio(1, 4));
}

#[test]
fn answers_shrink_inside_each_move() {
    for seed in [1, 2] {
        let filt = Filtration::dyadic();
        let state = run_game(filt, &mut RandomPlayer::new(seed), 4).unwrap();
        assert_eq!(state.stages.len(), 4);
        for pair in state.transcript.windows(2) {
            assert!(validate_move(&pair[0].1, &pair[1].1).unwrap());
        }
        for s in &state.stages {
            let k = s.k as i64;
            assert!(s.delta <= ratio(1, 2 * k * k));
            assert!(common::support(&s.g, s.m) < ratio(1, k));
            assert!(common::l1_walk(&s.g, s.q) <= Rational::one());
        }
    }
}

#[test]
fn tail_bounds_hold_for_shifted_answers() {
    let filt = Filtration::dyadic();
    let state = run_game(filt, &mut Passive, 3).unwrap();
    for k in 1..=3 {
        let rec = state.stage(k).unwrap();
        for h in [rec.g.clone(), shifted(&rec.g, &rec.delta / int(2)).unwrap()] {
            let t = tail_mass_check(&state, &h, k, rec.m + 4, rec.m + 4).unwrap();
            assert!(t.passed(), "stage {k}: {t:?}");
        }
        let far = shifted(&rec.g, rec.delta.clone()).unwrap();
        assert!(matches!(
            tail_mass_check(&state, &far, k, rec.m, rec.m),
            Err(Error::NotInResponseSet { .. })
        ));
    }
}

#[test]
fn single_perturbation_from_zero() {
    let filt = Filtration::dyadic();
    let f = Martingale::zero(filt.clone());
    let e = filt.cell_at(1, 0).unwrap();
    let p = perturb_l1(&f, &int(1), &int(2), 1, e, Variant::Singular).unwrap();
    assert_eq!(p.alpha, int(3));
    assert_eq!(p.alpha_prime, int(-3));
    assert_eq!(filt.mass(p.f), ratio(1, 16));
    assert!(filt.within(p.f, e));
    // g vanishes through level n and is ±α on F, F′ from level m on
    assert_eq!(common::sup_abs(&p.g, 1), int(0));
    assert_eq!(p.g.value(p.f).unwrap(), p.alpha);
    assert_eq!(p.g.value(p.f_prime).unwrap(), p.alpha_prime);
    assert_eq!(filt.level(p.f), p.m);
    assert!(p.g.value(p.f).unwrap() > int(2));
    // the cascade keeps the norm and halves the support at each level
    let mut support = common::support(&p.g, p.m);
    for level in p.m + 1..=p.m + 4 {
        assert_eq!(common::power_sum(&p.g, level, 1), ratio(3, 8));
        let next = common::support(&p.g, level);
        assert_eq!(&next * int(2), support);
        support = next;
    }
    assert!(p.g.check(p.m + 4).unwrap().passed());
}

#[test]
fn general_perturbation_of_a_nonzero_martingale() {
    let filt = Filtration::dyadic();
    let h = LevelFunction { level: 2, values: vec![ratio(1, 2), ratio(-1, 2), int(0), int(1)] };
    let f = Martingale::from_level_function(filt.clone(), h, ClassTag::UniformlyIntegrable).unwrap();
    let e = filt.cell_at(2, 3).unwrap();
    let eta = ratio(1, 4);
    let p = perturb_l1(&f, &eta, &int(5), 2, e, Variant::General).unwrap();
    let level = p.m + 2;
    assert!(common::l1_walk(&p.g, level) < eta);
    let sum = Martingale::combine(&f, &p.g, Rational::one(), Rational::one()).unwrap();
    for c in filt.descendants_at(p.f, level).unwrap() {
        assert!(sum.value(c).unwrap() > int(5));
    }
    assert_eq!(common::sup_abs(&p.g, 2), int(0));
}

#[test]
fn iterated_perturbation_grows_along_its_path() {
    let filt = Filtration::dyadic();
    let f = Martingale::zero(filt.clone());
    let e = filt.cell_at(1, 1).unwrap();
    let d = diverge_near(&f, &int(1), 1, e, Variant::Singular, 3).unwrap();
    assert!(d.total_norm < int(1));
    let mut point = d.point.clone();
    for (i, s) in d.stages.iter().enumerate() {
        assert!(s.norm < s.bound);
        if i > 0 {
            assert!(filt.within(s.cell, d.stages[i - 1].cell));
        }
        let level = filt.level(s.cell);
        let v = d.g.value(point.cell_at(&filt, level).unwrap()).unwrap();
        assert!(v.abs() > int(s.k as i64), "stage {}: {v}", s.k);
    }
    let last = filt.level(d.stages.last().unwrap().cell);
    assert!(common::l1_walk(&d.g, last) <= d.total_norm);
}
