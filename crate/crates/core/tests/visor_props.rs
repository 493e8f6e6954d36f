mod common;

use num_traits::ToPrimitive;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;
use plembed::plmap::PLMap;
use plembed::visor::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(120))]

    #[test]
    fn search_agrees_with_grid_oracle(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, z) = random_instance_with_visor(&mut rng, 8, 12);
        let den = lcm_den(&f, &z).to_i64().unwrap() * 4;
        let oracle = GridOracle::new(&f, &z, den);
        let v = random_visor(&mut rng, &f, &z, den).unwrap();
        let found = removal_search(&f, &z, &v).unwrap();
        prop_assert_eq!(found.is_some(), oracle.removable(&v));
        if let Some(t) = found {
            prop_assert!(removes(&f, &z, &v, &t));
            // a_v may be an off-grid level crossing; b_v is always a breakpoint
            // or marked point, so it lies on the grid
            let (a, b) = oracle.minimal_pair(&v).unwrap();
            prop_assert!(a <= t.a);
            prop_assert_eq!(&t.b, &b);
            // the greatest target need not lie on the grid
            let grid_c = oracle.max_c(&v, &a, &b).unwrap();
            prop_assert!(grid_c <= t.c);
        }
    }

    #[test]
    fn scan_oracle_agrees_with_grid_oracle(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, z) = random_instance_with_visor(&mut rng, 8, 12);
        let den = lcm_den(&f, &z).to_i64().unwrap() * 4;
        let grid = GridOracle::new(&f, &z, den);
        let scan = ScanOracle::new(&f, &z, den);
        for _ in 0..4 {
            let v = random_visor(&mut rng, &f, &z, den).unwrap();
            prop_assert_eq!(scan.removable(&v), grid.removable(&v));
        }
    }

    #[test]
    fn minimal_interval_shape_and_order_independence(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, z) = random_instance_with_visor(&mut rng, 8, 64);
        for cell in visor_cells(&f, &z).unwrap() {
            let v = cell.representative();
            let inward = minimal_removal_interval_ordered(&f, &z, &v, SearchOrder::Inward);
            let outward = minimal_removal_interval_ordered(&f, &z, &v, SearchOrder::Outward);
            prop_assert_eq!(&inward, &outward);
            if let Ok(mi) = inward {
                prop_assert!(interval_shape_ok(&f, &mi.a, &mi.b));
                let t = RemovalTriple { a: mi.a.clone(), b: mi.b.clone(), c: mi.witness_c.clone() };
                prop_assert!(removes(&f, &z, &v, &t));
            }
        }
    }

    #[test]
    fn valid_pairs_are_directed(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, z) = random_instance_with_visor(&mut rng, 8, 32);
        let v = random_visor(&mut rng, &f, &z, 32).unwrap();
        let pairs = valid_pairs(&f, &z, &v).unwrap();
        for p in &pairs {
            prop_assert!(removes(&f, &z, &v, p));
            for q in &pairs {
                let lo = (&p.a).max(&q.a);
                let hi = (&p.b).min(&q.b);
                prop_assert!(pairs.iter().any(|w| &w.a >= lo && &w.b <= hi));
            }
        }
    }

    #[test]
    fn minimal_intervals_do_not_overlap(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, z) = random_instance_with_visor(&mut rng, 8, 64);
        let ivs: Vec<MinimalInterval> = visor_cells(&f, &z)
            .unwrap()
            .iter()
            .filter_map(|c| minimal_removal_interval(&f, &z, &c.representative()).ok())
            .collect();
        for x in &ivs {
            for y in &ivs {
                let meet = x.a.clone().max(y.a.clone()) < x.b.clone().min(y.b.clone());
                if meet {
                    prop_assert_eq!((&x.a, &x.b), (&y.a, &y.b));
                }
            }
        }
    }

    #[test]
    fn family_invariants(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, z) = random_instance_with_visor(&mut rng, 8, 32);
        let report = all_visors_removable(&f, &z).unwrap();
        let fam = choose_visor_family(&f, &z);
        prop_assert_eq!(report.removable, fam.is_ok());
        if let Ok(fam) = fam {
            let fam = assign_targets(&f, &z, &fam).unwrap();
            prop_assert!(targets_coherent(&fam));
            for m in &fam.members {
                prop_assert_eq!(f.eval_unchecked(&m.v), f.max_on(&m.interval.a, &m.interval.b));
                prop_assert!(is_target(&f, &z, m, m.target.as_ref().unwrap()));
            }
            // every visor cell is covered by some member interval
            for cell in visor_cells(&f, &z).unwrap() {
                let v = cell.representative();
                prop_assert!(fam.members.iter().any(|m| m.interval.a < v && v < m.interval.b));
            }
        }
    }

    #[test]
    fn monotone_maps_have_no_visors(ys in proptest::collection::vec(0i64..=16, 2..7), zk in proptest::collection::btree_set(0i64..=16, 1..4)) {
        let mut ys = ys;
        ys.sort();
        let n = ys.len() as i64 - 1;
        let pts = ys.iter().enumerate().map(|(i, &y)| (r(i as i64, n), r(y, 16))).collect();
        let f = PLMap::new(pts).unwrap();
        let z = MarkedSet::new(zk.iter().map(|&k| r(k, 16)).collect()).unwrap();
        if check_order(&f, &z).is_ok() {
            prop_assert!(visor_components(&f, &z).unwrap().is_empty());
        }
    }
}
