use l2morse::betti::{
    character_average, finite_cover_betti, floquet_betti, heat_betti, invariance_check, FloquetOptions, HeatOptions,
    DEFAULT_KER_TOL, DEFAULT_RANK_TOL,
};
use l2morse::complex::{assemble_cover, BaseComplex};
use l2morse::group::GroupModel;
use l2morse::morse::CellFunction;

fn bases() -> Vec<BaseComplex> {
    vec![BaseComplex::circle(3).unwrap(), BaseComplex::torus(2, 2).unwrap(), BaseComplex::torus(3, 3).unwrap()]
}

#[test]
fn characters_match_finite_covers_for_every_builtin() {
    for base in bases() {
        for n in [2u64, 3, 4, 6] {
            let avg = character_average(&base, n, DEFAULT_KER_TOL, None).unwrap();
            let fc = finite_cover_betti(&base, n, DEFAULT_RANK_TOL, None).unwrap();
            for (a, b) in avg.iter().zip(&fc.values) {
                assert!((a - b).abs() <= 1e-9, "N={n}: {avg:?} vs {:?}", fc.values);
            }
            assert!((fc.euler() - base.euler_characteristic() as f64).abs() <= 1e-9);
        }
    }
}

#[test]
fn floquet_reports_satisfy_euler_poincare() {
    let opts = FloquetOptions { samples: 24, seed: 9, ..Default::default() };
    for (base, rank) in [(BaseComplex::circle(5).unwrap(), 1), (BaseComplex::torus(2, 3).unwrap(), 2)] {
        let rep = floquet_betti(&base, &GroupModel::lattice(rank).unwrap(), &opts).unwrap();
        assert!((rep.euler() - base.euler_characteristic() as f64).abs() <= 1e-9);
        assert!(rep.to_csv().starts_with("degree,value,method,tolerance,samples\n0,0.0000000000000000e0,floquet,"));
    }
}

#[test]
fn cyclic_heat_traces_approach_the_finite_cover_value() {
    let cov = assemble_cover(&BaseComplex::circle(3).unwrap(), GroupModel::cyclic(4).unwrap(), 0).unwrap();
    let opts = HeatOptions { eps: 1e-10, folner_k: 1, deformation: None };
    let rep = heat_betti(&cov, &[0.0, 8.0, 16.0, 32.0, 64.0], 0..=1, &opts).unwrap();
    for d in &rep.degrees {
        assert_eq!(d.averages[0].1, 3.0);
        let last = d.averages.last().unwrap().1;
        assert!((last - 0.25).abs() < 1e-6, "degree {}: {last}", d.degree);
        let (a, _, q) = d.fit.unwrap();
        assert!((a - 0.25).abs() < 1e-6 && q < 1.0);
    }
    assert!(rep.report.euler().abs() < 1e-6);
}

#[test]
fn zero_function_is_trivially_invariant() {
    let cov = assemble_cover(&BaseComplex::torus(2, 2).unwrap(), GroupModel::lattice(2).unwrap(), 2).unwrap();
    let f = CellFunction::zero(&cov);
    let rep = invariance_check(&cov, &f, &[1.0, 5.0], &FloquetOptions { samples: 16, ..Default::default() }, DEFAULT_RANK_TOL).unwrap();
    assert!(rep.pass);
    assert_eq!(rep.reference, vec![0.0, 0.0, 0.0]);
}
