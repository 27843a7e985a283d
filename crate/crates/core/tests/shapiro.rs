use fusionbench::evalstat::shapiro_wilk;
use fusionbench::rng::CounterRng;
use serde::Deserialize;

#[derive(Deserialize)]
struct Case {
    values: Vec<f64>,
    w: f64,
    p: f64,
}

#[derive(Deserialize)]
struct Reference {
    sample_a: Case,
    sample_b: Case,
    extra: Vec<Case>,
}

fn reference() -> Reference {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/assets/shapiro_reference.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn check(case: &Case, tol: f64) {
    let r = shapiro_wilk(&case.values).unwrap();
    assert!(
        (r.w - case.w).abs() < tol && (r.p - case.p).abs() < tol,
        "n={}: got W={} p={}, reference W={} p={}",
        case.values.len(),
        r.w,
        r.p,
        case.w,
        case.p
    );
}

#[test]
fn frozen_fixtures_match_reference() {
    let r = reference();
    check(&r.sample_a, 1e-3);
    check(&r.sample_b, 1e-3);
    assert_eq!(r.sample_a.values.len(), 12);
    assert_eq!(r.sample_b.values.len(), 50);
    assert!(shapiro_wilk(&r.sample_b.values).unwrap().p > 0.05);
}

#[test]
fn every_branch_matches_reference_closely() {
    for case in reference().extra {
        check(&case, 1e-5);
    }
}

#[test]
fn null_rejection_rate_is_plausible() {
    let rejections = (0..200u64)
        .filter(|&s| {
            let mut rng = CounterRng::new(1000 + s);
            let x: Vec<f64> = (0..50).map(|_| rng.normal()).collect();
            shapiro_wilk(&x).unwrap().p < 0.05
        })
        .count();
    assert!((2..=25).contains(&rejections), "{rejections}");
}
