//! Regression: the frozen synthetic incidence file must keep calibrating to
//! the aggregate rates that generated it.

use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use rossviab_core::estimation::{
    fit, incidence_to_prevalence, FitProblem, FitTolerances, IncidenceSeries, ParamBounds, Theta,
};

fn data_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/synthetic_incidence.csv")
}

#[test]
fn frozen_synthetic_dataset_recovers_the_generating_aggregates() {
    let file = File::open(data_path()).unwrap();
    let incidence = IncidenceSeries::from_csv(BufReader::new(file), 2_400_000.0).unwrap();
    assert_eq!(incidence.new_cases.len(), 61);
    let data = incidence_to_prevalence(&incidence, 10).unwrap();

    let problem = FitProblem {
        theta0: Theta { alpha: 1.0, p_m: 0.5, p_h: 0.5, xi: 1.0, delta: 0.035 },
        bounds: ParamBounds::reference(),
        data,
        m0_ratio: 3.0,
        gamma: 0.1,
        substeps: 100,
        tolerances: FitTolerances::default(),
    };
    let result = fit(&problem).unwrap();

    // generating values: alpha p_m = 0.076608, alpha p_h xi = 0.0722633
    let rel_m = (result.aggregates.a_m - 0.076608).abs() / 0.076608;
    let rel_h = (result.aggregates.a_h - 0.0722633).abs() / 0.0722633;
    assert!(rel_m < 0.02, "a_m {} off by {rel_m:.4}", result.aggregates.a_m);
    assert!(rel_h < 0.02, "a_h {} off by {rel_h:.4}", result.aggregates.a_h);
}
