use covadj::simulation::*;
fn main() {
    for hw in [2.0, 4.0, 10.0] {
        let dgp = DgpSpec::new(
            DgpKind::Sinusoidal(SinusoidalParams {
                half_width: hw,
                ..Default::default()
            }),
            5000,
            0.5,
        )
        .unwrap();
        let r = run_monte_carlo(&dgp, &sinusoidal_estimators(), &McOptions::new(600, 77)).unwrap();
        for s in &r.summary.estimators {
            println!(
                "hw {hw} {} SE/SD {:.3} cov {:.3}",
                s.label,
                (s.mean_sandwich_variance.unwrap() / s.empirical_variance.unwrap()).sqrt(),
                s.coverage.unwrap()
            );
        }
    }
}
