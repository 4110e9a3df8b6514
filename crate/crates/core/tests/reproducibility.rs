//! Estimates do not depend on the number of worker threads.

use gwpark::distributions::{make_law, DistSpec, LawHandle};
use gwpark::montecarlo::*;

fn law(s: &str) -> LawHandle {
    make_law(&DistSpec::parse_shorthand(s).unwrap()).unwrap()
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(f)
}

#[derive(Debug, PartialEq)]
struct Everything {
    flux: CappedEstimate,
    conditioned: ConditionedFlux,
    direct: FluxDistribution,
    walk: (FluxDistribution, Estimate),
    spinal: SpinalReport,
    sweep: Vec<SweepRow>,
}

fn everything() -> Everything {
    let nu = law("poisson:1");
    let cars = law("poisson:0.3");
    let w = estimate_flux_infinite_walk(&nu, &cars, &WalkConfig::new(30, 500, 1_000, 3)).unwrap();
    Everything {
        flux: estimate_mean_flux(&nu, &cars, 3_000, 2_000, 3).unwrap(),
        conditioned: estimate_flux_conditioned(&nu, &cars, 300, 100, 3).unwrap(),
        direct: estimate_flux_infinite_direct(&nu, &cars, &InfiniteConfig::new(30, 500, 3))
            .unwrap(),
        walk: (w.distribution, w.z_mean),
        spinal: spinal_check(
            &nu,
            SpinalFunctional::HeightTopSize {
                height: 2,
                top_size: 2,
            },
            5_000,
            3,
        )
        .unwrap(),
        sweep: sweep(
            &nu,
            CarFamily::Geometric,
            &[0.1, 0.3],
            &SweepConfig {
                reps: 500,
                cap: 5_000,
                conditioned_n: Some(100),
                conditioned_reps: 10,
                seed: 3,
            },
        ),
    }
}

#[test]
fn identical_across_thread_counts() {
    let one = in_pool(1, everything);
    assert_eq!(one, in_pool(4, everything));
    assert_eq!(one, in_pool(7, everything));
}
