//! Parking dynamics on a plane tree.
//!
//! Cars arriving at a vertex park there if it is free and otherwise drive
//! towards the root, taking the first free vertex on the way; cars that find
//! none leave through the root. By the Abelian property the final occupancy
//! and the flux do not depend on the order in which cars are driven, so
//! [`park`] computes them in one leaves-to-root pass:
//!
//! ```text
//! out(v) = (ℓ(v) + Σ_{c child of v} out(c) - 1)⁺
//! ```
//!
//! [`park_sequential`] drives cars one at a time and shares no code with it.

use thiserror::Error;

use crate::distributions::LawHandle;
use crate::rng::RngStream;
use crate::trees::Tree;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParkError {
    #[error("labels cover {labels} nodes but the tree has {nodes}")]
    LabelMismatch { labels: usize, nodes: usize },
    #[error("car order is not a permutation of 0..{cars}")]
    BadPermutation { cars: usize },
    #[error("labels carry no arrival times")]
    MissingTimes,
}

/// Number of cars arriving at each node, indexed by node id, with optional
/// arrival times in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CarLabels {
    pub counts: Vec<u32>,
    pub times: Option<Vec<f64>>,
}

impl CarLabels {
    pub fn new(counts: Vec<u32>) -> Self {
        CarLabels {
            counts,
            times: None,
        }
    }

    pub fn total_cars(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    /// Labels `1{A_x <= t}·ℓ(x)`.
    pub fn thinned(&self, t: f64) -> Result<CarLabels, ParkError> {
        let times = self.times.as_ref().ok_or(ParkError::MissingTimes)?;
        let counts = self
            .counts
            .iter()
            .zip(times)
            .map(|(&c, &a)| if a <= t { c } else { 0 })
            .collect();
        Ok(CarLabels::new(counts))
    }
}

/// Outcome of parking all cars.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParkingResult {
    /// Cars leaving through the root.
    pub flux: u64,
    pub occupied: Vec<bool>,
    /// Cars crossing the edge from each node to its parent; the root entry
    /// is always zero (its outflow is `flux`).
    pub edge_flux: Vec<u64>,
}

impl ParkingResult {
    pub fn occupied_count(&self) -> usize {
        self.occupied.iter().filter(|&&o| o).count()
    }
}

/// Draws i.i.d. arrival counts, in node-id order.
pub fn assign_arrivals(tree: &Tree, cars: &LawHandle, rng: &mut RngStream) -> CarLabels {
    let counts = (0..tree.len()).map(|_| cars.sample(rng) as u32).collect();
    CarLabels::new(counts)
}

/// Draws i.i.d. arrival counts, then i.i.d. uniform arrival times.
pub fn assign_arrivals_with_times(tree: &Tree, cars: &LawHandle, rng: &mut RngStream) -> CarLabels {
    let mut labels = assign_arrivals(tree, cars, rng);
    labels.times = Some((0..tree.len()).map(|_| rng.uniform()).collect());
    labels
}

fn check_cover(tree: &Tree, labels: &CarLabels) -> Result<(), ParkError> {
    if labels.counts.len() != tree.len() {
        return Err(ParkError::LabelMismatch {
            labels: labels.counts.len(),
            nodes: tree.len(),
        });
    }
    Ok(())
}

/// Parks every car in a single pass over the nodes in reverse preorder.
pub fn park(tree: &Tree, labels: &CarLabels) -> Result<ParkingResult, ParkError> {
    check_cover(tree, labels)?;
    let n = tree.len();
    let parents = tree.parents();
    let mut incoming = vec![0u64; n];
    let mut occupied = vec![false; n];
    let mut edge_flux = vec![0u64; n];
    let mut flux = 0;
    for v in (0..n).rev() {
        let total = incoming[v] + labels.counts[v] as u64;
        occupied[v] = total >= 1;
        let out = total.saturating_sub(1);
        if v == 0 {
            flux = out;
        } else {
            edge_flux[v] = out;
            incoming[parents[v] as usize] += out;
        }
    }
    Ok(ParkingResult {
        flux,
        occupied,
        edge_flux,
    })
}

/// Drives the cars one by one in the given order. Car ids enumerate the
/// arrivals node by node: the `ℓ(0)` cars of node 0 first, then node 1, ...
pub fn park_sequential(
    tree: &Tree,
    labels: &CarLabels,
    order: &[usize],
) -> Result<ParkingResult, ParkError> {
    check_cover(tree, labels)?;
    let mut origin = Vec::new();
    for (v, &c) in labels.counts.iter().enumerate() {
        origin.extend(std::iter::repeat_n(v, c as usize));
    }
    let cars = origin.len();
    let mut seen = vec![false; cars];
    if order.len() != cars {
        return Err(ParkError::BadPermutation { cars });
    }
    for &car in order {
        if car >= cars || seen[car] {
            return Err(ParkError::BadPermutation { cars });
        }
        seen[car] = true;
    }
    let n = tree.len();
    let mut occupied = vec![false; n];
    let mut edge_flux = vec![0u64; n];
    let mut flux = 0;
    for &car in order {
        let mut v = origin[car];
        loop {
            if !occupied[v] {
                occupied[v] = true;
                break;
            }
            match tree.parent(v) {
                Some(p) => {
                    edge_flux[v] += 1;
                    v = p;
                }
                None => {
                    flux += 1;
                    break;
                }
            }
        }
    }
    Ok(ParkingResult {
        flux,
        occupied,
        edge_flux,
    })
}

/// Parks only the cars with arrival time `A_x <= t`.
pub fn park_thinned(tree: &Tree, labels: &CarLabels, t: f64) -> Result<ParkingResult, ParkError> {
    check_cover(tree, labels)?;
    park(tree, &labels.thinned(t)?)
}

/// Flux and root occupancy from a preorder degree sequence and labels,
/// using a stack of pending child outflows. Same recursion as [`park`].
#[inline]
pub(crate) fn flux_from_degrees(
    degrees: &[u32],
    counts: &[u32],
    stack: &mut Vec<u64>,
) -> (u64, bool) {
    stack.clear();
    let mut last = (0, false);
    for v in (0..degrees.len()).rev() {
        let d = degrees[v] as usize;
        let mut total = counts[v] as u64;
        for _ in 0..d {
            total += stack.pop().unwrap_or(0);
        }
        let out = total.saturating_sub(1);
        stack.push(out);
        last = (out, total >= 1);
    }
    last
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{make_law, DistSpec};
    use crate::trees::sample_gw_conditioned;

    fn labels(c: &[u32]) -> CarLabels {
        CarLabels::new(c.to_vec())
    }

    #[test]
    fn single_vertex_three_cars() {
        let r = park(&Tree::singleton(), &labels(&[3])).unwrap();
        assert_eq!(r.flux, 2);
        assert_eq!(r.occupied, vec![true]);
        for order in [[0, 1, 2], [2, 1, 0], [1, 0, 2]] {
            assert_eq!(
                park_sequential(&Tree::singleton(), &labels(&[3]), &order)
                    .unwrap()
                    .flux,
                2
            );
        }
    }

    #[test]
    fn hand_simulated_cherry() {
        // root(0) – { a(1) – c(2), b(1) }, preorder: root, a, c, b.
        let t = Tree::from_degrees(vec![2, 1, 0, 0]).unwrap();
        let l = labels(&[0, 1, 2, 1]);
        let r = park(&t, &l).unwrap();
        assert_eq!(r.flux, 0);
        assert_eq!(r.occupied, vec![true; 4]);
        assert_eq!(r.edge_flux, vec![0, 1, 1, 0]);
    }

    #[test]
    fn hand_simulated_path() {
        let r = park(&Tree::path(3), &labels(&[0, 1, 2])).unwrap();
        assert_eq!(r.flux, 0);
        assert_eq!(r.edge_flux[2], 1);
        assert_eq!(r.edge_flux[1], 1);
        assert_eq!(r.occupied, vec![true; 3]);
    }

    #[test]
    fn arrivals() {
        let t = Tree::path(50);
        let mut rng = RngStream::from_seed(1);
        let zero = make_law(&DistSpec::Poisson { rate: 0.0 }).unwrap();
        assert!(assign_arrivals(&t, &zero, &mut rng)
            .counts
            .iter()
            .all(|&c| c == 0));
        let two = make_law(&DistSpec::Finite {
            pmf: vec![(2, 1.0)],
        })
        .unwrap();
        assert!(assign_arrivals(&t, &two, &mut rng)
            .counts
            .iter()
            .all(|&c| c == 2));
    }

    #[test]
    fn arrival_mean_lln() {
        let t = Tree::path(1_000_000);
        let cars = make_law(&DistSpec::Poisson { rate: 0.6 }).unwrap();
        let mut rng = RngStream::from_seed(2);
        let l = assign_arrivals(&t, &cars, &mut rng);
        let mean = l.total_cars() as f64 / 1e6;
        assert!((mean - 0.6).abs() <= 3.0 * (0.6f64 / 1e6).sqrt(), "{mean}");
    }

    #[test]
    fn errors() {
        let t = Tree::path(3);
        assert!(matches!(
            park(&t, &labels(&[1, 1])),
            Err(ParkError::LabelMismatch { .. })
        ));
        assert!(matches!(
            park_sequential(&t, &labels(&[1, 1, 0]), &[0]),
            Err(ParkError::BadPermutation { .. })
        ));
        assert!(matches!(
            park_sequential(&t, &labels(&[1, 1, 0]), &[0, 0]),
            Err(ParkError::BadPermutation { .. })
        ));
        assert!(matches!(
            park_thinned(&t, &labels(&[1, 1, 0]), 0.5),
            Err(ParkError::MissingTimes)
        ));
    }

    #[test]
    fn thinned_endpoints_and_monotone() {
        let nu = make_law(&DistSpec::Geometric { p: 0.5 }).unwrap();
        let cars = make_law(&DistSpec::Poisson { rate: 0.9 }).unwrap();
        let mut rng = RngStream::from_seed(3);
        for _ in 0..200 {
            let t = sample_gw_conditioned(&nu, 60, &mut rng).unwrap();
            let l = assign_arrivals_with_times(&t, &cars, &mut rng);
            assert_eq!(park_thinned(&t, &l, 0.0).unwrap().flux, 0);
            assert_eq!(park_thinned(&t, &l, 1.0).unwrap(), park(&t, &l).unwrap());
            let mut prev = 0;
            for i in 0..=20 {
                let f = park_thinned(&t, &l, i as f64 / 20.0).unwrap().flux;
                assert!(f >= prev);
                prev = f;
            }
        }
    }

    #[test]
    fn stack_pass_matches_park() {
        let nu = make_law(&DistSpec::Poisson { rate: 1.0 }).unwrap();
        let cars = make_law(&DistSpec::Poisson { rate: 0.8 }).unwrap();
        let mut rng = RngStream::from_seed(4);
        let mut stack = Vec::new();
        for n in 1..300 {
            let t = sample_gw_conditioned(&nu, n, &mut rng).unwrap();
            let l = assign_arrivals(&t, &cars, &mut rng);
            let r = park(&t, &l).unwrap();
            assert_eq!(
                flux_from_degrees(t.degrees(), &l.counts, &mut stack),
                (r.flux, r.occupied[0])
            );
        }
    }
}
