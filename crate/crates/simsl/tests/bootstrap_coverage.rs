//! Frequentist sanity check on the bootstrap intervals: across independent
//! datasets whose generating direction has an exactly-zero coordinate, the
//! nominal-95% interval for that coordinate should cover zero most of the
//! time. The meta-replicate count is kept small, so the bar is a loose 80%.

use ndarray::{array, Array1, Array2};
use simsl::model::{bootstrap_beta_ci, Dataset, SimslConfig};
use simsl::rng;

#[test]
fn null_coordinate_intervals_cover_zero() {
    let beta0 = {
        let raw: Array1<f64> = array![2.0, 1.0, 0.0, 1.0, 0.5];
        let norm = raw.dot(&raw).sqrt();
        raw.mapv(|v| v / norm)
    };
    let p = beta0.len();
    let n = 400;
    let config = SimslConfig {
        num_basis_u: 6,
        num_basis_a: 6,
        lambda_grid: vec![1e-3, 1e-1, 1e1, 1e3, 1e5],
        ..SimslConfig::default()
    };
    let meta_replicates = 25;
    let mut covered = 0;
    for m in 0..meta_replicates {
        let mut r = rng::substream(777, [m as u64, 0, 0]);
        let x = Array2::from_shape_fn((n, p), |_| rng::uniform(&mut r, -1.0, 1.0));
        let a = Array1::from_shape_fn(n, |_| rng::uniform(&mut r, 0.0, 2.0));
        let y = Array1::from_shape_fn(n, |i| {
            let u = x.row(i).dot(&beta0);
            3.0 * u * (a[i] - 1.0) + 0.5 * rng::standard_normal(&mut r)
        });
        let data = Dataset::new(y, a, x, None).unwrap();
        let ci = bootstrap_beta_ci(&data, &config, 20, 0.95, 1000 + m as u64).unwrap();
        if ci.lower[2] <= 0.0 && 0.0 <= ci.upper[2] {
            covered += 1;
        }
    }
    let rate = covered as f64 / meta_replicates as f64;
    println!("bootstrap coverage of the null coordinate: {covered}/{meta_replicates}");
    assert!(rate >= 0.8, "coverage {rate} below 0.8");
}
