//! Placement of basis and core probes from the training camera centers.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::Vec3;

const KMEANS_MAX_ITERS: usize = 100;

/// Removes exact duplicates, keeping first occurrences in input order.
pub fn unique_positions(points: &[Vec3]) -> Vec<Vec3> {
    let mut out: Vec<Vec3> = Vec::with_capacity(points.len());
    for p in points {
        if !out.iter().any(|q| q == p) {
            out.push(*p);
        }
    }
    out
}

fn centroid(points: &[Vec3]) -> Vec3 {
    points.iter().fold(Vec3::zeros(), |a, p| a + p) / points.len() as f64
}

/// Index of the smallest value; ties go to the lowest index.
fn argmin(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, v) in values.enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Greedy farthest point sampling.
///
/// The first pick is the point nearest the centroid; every later pick
/// maximizes the distance to the already picked set, ties to the lowest
/// index. Returns the picked positions in pick order.
pub fn farthest_point_sampling(points: &[Vec3], count: usize) -> Result<Vec<Vec3>> {
    let pts = unique_positions(points);
    if count == 0 || pts.len() < count {
        return Err(Error::InvalidArgument(format!(
            "farthest point sampling needs {count} distinct positions, got {}",
            pts.len()
        )));
    }
    let c = centroid(&pts);
    let first = argmin(pts.iter().map(|p| (p - c).norm()));
    let mut picked = vec![first];
    let mut min_dist: Vec<f64> = pts.iter().map(|p| (p - pts[first]).norm()).collect();
    while picked.len() < count {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, &d) in min_dist.iter().enumerate() {
            if d > best.1 {
                best = (i, d);
            }
        }
        let next = best.0;
        picked.push(next);
        for (d, p) in min_dist.iter_mut().zip(&pts) {
            *d = d.min((p - pts[next]).norm());
        }
    }
    Ok(picked.into_iter().map(|i| pts[i]).collect())
}

/// Basis probe positions: farthest point sampling over the camera centers.
pub fn distribute_basis(camera_positions: &[Vec3], count: usize) -> Result<Vec<Vec3>> {
    farthest_point_sampling(camera_positions, count)
}

/// `count` distinct camera centers chosen uniformly at random.
pub fn random_positions(camera_positions: &[Vec3], count: usize, seed: u64) -> Result<Vec<Vec3>> {
    let pts = unique_positions(camera_positions);
    if count == 0 || pts.len() < count {
        return Err(Error::InvalidArgument(format!(
            "random placement needs {count} distinct positions, got {}",
            pts.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample(&mut rng, pts.len(), count).into_iter().map(|i| pts[i]).collect())
}

/// Lloyd's K-means initialized from farthest point sampling picks.
///
/// Runs until assignments stop changing or 100 iterations. An empty cluster
/// is reseeded at the point farthest from its nearest centroid.
pub fn kmeans(camera_positions: &[Vec3], count: usize) -> Result<Vec<Vec3>> {
    let pts = unique_positions(camera_positions);
    let mut centers = farthest_point_sampling(&pts, count)?;
    let mut assign = vec![usize::MAX; pts.len()];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for (a, p) in assign.iter_mut().zip(&pts) {
            let k = argmin(centers.iter().map(|c| (p - c).norm_squared()));
            if *a != k {
                *a = k;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![Vec3::zeros(); count];
        let mut counts = vec![0usize; count];
        for (&a, p) in assign.iter().zip(&pts) {
            sums[a] += p;
            counts[a] += 1;
        }
        for k in 0..count {
            if counts[k] > 0 {
                centers[k] = sums[k] / counts[k] as f64;
            } else {
                let far = pts
                    .iter()
                    .enumerate()
                    .map(|(i, p)| {
                        let d = centers.iter().map(|c| (p - c).norm_squared()).fold(f64::INFINITY, f64::min);
                        (i, d)
                    })
                    .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
                centers[k] = pts[far.0];
                // Force another assignment pass.
                assign.fill(usize::MAX);
            }
        }
    }
    Ok(centers)
}

pub fn distribute_cores(camera_positions: &[Vec3], count: usize) -> Result<Vec<Vec3>> {
    kmeans(camera_positions, count)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(xs: &[f64]) -> Vec<Vec3> {
        xs.iter().map(|&x| Vec3::new(x, 0.0, 0.0)).collect()
    }

    #[test]
    fn fps_line_example() {
        let picks = distribute_basis(&line(&[0.0, 1.0, 2.0, 10.0]), 2).unwrap();
        assert_eq!(picks, line(&[2.0, 10.0]));
    }

    #[test]
    fn fps_exhausts_and_collapses_duplicates() {
        let pts = line(&[0.0, 1.0, 1.0, 5.0]);
        let picks = distribute_basis(&pts, 3).unwrap();
        assert_eq!(picks.len(), 3);
        for p in unique_positions(&pts) {
            assert!(picks.contains(&p));
        }
        assert!(distribute_basis(&pts, 4).is_err());
    }

    #[test]
    fn kmeans_line_example() {
        let c = distribute_cores(&line(&[0.0, 1.0, 10.0, 11.0]), 2).unwrap();
        assert_eq!(c, line(&[0.5, 10.5]));
    }

    #[test]
    fn kmeans_single_cluster_is_mean() {
        let pts = vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(-1.0, 0.0, 1.0), Vec3::new(3.0, 1.0, -1.0)];
        let c = distribute_cores(&pts, 1).unwrap();
        assert!((c[0] - Vec3::new(1.0, 1.0, 1.0)).norm() < 1e-15);
    }

    #[test]
    fn random_positions_are_distinct_and_seeded() {
        let pts = line(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let a = random_positions(&pts, 3, 9).unwrap();
        assert_eq!(a, random_positions(&pts, 3, 9).unwrap());
        assert_eq!(unique_positions(&a).len(), 3);
    }
}
