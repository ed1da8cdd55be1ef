mod common;

use common::{lattice_run, Ring};
use proptest::prelude::*;
use viability_core::grid::{GridIndex, GridSpec, KernelSet};
use viability_core::kernel::{
    compare, covers, disc_kernel_modified, load_kernel, read_slice_csv, slice, viability_kernel,
    write_slice_csv, write_slice_pgm, DisturbanceGrid, GridDynamics, UnionRule, VBox,
};

/// Lattice points of slice `u` within `r` of `p`, ignoring those off the grid.
fn ball_points(spec: &GridSpec, p: [f64; 3]) -> Vec<[usize; 3]> {
    let h = spec.spacing();
    let axis = |a: usize| -> Vec<usize> {
        (0..spec.counts[a])
            .filter(|&i| (spec.lo[a] + i as f64 * h - p[a]).abs() <= spec.r + 1e-12)
            .collect()
    };
    let (xs, ys, zs) = (axis(0), axis(1), axis(2));
    let mut out = Vec::new();
    for &i in &xs {
        for &j in &ys {
            for &k in &zs {
                out.push([i, j, k]);
            }
        }
    }
    out
}

/// Textbook fixed-point iteration with one point at a time.
fn naive_viability(ring: &Ring, k_h: &KernelSet) -> KernelSet {
    let spec = &ring.spec;
    let mut current = k_h.clone();
    loop {
        let mut next = current.clone();
        for idx in current.iter() {
            let c = spec.cell_center(idx.cell());
            let alive = (0..2).any(|u| {
                ball_points(spec, ring.flow(c, u))
                    .iter()
                    .any(|&cell| current.get_cell(cell, u))
            });
            if !alive {
                next.set(idx, false).unwrap();
            }
        }
        if next == current {
            return current;
        }
        current = next;
    }
}

#[test]
fn viability_matches_naive_iteration() {
    for speeds in [[1.0, 1.3], [1.0, 1.5], [0.6, 2.1]] {
        let mut ring = Ring::new(0.0);
        ring.speeds = speeds;
        let k_h = ring.k_h();
        let fast = viability_kernel(&k_h, &ring);
        let slow = naive_viability(&ring, &k_h);
        assert_eq!(fast.kernel, slow, "speeds {speeds:?}");
        assert!(*fast.trace.last().unwrap() == fast.kernel.count());
    }
}

#[test]
fn viability_safe_inputs_meet_the_kernel() {
    let ring = Ring::new(0.0);
    let result = viability_kernel(&ring.k_h(), &ring);
    let spec = &ring.spec;
    assert!(!result.kernel.is_empty());
    for idx in result.kernel.iter() {
        let mask = result.safe.mask(idx);
        assert!(!mask.is_empty(), "{idx:?} has no safe input");
        let c = spec.cell_center(idx.cell());
        for u in 0..2 {
            let meets = ball_points(spec, ring.flow(c, u))
                .iter()
                .any(|&cell| result.kernel.get_cell(cell, u));
            assert_eq!(mask.contains(u), meets, "{idx:?} input {u}");
        }
    }
}

#[test]
fn zero_disturbance_disc_equals_viability_on_the_ring() {
    let ring = Ring::new(0.0);
    let k_h = ring.k_h();
    let v = viability_kernel(&k_h, &ring).kernel;
    let d = disc_kernel_modified(&k_h, &ring, UnionRule::MaxVolume).kernel;
    assert_eq!(v, d);
}

#[test]
fn empty_constraint_set_gives_empty_kernels() {
    let ring = Ring::new(0.2);
    let empty = KernelSet::empty(&ring.spec);
    let v = viability_kernel(&empty, &ring);
    let d = disc_kernel_modified(&empty, &ring, UnionRule::Intersection);
    assert!(v.kernel.is_empty() && d.kernel.is_empty());
    assert_eq!(v.iterations, 0);
}

#[test]
fn kernel_file_roundtrip() {
    let ring = Ring::new(0.3);
    let result = disc_kernel_modified(&ring.k_h(), &ring, UnionRule::MaxVolume);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ring.viak");
    result.save(&path).unwrap();
    let (kernel, safe) = load_kernel(&path).unwrap();
    assert_eq!(kernel, result.kernel);
    assert_eq!(safe, result.safe);
}

#[test]
fn truncated_kernel_file_is_rejected() {
    let ring = Ring::new(0.0);
    let result = viability_kernel(&ring.k_h(), &ring);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("k.viak");
    result.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_kernel(&path).is_err());
}

#[test]
fn slices_reproduce_kernel_bits() {
    let setup = common::reference_setup();
    let k_h = setup.k_h().unwrap();
    let spec = k_h.spec().clone();
    let dir = tempfile::tempdir().unwrap();
    for (i_phi, q) in [(0, 0), (7, 3), (spec.counts[2] - 1, spec.n_modes - 1)] {
        let phi = spec.axis_center(2, i_phi);
        let raster = slice(&k_h, phi, q).unwrap();
        assert_eq!(raster.i_phi, i_phi);
        for j in 0..raster.height {
            for i in 0..raster.width {
                assert_eq!(raster.get(i, j), k_h.get_cell([i, j, i_phi], q));
            }
        }
        let csv = dir.path().join("s.csv");
        write_slice_csv(&raster, &csv).unwrap();
        assert_eq!(
            read_slice_csv(&csv, raster.width, raster.height).unwrap(),
            raster.bits
        );
        let pgm = dir.path().join("s.pgm");
        write_slice_pgm(&raster, &pgm).unwrap();
        let bytes = std::fs::read(&pgm).unwrap();
        let header = format!("P5\n{} {}\n255\n", raster.width, raster.height);
        assert!(bytes.starts_with(header.as_bytes()));
        let body = &bytes[header.len()..];
        assert_eq!(body.len(), raster.width * raster.height);
        // first stored row is the top of the raster
        let top = raster.height - 1;
        for (i, &b) in body[..raster.width].iter().enumerate() {
            assert_eq!(b == 255, raster.get(i, top));
        }
    }
    assert!(slice(&k_h, 0.0, spec.n_modes).is_err());
    assert!(slice(&k_h, f64::NAN, 0).is_err());
}

#[test]
fn compare_counts_differences() {
    let ring = Ring::new(0.4);
    let k_h = ring.k_h();
    let v = viability_kernel(&k_h, &ring).kernel;
    let d = disc_kernel_modified(&k_h, &ring, UnionRule::MaxVolume).kernel;
    let c = compare(&d, &v, &k_h).unwrap();
    assert!(c.a_subset_of_b);
    assert_eq!(c.a_not_in_b, 0);
    assert_eq!(c.b_not_in_a, v.count() - d.count());
    assert!((c.fraction_b - v.count() as f64 / k_h.count() as f64).abs() < 1e-15);
}

fn all_inside(grid: &DisturbanceGrid, boxes: &[Option<VBox>], v: &[f64; 3]) -> bool {
    boxes.iter().flatten().any(|b| b.contains(v)) || grid.radius.iter().all(|&r| r == 0.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn disc_is_a_subset_of_viability(rho in 0.0f64..0.5, s1 in 1.0f64..1.6) {
        let mut ring = Ring::new(rho);
        ring.speeds = [1.0, s1];
        let k_h = ring.k_h();
        let v = viability_kernel(&k_h, &ring).kernel;
        for rule in [UnionRule::MaxVolume, UnionRule::Intersection] {
            let d = disc_kernel_modified(&k_h, &ring, rule).kernel;
            prop_assert!(d.is_subset_of(&v).unwrap());
            prop_assert!(d.is_subset_of(&k_h).unwrap());
        }
    }

    #[test]
    fn disc_points_survive_sampled_disturbances(rho in 0.0f64..0.5, a in -1.0f64..1.0, b in -1.0f64..1.0) {
        let ring = Ring::new(rho);
        let result = disc_kernel_modified(&ring.k_h(), &ring, UnionRule::MaxVolume);
        let spec = &ring.spec;
        let v = [a * rho, b * rho, 0.0];
        for idx in result.kernel.iter() {
            let c = spec.cell_center(idx.cell());
            let ok = (0..2).any(|u| {
                let f = ring.flow(c, u);
                let p = [f[0] + v[0], f[1] + v[1], 0.0];
                let runs: Option<Vec<Vec<usize>>> =
                    (0..3).map(|ax| lattice_run(spec, ax, p[ax], spec.r)).collect();
                runs.is_some_and(|r| {
                    r[0].iter().all(|&i| r[1].iter().all(|&j| {
                        r[2].iter().all(|&k| result.kernel.get_cell([i, j, k], u))
                    }))
                })
            });
            prop_assert!(ok, "{:?} fails under {:?}", idx, v);
        }
    }

    #[test]
    fn box_intersection_is_pointwise(
        l1 in prop::array::uniform3(-1.0f64..1.0),
        e1 in prop::array::uniform3(0.0f64..1.0),
        l2 in prop::array::uniform3(-1.0f64..1.0),
        e2 in prop::array::uniform3(0.0f64..1.0),
        p in prop::array::uniform3(-1.5f64..1.5),
    ) {
        let a = VBox { lower: l1, upper: std::array::from_fn(|j| l1[j] + e1[j]) };
        let b = VBox { lower: l2, upper: std::array::from_fn(|j| l2[j] + e2[j]) };
        let c = a.intersect(&b);
        prop_assert_eq!(c.contains(&p), a.contains(&p) && b.contains(&p));
        prop_assert!(c.volume(&[true; 3]) <= a.volume(&[true; 3]).min(b.volume(&[true; 3])) + 1e-12);
    }

    #[test]
    fn covering_boxes_cover_random_points(
        rho in prop::array::uniform3(0.0f64..1.0),
        r in 0.1f64..0.5,
        grow in 0.0f64..1.2,
        samples in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 64),
    ) {
        let grid = DisturbanceGrid::new(rho, r);
        // boxes centred on their grid points, `grow` times the point spacing
        let spacing: [f64; 3] = std::array::from_fn(|j| {
            if grid.points[j].len() > 1 { grid.points[j][1] - grid.points[j][0] } else { 0.0 }
        });
        prop_assert!(spacing.iter().all(|&s| s <= 2.0 * r + 1e-12));
        let boxes: Vec<Option<VBox>> = (0..grid.len())
            .map(|k| {
                let p = grid.point(k);
                Some(VBox {
                    lower: std::array::from_fn(|j| p[j] - grow * spacing[j]),
                    upper: std::array::from_fn(|j| p[j] + grow * spacing[j]),
                })
            })
            .collect();
        if covers(&grid, &boxes) {
            for s in &samples {
                let v: [f64; 3] = std::array::from_fn(|j| s[j] * rho[j]);
                prop_assert!(all_inside(&grid, &boxes, &v), "{:?} uncovered", v);
            }
        }
        if grow >= 0.5 {
            prop_assert!(covers(&grid, &boxes));
        }
    }
}

#[test]
fn grid_index_helpers_agree() {
    let ring = Ring::new(0.0);
    let spec = &ring.spec;
    for lin in [0, 17, spec.len() - 1] {
        let idx = spec.from_linear(lin);
        assert_eq!(spec.linear(idx), lin);
        assert_eq!(GridIndex::from_cell(idx.cell(), idx.q), idx);
    }
    assert_eq!(ring.admissible(0).len(), 2);
}
