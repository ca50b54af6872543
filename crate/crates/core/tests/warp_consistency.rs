use respmotion::phantom::{render_sequence, SubjectParams};
use respmotion::warp::{compose_fields, invert_field, ncc, track_points, warp_image, INVERT_MAX_ITER, INVERT_TOL};

fn clean_params() -> SubjectParams {
    let mut p = SubjectParams::default_for(32, 32);
    p.noise_sigma = 0.0;
    p.frames = 12;
    p.amplitude = 6.0;
    p.period = 10.0;
    p
}

#[test]
fn inverse_warp_of_each_frame_matches_the_next() {
    let s = render_sequence(&clean_params(), 4).unwrap();
    for (t, f) in s.fields.iter().enumerate() {
        let inv = invert_field(f, INVERT_TOL, INVERT_MAX_ITER).unwrap();
        let warped = warp_image(&s.frames[t], &inv).unwrap();
        let score = ncc(&warped, &s.frames[t + 1]).unwrap();
        assert!(score >= 0.99, "frame {t}: ncc {score}");
    }
}

#[test]
fn field_composed_with_its_inverse_is_near_zero() {
    let s = render_sequence(&clean_params(), 4).unwrap();
    for f in &s.fields {
        let inv = invert_field(f, INVERT_TOL, INVERT_MAX_ITER).unwrap();
        let residual = compose_fields(&inv, f).unwrap();
        assert!(residual.max_magnitude() < 2.0 * INVERT_TOL, "residual {}", residual.max_magnitude());
    }
}

#[test]
fn composed_fields_match_analytic_deformation() {
    let p = clean_params();
    let s = render_sequence(&p, 4).unwrap();
    let t0 = 2;
    let mut total = s.fields[t0].clone();
    for k in 1..=5 {
        if k > 1 {
            total = compose_fields(&total, &s.fields[t0 + k - 1]).unwrap();
        }
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for y in 0..p.height {
            for x in 0..p.width {
                let (mx, my) = p.material_point(x as f64, y as f64, t0 as f64).unwrap();
                let (ax, ay) = p.deformation(mx, my, t0 as f64);
                // Fields are only defined on the grid; skip paths that leave it.
                let inside = (0..=k).all(|j| {
                    let (ux, uy) = p.deformation(mx, my, (t0 + j) as f64);
                    let (px, py) = (mx + ux, my + uy);
                    px >= 0.0 && py >= 0.0 && px <= (p.width - 1) as f64 && py <= (p.height - 1) as f64
                });
                if !inside {
                    continue;
                }
                checked += 1;
                let (bx, by) = p.deformation(mx, my, (t0 + k) as f64);
                let (dx, dy) = total.at(x, y);
                worst = worst.max((dx - (bx - ax)).hypot(dy - (by - ay)));
            }
        }
        assert!(checked > p.width * p.height / 2, "k={k}: only {checked} interior paths");
        assert!(worst < 0.1, "k={k}: worst deviation {worst} px");
    }
}

#[test]
fn ground_truth_fields_reproduce_vessel_tracks() {
    let s = render_sequence(&clean_params(), 4).unwrap();
    let starts: Vec<[f64; 2]> = s.vessels.iter().map(|v| v[0]).collect();
    let traj = track_points(&starts, &s.fields);
    for (got, want) in traj.positions.iter().zip(&s.vessels) {
        for (a, b) in got.iter().zip(want) {
            assert!((a[0] - b[0]).abs() < 1e-6 && (a[1] - b[1]).abs() < 1e-6);
        }
    }
}
