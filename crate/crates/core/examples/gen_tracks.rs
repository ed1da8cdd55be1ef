//! Regenerates the shipped track and car files under `data/`.
//!
//! ```text
//! cargo run -p viability-core --example gen_tracks -- data
//! ```

use std::f64::consts::FRAC_PI_2;
use std::path::PathBuf;

use viability_core::track::{Obstacle, Track, TrackBuilder};
use viability_core::vehicle::CarParams;

const HALF_WIDTH: f64 = 0.7;

fn s_curve() -> Track {
    let (r_c, r_s, a) = (1.5, 1.2, 0.6_f64);
    let fill = (5.5 - 4.0 * r_s * a.sin()) / 2.0;
    let pts = TrackBuilder::new([0.0, 0.0], 0.0, 0.05)
        .straight(5.5)
        .arc(r_c, FRAC_PI_2)
        .straight(2.2)
        .arc(r_c, FRAC_PI_2)
        .straight(fill)
        .arc(r_s, a)
        .arc(r_s, -2.0 * a)
        .arc(r_s, a)
        .straight(fill)
        .arc(r_c, FRAC_PI_2)
        .straight(2.2)
        .arc(r_c, FRAC_PI_2)
        .close(1e-6)
        .expect("closed centerline");
    Track::new(pts, HALF_WIDTH, vec![]).expect("valid track")
}

/// Rectangle aligned with the centerline at arclength `s`, spanning
/// `[lat_lo, lat_hi]` across and `length` along the track.
fn block(track: &Track, s: f64, lat_lo: f64, lat_hi: f64, length: f64) -> Obstacle {
    let c = track.point_at(s);
    let (sn, cs) = track.heading_at(s).sin_cos();
    let at = |along: f64, lat: f64| [c[0] + along * cs - lat * sn, c[1] + along * sn + lat * cs];
    let h = 0.5 * length;
    Obstacle::new(vec![
        at(-h, lat_lo),
        at(h, lat_lo),
        at(h, lat_hi),
        at(-h, lat_hi),
    ])
    .expect("convex block")
}

fn main() {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "data".into()));
    std::fs::create_dir_all(dir.join("tracks")).expect("create data dir");
    let base = s_curve();
    let w = HALF_WIDTH + 0.1;

    let easy = vec![
        block(&base, 2.0, 0.6, w, 0.25),
        block(&base, 9.5, -w, -0.6, 0.25),
        block(&base, 19.5, 0.6, w, 0.25),
    ];
    let hard = vec![
        block(&base, 1.5, 0.05, w, 0.3),
        block(&base, 3.5, -w, -0.05, 0.3),
        block(&base, 9.0, 0.0, w, 0.3),
        block(&base, 11.0, -w, 0.0, 0.3),
        block(&base, 14.5, -0.1, w, 0.3),
        block(&base, 19.0, -w, -0.05, 0.3),
    ];
    let n = (base.total_length() / 0.4).floor() as usize;
    let blocking = (0..n)
        .map(|k| block(&base, k as f64 * 0.4, -w, w, 0.1))
        .collect();

    let write = |name: &str, t: &Track| {
        std::fs::write(dir.join("tracks").join(name), t.to_toml()).expect("write track");
    };
    write("s_curve.toml", &base);
    write("s_curve_easy.toml", &base.with_obstacles(easy));
    write("s_curve_hard.toml", &base.with_obstacles(hard));
    write("s_curve_blocking.toml", &base.with_obstacles(blocking));
    std::fs::write(dir.join("car.toml"), CarParams::default().to_toml()).expect("write car");
    println!("track length {:.3} m", base.total_length());
}
