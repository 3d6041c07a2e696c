use mvsr_core::fusion::{fuse, FusionParams};
use mvsr_core::synthdata::{generate_scene, render_depth, sample_gt_surface};
use std::collections::HashMap;

fn main() {
    let spec = generate_scene(605, 0, 12);
    let depths: Vec<_> = (0..12).map(|f| render_depth(&spec, f)).collect();
    let params = FusionParams { rel_tol: 0.01, min_consistent: 1, average_positions: false };
    let cloud = fuse(&depths, &spec.cameras(), &params).unwrap();
    let gt = sample_gt_surface(&spec, 800.0);
    // classify misses by face
    let room = spec.room.shape;
    let mut missed: HashMap<&str, usize> = HashMap::new();
    let mut count: HashMap<&str, usize> = HashMap::new();
    // grid index on fused positions
    let cell = 0.05;
    let mut grid: HashMap<[i32; 3], Vec<u32>> = HashMap::new();
    for (i, p) in cloud.positions.iter().enumerate() {
        let k = [(p.x / cell).floor() as i32, (p.y / cell).floor() as i32, (p.z / cell).floor() as i32];
        grid.entry(k).or_default().push(i as u32);
    }
    for g in &gt {
        let face = if (g.y - room.min.y).abs() < 1e-6 { "floor" }
            else if (g.y - room.max.y).abs() < 1e-6 { "ceiling" }
            else { "wall" };
        *count.entry(face).or_default() += 1;
        let k = [(g.x / cell).floor() as i32, (g.y / cell).floor() as i32, (g.z / cell).floor() as i32];
        let mut best = f64::INFINITY;
        for dz in -1..=1i32 { for dy in -1..=1i32 { for dx in -1..=1i32 {
            if let Some(ids) = grid.get(&[k[0]+dx, k[1]+dy, k[2]+dz]) {
                for &i in ids { best = best.min((cloud.positions[i as usize] - g).norm()); }
            }
        }}}
        if best > 0.05 {
            *missed.entry(face).or_default() += 1;
        }
    }
    for (f, c) in &count {
        let m = missed.get(f).copied().unwrap_or(0);
        println!("{f}: {m}/{c} missed ({:.3})", m as f64 / *c as f64);
    }
    // height histogram of missed wall samples
    let mut hist = [0usize; 10];
    for g in &gt {
        let k = [(g.x / cell).floor() as i32, (g.y / cell).floor() as i32, (g.z / cell).floor() as i32];
        let mut best = f64::INFINITY;
        for dz in -1..=1i32 { for dy in -1..=1i32 { for dx in -1..=1i32 {
            if let Some(ids) = grid.get(&[k[0]+dx, k[1]+dy, k[2]+dz]) {
                for &i in ids { best = best.min((cloud.positions[i as usize] - g).norm()); }
            }
        }}}
        if best > 0.05 {
            let frac = ((g.y - room.min.y) / (room.max.y - room.min.y) * 10.0) as usize;
            hist[frac.min(9)] += 1;
        }
    }
    println!("missed height histogram (floor->ceiling): {hist:?}");
}
