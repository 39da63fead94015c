use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EnvError, Environment2D};

pub const DEFAULT_RESOLUTION: f64 = 0.2;
const WALL: f64 = 0.4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TerrainPattern {
    /// Whole interior one class.
    Uniform(String),
    /// Base class with `count` random rectangular patches drawn from `classes`.
    Patches {
        base: String,
        classes: Vec<String>,
        count: usize,
    },
}

/// A straight corridor along +x, closed by walls on all four sides.
pub fn make_corridor(
    length: f64,
    width: f64,
    pattern: &TerrainPattern,
    seed: u64,
) -> Result<Environment2D, EnvError> {
    if !(length > 2.0 * WALL && width > 0.0) {
        return Err(EnvError::Invalid(format!(
            "corridor needs positive interior (length {length}, width {width})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total_h = width + 2.0 * WALL;
    let base = match pattern {
        TerrainPattern::Uniform(c) => c.as_str(),
        TerrainPattern::Patches { base, .. } => base.as_str(),
    };
    let mut env = Environment2D::new(length, total_h, DEFAULT_RESOLUTION, base)?;
    if let TerrainPattern::Patches { classes, count, .. } = pattern {
        for _ in 0..*count {
            if classes.is_empty() {
                break;
            }
            let class = &classes[rng.gen_range(0..classes.len())];
            let w = rng.gen_range(0.5..(length / 4.0).max(0.6));
            let x = rng.gen_range(WALL..(length - WALL));
            env.fill_rect(x, WALL, x + w, total_h - WALL, class);
        }
    }
    env.fill_rect(0.0, 0.0, length, WALL, "wall");
    env.fill_rect(0.0, total_h - WALL, length, total_h, "wall");
    env.fill_rect(0.0, 0.0, WALL, total_h, "wall");
    env.fill_rect(length - WALL, 0.0, length, total_h, "wall");
    Ok(env)
}

/// A 40 m x 30 m street scene: buildings, two sidewalks, a road with a
/// crosswalk, street furniture, parked vehicles, grass and gravel, and a
/// staircase ramping up into the southern building block.
pub fn make_urban_toy(seed: u64) -> Result<Environment2D, EnvError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (40.0, 30.0);
    let mut env = Environment2D::new(w, h, DEFAULT_RESOLUTION, "sidewalk")?;

    // Bands from south to north.
    env.fill_rect(0.0, 0.0, w, 3.0, "building");
    env.fill_rect(0.0, 9.0, w, 16.0, "road");
    env.fill_rect(0.0, 22.0, 18.0, 25.0, "terrain");
    env.fill_rect(18.0, 22.0, 30.0, 25.0, "gravel");
    env.fill_rect(0.0, 25.0, w, h, "building");
    env.fill_rect(30.0, 24.6, 40.0, 25.0, "fence");

    let cross_x = rng.gen_range(12.0..24.0);
    env.fill_rect(cross_x, 9.0, cross_x + 4.0, 16.0, "crosswalk");

    // Staircase cut into the southern block, rising away from the sidewalk.
    let stairs_x = rng.gen_range(4.0..10.0) + if rng.gen_bool(0.5) { 20.0 } else { 0.0 };
    let (stairs_y0, stairs_y1) = (0.6, 3.0);
    for (r, c) in env.cells_in_rect(stairs_x, stairs_y0, stairs_x + 4.0, stairs_y1) {
        env.set_label(r, c, "stairs");
        let y = env.cell_center(r, c)[1];
        env.set_height(r, c, 0.5 * (stairs_y1 - y));
    }
    for (r, c) in env.cells_in_rect(0.0, 9.0, w, 16.0) {
        if env.label_name(r, c) == "road" {
            env.set_height(r, c, -0.1);
        }
    }

    // Parked vehicles along either curb, clear of the crosswalk.
    let n_vehicles = rng.gen_range(1..=2);
    for i in 0..n_vehicles {
        for _ in 0..50 {
            let x = rng.gen_range(2.0..(w - 6.5));
            if x + 4.5 > cross_x - 1.0 && x < cross_x + 5.0 {
                continue;
            }
            let y = if i % 2 == 0 { 9.3 } else { 13.7 };
            env.fill_rect(x, y, x + 4.5, y + 2.0, "vehicle");
            break;
        }
    }

    // Street furniture near the curbs.
    let furniture = ["pole", "bench", "tree", "traffic_sign", "traffic_light"];
    for _ in 0..8 {
        let class = furniture[rng.gen_range(0..furniture.len())];
        let size = rng.gen_range(0.4..0.9);
        let x = rng.gen_range(1.0..(w - 2.0));
        let y = if rng.gen_bool(0.5) {
            rng.gen_range(7.2..8.4)
        } else {
            rng.gen_range(16.4..17.6)
        };
        if (x - cross_x).abs() < 1.5 || (x - cross_x - 4.0).abs() < 1.5 {
            continue;
        }
        env.fill_rect(x, y, x + size, y + size, class);
    }
    let px = rng.gen_range(2.0..(w - 3.0));
    env.fill_rect(px, 19.0, px + 0.6, 19.6, "person");

    env.fill_rect(0.0, 0.0, WALL, h, "wall");
    env.fill_rect(w - WALL, 0.0, w, h, "wall");
    Ok(env)
}

/// `n_rooms` rooms of 8 m x 8 m in a row, joined by doors, with furniture.
pub fn make_rooms(n_rooms: usize, seed: u64) -> Result<Environment2D, EnvError> {
    if n_rooms == 0 {
        return Err(EnvError::Invalid("need at least one room".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let room = 8.0;
    let (w, h) = (room * n_rooms as f64, room);
    let mut env = Environment2D::new(w, h, DEFAULT_RESOLUTION, "floor")?;
    env.fill_rect(0.0, 0.0, w, WALL, "wall");
    env.fill_rect(0.0, h - WALL, w, h, "wall");
    env.fill_rect(0.0, 0.0, WALL, h, "wall");
    env.fill_rect(w - WALL, 0.0, w, h, "wall");
    for i in 1..n_rooms {
        let x = i as f64 * room - WALL / 2.0;
        let door = rng.gen_range(1.5..(h - 2.7));
        env.fill_rect(x, 0.0, x + WALL, door, "wall");
        env.fill_rect(x, door + 1.2, x + WALL, h, "wall");
    }
    for i in 0..n_rooms {
        let x0 = i as f64 * room;
        for _ in 0..rng.gen_range(1..=3) {
            let (sx, sy) = (rng.gen_range(0.6..1.5), rng.gen_range(0.6..1.5));
            let x = rng.gen_range((x0 + 1.6)..(x0 + room - 1.6 - sx));
            let y = rng.gen_range(1.6..(h - 1.6 - sy));
            env.fill_rect(x, y, x + sx, y + sy, "furniture");
        }
        if rng.gen_bool(0.5) {
            let x = rng.gen_range((x0 + 1.0)..(x0 + room - 3.0));
            env.fill_rect(x, 1.0, x + 2.0, 2.0, "sand");
        }
    }
    Ok(env)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semantics::default_table;

    #[test]
    fn urban_toy_is_deterministic() {
        assert_eq!(make_urban_toy(7).unwrap(), make_urban_toy(7).unwrap());
        assert_ne!(make_urban_toy(7).unwrap(), make_urban_toy(8).unwrap());
    }

    #[test]
    fn urban_toy_contents() {
        let table = default_table();
        let env = make_urban_toy(3).unwrap();
        env.validate(&table).unwrap();
        for name in ["sidewalk", "road", "crosswalk", "building", "stairs"] {
            assert!(env.legend().iter().any(|n| n == name), "{name}");
        }
        // Two sidewalk strips either side of the road band.
        let col = 2 * env.cols() / 3;
        let names: Vec<&str> = (0..env.rows()).map(|r| env.label_name(r, col)).collect();
        let road_rows: Vec<usize> = (0..env.rows()).filter(|&r| names[r] == "road" || names[r] == "crosswalk" || names[r] == "vehicle").collect();
        let (lo, hi) = (road_rows[0], *road_rows.last().unwrap());
        assert!(names[..lo].contains(&"sidewalk"));
        assert!(names[hi..].contains(&"sidewalk"));
        // Stairs heights ramp linearly.
        let stairs: Vec<(usize, usize)> = (0..env.rows())
            .flat_map(|r| (0..env.cols()).map(move |c| (r, c)))
            .filter(|&(r, c)| env.label_name(r, c) == "stairs")
            .collect();
        assert!(!stairs.is_empty());
        let (r0, c0) = stairs[0];
        let h = |r: usize| *env.heights().get(r, c0);
        let d1 = h(r0) - h(r0 + 1);
        let d2 = h(r0 + 1) - h(r0 + 2);
        assert!(d1 > 0.0 && (d1 - d2).abs() < 1e-12);
    }

    #[test]
    fn uniform_corridor_interior() {
        let env = make_corridor(10.0, 2.0, &TerrainPattern::Uniform("floor".into()), 99).unwrap();
        for r in 0..env.rows() {
            for c in 0..env.cols() {
                let name = env.label_name(r, c);
                assert!(name == "floor" || name == "wall");
                let [x, y] = env.cell_center(r, c);
                if x > WALL && x < 10.0 - WALL && y > WALL && y < 2.0 + WALL {
                    assert_eq!(name, "floor");
                }
            }
        }
    }

    #[test]
    fn rooms_obstacle_fraction() {
        let table = default_table();
        for s in 0..100 {
            let f = make_rooms(3, s).unwrap().obstacle_fraction(&table).unwrap();
            assert!(f > 0.0 && f < 0.9, "seed {s}: {f}");
        }
    }
}
