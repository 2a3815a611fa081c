//! Hashed voxel grid for fixed-radius nearest-neighbor queries.

use std::collections::HashMap;

use nalgebra::Vector3;

type Key = (i64, i64, i64);

#[derive(Clone, Debug)]
pub struct VoxelGrid {
    cell: f64,
    points: Vec<Vector3<f64>>,
    cells: HashMap<Key, Vec<usize>>,
}

impl VoxelGrid {
    /// Indexes `points` with cubic cells of edge `cell` (> 0).
    pub fn new(points: Vec<Vector3<f64>>, cell: f64) -> Self {
        assert!(cell > 0.0 && cell.is_finite(), "voxel size must be positive");
        let mut cells: HashMap<Key, Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key_of(p, cell)).or_default().push(i);
        }
        Self {
            cell,
            points,
            cells,
        }
    }

    fn key_of(p: &Vector3<f64>, cell: f64) -> Key {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Nearest indexed point with distance `<= radius`, as `(index, distance)`.
    /// Equal distances resolve to the lower index.
    pub fn nearest_within(&self, q: &Vector3<f64>, radius: f64) -> Option<(usize, f64)> {
        let reach = (radius / self.cell).ceil() as i64;
        let (kx, ky, kz) = Self::key_of(q, self.cell);
        let r2 = radius * radius;
        let mut best: Option<(usize, f64)> = None;
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    let Some(bucket) = self.cells.get(&(kx + dx, ky + dy, kz + dz)) else {
                        continue;
                    };
                    for &i in bucket {
                        let d2 = (self.points[i] - q).norm_squared();
                        if d2 > r2 {
                            continue;
                        }
                        let better = match best {
                            None => true,
                            Some((bi, bd)) => d2 < bd || (d2 == bd && i < bi),
                        };
                        if better {
                            best = Some((i, d2));
                        }
                    }
                }
            }
        }
        best.map(|(i, d2)| (i, d2.sqrt()))
    }
}
