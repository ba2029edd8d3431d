//! 8-connected component labeling and the largest component's bounding box.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{Grid, SaliencyError};

/// Inclusive cell coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BoundingBox {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            x_min: 0,
            y_min: 0,
            x_max: width - 1,
            y_max: height - 1,
        }
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y_min..=self.y_max).contains(&y) && (self.x_min..=self.x_max).contains(&x)
    }

    pub fn cells(&self) -> usize {
        (self.x_max - self.x_min + 1) * (self.y_max - self.y_min + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Component {
    pub bbox: BoundingBox,
    pub size: usize,
}

/// Labels components in raster order, so the first component found at a
/// given size is the one holding the smallest (y, x) cell; it wins ties.
pub fn largest_component_bbox(mask: &Grid<bool>) -> Result<Component, SaliencyError> {
    let (h, w) = (mask.height, mask.width);
    let mut visited = vec![false; h * w];
    let mut queue = VecDeque::new();
    let mut best: Option<Component> = None;

    for start in 0..h * w {
        if !mask.data[start] || visited[start] {
            continue;
        }
        visited[start] = true;
        queue.push_back(start);
        let mut size = 0;
        let mut bbox = BoundingBox {
            x_min: usize::MAX,
            y_min: usize::MAX,
            x_max: 0,
            y_max: 0,
        };
        while let Some(cell) = queue.pop_front() {
            let (y, x) = (cell / w, cell % w);
            size += 1;
            bbox.x_min = bbox.x_min.min(x);
            bbox.y_min = bbox.y_min.min(y);
            bbox.x_max = bbox.x_max.max(x);
            bbox.y_max = bbox.y_max.max(y);
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let n = ny * w + nx;
                    if mask.data[n] && !visited[n] {
                        visited[n] = true;
                        queue.push_back(n);
                    }
                }
            }
        }
        if best.is_none_or(|b| size > b.size) {
            best = Some(Component { bbox, size });
        }
    }
    best.ok_or(SaliencyError::EmptyMask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(rows: &[&str]) -> Grid<bool> {
        let h = rows.len();
        let w = rows[0].len();
        let data = rows.iter().flat_map(|r| r.chars().map(|c| c == '#')).collect();
        Grid::new(h, w, data).unwrap()
    }

    #[test]
    fn all_true_covers_map() {
        let m = Grid::new(4, 5, vec![true; 20]).unwrap();
        let c = largest_component_bbox(&m).unwrap();
        assert_eq!(c.bbox, BoundingBox::full(4, 5));
        assert_eq!(c.size, 20);
    }

    #[test]
    fn single_cell() {
        let mut data = vec![false; 5 * 5];
        data[2 * 5 + 3] = true; // row 2, column 3
        let c = largest_component_bbox(&Grid::new(5, 5, data).unwrap()).unwrap();
        assert_eq!(c.bbox, BoundingBox { x_min: 3, y_min: 2, x_max: 3, y_max: 2 });
    }

    #[test]
    fn diagonal_cells_connect() {
        let m = mask(&["#...", ".#..", "..#.", "...."]);
        let c = largest_component_bbox(&m).unwrap();
        assert_eq!(c.size, 3);
        assert_eq!(c.bbox, BoundingBox { x_min: 0, y_min: 0, x_max: 2, y_max: 2 });
    }

    #[test]
    fn largest_wins_and_ties_go_to_first_in_raster_order() {
        let m = mask(&["##..#", ".....", "..###", "....."]);
        let c = largest_component_bbox(&m).unwrap();
        assert_eq!(c.size, 3);
        assert_eq!(c.bbox.y_min, 2);

        let tie = mask(&["##...", ".....", "...##"]);
        let c = largest_component_bbox(&tie).unwrap();
        assert_eq!(c.bbox, BoundingBox { x_min: 0, y_min: 0, x_max: 1, y_max: 0 });
    }

    #[test]
    fn empty_mask_errors() {
        let m = Grid::new(2, 2, vec![false; 4]).unwrap();
        assert!(matches!(largest_component_bbox(&m), Err(SaliencyError::EmptyMask)));
    }
}
