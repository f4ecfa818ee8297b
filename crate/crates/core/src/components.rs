//! 8-connected component labelling of binary masks.

use crate::mask::Mask;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Components {
    height: usize,
    width: usize,
    /// 0 is background, components are numbered from 1 in row-major order of
    /// their first pixel.
    labels: Vec<u32>,
    sizes: Vec<usize>,
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        parent[x as usize] = parent[parent[x as usize] as usize];
        x = parent[x as usize];
    }
    x
}

fn union(parent: &mut [u32], a: u32, b: u32) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        let (lo, hi) = (ra.min(rb), ra.max(rb));
        parent[hi as usize] = lo;
    }
}

/// Two-pass raster labelling with union-find over provisional labels.
pub fn connected_components(mask: &Mask) -> Components {
    let (h, w) = mask.dims();
    let mut provisional = vec![0u32; h * w];
    let mut parent = vec![0u32];
    for i in 0..h {
        for j in 0..w {
            if !mask.get(i, j) {
                continue;
            }
            // already visited neighbours: W, NW, N, NE
            let mut seen = [0u32; 4];
            if j > 0 {
                seen[0] = provisional[i * w + j - 1];
            }
            if i > 0 {
                let up = (i - 1) * w;
                if j > 0 {
                    seen[1] = provisional[up + j - 1];
                }
                seen[2] = provisional[up + j];
                if j + 1 < w {
                    seen[3] = provisional[up + j + 1];
                }
            }
            let label = match seen.iter().copied().filter(|&l| l > 0).min() {
                Some(l) => {
                    for &other in seen.iter().filter(|&&o| o > 0) {
                        union(&mut parent, l, other);
                    }
                    l
                }
                None => {
                    let l = parent.len() as u32;
                    parent.push(l);
                    l
                }
            };
            provisional[i * w + j] = label;
        }
    }
    let mut renumber = vec![0u32; parent.len()];
    let mut sizes = Vec::new();
    let mut labels = vec![0u32; h * w];
    for (k, &p) in provisional.iter().enumerate() {
        if p == 0 {
            continue;
        }
        let root = find(&mut parent, p) as usize;
        if renumber[root] == 0 {
            sizes.push(0);
            renumber[root] = sizes.len() as u32;
        }
        labels[k] = renumber[root];
        sizes[renumber[root] as usize - 1] += 1;
    }
    Components {
        height: h,
        width: w,
        labels,
        sizes,
    }
}

impl Components {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    /// Pixel counts, indexed by label − 1.
    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, i: usize, j: usize) -> u32 {
        self.labels[i * self.width + j]
    }

    pub fn pixels(&self, label: u32) -> Vec<(usize, usize)> {
        (0..self.labels.len())
            .filter(|&k| self.labels[k] == label)
            .map(|k| (k / self.width, k % self.width))
            .collect()
    }

    pub fn mask(&self, label: u32) -> Mask {
        Mask::from_fn(self.height, self.width, |i, j| self.label(i, j) == label)
    }

    /// Largest extent of a component in physical units: the greatest
    /// corner-to-corner distance over pairs of its pixels, with `spacing` the
    /// (row, column) pixel size.
    pub fn max_diameter(&self, label: u32, spacing: (f64, f64)) -> f64 {
        let inside = |i: isize, j: isize| {
            i >= 0
                && j >= 0
                && (i as usize) < self.height
                && (j as usize) < self.width
                && self.label(i as usize, j as usize) == label
        };
        // the farthest pair always lies on the outer boundary
        let rim: Vec<(usize, usize)> = self
            .pixels(label)
            .into_iter()
            .filter(|&(i, j)| {
                let (i, j) = (i as isize, j as isize);
                !(inside(i - 1, j) && inside(i + 1, j) && inside(i, j - 1) && inside(i, j + 1))
            })
            .collect();
        let mut best: f64 = 0.0;
        for (k, &(a, b)) in rim.iter().enumerate() {
            for &(c, d) in &rim[k..] {
                let dy = (a.abs_diff(c) + 1) as f64 * spacing.0;
                let dx = (b.abs_diff(d) + 1) as f64 * spacing.1;
                best = best.max(dy.hypot(dx));
            }
        }
        best
    }
}
