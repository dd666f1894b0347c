//! Distance-based similarity sampling within a slide.
//!
//! Two distinct patches on the same slide are *similar* when their physical
//! distance is at most `l` millimetres (inclusive); every other same-slide
//! patch is *dissimilar*. A patch is never its own neighbour.

use std::collections::HashMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::slidegen::PatchRecord;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchCoord {
    pub slide_id: u32,
    pub row: usize,
    pub col: usize,
    pub spacing_mm: f64,
}

impl PatchCoord {
    pub fn new(slide_id: u32, row: usize, col: usize, spacing_mm: f64) -> Result<Self> {
        if !(spacing_mm > 0.0) {
            return Err(Error::input(format!("spacing must be positive, got {spacing_mm}")));
        }
        Ok(Self { slide_id, row, col, spacing_mm })
    }

    pub fn of(p: &PatchRecord) -> Result<Self> {
        Self::new(p.slide_id, p.coord.row, p.coord.col, p.spacing_mm)
    }

    /// Physical distance in millimetres.
    pub fn distance_mm(&self, other: &PatchCoord) -> f64 {
        let dr = self.row as f64 - other.row as f64;
        let dc = self.col as f64 - other.col as f64;
        (dr * dr + dc * dc).sqrt() * self.spacing_mm
    }
}

/// Similar/dissimilar partition for every patch, indexed by position in the
/// patch list the index was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborIndex {
    pub distance_mm: f64,
    similar: Vec<Vec<usize>>,
    dissimilar: Vec<Vec<usize>>,
}

impl NeighborIndex {
    pub fn len(&self) -> usize {
        self.similar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.similar.is_empty()
    }

    /// Similar patches of `p`, ascending.
    pub fn similar(&self, p: usize) -> &[usize] {
        &self.similar[p]
    }

    /// Dissimilar patches of `p`, ascending.
    pub fn dissimilar(&self, p: usize) -> &[usize] {
        &self.dissimilar[p]
    }

    /// Draws one similar and one dissimilar patch uniformly at random.
    pub fn sample_pair(&self, p: usize, rng: &mut Rng) -> Result<(usize, usize)> {
        let sim = &self.similar[p];
        let dis = &self.dissimilar[p];
        if sim.is_empty() {
            return Err(Error::IsolatedPatch(p));
        }
        if dis.is_empty() {
            return Err(Error::input(format!("patch {p} has no dissimilar patches on its slide")));
        }
        let plus = sim[rng.gen_range(0..sim.len())];
        let minus = dis[rng.gen_range(0..dis.len())];
        Ok((plus, minus))
    }
}

/// Builds the index with per-slide grid bucketing: buckets are `l`-sized in
/// grid units, so candidates for a patch only come from the 3x3 surrounding
/// buckets.
pub fn build_neighbor_index(coords: &[PatchCoord], l_mm: f64) -> Result<NeighborIndex> {
    if !(l_mm > 0.0) || !l_mm.is_finite() {
        return Err(Error::config(format!("similarity distance must be positive, got {l_mm}")));
    }
    let mut slides: HashMap<u32, Vec<usize>> = HashMap::new();
    for (i, c) in coords.iter().enumerate() {
        slides.entry(c.slide_id).or_default().push(i);
    }
    let mut similar = vec![Vec::new(); coords.len()];
    let mut dissimilar = vec![Vec::new(); coords.len()];

    for members in slides.values() {
        let spacing = coords[members[0]].spacing_mm;
        if members.iter().any(|&i| coords[i].spacing_mm != spacing) {
            return Err(Error::input("patches of one slide must share a pixel spacing"));
        }
        let bucket = ((l_mm / spacing).ceil() as usize).max(1);
        let mut buckets: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for &i in members {
            buckets.entry((coords[i].row / bucket, coords[i].col / bucket)).or_default().push(i);
        }
        for &i in members {
            let (br, bc) = (coords[i].row / bucket, coords[i].col / bucket);
            let mut sim = Vec::new();
            for r in br.saturating_sub(1)..=br + 1 {
                for c in bc.saturating_sub(1)..=bc + 1 {
                    let Some(cands) = buckets.get(&(r, c)) else { continue };
                    for &j in cands {
                        if j != i && coords[i].distance_mm(&coords[j]) <= l_mm {
                            sim.push(j);
                        }
                    }
                }
            }
            sim.sort_unstable();
            // members is ascending, so the complement comes out ascending too.
            let mut dis = Vec::with_capacity(members.len() - sim.len() - 1);
            let mut s = sim.iter().peekable();
            for &j in members {
                if j == i {
                    continue;
                }
                if s.peek() == Some(&&j) {
                    s.next();
                } else {
                    dis.push(j);
                }
            }
            similar[i] = sim;
            dissimilar[i] = dis;
        }
    }
    Ok(NeighborIndex { distance_mm: l_mm, similar, dissimilar })
}

/// Convenience wrapper over patch records.
pub fn build_index_for(patches: &[PatchRecord], l_mm: f64) -> Result<NeighborIndex> {
    let coords = patches.iter().map(PatchCoord::of).collect::<Result<Vec<_>>>()?;
    build_neighbor_index(&coords, l_mm)
}
