//! Post-processing of per-pixel label rasters: instance majority vote,
//! sliding-window smoothing and multi-frame instance-map combination.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Label value of pixels without a prediction.
pub const VOID: i32 = -1;

/// Row-major `H x W` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

/// Class labels; [`VOID`] marks missing pixels.
pub type LabelRaster = Raster<i32>;
/// Instance ids; 0 marks pixels outside any instance.
pub type InstanceRaster = Raster<u32>;

impl<T: Copy> Raster<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("{height}x{width} raster needs {} values, got {}", height * width, data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, v: T) -> Self {
        Self { height, width, data: vec![v; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.width + c] = v;
    }

    fn same_shape<U>(&self, other: &Raster<U>) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::Shape(format!(
                "raster shapes differ: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

/// Most frequent non-void label; ties go to the lowest label.
fn modal(votes: impl Iterator<Item = i32>) -> Option<i32> {
    let mut counts: BTreeMap<i32, usize> = BTreeMap::new();
    for v in votes.filter(|&v| v != VOID) {
        *counts.entry(v).or_default() += 1;
    }
    let mut best: Option<(i32, usize)> = None;
    for (l, n) in counts {
        if best.is_none_or(|(_, m)| n > m) {
            best = Some((l, n));
        }
    }
    best.map(|(l, _)| l)
}

/// Every non-void pixel of an instance takes the instance's majority
/// label. Pixels with instance id 0 are left as they are.
pub fn aggregate_instances(labels: &LabelRaster, instances: &InstanceRaster) -> Result<LabelRaster> {
    labels.same_shape(instances)?;
    let mut members: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &id) in instances.data.iter().enumerate() {
        if id != 0 {
            members.entry(id).or_default().push(i);
        }
    }
    let mut out = labels.clone();
    for px in members.values() {
        if let Some(l) = modal(px.iter().map(|&i| labels.data[i])) {
            for &i in px {
                if labels.data[i] != VOID {
                    out.data[i] = l;
                }
            }
        }
    }
    Ok(out)
}

/// Majority label in the `window x window` neighborhood, clipped at the
/// borders. Void pixels neither vote nor change.
pub fn aggregate_sliding_window(labels: &LabelRaster, window: usize) -> Result<LabelRaster> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::InvalidArgument(format!("window must be odd and >= 1, got {window}")));
    }
    let r = window / 2;
    let (h, w) = (labels.height, labels.width);
    let mut out = labels.clone();
    for y in 0..h {
        for x in 0..w {
            if labels.get(y, x) == VOID {
                continue;
            }
            let ys = y.saturating_sub(r)..(y + r + 1).min(h);
            let votes = ys.flat_map(|yy| (x.saturating_sub(r)..(x + r + 1).min(w)).map(move |xx| labels.get(yy, xx)));
            if let Some(l) = modal(votes) {
                out.set(y, x, l);
            }
        }
    }
    Ok(out)
}

fn check_frames(frames: &[InstanceRaster]) -> Result<(usize, usize)> {
    let first = frames.first().ok_or(Error::Empty("instance frames"))?;
    for f in frames {
        first.same_shape(f)?;
    }
    Ok((first.height, first.width))
}

fn tuple_at(frames: &[InstanceRaster], i: usize) -> Vec<u32> {
    frames.iter().map(|f| f.data[i]).collect()
}

/// Pixels are equivalent when they carry the same id in every frame; each
/// 4-connected component of an equivalence class becomes one instance,
/// numbered from 1 in raster order.
pub fn intersect_instance_maps(frames: &[InstanceRaster]) -> Result<InstanceRaster> {
    let (h, w) = check_frames(frames)?;
    let mut out = Raster::filled(h, w, 0u32);
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if out.data[start] != 0 {
            continue;
        }
        next += 1;
        let key = tuple_at(frames, start);
        out.data[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (y, x) = (i / w, i % w);
            let mut nb = Vec::with_capacity(4);
            if y > 0 {
                nb.push(i - w);
            }
            if y + 1 < h {
                nb.push(i + w);
            }
            if x > 0 {
                nb.push(i - 1);
            }
            if x + 1 < w {
                nb.push(i + 1);
            }
            for j in nb {
                if out.data[j] == 0 && frames.iter().zip(&key).all(|(f, &k)| f.data[j] == k) {
                    out.data[j] = next;
                    stack.push(j);
                }
            }
        }
    }
    Ok(out)
}

/// Instances that keep at least one pixel after erosion with a solid 3x3
/// element. Pixels outside the raster count as non-members.
pub fn surviving_instances(fine: &InstanceRaster) -> Vec<u32> {
    let (h, w) = (fine.height, fine.width);
    let mut keep = Vec::new();
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let id = fine.get(y, x);
            if id == 0 || keep.contains(&id) {
                continue;
            }
            if (y - 1..=y + 1).all(|yy| (x - 1..=x + 1).all(|xx| fine.get(yy, xx) == id)) {
                keep.push(id);
            }
        }
    }
    keep.sort_unstable();
    keep
}

/// Number of frames in which two id tuples differ.
fn disagreement(a: &[u32], b: &[u32]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// Keeps the instances of `fine` that survive erosion and hands every other
/// pixel to the surviving instance whose pixels disagree with it in the
/// fewest frames (lowest id on ties). If nothing survives, the whole raster
/// becomes instance 1.
pub fn filter_and_assign(fine: &InstanceRaster, frames: &[InstanceRaster]) -> Result<InstanceRaster> {
    let (h, w) = check_frames(frames)?;
    fine.same_shape(&frames[0])?;
    let keep = surviving_instances(fine);
    if keep.is_empty() {
        log::warn!("no instance survives erosion; the raster becomes a single instance");
        return Ok(Raster::filled(h, w, 1));
    }
    // each fine instance lies inside one equivalence class, so one tuple
    // per instance covers all of its pixels
    let mut tuples: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for (i, &id) in fine.data.iter().enumerate() {
        if keep.binary_search(&id).is_ok() {
            tuples.entry(id).or_insert_with(|| tuple_at(frames, i));
        }
    }
    let mut out = fine.clone();
    for i in 0..h * w {
        if keep.binary_search(&fine.data[i]).is_ok() {
            continue;
        }
        let t = tuple_at(frames, i);
        let mut best = (usize::MAX, 0u32);
        for (&id, k) in &tuples {
            let d = disagreement(&t, k);
            if d < best.0 {
                best = (d, id);
            }
        }
        out.data[i] = best.1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lr(h: usize, w: usize, v: &[i32]) -> LabelRaster {
        Raster::new(h, w, v.to_vec()).unwrap()
    }

    fn ir(h: usize, w: usize, v: &[u32]) -> InstanceRaster {
        Raster::new(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn instance_vote() {
        let labels = lr(1, 4, &[2, 2, 5, VOID]);
        let inst = ir(1, 4, &[1, 1, 1, 1]);
        assert_eq!(aggregate_instances(&labels, &inst).unwrap().data(), &[2, 2, 2, VOID]);
        assert!(aggregate_instances(&labels, &ir(2, 2, &[1; 4])).is_err());
    }

    #[test]
    fn window_removes_salt() {
        let mut v = vec![3; 25];
        v[12] = 7;
        let out = aggregate_sliding_window(&lr(5, 5, &v), 5).unwrap();
        assert!(out.data().iter().all(|&l| l == 3));
        assert_eq!(aggregate_sliding_window(&lr(5, 5, &v), 1).unwrap().data(), &v[..]);
        assert!(aggregate_sliding_window(&lr(5, 5, &v), 4).is_err());
    }

    #[test]
    fn intersection_splits_components() {
        // same ids on both sides of a separating column -> two components
        let f = ir(1, 3, &[1, 2, 1]);
        assert_eq!(intersect_instance_maps(&[f.clone()]).unwrap().data(), &[1, 2, 3]);
        assert_eq!(intersect_instance_maps(&[f.clone(), f]).unwrap().data(), &[1, 2, 3]);
    }

    #[test]
    fn isolated_pixel_absorbed() {
        let mut v = vec![1u32; 16];
        v[15] = 9;
        let frame = ir(4, 4, &v);
        let fine = intersect_instance_maps(&[frame.clone()]).unwrap();
        let out = filter_and_assign(&fine, &[frame]).unwrap();
        assert!(out.data().iter().all(|&id| id == 1));
    }
}
