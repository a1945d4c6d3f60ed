use rayon::prelude::*;

use super::operators::{l2p, p2m_into, Operators};
use super::{accumulate_kernel, check_order};
use crate::error::Result;
use crate::lists::FmmStructures;
use crate::morton::MortonKey;

/// What to compute in [`evaluate`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    /// Truncation number; expansions carry `p^2` coefficients.
    pub p: usize,
    pub near_field: bool,
    pub far_field: bool,
}

impl EvalOptions {
    pub fn new(p: usize) -> Self {
        Self { p, near_field: true, far_field: true }
    }

    pub fn near_only(p: usize) -> Self {
        Self { p, near_field: true, far_field: false }
    }
}

pub(crate) fn width(level: u32) -> f64 {
    1.0 / (1u64 << level) as f64
}

/// Multipole coefficients of every non-empty source box, per level.
///
/// Entry `l` holds `p^2` coefficients per box of `directory.sources(l)`;
/// levels below two are left empty.
pub fn upward_pass(s: &FmmStructures, ops: &Operators) -> Vec<Vec<f64>> {
    let p = ops.p;
    let p2 = p * p;
    let dir = &s.directory;
    let mut m: Vec<Vec<f64>> = vec![Vec::new(); s.l_max as usize + 1];
    if s.l_max < 2 {
        return m;
    }
    let mut leaf = vec![0.0; s.sources.box_count() * p2];
    leaf.par_chunks_mut(p2).enumerate().for_each_init(Vec::new, |scratch, (i, out)| {
        let center = s.sources.box_key(i).center();
        p2m_into(s.sources.box_points(i), &center, p, out, scratch);
    });
    m[s.l_max as usize] = leaf;

    for l in (2..s.l_max).rev() {
        let child_w = width(l + 1);
        let finer = &m[l as usize + 1];
        let children = dir.sources(l + 1);
        let mut cur = vec![0.0; dir.sources(l).len() * p2];
        cur.par_chunks_mut(p2).enumerate().for_each_init(Vec::new, |scratch, (i, out)| {
            for c in dir.source_children(l, i) {
                let octant = (children[c] & 7) as usize;
                ops.m2m(octant, child_w, &finer[c * p2..(c + 1) * p2], out, scratch);
            }
        });
        m[l as usize] = cur;
    }
    m
}

/// Local coefficients of every non-empty receiver box, per level, from the
/// multipole data produced by [`upward_pass`].
pub fn downward_pass(s: &FmmStructures, ops: &Operators, multipoles: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let p2 = ops.p * ops.p;
    let dir = &s.directory;
    let mut local: Vec<Vec<f64>> = vec![Vec::new(); s.l_max as usize + 1];
    for l in 2..=s.l_max {
        let w = width(l);
        let recv = dir.receivers(l);
        let srcs = dir.sources(l);
        let stencil = s.stencils.level(l);
        let m = &multipoles[l as usize];
        let parent = &local[l as usize - 1];
        let mut cur = vec![0.0; recv.len() * p2];
        cur.par_chunks_mut(p2).enumerate().for_each_init(Vec::new, |scratch, (i, out)| {
            let key = MortonKey::new_unchecked(l, recv[i]);
            if l > 2 {
                let pr = dir.receiver_rank(l - 1, recv[i] >> 3).expect("receiver parent present in directory");
                ops.l2l((recv[i] & 7) as usize, w, &parent[pr * p2..(pr + 1) * p2], out, scratch);
            }
            for &sr in stencil.segment(i) {
                let sr = sr as usize;
                let offset = MortonKey::new_unchecked(l, srcs[sr]).offset_to(&key);
                ops.m2l(offset, w, &m[sr * p2..(sr + 1) * p2], out, scratch);
            }
        });
        local[l as usize] = cur;
    }
    local
}

/// Potentials at every receiver, in the receivers' original input order.
pub fn evaluate(s: &FmmStructures, opts: &EvalOptions) -> Result<Vec<f64>> {
    check_order(opts.p)?;
    let ops = Operators::new(opts.p);
    evaluate_with(s, &ops, opts)
}

/// [`evaluate`] with a caller-supplied (reusable) operator set.
pub fn evaluate_with(s: &FmmStructures, ops: &Operators, opts: &EvalOptions) -> Result<Vec<f64>> {
    check_order(opts.p)?;
    if ops.p != opts.p {
        return crate::error::domain(format!("operators built for p={} but p={} requested", ops.p, opts.p));
    }
    let p = ops.p;
    let p2 = p * p;
    let far = opts.far_field && s.l_max >= 2;
    let leaf_locals = if far {
        let m = upward_pass(s, ops);
        downward_pass(s, ops, &m).swap_remove(s.l_max as usize)
    } else {
        Vec::new()
    };

    let sorted: Vec<f64> = (0..s.receivers.box_count())
        .into_par_iter()
        .flat_map_iter(|i| {
            let center = s.receivers.box_key(i).center();
            let mut scratch = Vec::new();
            let local = (!leaf_locals.is_empty()).then(|| &leaf_locals[i * p2..(i + 1) * p2]);
            let near: Vec<&[_]> = if opts.near_field { s.near_sources(i).collect() } else { Vec::new() };
            s.receivers
                .box_points(i)
                .iter()
                .map(|y| {
                    let mut acc = 0.0;
                    for slice in &near {
                        accumulate_kernel(&mut acc, y, slice);
                    }
                    match local {
                        Some(c) => acc + l2p(c, &center, y, p, &mut scratch),
                        None => acc,
                    }
                })
                .collect::<Vec<_>>()
        })
        .collect();

    let mut out = vec![0.0; sorted.len()];
    for (pos, &orig) in s.receivers.permutation.iter().enumerate() {
        out[orig as usize] = sorted[pos];
    }
    Ok(out)
}
