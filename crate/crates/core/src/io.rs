//! Versioned little-endian container for built structures.
//!
//! ```text
//! "FMMS" | version u32 | l_max u32 | n_sources u64 | n_receivers u64
//! source set | receiver set | neighbor table | directory | stencils
//! then tagged sections: tag [u8; 4] | payload length u64 | payload
//!   "PLAN"  one partition plan
//!   "BTYP"  typed box lists of every node
//! ```
//!
//! Every array is a `u64` element count followed by the elements.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::boxtype::{BoxType, LevelTypes, TypedBoxList};
use crate::error::{FmmError, Result};
use crate::fmm::ChargedPoint;
use crate::lists::{FmmStructures, LevelDirectory, NeighborTable, TranslationStencils};
use crate::morton::{Point3, MAX_LEVEL};
use crate::partition::PartitionPlan;
use crate::pseudosort::SortedPointSet;

pub const MAGIC: &[u8; 4] = b"FMMS";
pub const VERSION: u32 = 1;
const PLAN_TAG: &[u8; 4] = b"PLAN";
const BTYP_TAG: &[u8; 4] = b"BTYP";

/// Everything a container can hold.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub structures: FmmStructures,
    pub plan: Option<PartitionPlan>,
    pub box_types: Vec<TypedBoxList>,
}

fn format<T>(msg: impl Into<String>) -> Result<T> {
    Err(FmmError::Format(msg.into()))
}

// --- writers ---

fn put_len(w: &mut impl Write, n: usize) -> Result<()> {
    Ok(w.write_u64::<LE>(n as u64)?)
}

fn put_u32s(w: &mut impl Write, v: &[u32]) -> Result<()> {
    put_len(w, v.len())?;
    v.iter().try_for_each(|&x| w.write_u32::<LE>(x))?;
    Ok(())
}

fn put_u64s(w: &mut impl Write, v: &[u64]) -> Result<()> {
    put_len(w, v.len())?;
    v.iter().try_for_each(|&x| w.write_u64::<LE>(x))?;
    Ok(())
}

fn put_f64s(w: &mut impl Write, v: impl ExactSizeIterator<Item = f64>) -> Result<()> {
    put_len(w, v.len())?;
    for x in v {
        w.write_f64::<LE>(x)?;
    }
    Ok(())
}

fn put_set<T>(w: &mut impl Write, s: &SortedPointSet<T>, flat: impl Fn(&T) -> Vec<f64>) -> Result<()> {
    w.write_u32::<LE>(s.level)?;
    let coords: Vec<f64> = s.points.iter().flat_map(&flat).collect();
    put_f64s(w, coords.into_iter())?;
    put_u32s(w, &s.permutation)?;
    put_u32s(w, &s.bookmarks)?;
    put_u64s(w, &s.non_empty_index)
}

fn put_table(w: &mut impl Write, t: &NeighborTable) -> Result<()> {
    put_u32s(w, &t.bookmarks)?;
    put_u32s(w, &t.list)
}

fn put_plan(w: &mut impl Write, p: &PartitionPlan) -> Result<()> {
    w.write_u64::<LE>(p.nodes as u64)?;
    w.write_u64::<LE>(p.units_per_node as u64)?;
    w.write_u32::<LE>(p.l_max)?;
    w.write_u32::<LE>(p.l_par)?;
    w.write_u32::<LE>(p.l_crit)?;
    w.write_f64::<LE>(p.tolerance)?;
    w.write_f64::<LE>(p.max_over_mean)?;
    w.write_u8(p.balanced as u8)?;
    put_u32s(w, &p.box_proc_id)?;
    let bounds: Vec<u64> = p.ranges.iter().flat_map(|r| [r.start, r.end]).collect();
    put_u64s(w, &bounds)?;
    put_u64s(w, &p.unit_loads)
}

fn put_types(w: &mut impl Write, lists: &[TypedBoxList]) -> Result<()> {
    put_len(w, lists.len())?;
    for t in lists {
        w.write_u64::<LE>(t.node as u64)?;
        w.write_u32::<LE>(t.l_crit)?;
        put_len(w, t.levels.len())?;
        for lv in &t.levels {
            put_u64s(w, &lv.boxes)?;
            put_len(w, lv.types.len())?;
            w.write_all(&lv.types.iter().map(|&t| t as u8).collect::<Vec<u8>>())?;
        }
    }
    Ok(())
}

fn put_section(w: &mut impl Write, tag: &[u8; 4], body: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    body(&mut buf)?;
    w.write_all(tag)?;
    put_len(w, buf.len())?;
    Ok(w.write_all(&buf)?)
}

/// Serializes the structures plus any plan and typed lists.
pub fn write_container(
    w: &mut impl Write,
    s: &FmmStructures,
    plan: Option<&PartitionPlan>,
    types: &[TypedBoxList],
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(VERSION)?;
    w.write_u32::<LE>(s.l_max)?;
    w.write_u64::<LE>(s.sources.len() as u64)?;
    w.write_u64::<LE>(s.receivers.len() as u64)?;
    put_set(w, &s.sources, |c| vec![c.position.x, c.position.y, c.position.z, c.q])?;
    put_set(w, &s.receivers, |p| vec![p.x, p.y, p.z])?;
    put_table(w, &s.neighbors)?;
    put_len(w, s.directory.sources.len())?;
    for (src, recv) in s.directory.sources.iter().zip(&s.directory.receivers) {
        put_u64s(w, src)?;
        put_u64s(w, recv)?;
    }
    put_len(w, s.stencils.levels.len())?;
    for t in &s.stencils.levels {
        put_table(w, t)?;
    }
    if let Some(p) = plan {
        put_section(w, PLAN_TAG, |b| put_plan(b, p))?;
    }
    if !types.is_empty() {
        put_section(w, BTYP_TAG, |b| put_types(b, types))?;
    }
    Ok(())
}

// --- readers ---

/// Element counts are checked against the bytes that remain so a corrupt
/// length cannot trigger a huge allocation.
struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn len(&mut self, elem: usize) -> Result<usize> {
        let n = self.buf.read_u64::<LE>()?;
        match (n as usize).checked_mul(elem) {
            Some(bytes) if n <= usize::MAX as u64 && bytes <= self.buf.len() => Ok(n as usize),
            _ => format(format!("array of {n} elements exceeds the remaining {} bytes", self.buf.len())),
        }
    }

    fn u32s(&mut self) -> Result<Vec<u32>> {
        let mut v = vec![0; self.len(4)?];
        self.buf.read_u32_into::<LE>(&mut v)?;
        Ok(v)
    }

    fn u64s(&mut self) -> Result<Vec<u64>> {
        let mut v = vec![0; self.len(8)?];
        self.buf.read_u64_into::<LE>(&mut v)?;
        Ok(v)
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.len(8)?];
        self.buf.read_f64_into::<LE>(&mut v)?;
        Ok(v)
    }

    fn set<T>(&mut self, width: usize, build: impl Fn(&[f64]) -> T) -> Result<SortedPointSet<T>> {
        let level = self.buf.read_u32::<LE>()?;
        let flat = self.f64s()?;
        if flat.len() % width != 0 {
            return format("point array length is not a multiple of the point width");
        }
        let set = SortedPointSet {
            level,
            points: flat.chunks_exact(width).map(build).collect(),
            permutation: self.u32s()?,
            bookmarks: self.u32s()?,
            non_empty_index: self.u64s()?,
        };
        if set.permutation.len() != set.points.len() || set.bookmarks.len() != set.non_empty_index.len() + 1 {
            return format("inconsistent point set arrays");
        }
        Ok(set)
    }

    fn table(&mut self) -> Result<NeighborTable> {
        let t = NeighborTable { bookmarks: self.u32s()?, list: self.u32s()? };
        if t.bookmarks.last().copied().unwrap_or(0) as usize != t.list.len() {
            return format("neighbor table bookmarks do not cover the list");
        }
        Ok(t)
    }

    fn plan(&mut self) -> Result<PartitionPlan> {
        let nodes = self.buf.read_u64::<LE>()? as usize;
        let units_per_node = self.buf.read_u64::<LE>()? as usize;
        let l_max = self.buf.read_u32::<LE>()?;
        let l_par = self.buf.read_u32::<LE>()?;
        let l_crit = self.buf.read_u32::<LE>()?;
        let tolerance = self.buf.read_f64::<LE>()?;
        let max_over_mean = self.buf.read_f64::<LE>()?;
        let balanced = self.buf.read_u8()? != 0;
        let box_proc_id = self.u32s()?;
        let bounds = self.u64s()?;
        let unit_loads = self.u64s()?;
        if bounds.len() % 2 != 0 {
            return format("odd number of range bounds");
        }
        Ok(PartitionPlan {
            nodes,
            units_per_node,
            l_max,
            l_par,
            l_crit,
            box_proc_id,
            ranges: bounds.chunks_exact(2).map(|c| c[0]..c[1]).collect(),
            unit_loads,
            max_over_mean,
            tolerance,
            balanced,
        })
    }

    fn types(&mut self) -> Result<Vec<TypedBoxList>> {
        let count = self.len(1)?;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let node = self.buf.read_u64::<LE>()? as usize;
            let l_crit = self.buf.read_u32::<LE>()?;
            let n_levels = self.len(1)?;
            let mut levels = Vec::with_capacity(n_levels);
            for _ in 0..n_levels {
                let boxes = self.u64s()?;
                let mut raw = vec![0u8; self.len(1)?];
                self.buf.read_exact(&mut raw)?;
                let types = raw
                    .into_iter()
                    .map(|b| BoxType::from_u8(b).ok_or_else(|| FmmError::Format(format!("unknown box type {b}"))))
                    .collect::<Result<Vec<_>>>()?;
                levels.push(LevelTypes { boxes, types });
            }
            out.push(TypedBoxList::from_levels(node, l_crit, levels).map_err(|e| FmmError::Format(e.to_string()))?);
        }
        Ok(out)
    }
}

/// Parses a container; truncated input is a [`FmmError::Format`] error.
pub fn read_container(bytes: &[u8]) -> Result<Container> {
    parse(bytes).map_err(|e| match e {
        FmmError::Io(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
            FmmError::Format("truncated container".into())
        }
        other => other,
    })
}

fn parse(bytes: &[u8]) -> Result<Container> {
    let mut r = Reader { buf: bytes };
    let mut magic = [0u8; 4];
    r.buf.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return format("bad magic");
    }
    let version = r.buf.read_u32::<LE>()?;
    if version != VERSION {
        return format(format!("unsupported version {version}"));
    }
    let l_max = r.buf.read_u32::<LE>()?;
    if l_max > MAX_LEVEL {
        return format(format!("l_max {l_max} out of range"));
    }
    let n_src = r.buf.read_u64::<LE>()?;
    let n_recv = r.buf.read_u64::<LE>()?;
    let sources = r.set(4, |c| ChargedPoint::new(Point3::new(c[0], c[1], c[2]), c[3]))?;
    let receivers = r.set(3, |c| Point3::new(c[0], c[1], c[2]))?;
    if sources.len() as u64 != n_src || receivers.len() as u64 != n_recv {
        return format("header counts disagree with the point arrays");
    }
    let neighbors = r.table()?;
    let n_levels = r.len(16)?;
    let mut directory = LevelDirectory { l_max, sources: Vec::new(), receivers: Vec::new() };
    for _ in 0..n_levels {
        directory.sources.push(r.u64s()?);
        directory.receivers.push(r.u64s()?);
    }
    let n_stencils = r.len(16)?;
    let levels = (0..n_stencils).map(|_| r.table()).collect::<Result<Vec<_>>>()?;
    let structures =
        FmmStructures { l_max, sources, receivers, neighbors, directory, stencils: TranslationStencils { levels } };

    let (mut plan, mut box_types) = (None, Vec::new());
    while !r.buf.is_empty() {
        let mut tag = [0u8; 4];
        r.buf.read_exact(&mut tag)?;
        let len = r.len(1)?;
        let (body, rest) = r.buf.split_at(len);
        let mut section = Reader { buf: body };
        match &tag {
            t if t == PLAN_TAG => plan = Some(section.plan()?),
            t if t == BTYP_TAG => box_types = section.types()?,
            other => return format(format!("unknown section {:?}", String::from_utf8_lossy(other))),
        }
        if !section.buf.is_empty() {
            return format("trailing bytes in section");
        }
        r.buf = rest;
    }
    Ok(Container { structures, plan, box_types })
}

pub fn save(path: &Path, s: &FmmStructures, plan: Option<&PartitionPlan>, types: &[TypedBoxList]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_container(&mut w, s, plan, types)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Container> {
    read_container(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate::{receivers, sources, Distribution};
    use crate::lists::{build_all, Depth};
    use crate::pseudosort::SortConfig;

    fn sample() -> FmmStructures {
        let s = sources(Distribution::Sphere, 700, 4);
        let r = receivers(Distribution::Uniform, 500, 4);
        build_all(&s, &r, Depth::Level(3), &SortConfig::default()).unwrap()
    }

    #[test]
    fn structures_round_trip_bit_exact() {
        let st = sample();
        let mut bytes = Vec::new();
        write_container(&mut bytes, &st, None, &[]).unwrap();
        let back = read_container(&bytes).unwrap();
        assert_eq!(back.structures, st);
        assert!(back.plan.is_none() && back.box_types.is_empty());
        let mut again = Vec::new();
        write_container(&mut again, &back.structures, None, &[]).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = Vec::new();
        write_container(&mut bytes, &sample(), None, &[]).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_container(&bad), Err(FmmError::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(read_container(&bad).is_err());
        assert!(read_container(&bytes[..bytes.len() - 3]).is_err());
        let mut long = bytes.clone();
        long.extend_from_slice(b"JUNK\x00\x00\x00\x00\x00\x00\x00\x00");
        assert!(read_container(&long).is_err());
    }
}
