//! Grid file format `OGRD`: magic, version u32, `H0 W0 D0` u32, voxel_size
//! 3xf32, origin 3xf32, class count u16, class table entries (name length
//! u8, UTF-8 name, dynamic flag u8), then `H0*W0*D0` u8 class ids.
//! Little-endian, ids row-major over `(h, w, d)`. Round trips are bit-exact
//! including metadata.

use std::path::Path;

use super::{ClassDef, OccupancyGrid};
use crate::error::Result;
use crate::fileio::{FileWriter, OffsetReader};

pub const MAGIC: &[u8; 4] = b"OGRD";
pub const VERSION: u32 = 1;

pub fn grid_write(grid: &OccupancyGrid, path: &Path) -> Result<()> {
    let mut w = FileWriter::create(path)?;
    w.bytes(MAGIC)?;
    w.u32(VERSION)?;
    for d in grid.dims {
        w.u32(d as u32)?;
    }
    for v in grid.voxel_size {
        w.f32(v)?;
    }
    for v in grid.origin {
        w.f32(v)?;
    }
    w.u16(grid.table.len() as u16)?;
    for def in &grid.table {
        let name = def.name.as_bytes();
        w.u8(name.len() as u8)?;
        w.bytes(name)?;
        w.u8(def.dynamic as u8)?;
    }
    w.bytes(&grid.classes)?;
    w.finish()
}

pub fn grid_read(path: &Path) -> Result<OccupancyGrid> {
    let mut r = OffsetReader::open(path)?;
    r.magic(MAGIC)?;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.error(format!("unsupported grid version {version}")));
    }
    let dims = [
        r.u32("H0")? as usize,
        r.u32("W0")? as usize,
        r.u32("D0")? as usize,
    ];
    let voxel_size = [r.f32("voxel_size.x")?, r.f32("voxel_size.y")?, r.f32("voxel_size.z")?];
    let origin = [r.f32("origin.x")?, r.f32("origin.y")?, r.f32("origin.z")?];
    let count = r.u16("class count")? as usize;
    if count == 0 {
        return Err(r.error("class table is empty"));
    }
    let mut table = Vec::with_capacity(count);
    for i in 0..count {
        let len = r.u8("class name length")? as usize;
        let name = String::from_utf8(r.take(len, "class name")?.to_vec())
            .map_err(|e| r.error(format!("class {i} name is not UTF-8: {e}")))?;
        let dynamic = match r.u8("dynamic flag")? {
            0 => false,
            1 => true,
            other => return Err(r.error(format!("class {i} dynamic flag {other} not 0/1"))),
        };
        table.push(ClassDef { name, dynamic });
    }
    let numel = dims[0] * dims[1] * dims[2];
    let ids_at = r.offset();
    let classes = r.take(numel, "class ids")?.to_vec();
    if let Some(pos) = classes.iter().position(|&c| c as usize >= count) {
        return Err(crate::error::Error::Parse {
            path: path.to_path_buf(),
            offset: ids_at + pos as u64,
            message: format!("class id {} >= class count {count}", classes[pos]),
        });
    }
    r.finish()?;
    OccupancyGrid::new(dims, voxel_size, origin, classes, table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::occ::ClassDef;

    fn sample_grid() -> OccupancyGrid {
        let table = vec![
            ClassDef::fixed("free"),
            ClassDef::fixed("ground"),
            ClassDef::moving("car"),
            ClassDef::moving("walker"),
        ];
        let mut classes = vec![0u8; 3 * 2 * 2];
        classes[0] = 1;
        classes[5] = 2;
        classes[9] = 3;
        OccupancyGrid::new([3, 2, 2], [0.5, 0.5, 0.25], [-0.75, -0.5, 0.0], classes, table)
            .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact_including_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ogrd");
        let grid = sample_grid();
        grid_write(&grid, &path).unwrap();
        let back = grid_read(&path).unwrap();
        assert_eq!(grid, back);
        // byte-level determinism too
        let first = std::fs::read(&path).unwrap();
        grid_write(&back, &path).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
    }

    #[test]
    fn class_table_order_round_trips_when_all_ids_present() {
        let grid = sample_grid();
        assert!( (0..4).all(|c| grid.classes.contains(&(c as u8))) );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ogrd");
        grid_write(&grid, &path).unwrap();
        let back = grid_read(&path).unwrap();
        let names: Vec<&str> = back.table.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, ["free", "ground", "car", "walker"]);
    }

    #[test]
    fn truncated_file_reports_expected_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ogrd");
        let grid = sample_grid();
        grid_write(&grid, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = bytes.len() - 5;
        std::fs::write(&path, &bytes[..cut]).unwrap();
        let err = grid_read(&path).unwrap_err();
        match err {
            crate::Error::Parse { offset, ref message, .. } => {
                assert!(message.contains("truncated"), "{message}");
                // ids start where the reader stopped being able to satisfy the payload
                assert_eq!(offset, (bytes.len() - grid.classes.len()) as u64);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn bad_magic_is_parse_error_at_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ogrd");
        std::fs::write(&path, b"NOPE....").unwrap();
        match grid_read(&path).unwrap_err() {
            crate::Error::Parse { offset, .. } => assert_eq!(offset, 0),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn out_of_range_id_points_at_its_byte() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ogrd");
        let grid = sample_grid();
        grid_write(&grid, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let ids_start = bytes.len() - grid.classes.len();
        bytes[ids_start + 7] = 200;
        std::fs::write(&path, &bytes).unwrap();
        match grid_read(&path).unwrap_err() {
            crate::Error::Parse { offset, .. } => assert_eq!(offset, (ids_start + 7) as u64),
            other => panic!("unexpected error {other}"),
        }
    }
}
