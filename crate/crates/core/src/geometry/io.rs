//! Flow file format `OFLW`: magic, version u32, `N_f H_b W_b` u32,
//! frame-tag u8 (0 = current, 1 = future), then f32 payload `(n,h,w,2)`,
//! little-endian.

use std::path::Path;

use super::{FlowField, FlowFrame};
use crate::error::Result;
use crate::fileio::{FileWriter, OffsetReader};

pub const MAGIC: &[u8; 4] = b"OFLW";
pub const VERSION: u32 = 1;

pub fn flow_write(flow: &FlowField, path: &Path) -> Result<()> {
    let mut w = FileWriter::create(path)?;
    w.bytes(MAGIC)?;
    w.u32(VERSION)?;
    w.u32(flow.frames as u32)?;
    w.u32(flow.height as u32)?;
    w.u32(flow.width as u32)?;
    w.u8(match flow.frame {
        FlowFrame::Current => 0,
        FlowFrame::Future => 1,
    })?;
    for &v in &flow.data {
        w.f32(v)?;
    }
    w.finish()
}

pub fn flow_read(path: &Path) -> Result<FlowField> {
    let mut r = OffsetReader::open(path)?;
    r.magic(MAGIC)?;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.error(format!("unsupported flow version {version}")));
    }
    let frames = r.u32("N_f")? as usize;
    let height = r.u32("H_b")? as usize;
    let width = r.u32("W_b")? as usize;
    let frame = match r.u8("frame tag")? {
        0 => FlowFrame::Current,
        1 => FlowFrame::Future,
        other => return Err(r.error(format!("frame tag {other} not 0/1"))),
    };
    let data = r.f32_vec(frames * height * width * 2, "flow payload")?;
    r.finish()?;
    FlowField::new(frames, height, width, frame, data)
}
