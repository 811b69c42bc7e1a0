//! Scene directory layout:
//! `scene_<seed>/frame_<k>.{ogrd,ppm,pgm}`, `flow_<k>.oflw` for future
//! frames, `poses.csv` (`frame,x,y,yaw`), `rig.txt`. Round trips are
//! bit-exact for grids/flows and value-exact for poses and the rig.

use std::path::{Path, PathBuf};

use super::{Scene, SceneFrame};
use crate::error::{Error, Result};
use crate::geometry::io::{flow_read, flow_write};
use crate::geometry::{EgoPose, FlowField, FlowFrame};
use crate::render::image_io::{read_pgm_depth, read_ppm, write_pgm_depth, write_ppm};
use crate::render::{CameraRig, Iso3};

pub fn scene_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("scene_{seed}"))
}

pub fn dataset_write(scene: &Scene, root: &Path) -> Result<PathBuf> {
    let dir = scene_dir(root, scene.spec_seed);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (k, frame) in scene.frames.iter().enumerate() {
        crate::occ::io::grid_write(&frame.grid, &dir.join(format!("frame_{k}.ogrd")))?;
        write_ppm(&frame.image, &dir.join(format!("frame_{k}.ppm")))?;
        write_pgm_depth(&frame.depth, &dir.join(format!("frame_{k}.pgm")))?;
    }
    // one flow file per future frame
    let (h, w) = (scene.flow.height, scene.flow.width);
    for fi in 0..scene.flow.frames {
        let k = scene.n_history + fi;
        let single = FlowField::new(1, h, w, scene.flow.frame, scene.flow.frame_slice(fi).to_vec())?;
        flow_write(&single, &dir.join(format!("flow_{k}.oflw")))?;
    }
    let mut csv = String::from("frame,x,y,yaw\n");
    for (k, frame) in scene.frames.iter().enumerate() {
        csv.push_str(&format!("{k},{},{},{}\n", frame.pose.x, frame.pose.y, frame.pose.yaw));
    }
    let poses_path = dir.join("poses.csv");
    std::fs::write(&poses_path, csv).map_err(|e| Error::io(&poses_path, e))?;
    write_rig(&scene.rig, &dir.join("rig.txt"))?;
    Ok(dir)
}

pub fn dataset_read(dir: &Path) -> Result<Scene> {
    let poses = read_poses(&dir.join("poses.csv"))?;
    let rig = read_rig(&dir.join("rig.txt"))?;
    let mut frames = Vec::with_capacity(poses.len());
    for (k, &pose) in poses.iter().enumerate() {
        let grid = crate::occ::io::grid_read(&expect(dir, &format!("frame_{k}.ogrd"))?)?;
        let image = read_ppm(&expect(dir, &format!("frame_{k}.ppm"))?)?;
        let depth = read_pgm_depth(&expect(dir, &format!("frame_{k}.pgm"))?)?;
        frames.push(SceneFrame { grid, pose, image, depth });
    }
    // future flows resume where the flow files start
    let mut n_history = None;
    for k in 0..poses.len() {
        if dir.join(format!("flow_{k}.oflw")).exists() {
            n_history = Some(k);
            break;
        }
    }
    let n_history = n_history.ok_or_else(|| Error::data(format!("no flow files in {}", dir.display())))?;
    let mut flows: Vec<FlowField> = Vec::new();
    for k in n_history..poses.len() {
        flows.push(flow_read(&expect(dir, &format!("flow_{k}.oflw"))?)?);
    }
    let (h, w) = (flows[0].height, flows[0].width);
    let mut data = Vec::with_capacity(flows.len() * h * w * 2);
    for f in &flows {
        data.extend_from_slice(&f.data);
    }
    let flow = FlowField::new(flows.len(), h, w, FlowFrame::Current, data)?;
    let seed = dir
        .file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| n.strip_prefix("scene_"))
        .and_then(|n| n.parse().ok())
        .unwrap_or(0);
    let fps = 2.0; // cadence is carried by the run config, not the scene dir
    Ok(Scene { spec_seed: seed, frames, flow, rig, n_history, fps })
}

/// Scene directories under a dataset root, sorted by seed.
pub fn list_scenes(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(seed) = name.strip_prefix("scene_").and_then(|s| s.parse::<u64>().ok()) {
            out.push((seed, entry.path()));
        }
    }
    out.sort_by_key(|(seed, _)| *seed);
    Ok(out.into_iter().map(|(_, p)| p).collect())
}

fn expect(dir: &Path, name: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    if !p.exists() {
        return Err(Error::data(format!("missing expected file {}", p.display())));
    }
    Ok(p)
}

fn read_poses(path: &Path) -> Result<Vec<EgoPose>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 {
            continue; // header
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(Error::data(format!("poses.csv line {} malformed: {line}", ln + 1)));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::data(format!("poses.csv line {}: bad number {s}", ln + 1)))
        };
        out.push(EgoPose::new(parse(cols[1])?, parse(cols[2])?, parse(cols[3])?));
    }
    if out.is_empty() {
        return Err(Error::data(format!("{} holds no poses", path.display())));
    }
    Ok(out)
}

fn write_rig(rig: &CameraRig, path: &Path) -> Result<()> {
    let m = &rig.cam_to_ego;
    let mut s = String::new();
    s.push_str(&format!("fx {}\nfy {}\ncx {}\ncy {}\n", rig.fx, rig.fy, rig.cx, rig.cy));
    s.push_str(&format!("size {} {}\n", rig.width, rig.height));
    s.push_str(&format!("t {} {} {}\n", m.t[0], m.t[1], m.t[2]));
    for row in &m.r {
        s.push_str(&format!("r {} {} {}\n", row[0], row[1], row[2]));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn read_rig(path: &Path) -> Result<CameraRig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (mut fx, mut fy, mut cx, mut cy) = (0.0, 0.0, 0.0, 0.0);
    let (mut w, mut h) = (0usize, 0usize);
    let mut t = [0.0f64; 3];
    let mut rows: Vec<[f64; 3]> = Vec::new();
    for line in text.lines() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::data(format!("rig.txt: bad number {s}")))
        };
        match parts.as_slice() {
            ["fx", v] => fx = num(v)?,
            ["fy", v] => fy = num(v)?,
            ["cx", v] => cx = num(v)?,
            ["cy", v] => cy = num(v)?,
            ["size", a, b] => {
                w = num(a)? as usize;
                h = num(b)? as usize;
            }
            ["t", a, b, c] => t = [num(a)?, num(b)?, num(c)?],
            ["r", a, b, c] => rows.push([num(a)?, num(b)?, num(c)?]),
            _ => {}
        }
    }
    if rows.len() != 3 {
        return Err(Error::data(format!("rig.txt in {} missing rotation rows", path.display())));
    }
    let iso = Iso3 { r: [rows[0], rows[1], rows[2]], t };
    CameraRig::new(fx, fy, cx, cy, w, h, iso)
}
