//! Binary checkpoint format.
//!
//! Little-endian layout, version 1:
//!
//! ```text
//! magic    b"SPHM"
//! version  u32      (currently 1)
//! count    u64      particle count
//! iter     u64      completed iterations
//! time     f64      simulation time
//! dt_prev  f64      last time-step taken (0 before the first step)
//! arrays   count x f64 each, in order:
//!          x y z vx vy vz u h m rho p c ax ay az dudt dudt_prev omega
//!          c11 c12 c13 c22 c23 c33
//! ```
//!
//! `dt_prev` is part of the header because both the position scheme and the
//! time-step cap refer to the previous step; without it a resumed run could
//! not replay bit-identically. Neighbor lists are not stored; they are
//! rebuilt on load.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::particles::ParticleSystem;

pub const MAGIC: [u8; 4] = *b"SPHM";
pub const VERSION: u32 = 1;

/// Header metadata stored alongside the particle arrays.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointMeta {
    pub iteration: u64,
    pub time: f64,
    pub dt_prev: f64,
}

fn field_arrays(sys: &ParticleSystem) -> [&Vec<f64>; 24] {
    [
        &sys.x,
        &sys.y,
        &sys.z,
        &sys.vx,
        &sys.vy,
        &sys.vz,
        &sys.u,
        &sys.h,
        &sys.m,
        &sys.rho,
        &sys.p,
        &sys.c,
        &sys.ax,
        &sys.ay,
        &sys.az,
        &sys.dudt,
        &sys.dudt_prev,
        &sys.omega,
        &sys.c11,
        &sys.c12,
        &sys.c13,
        &sys.c22,
        &sys.c23,
        &sys.c33,
    ]
}

fn field_arrays_mut(sys: &mut ParticleSystem) -> [&mut Vec<f64>; 24] {
    [
        &mut sys.x,
        &mut sys.y,
        &mut sys.z,
        &mut sys.vx,
        &mut sys.vy,
        &mut sys.vz,
        &mut sys.u,
        &mut sys.h,
        &mut sys.m,
        &mut sys.rho,
        &mut sys.p,
        &mut sys.c,
        &mut sys.ax,
        &mut sys.ay,
        &mut sys.az,
        &mut sys.dudt,
        &mut sys.dudt_prev,
        &mut sys.omega,
        &mut sys.c11,
        &mut sys.c12,
        &mut sys.c13,
        &mut sys.c22,
        &mut sys.c23,
        &mut sys.c33,
    ]
}

pub fn write<W: Write>(w: &mut W, sys: &ParticleSystem, meta: &CheckpointMeta) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(sys.len() as u64).to_le_bytes())?;
    w.write_all(&meta.iteration.to_le_bytes())?;
    w.write_all(&meta.time.to_le_bytes())?;
    w.write_all(&meta.dt_prev.to_le_bytes())?;
    for arr in field_arrays(sys) {
        for v in arr.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn write_file<P: AsRef<Path>>(
    path: P,
    sys: &ParticleSystem,
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write(&mut w, sys, meta)?;
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Read a checkpoint. Neighbor lists come back empty and sized for
/// `max_neighbors`; derived per-step state is zeroed and particle ids are
/// relabeled `0..n` in stored order.
pub fn read<R: Read>(r: &mut R, max_neighbors: usize) -> Result<(ParticleSystem, CheckpointMeta)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::BadCheckpoint(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::BadCheckpoint(format!(
            "unsupported version {version}"
        )));
    }
    let count = read_u64(r)? as usize;
    let meta = CheckpointMeta {
        iteration: read_u64(r)?,
        time: read_f64(r)?,
        dt_prev: read_f64(r)?,
    };
    let mut sys = ParticleSystem::with_len(count, max_neighbors);
    {
        let mut buf = vec![0u8; count * 8];
        for arr in field_arrays_mut(&mut sys) {
            r.read_exact(&mut buf)?;
            for (i, chunk) in buf.chunks_exact(8).enumerate() {
                arr[i] = f64::from_le_bytes(chunk.try_into().unwrap());
            }
        }
    }
    Ok((sys, meta))
}

pub fn read_file<P: AsRef<Path>>(
    path: P,
    max_neighbors: usize,
) -> Result<(ParticleSystem, CheckpointMeta)> {
    let mut r = BufReader::new(File::open(path)?);
    read(&mut r, max_neighbors)
}
