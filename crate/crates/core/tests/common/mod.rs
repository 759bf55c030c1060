//! Test-only reference stepper: one flat particle array, brute-force
//! all-pairs scan, no slabs and no arenas. Shares only the file format with
//! the library.

#![allow(dead_code)]

use std::fs;
use std::path::Path;

use shmstate::sim_kernel::SimParams;
use shmstate::state_format::{
    decode_slab, encode_slab, SlabPayload, SlabType, StateMetadata,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefParticle {
    pub x: f64,
    pub v: f64,
    pub aux: u64,
    pub cell: u64,
}

pub struct RefState {
    pub meta: StateMetadata,
    /// Canonical order: by cell, then intra-cell index.
    pub particles: Vec<RefParticle>,
}

fn read_field(dir: &Path, prefix: &str, slab: u32, t: SlabType) -> SlabPayload {
    let bytes = fs::read(dir.join(format!("{prefix}_{slab:04}"))).unwrap();
    decode_slab(&bytes, t).unwrap()
}

pub fn load(dir: &Path) -> RefState {
    let meta = StateMetadata::from_text(&fs::read_to_string(dir.join("meta")).unwrap()).unwrap();
    let cps = u64::from(meta.cells_per_slab);
    let mut particles = Vec::new();
    for s in 0..meta.n_slabs {
        let offsets = read_field(dir, "cellinfo", s, SlabType::CellInfo).into_u64().unwrap();
        let pos = read_field(dir, "pos", s, SlabType::Position).into_f64().unwrap();
        let vel = read_field(dir, "vel", s, SlabType::Velocity).into_f64().unwrap();
        let aux = read_field(dir, "aux", s, SlabType::Aux).into_u64().unwrap();
        for local in 0..cps as usize {
            for i in offsets[local] as usize..offsets[local + 1] as usize {
                particles.push(RefParticle {
                    x: pos[i],
                    v: vel[i],
                    aux: aux[i],
                    cell: u64::from(s) * cps + local as u64,
                });
            }
        }
    }
    RefState { meta, particles }
}

pub fn store(dir: &Path, state: &RefState) {
    let meta = &state.meta;
    let cps = u64::from(meta.cells_per_slab);
    for s in 0..meta.n_slabs {
        let lo = u64::from(s) * cps;
        let group: Vec<&RefParticle> = state
            .particles
            .iter()
            .filter(|p| p.cell >= lo && p.cell < lo + cps)
            .collect();
        let mut offsets = vec![0u64; cps as usize + 1];
        for p in &group {
            offsets[(p.cell - lo) as usize + 1] += 1;
        }
        for i in 0..cps as usize {
            offsets[i + 1] += offsets[i];
        }
        let files = [
            ("cellinfo", SlabPayload::CellInfo(offsets)),
            ("pos", SlabPayload::Position(group.iter().map(|p| p.x).collect())),
            ("vel", SlabPayload::Velocity(group.iter().map(|p| p.v).collect())),
            ("aux", SlabPayload::Aux(group.iter().map(|p| p.aux).collect())),
        ];
        for (prefix, payload) in files {
            fs::write(dir.join(format!("{prefix}_{s:04}")), encode_slab(&payload)).unwrap();
        }
    }
    fs::write(dir.join("meta"), meta.to_text()).unwrap();
}

fn grid(x: f64) -> f64 {
    let scale = 4294967296.0; // 2^32
    (x * scale).round() / scale
}

fn cyclic_cell_distance(a: u64, b: u64, total: u64) -> u64 {
    let d = a.abs_diff(b);
    d.min(total - d)
}

/// One brute-force step: every pair (i < j) in canonical order whose cells
/// are within the cutoff.
pub fn reference_step(state: &RefState, params: &SimParams) -> RefState {
    let meta = state.meta;
    let l = meta.box_size;
    let total = u64::from(meta.n_slabs) * u64::from(meta.cells_per_slab);
    let ps = &state.particles;
    let n = ps.len();
    let mut kick = vec![0.0f64; n];
    for i in 0..n {
        for j in i + 1..n {
            if cyclic_cell_distance(ps[i].cell, ps[j].cell, total) > u64::from(params.cutoff_cells) {
                continue;
            }
            let mut d = ps[j].x - ps[i].x;
            if d > 0.5 * l {
                d -= l;
            } else if d < -0.5 * l {
                d += l;
            }
            let sign = if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 };
            let f = params.g * sign / (d * d + params.softening * params.softening);
            let k = grid(params.dt * f);
            kick[i] += k;
            kick[j] -= k;
        }
    }
    let next_step = meta.step + 1;
    let mark = params.analysis_every > 0 && next_step.is_multiple_of(params.analysis_every);
    let mut out: Vec<RefParticle> = ps
        .iter()
        .zip(&kick)
        .map(|(p, k)| {
            let v = p.v + k;
            let mut x = (p.x + params.dt * v).rem_euclid(l);
            if x >= l {
                x = 0.0;
            }
            let mut cell = ((x / l) * total as f64).floor() as u64;
            cell = cell.min(total - 1);
            let aux = if mark { p.aux | 1 } else { p.aux & !1 };
            RefParticle { x, v, aux, cell }
        })
        .collect();
    out.sort_by_key(|p| p.cell);
    RefState {
        meta: StateMetadata {
            step: next_step,
            time: meta.time + params.dt,
            ..meta
        },
        particles: out,
    }
}

/// Sum of velocities as an exact integer count of 2^-32 units. Panics if a
/// velocity is off the grid.
pub fn exact_momentum(state: &RefState) -> i128 {
    state
        .particles
        .iter()
        .map(|p| {
            let scaled = p.v * 4294967296.0;
            assert_eq!(scaled, scaled.trunc(), "velocity {} off grid", p.v);
            scaled as i128
        })
        .sum()
}

pub fn shm_or_tmp() -> tempfile::TempDir {
    if Path::new("/dev/shm").is_dir() {
        tempfile::Builder::new().prefix("shmstate-test").tempdir_in("/dev/shm").unwrap()
    } else {
        tempfile::tempdir().unwrap()
    }
}
