//! Serialization of simulated ensembles.
//!
//! CSV carries one row per (particle, recorded time) with columns
//! `time,particle,x0..,k0..,k_tv`; floats print in shortest round-trip form
//! so identical runs serialize byte-identically.
//!
//! The binary dump is little-endian throughout: magic `MVLB`, version (u32),
//! dim (u32), particles (u32), recorded count (u32), dt (f64), the recorded
//! times, then per particle, per recorded time: state, K, K_tv as f64.
//! Run-level diagnostics (seed, domain gap) are not part of the dump.

use std::io::{Read, Write};

use crate::error::{Error, Result};

use super::{PathEnsemble, RngSpec};

const MAGIC: &[u8; 4] = b"MVLB";
const VERSION: u32 = 1;

pub fn write_csv<W: Write>(ens: &PathEnsemble, out: &mut W) -> Result<()> {
    let d = ens.dim();
    let mut header = String::from("time,particle");
    for c in 0..d {
        header.push_str(&format!(",x{c}"));
    }
    for c in 0..d {
        header.push_str(&format!(",k{c}"));
    }
    header.push_str(",k_tv");
    writeln!(out, "{header}")?;
    let mut line = String::new();
    for i in 0..ens.particles() {
        for r in 0..ens.recorded() {
            line.clear();
            line.push_str(&format!("{},{}", ens.times()[r], i));
            for v in ens.state(i, r) {
                line.push_str(&format!(",{v}"));
            }
            for v in ens.k_state(i, r) {
                line.push_str(&format!(",{v}"));
            }
            line.push_str(&format!(",{}", ens.k_tv_at(i, r)));
            writeln!(out, "{line}")?;
        }
    }
    Ok(())
}

pub fn write_binary<W: Write>(ens: &PathEnsemble, out: &mut W) -> Result<()> {
    let d = ens.dim();
    let n = ens.particles();
    let r_count = ens.recorded();
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(d as u32).to_le_bytes())?;
    out.write_all(&(n as u32).to_le_bytes())?;
    out.write_all(&(r_count as u32).to_le_bytes())?;
    out.write_all(&ens.dt.to_le_bytes())?;
    for t in ens.times() {
        out.write_all(&t.to_le_bytes())?;
    }
    for i in 0..n {
        for r in 0..r_count {
            for v in ens.state(i, r) {
                out.write_all(&v.to_le_bytes())?;
            }
            for v in ens.k_state(i, r) {
                out.write_all(&v.to_le_bytes())?;
            }
            out.write_all(&ens.k_tv_at(i, r).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a binary dump back into an ensemble. Fields the dump does not carry
/// come back neutral: zero seed, no deviation tracking, NaN gap bound.
pub fn read_binary<R: Read>(input: &mut R) -> Result<PathEnsemble> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::InvalidParameter {
            name: "dump",
            reason: "bad magic; not an ensemble dump".into(),
        });
    }
    let version = read_u32(input)?;
    if version != VERSION {
        return Err(Error::InvalidParameter {
            name: "dump",
            reason: format!("unsupported dump version {version}"),
        });
    }
    let d = read_u32(input)? as usize;
    let n = read_u32(input)? as usize;
    let r_count = read_u32(input)? as usize;
    if d == 0 || n == 0 || r_count == 0 {
        return Err(Error::InvalidParameter {
            name: "dump",
            reason: "empty dump header".into(),
        });
    }
    let dt = read_f64(input)?;
    let mut times = vec![0.0; r_count];
    for t in times.iter_mut() {
        *t = read_f64(input)?;
    }
    let mut x = vec![0.0; n * r_count * d];
    let mut k = vec![0.0; n * r_count * d];
    let mut k_tv = vec![0.0; n * r_count];
    for i in 0..n {
        for r in 0..r_count {
            let base = (i * r_count + r) * d;
            for c in 0..d {
                x[base + c] = read_f64(input)?;
            }
            for c in 0..d {
                k[base + c] = read_f64(input)?;
            }
            k_tv[i * r_count + r] = read_f64(input)?;
        }
    }
    Ok(PathEnsemble {
        dim: d,
        n,
        times,
        x,
        k,
        k_tv,
        seed: RngSpec::new(0),
        dt,
        sup_dev: None,
        domain_gap_bound: f64::NAN,
    })
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(input: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
