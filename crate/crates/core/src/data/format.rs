//! Binary episode file format.
//!
//! All integers and floats are little endian.
//!
//! ```text
//! header
//!   magic       8 bytes   "SCNDATA\0"
//!   version     u32       1
//!   rays        u32       R
//!   obs_dim     u32       2R + 1
//!   episodes    u32
//!   meta_len    u32
//!   meta        meta_len bytes of JSON (scenario, variant, policy, seed, max_range, ...)
//! per episode
//!   episode_id  u32
//!   steps       u32
//!   steps × record (70 + 24R bytes):
//!     step_index u32
//!     pose       f64 x, f64 y, f64 theta
//!     obs        f64 × R depths, u32 × R surface ids, f64 illumination
//!     action     f64 v, f64 w
//!     reward     f64
//!     next_obs   same layout as obs
//!     done       u8
//!     collided   u8
//! ```

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Dataset, DatasetMeta, Episode, Transition};
use crate::error::{Error, Result};
use crate::sim::{Action, Observation, Pose};

pub const MAGIC: &[u8; 8] = b"SCNDATA\0";
pub const VERSION: u32 = 1;

pub fn record_width(rays: usize) -> usize {
    70 + 24 * rays
}

fn put_obs(out: &mut Vec<u8>, o: &Observation) {
    for d in &o.depths {
        out.write_f64::<LittleEndian>(*d).unwrap();
    }
    for id in &o.surface_ids {
        out.write_u32::<LittleEndian>(*id).unwrap();
    }
    out.write_f64::<LittleEndian>(o.illumination).unwrap();
}

pub fn to_bytes(d: &Dataset) -> Result<Vec<u8>> {
    let r = d.meta.rays;
    let meta = serde_json::to_vec(&d.meta).map_err(|e| Error::Malformed(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u32::<LittleEndian>(VERSION).unwrap();
    out.write_u32::<LittleEndian>(r as u32).unwrap();
    out.write_u32::<LittleEndian>(d.meta.obs_dim as u32).unwrap();
    out.write_u32::<LittleEndian>(d.episodes.len() as u32).unwrap();
    out.write_u32::<LittleEndian>(meta.len() as u32).unwrap();
    out.extend_from_slice(&meta);
    for ep in &d.episodes {
        out.write_u32::<LittleEndian>(ep.id).unwrap();
        out.write_u32::<LittleEndian>(ep.transitions.len() as u32).unwrap();
        for t in &ep.transitions {
            for o in [&t.obs, &t.next_obs] {
                if o.depths.len() != r || o.surface_ids.len() != r {
                    return Err(Error::DimMismatch {
                        what: format!("episode {} step {} ray count", ep.id, t.step_index),
                        expected: r,
                        found: o.depths.len(),
                    });
                }
            }
            out.write_u32::<LittleEndian>(t.step_index).unwrap();
            for v in [t.pose.x, t.pose.y, t.pose.theta] {
                out.write_f64::<LittleEndian>(v).unwrap();
            }
            put_obs(&mut out, &t.obs);
            out.write_f64::<LittleEndian>(t.action.v).unwrap();
            out.write_f64::<LittleEndian>(t.action.w).unwrap();
            out.write_f64::<LittleEndian>(t.reward).unwrap();
            put_obs(&mut out, &t.next_obs);
            out.write_u8(t.done as u8).unwrap();
            out.write_u8(t.collided as u8).unwrap();
        }
    }
    Ok(out)
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
    origin: String,
}

impl Reader<'_> {
    fn trunc(&self) -> Error {
        Error::Truncated(self.origin.clone())
    }
    fn u8(&mut self) -> Result<u8> {
        self.cur.read_u8().map_err(|_| self.trunc())
    }
    fn u32(&mut self) -> Result<u32> {
        self.cur.read_u32::<LittleEndian>().map_err(|_| self.trunc())
    }
    fn f64(&mut self) -> Result<f64> {
        self.cur.read_f64::<LittleEndian>().map_err(|_| self.trunc())
    }
    fn obs(&mut self, r: usize) -> Result<Observation> {
        let depths = (0..r).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        let surface_ids = (0..r).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        Ok(Observation {
            depths,
            surface_ids,
            illumination: self.f64()?,
        })
    }
}

pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Dataset> {
    let mut rd = Reader {
        cur: Cursor::new(bytes),
        origin: origin.display().to_string(),
    };
    let mut magic = [0u8; 8];
    rd.cur.read_exact(&mut magic).map_err(|_| rd.trunc())?;
    if &magic != MAGIC {
        return Err(Error::BadMagic(origin.to_path_buf()));
    }
    let version = rd.u32()?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let rays = rd.u32()? as usize;
    let obs_dim = rd.u32()? as usize;
    if obs_dim != 2 * rays + 1 {
        return Err(Error::DimMismatch {
            what: "header obs_dim vs rays".into(),
            expected: 2 * rays + 1,
            found: obs_dim,
        });
    }
    let n_eps = rd.u32()? as usize;
    let meta_len = rd.u32()? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    rd.cur.read_exact(&mut meta_bytes).map_err(|_| rd.trunc())?;
    let meta: DatasetMeta =
        serde_json::from_slice(&meta_bytes).map_err(|e| Error::Malformed(e.to_string()))?;
    if meta.rays != rays || meta.obs_dim != obs_dim {
        return Err(Error::DimMismatch {
            what: "metadata obs_dim vs header".into(),
            expected: obs_dim,
            found: meta.obs_dim,
        });
    }
    let mut episodes = Vec::with_capacity(n_eps);
    for _ in 0..n_eps {
        let id = rd.u32()?;
        let steps = rd.u32()? as usize;
        let remaining = bytes.len() - rd.cur.position() as usize;
        if remaining < steps * record_width(rays) {
            return Err(rd.trunc());
        }
        let mut transitions = Vec::with_capacity(steps);
        for _ in 0..steps {
            let step_index = rd.u32()?;
            let pose = Pose {
                x: rd.f64()?,
                y: rd.f64()?,
                theta: rd.f64()?,
            };
            let obs = rd.obs(rays)?;
            let action = Action {
                v: rd.f64()?,
                w: rd.f64()?,
            };
            let reward = rd.f64()?;
            let next_obs = rd.obs(rays)?;
            let done = rd.u8()? != 0;
            let collided = rd.u8()? != 0;
            transitions.push(Transition {
                obs,
                action,
                reward,
                next_obs,
                done,
                collided,
                pose,
                episode_id: id,
                step_index,
            });
        }
        episodes.push(Episode { id, transitions });
    }
    if rd.cur.position() as usize != bytes.len() {
        return Err(Error::Malformed("trailing bytes after last episode".into()));
    }
    Ok(Dataset { meta, episodes })
}

pub fn write_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(d)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_step(r: usize) -> Dataset {
        let obs = Observation {
            depths: (0..r).map(|k| 1.0 + k as f64).collect(),
            surface_ids: (0..r as u32).collect(),
            illumination: 0.05,
        };
        Dataset {
            meta: DatasetMeta {
                rays: r,
                obs_dim: 2 * r + 1,
                max_range: 12.0,
                scenario: "t".into(),
                variant: "base".into(),
                policy: "noisy-waypoint-follower".into(),
                seed: 1,
            },
            episodes: vec![Episode {
                id: 0,
                transitions: vec![Transition {
                    obs: obs.clone(),
                    action: Action::new(0.5, -0.25),
                    reward: -1.0,
                    next_obs: obs,
                    done: true,
                    collided: false,
                    pose: Pose::new(1.0, 2.0, 0.3),
                    episode_id: 0,
                    step_index: 0,
                }],
            }],
        }
    }

    #[test]
    fn single_transition_round_trip() {
        let d = one_step(32);
        assert_eq!(d.meta.obs_dim, 65);
        let bytes = to_bytes(&d).unwrap();
        assert_eq!(bytes.len(), 8 + 20 + serde_json::to_vec(&d.meta).unwrap().len() + 8 + record_width(32));
        assert_eq!(from_bytes(&bytes, Path::new("mem")).unwrap(), d);
    }

    #[test]
    fn distinct_errors() {
        let p = Path::new("mem");
        let mut bytes = to_bytes(&one_step(4)).unwrap();
        let good = bytes.clone();

        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes, p), Err(Error::BadMagic(_))));

        let mut v = good.clone();
        v[8] = 9;
        assert!(matches!(from_bytes(&v, p), Err(Error::VersionMismatch { found: 9, .. })));

        assert!(matches!(from_bytes(&good[..good.len() - 5], p), Err(Error::Truncated(_))));

        let mut dim = good.clone();
        dim[16] = 10;
        assert!(matches!(from_bytes(&dim, p), Err(Error::DimMismatch { .. })));
    }
}
