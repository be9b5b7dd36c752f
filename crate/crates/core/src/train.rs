//! Staged training and the deployable model bundle.
//!
//! Stage 1 pretrains the VQ-VAE, stage 2 fine-tunes the encoder with IQL and
//! then fits both affordance variants on frozen latents, stage 3 fits RND.
//! Each stage reads the previous stage's archive, so running them one at a
//! time reproduces `train --all` exactly.

use std::path::{Path, PathBuf};

use crate::affordance::{train_affordance, Affordance};
use crate::config::RunConfig;
use crate::data::{collect_episodes, Dataset, StateTable};
use crate::error::{Error, Result};
use crate::nn::{Archive, Tensor};
use crate::novelty::{train_rnd, Rnd};
use crate::offline_rl::{train_iql, write_loss_csv, IqlModels};
use crate::representation::{pretrain_encoder, Encoder, VqVae};
use crate::sim::scenario::Registry;

pub const STAGE_FILES: [&str; 3] = ["stage1.ckpt", "stage2.ckpt", "stage3.ckpt"];
/// The final bundle is the stage-3 archive.
pub const MODEL_FILE: &str = "stage3.ckpt";

pub fn stage_path(dir: &Path, stage: usize) -> PathBuf {
    dir.join(STAGE_FILES[stage - 1])
}

/// The offline training set described by `cfg.data`.
pub fn collect_training_data(cfg: &RunConfig, reg: &Registry) -> Result<Dataset> {
    let d = &cfg.data;
    let world = reg.world(&d.scenario)?;
    Ok(collect_episodes(&world, &cfg.sim, d.policy, d.episodes, cfg.seed, &d.collect, &d.scenario))
}

/// The traversals the topological map is built from.
pub fn collect_map_data(cfg: &RunConfig, reg: &Registry) -> Result<Dataset> {
    let d = &cfg.data;
    let world = reg.world(&d.scenario)?;
    Ok(collect_episodes(&world, &cfg.sim, d.map_policy, d.map_episodes, d.map_seed, &d.collect, &d.scenario))
}

fn check_dataset(d: &Dataset, cfg: &RunConfig) -> Result<()> {
    if d.is_empty() {
        return Err(Error::Empty("dataset has no transitions".into()));
    }
    if d.meta.obs_dim != cfg.sim.obs_dim() {
        return Err(Error::DimMismatch {
            what: "dataset obs_dim vs config".into(),
            expected: cfg.sim.obs_dim(),
            found: d.meta.obs_dim,
        });
    }
    Ok(())
}

pub fn stage1(d: &Dataset, cfg: &RunConfig) -> Result<Archive> {
    check_dataset(d, cfg)?;
    let table = StateTable::new(d);
    let out = pretrain_encoder(&table.features, d.meta.max_range, &cfg.representation, cfg.seed)?;
    let mut a = Archive::new();
    out.model.save_into(&mut a);
    Ok(a)
}

fn stage1_encoder(prev: &Archive, d: &Dataset, cfg: &RunConfig) -> Result<Encoder> {
    let mut vq = VqVae::new(d.meta.obs_dim, d.meta.max_range, &cfg.representation, cfg.seed);
    vq.load_from(prev)?;
    Ok(vq.encoder)
}

/// Per-episode state counts, the layout of [`StateTable`] rows.
pub fn state_lengths(d: &Dataset) -> Vec<usize> {
    d.episodes.iter().map(|e| e.num_states()).collect()
}

pub fn stage2(d: &Dataset, cfg: &RunConfig, prev: &Archive, log_dir: Option<&Path>) -> Result<Archive> {
    check_dataset(d, cfg)?;
    let table = StateTable::new(d);
    let encoder = stage1_encoder(prev, d, cfg)?;
    let out = train_iql(d, &table, encoder, &cfg.sim, &cfg.iql, cfg.seed)?;
    if let Some(dir) = log_dir {
        write_loss_csv(&out.log, dir.join("iql_loss.csv"))?;
    }
    let z = out.encoder.encode_features(&table.features)?;
    let lengths = state_lengths(d);
    let (aff, _) = train_affordance(&z, &lengths, &cfg.affordance, true, cfg.seed)?;
    let (flat, _) = train_affordance(&z, &lengths, &cfg.affordance, false, cfg.seed)?;
    let mut a = Archive::new();
    a.insert_params("encoder", &out.encoder.params);
    out.models.save_into(&mut a);
    aff.save_into(&mut a, "affordance");
    flat.save_into(&mut a, "affordance_flat");
    Ok(a)
}

pub fn stage3(d: &Dataset, cfg: &RunConfig, prev: &Archive) -> Result<Archive> {
    check_dataset(d, cfg)?;
    let table = StateTable::new(d);
    let mut encoder = Encoder::new(d.meta.obs_dim, d.meta.max_range, &cfg.representation, cfg.seed);
    prev.load_into("encoder", &mut encoder.params)?;
    let z = encoder.encode_features(&table.features)?;
    let mut rnd = Rnd::new(encoder.d_z, &cfg.novelty, cfg.seed);
    train_rnd(&z, &mut rnd, &cfg.novelty, cfg.seed)?;
    let mut a = prev.clone();
    rnd.save_into(&mut a);
    Ok(a)
}

/// Run one stage, reading its predecessor from `dir` and writing its archive there.
pub fn run_stage(stage: usize, d: &Dataset, cfg: &RunConfig, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let prev = |s: usize| {
        let p = stage_path(dir, s);
        if !p.exists() {
            return Err(Error::MissingCheckpoint(p));
        }
        Archive::read(&p)
    };
    let a = match stage {
        1 => stage1(d, cfg)?,
        2 => stage2(d, cfg, &prev(1)?, Some(dir))?,
        3 => stage3(d, cfg, &prev(2)?)?,
        _ => return Err(Error::Config(format!("unknown stage {stage}; expected 1, 2 or 3"))),
    };
    let out = stage_path(dir, stage);
    a.write(&out)?;
    Ok(out)
}

pub fn train_all(d: &Dataset, cfg: &RunConfig, dir: &Path) -> Result<PathBuf> {
    let mut last = PathBuf::new();
    for s in 1..=3 {
        last = run_stage(s, d, cfg, dir)?;
    }
    Ok(last)
}

/// Everything deployment needs, loaded from the final archive.
#[derive(Debug, Clone)]
pub struct Models {
    pub encoder: Encoder,
    pub iql: IqlModels,
    pub affordance: Affordance,
    /// Affordance trained without the temporal encoder.
    pub affordance_flat: Affordance,
    pub rnd: Rnd,
    /// SHA-256 of the archive bytes.
    pub hash: String,
}

impl Models {
    pub fn from_archive(a: &Archive, obs_dim: usize, cfg: &RunConfig) -> Result<Self> {
        let mut encoder = Encoder::new(obs_dim, cfg.sim.max_range, &cfg.representation, cfg.seed);
        a.load_into("encoder", &mut encoder.params)?;
        let d_z = encoder.d_z;
        let mut iql = IqlModels::new(d_z, &cfg.sim, &cfg.iql, cfg.seed);
        iql.load_from(a)?;
        let mut affordance = Affordance::new(d_z, &cfg.affordance, true, cfg.seed);
        affordance.load_from(a, "affordance")?;
        let mut affordance_flat = Affordance::new(d_z, &cfg.affordance, false, cfg.seed);
        affordance_flat.load_from(a, "affordance_flat")?;
        let mut rnd = Rnd::new(d_z, &cfg.novelty, cfg.seed);
        rnd.load_from(a)?;
        Ok(Self {
            encoder,
            iql,
            affordance,
            affordance_flat,
            rnd,
            hash: a.hash(),
        })
    }

    pub fn load(path: impl AsRef<Path>, cfg: &RunConfig) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        Self::from_archive(&Archive::read(path)?, cfg.sim.obs_dim(), cfg)
    }

    pub fn encode_dataset(&self, d: &Dataset) -> Result<Tensor> {
        self.encoder.encode_features(&StateTable::new(d).features)
    }
}
