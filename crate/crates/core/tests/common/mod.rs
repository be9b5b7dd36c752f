//! Trained default pipeline shared by the slower integration tests.
//!
//! Training takes a few minutes, so the checkpoint and datasets are cached
//! under the cargo target directory keyed by a hash of the configuration.
#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;

use scalenav::config::RunConfig;
use scalenav::data::{read_dataset, write_dataset, Dataset};
use scalenav::sim::scenario::Registry;
use scalenav::topo_map::{build_map, TopoMap};
use scalenav::train::{collect_map_data, collect_training_data, train_all, Models, MODEL_FILE};
use sha2::{Digest, Sha256};

pub struct Fixture {
    pub cfg: RunConfig,
    pub reg: Registry,
    pub data: Dataset,
    pub map_data: Dataset,
    pub models: Models,
    pub map: TopoMap,
}

pub fn cache_dir(tag: &str, cfg: &RunConfig) -> PathBuf {
    let key = hex::encode(&Sha256::digest(cfg.to_toml().as_bytes())[..8]);
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("{tag}-{key}"))
}

/// Run `make` into a scratch directory unless `dir` already holds its output.
pub fn cached(dir: &PathBuf, make: impl FnOnce(&std::path::Path)) {
    if dir.exists() {
        return;
    }
    let tmp = dir.with_extension(format!("partial-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&tmp);
    std::fs::create_dir_all(&tmp).unwrap();
    make(&tmp);
    if std::fs::rename(&tmp, dir).is_err() {
        // another process finished first
        let _ = std::fs::remove_dir_all(&tmp);
    }
}

pub fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = RunConfig::default();
        let reg = Registry::builtin();
        let dir = cache_dir("default-pipeline", &cfg);
        cached(&dir, |out| {
            let data = collect_training_data(&cfg, &reg).unwrap();
            write_dataset(&data, out.join("train.scn")).unwrap();
            write_dataset(&collect_map_data(&cfg, &reg).unwrap(), out.join("map.scn")).unwrap();
            train_all(&data, &cfg, out).unwrap();
        });
        let data = read_dataset(dir.join("train.scn")).unwrap();
        let map_data = read_dataset(dir.join("map.scn")).unwrap();
        let models = Models::load(dir.join(MODEL_FILE), &cfg).unwrap();
        let map = build_map(
            &map_data,
            &models.encoder,
            &models.iql,
            cfg.map.node_stride,
            cfg.map.edge_threshold,
            &models.hash,
        )
        .unwrap();
        Fixture {
            cfg,
            reg,
            data,
            map_data,
            models,
            map,
        }
    })
}
