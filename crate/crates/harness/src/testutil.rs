use std::path::PathBuf;
use std::sync::OnceLock;

use asvit_core::train::RunConfig;

use crate::train::{cmd_train, TrainOptions};

/// A four-layer 16×16 model that trains in well under a second.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.num_layers = 4;
    cfg.model.image_size = 16;
    cfg.model.embed_dim = 16;
    cfg.model.num_heads = 2;
    cfg.prune.locations = vec![1, 2, 3];
    cfg.prune.thresholds = vec![0.02, 0.04, 0.06];
    cfg.prune.temperature = 200.0;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 4;
    cfg.train.theta_lr = 5e-3;
    cfg.pretrain.epochs = 1;
    cfg.data.train_size = 12;
    cfg.data.eval_size = 6;
    cfg
}

pub struct Trained {
    pub dir: tempfile::TempDir,
    pub model: PathBuf,
}

/// One trained tiny run shared by the tests of this crate.
pub fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("run.toml");
        std::fs::write(&config, tiny_config().to_toml().unwrap()).unwrap();
        let out = cmd_train(&TrainOptions {
            config,
            out: dir.path().join("train"),
            teacher: None,
            threads: 1,
            quiet: true,
        })
        .unwrap();
        Trained {
            model: out.model_path,
            dir,
        }
    })
}
