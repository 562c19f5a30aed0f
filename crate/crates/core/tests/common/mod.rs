#![allow(dead_code)]

use m2clip::Config;

/// A model small enough for many runs per test.
pub fn tiny() -> Config {
    let mut c = Config::default();
    c.data.train_classes = 4;
    c.data.holdout_classes = 2;
    c.data.per_class_train = 2;
    c.data.per_class_val = 2;
    c.data.per_class_holdout = 2;
    c.data.frames = 4;
    c.data.height = 16;
    c.data.width = 16;
    c.model.video_layers = 2;
    c.model.text_layers = 2;
    c.model.video_width = 16;
    c.model.text_width = 16;
    c.model.joint_width = 8;
    c.model.video_heads = 2;
    c.model.text_heads = 2;
    c.model.mlp_ratio = 2;
    c.train.epochs = 2;
    c.train.batch_size = 4;
    c.train.eval_every = 1;
    c
}

/// Every parameter's bytes, by name.
pub fn snapshot(model: &m2clip::Model) -> Vec<(String, bool, Vec<u64>)> {
    model
        .params
        .iter()
        .map(|(_, p)| (p.name.clone(), p.trainable, p.tensor.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}
