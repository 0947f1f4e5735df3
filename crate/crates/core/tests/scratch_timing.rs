use std::time::Instant;
use swingrade::config::ModelConfig;
use swingrade::data::synth::{synth_sample, SynthSpec};
use swingrade::data::Site;
use swingrade::model::Model;
use swingrade::tape::Tape;
use swingrade::train::loss::batch_loss;
use swingrade::train::{AdamW, AdamWParams};

fn time_config(name: &str, cfg: &ModelConfig, batch: usize) {
    let spec = SynthSpec { image_size: cfg.image_size, ..SynthSpec::default() };
    let model = Model::new(cfg, 1).unwrap();
    let mut opt = AdamW::new(AdamWParams::default());
    let mut images = Vec::new();
    let mut grades = Vec::new();
    for i in 0..batch {
        let s = synth_sample(&spec, (i % 5) as u8, Site::Source, i as u64);
        images.extend_from_slice(&s.image);
        grades.push(s.grade);
    }
    // warmup
    let tape = Tape::new();
    let out = model.forward(&tape, &images, batch).unwrap();
    drop(out); drop(tape);
    let t0 = Instant::now();
    let reps = 3;
    for _ in 0..reps {
        let tape = Tape::new();
        let out = model.forward(&tape, &images, batch).unwrap();
        let loss = batch_loss(&out.logits, &grades).unwrap();
        model.params.zero_grad();
        loss.backward().unwrap();
        opt.step(&model.params);
    }
    let per_step = t0.elapsed() / reps;
    // forward-only (predict path)
    let t1 = Instant::now();
    for _ in 0..reps {
        let _ = model.predict(&images, batch).unwrap();
    }
    let per_fwd = t1.elapsed() / reps;
    println!("{name}: train step (batch {batch}) {per_step:?}  |  predict {per_fwd:?}");
}

#[test]
fn step_timings() {
    time_config("bench@64", &ModelConfig::bench(), 32);
    time_config("toy@64", &ModelConfig::toy(), 32);
    let mut gc = ModelConfig::bench();
    gc.patch_size = 2;
    time_config("bench-p2@64", &gc, 32);
}
