use mgr::data::{synthetic_corpus, CorpusDataset, Split};
use mgr::model::{ModelConfig, ModelParams, Wiring};
use mgr::optim::{OptimConfig, Optimizer};
use mgr::rng::Rng;
use mgr::train::{step_grads, RecomputeMode, RecomputePlan};
use std::time::Instant;

fn main() {
    let ds = CorpusDataset::from_bytes(synthetic_corpus(1 << 20, 1), 0.9).unwrap();
    let mut rng = Rng::new(0);
    for (wiring, mode) in [
        (Wiring::PreNorm, RecomputeMode::StoreAll),
        (Wiring::MgrCompetitive, RecomputeMode::StoreAll),
        (Wiring::MgrCompetitive, RecomputeMode::FallbackInversion),
    ] {
        let cfg = ModelConfig {
            n_layers: 6, d_model: 128, n_heads: 4, d_head: 32,
            vocab_size: 256, context_len: 256, wiring, n_stream: 4,
            rope_theta: 10000.0, b_base: -3.0, l_base: 21.0, tie_embeddings: true,
        };
        let mut params = ModelParams::<f32>::init(&cfg, 0).unwrap();
        let mut opt = Optimizer::<f32>::new(OptimConfig::default(), &params);
        let plan = RecomputePlan { mode, p: 0.01, beta_max: 1.0 - 1e-4 };
        for _ in 0..2 {
            let (t, g) = ds.sample_batch(Split::Train, 32, 256, &mut rng).unwrap();
            let sg = step_grads(&cfg, &params, &t, &g, 32, 256, &plan).unwrap();
            opt.step(&mut params, &sg.grads, 0.001).unwrap();
        }
        let t0 = Instant::now();
        let n = 5;
        for _ in 0..n {
            let t1 = Instant::now();
            let (t, g) = ds.sample_batch(Split::Train, 32, 256, &mut rng).unwrap();
            let sg = step_grads(&cfg, &params, &t, &g, 32, 256, &plan).unwrap();
            let t_grad = t1.elapsed().as_secs_f64();
            let t2 = Instant::now();
            opt.step(&mut params, &sg.grads, 0.001).unwrap();
            print!("[g {:.2} o {:.2}] ", t_grad, t2.elapsed().as_secs_f64());
        }
        let per = t0.elapsed().as_secs_f64() / n as f64;
        println!("\n{:?} / {:?}: {:.2}s per step -> {:.0} min for 2000 steps", wiring, mode, per, per * 2000.0 / 60.0);
    }
}
