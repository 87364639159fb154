// Half-scale pilot: checks loss ordering across wirings and lr settings
// before committing to the full desk-scale runs.
use mgr::data::{synthetic_corpus, CorpusDataset};
use mgr::model::{ModelConfig, Wiring};
use mgr::optim::OptimConfig;
use mgr::train::{train_loop, RecomputeMode, RecomputePlan, TrainSettings};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(300);
    let ds = CorpusDataset::from_bytes(synthetic_corpus(2 << 20, 7), 0.9).unwrap();

    let cfg = |wiring| ModelConfig {
        n_layers: 4, d_model: 96, n_heads: 3, d_head: 32,
        vocab_size: 256, context_len: 128, wiring, n_stream: 4,
        rope_theta: 10000.0, b_base: -3.0, l_base: 21.0, tie_embeddings: true,
    };
    let settings = TrainSettings {
        batch_size: 16,
        total_steps: steps,
        warmup_steps: 50,
        seed: 1,
        recompute: RecomputePlan { mode: RecomputeMode::StoreAll, p: 0.01, beta_max: 1.0 - 1e-4 },
        eval_every: 0,
        eval_batches: 16,
        checkpoint_every: 0,
        log_wall_ms: true,
    };

    for (alr, mlr) in [(3e-3, 1e-2), (1.5e-3, 5e-3), (6e-3, 2e-2)] {
        let optim = OptimConfig { adamw_lr: alr, muon_lr: mlr, ..OptimConfig::default() };
        println!("== adamw_lr {alr} muon_lr {mlr}");
        for wiring in [Wiring::PreNorm, Wiring::MgrCompetitive, Wiring::MgrIndependent] {
            let dir = std::env::temp_dir().join(format!("pilot_{}_{}_{}", wiring.name(), alr, steps));
            let _ = std::fs::remove_dir_all(&dir);
            let out = train_loop::<f32>(&cfg(wiring), &optim, &settings, &ds, &dir, None, "pilot")
                .unwrap();
            println!(
                "  {:>16}: train_ma {:.4} val {:.4} ppl {:.2}",
                wiring.name(),
                out.final_train_ma,
                out.final_val_loss,
                out.final_val_ppl
            );
        }
    }
}
