use winrec::model::{DecodePolicy, Model, ModelConfig};
use winrec::training::{train_loop, TrainConfig};
use winrec::windowing::PlanMode;

#[test]
fn trained_model_continues_a_periodic_sequence() {
    let period = [0u32, 3, 1, 4, 2];
    let docs: Vec<Vec<u32>> = (0..4)
        .map(|s| (0..80).map(|i| period[(i + s) % period.len()]).collect())
        .collect();
    let mut cfg = ModelConfig::tiny(5, 16);
    cfg.layers = 1;
    cfg.insert_layer = 1;
    let tc = TrainConfig {
        window: 8,
        windows_per_sequence: 2,
        mode: PlanMode::Recurrent,
        lr: 1e-2,
        warmup_steps: 10,
        epochs: 40,
        validate_every_tokens: 1_000_000,
        record_wallclock: false,
        ..TrainConfig::default()
    };
    let out = train_loop(Model::init(cfg, 1).unwrap(), &docs, &docs[..1], &tc).unwrap();
    let prompt = [1u32, 4, 2, 0];
    for mode in [PlanMode::Baseline, PlanMode::Recurrent] {
        let got = out.last.greedy_decode(&prompt, 12, &DecodePolicy::disjoint(8, mode)).unwrap();
        let want: Vec<u32> = (0..12).map(|i| period[(i + 1) % period.len()]).collect();
        assert_eq!(got, want, "{mode:?}");
    }
}
