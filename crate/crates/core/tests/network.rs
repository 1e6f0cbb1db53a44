//! Model assembly, forward contract and cost accounting.

mod common;

use common::{randomize, rng};
use deeptraverse_core::accounting::{cost_report, count_flops, count_params, emit_cost_table};
use deeptraverse_core::autograd::Tape;
use deeptraverse_core::network::predict;
use deeptraverse_core::{build_model, Mode, ModelConfig, StageConfig, Tensor};

fn tiny() -> ModelConfig {
    ModelConfig {
        input_channels: 3,
        stem_channels: 8,
        stages: vec![StageConfig::new(8, 1, 1), StageConfig::new(16, 1, 2)],
        reduction: 4,
        recursion: 1,
        dropout_rate: 0.1,
        num_classes: 10,
        depthwise_kernel: 3,
        min_excitation_width: 4,
    }
}

fn config_grid() -> Vec<ModelConfig> {
    let mut grid = vec![tiny(), ModelConfig::dt_tiny(3, 10), ModelConfig::dt_tiny(1, 10)];
    let mut wide = ModelConfig::dt_tiny(3, 100);
    wide.reduction = 4;
    wide.stages.push(StageConfig::new(128, 2, 2));
    grid.push(wide);
    let mut odd = tiny();
    odd.depthwise_kernel = 5;
    odd.min_excitation_width = 1;
    odd.stages[0].recursion_override = Some(3);
    grid.push(odd);
    grid
}

#[test]
fn tiny_config_builds_two_blocks_with_projection_last() {
    let m = build_model(&tiny(), 0).unwrap();
    assert_eq!(m.arch.blocks.len(), 2);
    assert!(m.arch.blocks[0].shortcut.is_identity());
    assert!(!m.arch.blocks[1].shortcut.is_identity());
    let logits = m.logits(&Tensor::randn(&[2, 3, 8, 8], 1.0, &mut rng(1))).unwrap();
    assert_eq!(logits.shape(), [2, 10]);
}

#[test]
fn construction_is_deterministic_per_seed() {
    let a = build_model(&tiny(), 7).unwrap();
    let b = build_model(&tiny(), 7).unwrap();
    let c = build_model(&tiny(), 8).unwrap();
    let values = |m: &deeptraverse_core::Model| m.params.iter().flat_map(|(_, p)| p.value.data().to_vec()).collect::<Vec<_>>();
    assert_eq!(values(&a).iter().map(|v| v.to_bits()).collect::<Vec<_>>(), values(&b).iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_ne!(values(&a), values(&c));
}

#[test]
fn registry_is_duplicate_free_and_matches_the_analytic_count() {
    for cfg in config_grid() {
        let m = build_model(&cfg, 3).unwrap();
        let mut names: Vec<&str> = m.params.iter().map(|(_, p)| p.name.as_str()).collect();
        let total = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), total);
        assert_eq!(m.num_params() as u64, count_params(&m).unwrap());
    }
}

#[test]
fn parameters_are_constant_and_flops_affine_in_recursion() {
    for base in config_grid() {
        let mut params = Vec::new();
        let mut flops = Vec::new();
        for r in [1usize, 2, 4, 8] {
            let cfg = base.clone().with_recursion(r);
            let report = cost_report(&cfg, (32, 32), "grid").unwrap();
            let m = build_model(&cfg, 0).unwrap();
            assert_eq!(m.num_params() as u64, report.total_params);
            params.push(report.total_params);
            flops.push(report.total_flops as i128);
        }
        assert!(params.iter().all(|&p| p == params[0]));
        // F(R) = a + b·R exactly: equal slope on every interval
        let slope = flops[1] - flops[0];
        assert!(slope > 0);
        assert_eq!(flops[2] - flops[1], 2 * slope);
        assert_eq!(flops[3] - flops[2], 4 * slope);
    }
}

#[test]
fn reference_network_fits_the_mobile_budget() {
    let report = cost_report(&ModelConfig::dt_tiny(3, 10), (32, 32), "DT-Tiny").unwrap();
    assert!(report.total_params < 1_000_000, "{}", report.total_params);
    assert!(report.total_flops < 100_000_000, "{}", report.total_flops);
    let table = emit_cost_table(&[report]);
    assert!(table.csv.lines().nth(1).unwrap().starts_with("DT-Tiny,32,32,"));
}

#[test]
fn batch_composition_does_not_change_inference_logits() {
    let mut m = build_model(&tiny(), 5).unwrap();
    randomize(&mut m.params, &mut m.stats, 6);
    let batch = Tensor::randn(&[32, 3, 8, 8], 1.0, &mut rng(7));
    let all = m.logits(&batch).unwrap();
    for i in [0, 13, 31] {
        let one = m.logits(&batch.gather_rows(&[i]).unwrap()).unwrap();
        assert!(one.max_abs_diff(&all.gather_rows(&[i]).unwrap()).unwrap() < 1e-12);
    }
    let dup = m.logits(&batch.gather_rows(&[4, 4]).unwrap()).unwrap();
    assert_eq!(dup.data()[..10], dup.data()[10..]);
}

#[test]
fn zero_input_yields_the_head_bias() {
    // at initialisation every bias and shift is zero and running statistics are (0, 1),
    // so a zero image stays zero through the stem and every block, and the
    // excitation only rescales zeros; the logits are the head bias
    let mut m = build_model(&tiny(), 9).unwrap();
    let b: Vec<f64> = (0..10).map(|i| 0.1 * i as f64 - 0.3).collect();
    let head_bias = m.arch.head.bias.unwrap();
    m.params.get_mut(head_bias).data_mut().copy_from_slice(&b);
    let logits = m.logits(&Tensor::zeros(&[2, 3, 8, 8])).unwrap();
    assert_eq!(&logits.data()[..10], b.as_slice());
    assert_eq!(&logits.data()[10..], b.as_slice());
}

#[test]
fn invalid_inputs_are_rejected() {
    let mut m = build_model(&tiny(), 0).unwrap();
    assert!(m.logits(&Tensor::zeros(&[1, 1, 8, 8])).is_err());
    assert!(m.logits(&Tensor::zeros(&[1, 3, 1, 1])).is_err());
    let mut tape = Tape::new();
    assert!(m.forward(&mut tape, Tensor::zeros(&[1, 3, 1, 8]), Mode::Eval, &mut rng(0)).is_err());
}

#[test]
fn training_forward_updates_running_statistics_only_when_training() {
    let mut m = build_model(&tiny(), 1).unwrap();
    let before = m.stats.clone();
    let x = Tensor::randn(&[4, 3, 8, 8], 1.0, &mut rng(2));
    m.logits(&x).unwrap();
    let mut tape = Tape::new();
    m.forward(&mut tape, x.clone(), Mode::Eval, &mut rng(0)).unwrap();
    assert!(m.stats.iter().zip(before.iter()).all(|(a, b)| a.mean == b.mean && a.var == b.var));
    let mut tape = Tape::new();
    m.forward(&mut tape, x, Mode::Train, &mut rng(0)).unwrap();
    assert!(m.stats.iter().zip(before.iter()).any(|(a, b)| a.mean != b.mean));
}

#[test]
fn predictions_break_ties_low() {
    let l = Tensor::from_vec(&[2, 3], vec![0.1, 0.9, 0.3, 1.0, 1.0, 1.0]).unwrap();
    assert_eq!(predict(&l).unwrap(), [1, 0]);
}

#[test]
fn flop_count_tracks_resolution() {
    let m = build_model(&ModelConfig::dt_tiny(3, 10), 0).unwrap();
    let small = count_flops(&m, (16, 16)).unwrap();
    let large = count_flops(&m, (32, 32)).unwrap();
    assert!(large > 3 * small && large < 5 * small);
}
