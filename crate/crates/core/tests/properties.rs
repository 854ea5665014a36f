use flash_abft::abft::{actual_checksum, fused_kernel, relative_difference};
use flash_abft::attention::KernelConfig;
use flash_abft::fault::{build_inventory, run_with_faults, sample_fault, Injector, RegisterClass};
use flash_abft::matrix::{Matrix, Role};
use flash_abft::numerics::{Format, PrecisionPolicy};
use flash_abft::schedule::{run_block_schedule, CycleInfo, Registers};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn inputs(nq: usize, n: usize, d: usize, fmt: Format, seed: u64) -> (Matrix, Matrix, Matrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (
        Matrix::random_gaussian(nq, d, Role::Q, fmt, &mut rng),
        Matrix::random_gaussian(n, d, Role::K, fmt, &mut rng),
        Matrix::random_gaussian(n, d, Role::V, fmt, &mut rng),
    )
}

fn policy() -> impl Strategy<Value = PrecisionPolicy> {
    prop_oneof![
        Just(PrecisionPolicy::bf16()),
        Just(PrecisionPolicy::fp64()),
        Just(PrecisionPolicy::uniform(Format::Fp32)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn checker_never_changes_the_output(
        nq in 1usize..24, n in 1usize..24, d in 1usize..12, b in 1usize..9,
        p in policy(), seed in any::<u64>(),
    ) {
        let (q, k, v) = inputs(nq, n, d, p.datapath, seed);
        let cfg = KernelConfig::for_inputs(&q, &k).with_block_size(b).with_precision(p);
        let plain = run_block_schedule(&q, &k, &v, &cfg, None).unwrap();
        let fused = fused_kernel(&q, &k, &v, &cfg, None).unwrap();
        prop_assert!(plain.bitwise_eq(&fused.output));
    }

    #[test]
    fn fp64_prediction_tracks_output(
        nq in 1usize..24, n in 1usize..24, d in 1usize..12, b in 1usize..9, seed in any::<u64>(),
    ) {
        let (q, k, v) = inputs(nq, n, d, Format::Fp64, seed);
        let cfg = KernelConfig::for_inputs(&q, &k)
            .with_block_size(b)
            .with_precision(PrecisionPolicy::fp64());
        let run = fused_kernel(&q, &k, &v, &cfg, None).unwrap();
        prop_assert!(relative_difference(run.predicted, actual_checksum(&run.output)) <= 1e-9);
    }

    #[test]
    fn replay_equals_full_simulation(
        nq in 1usize..20, n in 1usize..12, d in 1usize..6, b in 1usize..6,
        p in policy(), seed in any::<u64>(), nfaults in 0usize..4,
    ) {
        let (q, k, v) = inputs(nq, n, d, p.datapath, seed);
        let cfg = KernelConfig::for_inputs(&q, &k).with_block_size(b).with_precision(p);
        let inv = build_inventory(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let faults: Vec<_> = (0..nfaults)
            .map(|_| sample_fault(&mut rng, &inv, cfg.total_cycles()))
            .collect();
        let fast = Injector::new(&q, &k, &v, &cfg).unwrap().run(&faults).unwrap();
        let full = run_with_faults(&q, &k, &v, &cfg, &faults).unwrap();
        prop_assert!(fast.output.bitwise_eq(&full.output));
        prop_assert_eq!(fast.predicted.to_bits(), full.predicted.to_bits());
    }

    #[test]
    fn kernel_state_outweighs_checker(
        nq in 1usize..512, n in 1usize..512, d in 1usize..512, b in 1usize..64, p in policy(),
    ) {
        let cfg = KernelConfig::new(nq, n, d).with_block_size(b).with_precision(p);
        let inv = build_inventory(&cfg);
        prop_assert!(inv.kernel_lane_bits() > inv.checker_bits());
        let sum: u64 = RegisterClass::ALL.iter().map(|&c| inv.bits_of(c)).sum();
        prop_assert_eq!(sum, inv.total_bits());
    }

    #[test]
    fn dead_state_faults_never_change_anything(
        nq in 1usize..20, n in 1usize..10, d in 1usize..6, b in 1usize..6, seed in any::<u64>(),
    ) {
        let (q, k, v) = inputs(nq, n, d, Format::Bf16, seed);
        let cfg = KernelConfig::for_inputs(&q, &k).with_block_size(b);
        let golden = fused_kernel(&q, &k, &v, &cfg, None).unwrap();
        let inv = build_inventory(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..50 {
            let f = sample_fault(&mut rng, &inv, cfg.total_cycles());
            if f.is_live(&cfg) {
                continue;
            }
            let faulty = run_with_faults(&q, &k, &v, &cfg, &[f]).unwrap();
            prop_assert!(faulty.output.bitwise_eq(&golden.output), "{:?}", f);
            prop_assert_eq!(faulty.predicted.to_bits(), golden.predicted.to_bits());
        }
    }
}

#[test]
fn taps_see_every_cycle_in_order() {
    let (q, k, v) = inputs(10, 7, 3, Format::Bf16, 1);
    let cfg = KernelConfig::for_inputs(&q, &k).with_block_size(4);
    let mut seen = Vec::new();
    let mut tap = |info: &CycleInfo, _: &mut Registers| seen.push(info.cycle);
    fused_kernel(&q, &k, &v, &cfg, Some(&mut tap)).unwrap();
    assert_eq!(seen, (0..cfg.total_cycles()).collect::<Vec<_>>());
    assert_eq!(cfg.total_cycles(), 3 * 8);
}
