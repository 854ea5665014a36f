//! Register-level storage model of the checked accelerator and single-bit
//! upset injection.
//!
//! Every lane owns `q`, `o` (one register per element), `m`, `ell` and the
//! check accumulator `c`. Shared registers are the key/value staging
//! registers, the row-sum register and the global check. Faults flip one
//! stored bit at the start of a cycle; input memories are not targets.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::abft::{actual_checksum, compare, Category, FusedOutput, Verdict};
use crate::attention::KernelConfig;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::numerics::{Format, PrecisionPolicy};
use crate::schedule::{CycleInfo, CycleTap, Engine, Registers};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RegisterClass {
    QueryReg,
    OutputReg,
    MaxReg,
    SumExpReg,
    LaneCheckReg,
    GlobalCheckReg,
    SumrowReg,
    KeyStageReg,
    ValueStageReg,
}

impl RegisterClass {
    pub const ALL: [RegisterClass; 9] = [
        RegisterClass::QueryReg,
        RegisterClass::OutputReg,
        RegisterClass::MaxReg,
        RegisterClass::SumExpReg,
        RegisterClass::LaneCheckReg,
        RegisterClass::GlobalCheckReg,
        RegisterClass::SumrowReg,
        RegisterClass::KeyStageReg,
        RegisterClass::ValueStageReg,
    ];

    /// Registers that belong to the checking logic.
    pub fn is_checker(self) -> bool {
        matches!(
            self,
            RegisterClass::LaneCheckReg | RegisterClass::GlobalCheckReg | RegisterClass::SumrowReg
        )
    }

    /// Per-lane kernel state: query, output, max and sum-of-exponentials.
    pub fn is_kernel_lane_state(self) -> bool {
        matches!(
            self,
            RegisterClass::QueryReg
                | RegisterClass::OutputReg
                | RegisterClass::MaxReg
                | RegisterClass::SumExpReg
        )
    }

    pub fn is_per_lane(self) -> bool {
        self.is_kernel_lane_state() || self == RegisterClass::LaneCheckReg
    }

    /// Holds one element of a `d`-vector.
    pub fn is_vector(self) -> bool {
        matches!(
            self,
            RegisterClass::QueryReg
                | RegisterClass::OutputReg
                | RegisterClass::KeyStageReg
                | RegisterClass::ValueStageReg
        )
    }

    pub fn format(self, policy: &PrecisionPolicy) -> Format {
        match self {
            RegisterClass::QueryReg | RegisterClass::KeyStageReg | RegisterClass::ValueStageReg => {
                policy.datapath
            }
            RegisterClass::OutputReg => policy.output_accum,
            RegisterClass::MaxReg | RegisterClass::SumExpReg => policy.stats,
            RegisterClass::LaneCheckReg | RegisterClass::GlobalCheckReg | RegisterClass::SumrowReg => {
                PrecisionPolicy::CHECKSUM_FORMAT
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InventoryEntry {
    pub class: RegisterClass,
    pub lane: Option<usize>,
    pub element: Option<usize>,
    pub width: u32,
}

/// Every storage element of the accelerator, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct RegisterInventory {
    entries: Vec<InventoryEntry>,
    /// First global bit index of each entry.
    offsets: Vec<u64>,
    total_bits: u64,
}

pub fn build_inventory(cfg: &KernelConfig) -> RegisterInventory {
    let p = &cfg.precision;
    let d = cfg.hidden_dim;
    let mut entries = Vec::new();
    let mut push = |class: RegisterClass, lane, element| {
        entries.push(InventoryEntry {
            class,
            lane,
            element,
            width: class.format(p).bits(),
        })
    };
    for lane in 0..cfg.block_size {
        for e in 0..d {
            push(RegisterClass::QueryReg, Some(lane), Some(e));
        }
        for e in 0..d {
            push(RegisterClass::OutputReg, Some(lane), Some(e));
        }
        push(RegisterClass::MaxReg, Some(lane), None);
        push(RegisterClass::SumExpReg, Some(lane), None);
        push(RegisterClass::LaneCheckReg, Some(lane), None);
    }
    push(RegisterClass::GlobalCheckReg, None, None);
    push(RegisterClass::SumrowReg, None, None);
    for e in 0..d {
        push(RegisterClass::KeyStageReg, None, Some(e));
    }
    for e in 0..d {
        push(RegisterClass::ValueStageReg, None, Some(e));
    }

    let mut offsets = Vec::with_capacity(entries.len());
    let mut total_bits = 0u64;
    for e in &entries {
        offsets.push(total_bits);
        total_bits += e.width as u64;
    }
    RegisterInventory {
        entries,
        offsets,
        total_bits,
    }
}

impl RegisterInventory {
    pub fn entries(&self) -> &[InventoryEntry] {
        &self.entries
    }

    pub fn total_bits(&self) -> u64 {
        self.total_bits
    }

    pub fn bits_of(&self, class: RegisterClass) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.class == class)
            .map(|e| e.width as u64)
            .sum()
    }

    pub fn checker_bits(&self) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.class.is_checker())
            .map(|e| e.width as u64)
            .sum()
    }

    pub fn kernel_lane_bits(&self) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.class.is_kernel_lane_state())
            .map(|e| e.width as u64)
            .sum()
    }

    pub fn checker_fraction(&self) -> f64 {
        self.checker_bits() as f64 / self.total_bits as f64
    }

    /// Register holding global bit `bit`, and the bit's index inside it.
    pub fn locate(&self, bit: u64) -> Option<(&InventoryEntry, u32)> {
        if bit >= self.total_bits {
            return None;
        }
        let idx = self.offsets.partition_point(|&o| o <= bit) - 1;
        Some((&self.entries[idx], (bit - self.offsets[idx]) as u32))
    }
}

/// One single-bit upset: which register, which bit, and when.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FaultSpec {
    /// Global cycle index across all blocks.
    pub cycle: usize,
    pub register: RegisterClass,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lane: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub element: Option<usize>,
    pub bit: u32,
}

impl FaultSpec {
    pub fn validate(&self, cfg: &KernelConfig) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidFault(msg));
        if self.cycle >= cfg.total_cycles() {
            return fail(format!(
                "cycle {} is outside the {}-cycle schedule",
                self.cycle,
                cfg.total_cycles()
            ));
        }
        let class = self.register;
        match (class.is_per_lane(), self.lane) {
            (true, None) => return fail(format!("{class:?} needs a lane index")),
            (true, Some(l)) if l >= cfg.block_size => {
                return fail(format!("lane {l} out of range for block size {}", cfg.block_size))
            }
            (false, Some(_)) => return fail(format!("{class:?} is shared and takes no lane")),
            _ => {}
        }
        match (class.is_vector(), self.element) {
            (true, None) => return fail(format!("{class:?} needs an element index")),
            (true, Some(e)) if e >= cfg.hidden_dim => {
                return fail(format!("element {e} out of range for d = {}", cfg.hidden_dim))
            }
            (false, Some(_)) => return fail(format!("{class:?} is scalar and takes no element")),
            _ => {}
        }
        let width = class.format(&cfg.precision).bits();
        if self.bit >= width {
            return fail(format!("bit {} out of range for {width}-bit {class:?}", self.bit));
        }
        Ok(())
    }

    pub fn block(&self, cfg: &KernelConfig) -> usize {
        self.cycle / cfg.cycles_per_block()
    }

    fn in_epilogue(&self, cfg: &KernelConfig) -> bool {
        self.cycle % cfg.cycles_per_block() == cfg.seq_len
    }

    /// False only when the addressed state is provably never read again
    /// before being overwritten: lanes idle in the block, query and max
    /// registers during the division cycle, and staging/row-sum registers
    /// during the division cycle.
    pub fn is_live(&self, cfg: &KernelConfig) -> bool {
        let block = self.block(cfg);
        let active = cfg
            .block_size
            .min(cfg.num_queries - block * cfg.block_size);
        if let Some(lane) = self.lane {
            if lane >= active {
                return false;
            }
        }
        let epilogue = self.in_epilogue(cfg);
        match self.register {
            RegisterClass::QueryReg | RegisterClass::MaxReg => !epilogue,
            RegisterClass::KeyStageReg | RegisterClass::ValueStageReg | RegisterClass::SumrowReg => {
                !epilogue
            }
            RegisterClass::OutputReg
            | RegisterClass::SumExpReg
            | RegisterClass::LaneCheckReg
            | RegisterClass::GlobalCheckReg => true,
        }
    }
}

/// Draws one fault: cycle uniform over the schedule, bit uniform over every
/// stored bit, so a register is hit in proportion to its width.
pub fn sample_fault<R: Rng + ?Sized>(
    rng: &mut R,
    inventory: &RegisterInventory,
    schedule_cycles: usize,
) -> FaultSpec {
    assert!(inventory.total_bits() > 0 && schedule_cycles > 0);
    let cycle = rng.random_range(0..schedule_cycles);
    let bit = rng.random_range(0..inventory.total_bits());
    let (entry, bit) = inventory.locate(bit).expect("bit drawn inside the inventory");
    FaultSpec {
        cycle,
        register: entry.class,
        lane: entry.lane,
        element: entry.element,
        bit,
    }
}

fn register_mut<'r>(regs: &'r mut Registers, spec: &FaultSpec) -> &'r mut f64 {
    let lane = spec.lane.unwrap_or(0);
    let element = spec.element.unwrap_or(0);
    match spec.register {
        RegisterClass::QueryReg => &mut regs.lanes[lane].q[element],
        RegisterClass::OutputReg => &mut regs.lanes[lane].o[element],
        RegisterClass::MaxReg => &mut regs.lanes[lane].m,
        RegisterClass::SumExpReg => &mut regs.lanes[lane].ell,
        RegisterClass::LaneCheckReg => &mut regs.lanes[lane].c,
        RegisterClass::KeyStageReg => &mut regs.key_stage[element],
        RegisterClass::ValueStageReg => &mut regs.value_stage[element],
        RegisterClass::GlobalCheckReg => {
            &mut regs.checker.as_mut().expect("checker wired in").global_check
        }
        RegisterClass::SumrowReg => &mut regs.checker.as_mut().expect("checker wired in").sumrow,
    }
}

/// Flips the addressed bit of the register's current contents.
pub fn apply_fault(regs: &mut Registers, spec: &FaultSpec, policy: &PrecisionPolicy) {
    let format = spec.register.format(policy);
    let slot = register_mut(regs, spec);
    let flipped = format
        .encode(*slot)
        .flip_bit(spec.bit)
        .expect("fault validated against register width");
    *slot = format.decode(flipped);
}

/// Cycle tap applying a cycle-sorted fault list.
struct FaultTap<'f> {
    faults: &'f [FaultSpec],
    next: usize,
    policy: PrecisionPolicy,
}

impl CycleTap for FaultTap<'_> {
    fn on_cycle(&mut self, info: &CycleInfo, regs: &mut Registers) {
        while self.next < self.faults.len() && self.faults[self.next].cycle <= info.cycle {
            let f = self.faults[self.next];
            if f.cycle == info.cycle {
                apply_fault(regs, &f, &self.policy);
            }
            self.next += 1;
        }
    }
}

fn sorted_valid(faults: &[FaultSpec], cfg: &KernelConfig) -> Result<Vec<FaultSpec>> {
    for f in faults {
        f.validate(cfg)?;
    }
    let mut sorted = faults.to_vec();
    sorted.sort_by_key(|f| f.cycle);
    Ok(sorted)
}

/// Runs the checked kernel with every fault applied at the start of its
/// cycle. All faults are validated before execution begins.
pub fn run_with_faults(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    cfg: &KernelConfig,
    faults: &[FaultSpec],
) -> Result<FusedOutput> {
    let sorted = sorted_valid(faults, cfg)?;
    let mut tap = FaultTap {
        faults: &sorted,
        next: 0,
        policy: cfg.precision,
    };
    crate::abft::fused_kernel(q, k, v, cfg, Some(&mut tap))
}

/// `Detected`, `FalsePositive`, `Silent` or `Masked` from bitwise output
/// corruption and the checker flag.
pub fn classify(golden: &Matrix, faulty: &Matrix, flagged: bool) -> Category {
    Category::from_flags(!golden.bitwise_eq(faulty), flagged)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectionOutcome {
    pub verdict: Verdict,
    pub output_corrupted: bool,
    pub checker_flagged: bool,
}

/// Compares a faulty run against the fault-free output and the checker.
pub fn evaluate(golden: &Matrix, faulty: &FusedOutput, tolerance: f64, nan_aware: bool) -> InjectionOutcome {
    let actual = actual_checksum(&faulty.output);
    let flagged = compare(faulty.predicted, actual, tolerance, nan_aware);
    let corrupted = !golden.bitwise_eq(&faulty.output);
    InjectionOutcome {
        verdict: Verdict::new(Category::from_flags(corrupted, flagged), faulty.predicted, actual),
        output_corrupted: corrupted,
        checker_flagged: flagged,
    }
}

/// Element-level comparison of a faulty output against the golden one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputDiff {
    pub elements: usize,
    pub differing_elements: usize,
    pub differing_rows: usize,
    /// NaN when a differing element is NaN on either side.
    pub max_abs_diff: f64,
}

pub fn diff_outputs(golden: &Matrix, faulty: &Matrix) -> OutputDiff {
    let mut differing = 0;
    let mut max_abs_diff = 0.0f64;
    for (&g, &f) in golden.data().iter().zip(faulty.data()) {
        if g.to_bits() != f.to_bits() {
            differing += 1;
            let d = (g - f).abs();
            max_abs_diff = if d.is_nan() || max_abs_diff.is_nan() {
                f64::NAN
            } else {
                max_abs_diff.max(d)
            };
        }
    }
    OutputDiff {
        elements: golden.data().len(),
        differing_elements: differing,
        differing_rows: golden.differing_rows(faulty).len(),
        max_abs_diff,
    }
}

/// Fault-free reference for a fixed input set.
#[derive(Clone, Debug, PartialEq)]
pub struct GoldenRun {
    pub fused: FusedOutput,
    pub actual: f64,
}

impl GoldenRun {
    pub fn output(&self) -> &Matrix {
        &self.fused.output
    }

    pub fn predicted(&self) -> f64 {
        self.fused.predicted
    }
}

/// Replays faults against a cached golden run by re-simulating only the
/// query blocks that receive a fault.
///
/// Lane registers are reloaded at every block boundary and staging
/// registers are overwritten before they are read, so the global check is
/// the only state crossing blocks; untouched blocks contribute their golden
/// per-query checks in the same order the epilogue adds them.
pub struct Injector<'a> {
    engine: Engine<'a>,
    cfg: &'a KernelConfig,
    golden: GoldenRun,
}

impl<'a> Injector<'a> {
    pub fn new(q: &'a Matrix, k: &'a Matrix, v: &'a Matrix, cfg: &'a KernelConfig) -> Result<Self> {
        let engine = Engine::new(cfg, q, k, v, true)?;
        let run = engine.run(None);
        let fused = FusedOutput {
            predicted: run.predicted.unwrap_or(0.0),
            output: run.output,
            query_checks: run.query_checks,
        };
        let actual = actual_checksum(&fused.output);
        Ok(Injector {
            engine,
            cfg,
            golden: GoldenRun { fused, actual },
        })
    }

    pub fn golden(&self) -> &GoldenRun {
        &self.golden
    }

    pub fn config(&self) -> &KernelConfig {
        self.cfg
    }

    /// Bit-identical to [`run_with_faults`] on the same inputs.
    pub fn run(&self, faults: &[FaultSpec]) -> Result<FusedOutput> {
        let sorted = sorted_valid(faults, self.cfg)?;
        let faulty_blocks: BTreeSet<usize> = sorted.iter().map(|f| f.block(self.cfg)).collect();
        let mut output = self.golden.fused.output.clone();
        let mut checks = self.golden.fused.query_checks.clone();
        let mut regs = self.engine.new_registers();
        let mut tap = FaultTap {
            faults: &sorted,
            next: 0,
            policy: self.cfg.precision,
        };
        let mut global = 0.0;
        for block in 0..self.cfg.num_blocks() {
            if faulty_blocks.contains(&block) {
                regs.checker.as_mut().expect("checker wired in").global_check = global;
                self.engine
                    .run_block(block, &mut regs, &mut output, &mut checks, Some(&mut tap));
                global = regs.checker.as_ref().expect("checker wired in").global_check;
            } else {
                let first = block * self.cfg.block_size;
                for row in first..first + self.engine.active_lanes(block) {
                    global += self.golden.fused.query_checks[row];
                }
            }
        }
        Ok(FusedOutput {
            output,
            predicted: global,
            query_checks: checks,
        })
    }

    pub fn evaluate(&self, faults: &[FaultSpec], tolerance: f64, nan_aware: bool) -> Result<InjectionOutcome> {
        let faulty = self.run(faults)?;
        Ok(evaluate(self.golden.output(), &faulty, tolerance, nan_aware))
    }
}
