//! Cycle-level model of the block-parallel accelerator.
//!
//! Queries are processed in blocks of `B` lanes. In each streaming cycle the
//! staging registers latch one key and one value row, which are broadcast
//! to every lane; after `N` streaming cycles a single epilogue cycle divides
//! each lane's accumulators by its sum of exponentials. Lane registers are
//! reloaded at the start of every block, while the global check register
//! persists for the whole run.

use crate::abft;
use crate::attention::{KernelConfig, LaneState};
use crate::error::Result;
use crate::matrix::{Matrix, Role};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Streaming cycle consuming key/value row `step` (1-based).
    Stream { step: usize },
    /// Per-lane division and checksum accumulation.
    Epilogue,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CycleInfo {
    /// Global cycle index across all blocks.
    pub cycle: usize,
    pub block: usize,
    pub phase: Phase,
    /// Lanes holding a query in this block.
    pub active_lanes: usize,
}

/// Registers of the online checker.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckerState {
    /// Sum of the value row latched this cycle.
    pub sumrow: f64,
    /// Running sum of per-query checks over all finished queries.
    pub global_check: f64,
}

/// Architectural state visible to a [`CycleTap`].
#[derive(Clone, Debug, PartialEq)]
pub struct Registers {
    pub lanes: Vec<LaneState>,
    pub key_stage: Vec<f64>,
    pub value_stage: Vec<f64>,
    /// Present only when the checker is wired in.
    pub checker: Option<CheckerState>,
}

/// Observer/mutator invoked at the start of every cycle, after the staging
/// registers latched that cycle's inputs and before any unit reads state.
pub trait CycleTap {
    fn on_cycle(&mut self, info: &CycleInfo, regs: &mut Registers);
}

impl<F: FnMut(&CycleInfo, &mut Registers)> CycleTap for F {
    fn on_cycle(&mut self, info: &CycleInfo, regs: &mut Registers) {
        self(info, regs)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleOutput {
    pub output: Matrix,
    /// Final global check, when the checker is enabled.
    pub predicted: Option<f64>,
    /// `c_N / ell_N` per query row (empty without checker).
    pub query_checks: Vec<f64>,
    pub cycles: usize,
}

pub(crate) struct Engine<'a> {
    cfg: &'a KernelConfig,
    q: &'a Matrix,
    k: &'a Matrix,
    v: &'a Matrix,
    checked: bool,
}

impl<'a> Engine<'a> {
    pub(crate) fn new(
        cfg: &'a KernelConfig,
        q: &'a Matrix,
        k: &'a Matrix,
        v: &'a Matrix,
        checked: bool,
    ) -> Result<Self> {
        cfg.validate_inputs(q, k, v)?;
        Ok(Engine {
            cfg,
            q,
            k,
            v,
            checked,
        })
    }

    pub(crate) fn new_registers(&self) -> Registers {
        let d = self.cfg.hidden_dim;
        let zeros = vec![0.0; d];
        Registers {
            lanes: (0..self.cfg.block_size)
                .map(|_| LaneState::new(&zeros, &self.cfg.precision))
                .collect(),
            key_stage: vec![0.0; d],
            value_stage: vec![0.0; d],
            checker: self.checked.then_some(CheckerState {
                sumrow: 0.0,
                global_check: 0.0,
            }),
        }
    }

    pub(crate) fn active_lanes(&self, block: usize) -> usize {
        let start = block * self.cfg.block_size;
        self.cfg.block_size.min(self.cfg.num_queries - start)
    }

    pub(crate) fn run(&self, mut tap: Option<&mut dyn CycleTap>) -> ScheduleOutput {
        let mut regs = self.new_registers();
        let mut out = Matrix::zeros(self.cfg.num_queries, self.cfg.hidden_dim, Role::O);
        let mut checks = vec![0.0; if self.checked { self.cfg.num_queries } else { 0 }];
        for block in 0..self.cfg.num_blocks() {
            self.run_block(block, &mut regs, &mut out, &mut checks, tap.as_deref_mut());
        }
        ScheduleOutput {
            output: out,
            predicted: regs.checker.map(|c| c.global_check),
            query_checks: checks,
            cycles: self.cfg.total_cycles(),
        }
    }

    /// Runs the `N + 1` cycles of one block. Writes the block's output rows
    /// (and per-query checks) and accumulates into the global check register.
    pub(crate) fn run_block<'t>(
        &self,
        block: usize,
        regs: &mut Registers,
        out: &mut Matrix,
        checks: &mut [f64],
        mut tap: Option<&mut (dyn CycleTap + 't)>,
    ) {
        let cfg = self.cfg;
        let p = &cfg.precision;
        let scale = cfg.score_scale();
        let first_row = block * cfg.block_size;
        let active = self.active_lanes(block);
        let base_cycle = block * cfg.cycles_per_block();

        // query preload, not a fault window
        let idle = vec![0.0; cfg.hidden_dim];
        for (l, lane) in regs.lanes.iter_mut().enumerate() {
            if l < active {
                lane.reset(self.q.row(first_row + l), p);
            } else {
                lane.reset(&idle, p);
            }
        }

        for step in 1..=cfg.seq_len {
            let row = step - 1;
            for (dst, &x) in regs.key_stage.iter_mut().zip(self.k.row(row)) {
                *dst = p.round_datapath(x);
            }
            for (dst, &x) in regs.value_stage.iter_mut().zip(self.v.row(row)) {
                *dst = p.round_datapath(x);
            }
            if let Some(checker) = regs.checker.as_mut() {
                // the row adder sits on the value read port
                checker.sumrow = abft::row_sum(&regs.value_stage);
            }
            if let Some(t) = tap.as_deref_mut() {
                let info = CycleInfo {
                    cycle: base_cycle + row,
                    block,
                    phase: Phase::Stream { step },
                    active_lanes: active,
                };
                t.on_cycle(&info, regs);
            }
            let Registers {
                lanes,
                key_stage,
                value_stage,
                checker,
            } = regs;
            let sumrow = checker.map(|c| c.sumrow);
            for lane in lanes.iter_mut().take(active) {
                let f = lane.advance_softmax(key_stage, scale, p);
                lane.accumulate_output(value_stage, f, p);
                if let Some(sumrow) = sumrow {
                    lane.c = abft::check_lane_update(lane.c, sumrow, f);
                }
            }
        }

        if let Some(t) = tap.as_deref_mut() {
            let info = CycleInfo {
                cycle: base_cycle + cfg.seq_len,
                block,
                phase: Phase::Epilogue,
                active_lanes: active,
            };
            t.on_cycle(&info, regs);
        }
        for (l, lane) in regs.lanes.iter().enumerate().take(active) {
            lane.normalized_output(p, out.row_mut(first_row + l));
            if let Some(checker) = regs.checker.as_mut() {
                let check = abft::query_check(lane.c, lane.ell);
                checks[first_row + l] = check;
                checker.global_check += check;
            }
        }
    }
}

/// Runs the plain FlashAttention-2 accelerator (no checker) over all query
/// blocks and returns the output matrix.
pub fn run_block_schedule(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    cfg: &KernelConfig,
    tap: Option<&mut dyn CycleTap>,
) -> Result<Matrix> {
    Ok(Engine::new(cfg, q, k, v, false)?.run(tap).output)
}
