//! Analytic cost model: per-step compute and memory time, pipelined delay
//! between consecutive steps with different splits, intermediate-result
//! accounting, and total-time prediction for any ratio vector.
//!
//! A ratio `r[i]` is the narrow (CPU-like) device's share of step `i`'s
//! items. Total series time is the longer of the two devices' sums of
//! per-step compute, memory, delay, and handoff components.

use crate::device::{transfer_time, DeviceProfile, TransferLink};
use crate::steps::{SeriesWork, StepId};

/// Per-step statistics the model consumes, either measured from a material
/// run or estimated by the planner.
#[derive(Clone, Debug)]
pub struct StepStats {
    pub step: StepId,
    /// Items flowing through the step in the simulator's stream.
    pub x: f64,
    /// Model-facing input count (emission counts matched items only).
    pub model_x: f64,
    /// Average workload weight per model item.
    pub avg_weight: f64,
    /// Lockstep inflation observed at each device's wavefront width.
    pub inflation_cpu: f64,
    pub inflation_gpu: f64,
}

#[derive(Clone, Debug)]
pub struct SeriesStats {
    pub steps: Vec<StepStats>,
    /// Items entering the series, used for dispatch transfer sizing.
    pub input_items: f64,
}

impl SeriesStats {
    /// Measured statistics from an executed series.
    pub fn from_work(work: &SeriesWork, cpu: &DeviceProfile, gpu: &DeviceProfile) -> Self {
        let steps = work
            .steps
            .iter()
            .enumerate()
            .map(|(pos, &step)| {
                let (inf_c, inf_g) = match &work.weights[pos] {
                    Some(w) => (
                        crate::device::wavefront_inflation(w, cpu.wavefront_width),
                        crate::device::wavefront_inflation(w, gpu.wavefront_width),
                    ),
                    None => (1.0, 1.0),
                };
                StepStats {
                    step,
                    x: work.x as f64,
                    model_x: work.model_x[pos],
                    avg_weight: work.avg_weight[pos],
                    inflation_cpu: inf_c,
                    inflation_gpu: inf_g,
                }
            })
            .collect();
        SeriesStats { steps, input_items: work.x as f64 }
    }

    /// Planner-side estimate before anything ran. `load` is expected tuples
    /// per bucket, `sel` the expected match fraction on the probe side.
    pub fn estimate(steps: &[StepId], x: usize, load: f64, sel: f64) -> Self {
        let lockstep_guess = 1.35;
        let stats = steps
            .iter()
            .map(|&step| {
                let (model_x, avg_w, weighted) = match step {
                    StepId::BuildKeySearch => (x as f64, load.max(1.0), true),
                    StepId::ProbeKeySearch => (x as f64, load.max(0.5), true),
                    StepId::ProbeEmit => ((x as f64 * sel).max(0.0), 1.0, true),
                    _ => (x as f64, 1.0, false),
                };
                StepStats {
                    step,
                    x: x as f64,
                    model_x,
                    avg_weight: avg_w,
                    inflation_cpu: 1.0,
                    inflation_gpu: if weighted { lockstep_guess } else { 1.0 },
                }
            })
            .collect();
        SeriesStats { steps: stats, input_items: x as f64 }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Environment shared by all predictions of one run.
#[derive(Clone, Debug)]
pub struct ModelEnv {
    pub cpu: DeviceProfile,
    pub gpu: DeviceProfile,
    pub link: TransferLink,
    /// Bytes per intermediate item handed between devices.
    pub item_bytes: f64,
    /// Bytes per input tuple dispatched to the wide device at series start.
    pub input_bytes: f64,
    /// Charge the dispatch transfer at the start of a series.
    pub charge_dispatch: bool,
}

impl ModelEnv {
    pub fn new(cpu: DeviceProfile, gpu: DeviceProfile, link: TransferLink) -> Self {
        let charge = link.enabled;
        ModelEnv { cpu, gpu, link, item_bytes: 8.0, input_bytes: 8.0, charge_dispatch: charge }
    }
}

/// Compute time of one step share: `instr_per_item * share * x` cycles at
/// the device-level peak IPC.
pub fn comp_time(instr_per_item: f64, share: f64, x: f64, device_ipc: f64, clock_hz: f64) -> f64 {
    instr_per_item * share * x / (device_ipc * clock_hz)
}

/// Memory stall time of one step share given the device-normalized unit
/// cost per item.
pub fn mem_time(unit_cost_s: f64, share: f64, x: f64) -> f64 {
    unit_cost_s * share * x
}

/// Intermediate items crossing the device boundary between two consecutive
/// steps. The transfer volume is the magnitude of the split change.
pub fn intermediate_items(r_prev: f64, r_cur: f64, x: f64) -> f64 {
    (r_cur - r_prev).abs() * x
}

/// Pipelined delay at a step whose split differs from its predecessor.
///
/// When the narrow device's share grows it waits for the wide device's
/// output, and symmetrically when the share shrinks. Sums are the
/// accumulated per-device times before this step; `cur_*` are this step's
/// compute-plus-memory times. Non-positive delays clamp to zero, and equal
/// splits produce no delay at all.
#[allow(clippy::too_many_arguments)]
pub fn pipe_delay(
    r_prev: f64,
    r_cur: f64,
    sum_cpu_before: f64,
    sum_gpu_before: f64,
    t_prev_gpu: f64,
    cur_cpu: f64,
    cur_gpu: f64,
) -> (f64, f64) {
    if r_cur == r_prev {
        return (0.0, 0.0);
    }
    if r_cur > r_prev {
        // The narrow device picked up items the wide device must produce.
        let denom = 1.0 - r_prev;
        let frac = if denom <= 0.0 { 0.0 } else { (1.0 - r_cur) / denom };
        let gpu_ready = sum_gpu_before - t_prev_gpu * frac;
        let d = gpu_ready - (sum_cpu_before + cur_cpu);
        (d.max(0.0), 0.0)
    } else {
        let denom = 1.0 - r_cur;
        let frac = if denom <= 0.0 { 0.0 } else { (1.0 - r_prev) / denom };
        let gpu_through_cur = sum_gpu_before + cur_gpu;
        let d = sum_cpu_before - (gpu_through_cur - cur_gpu * frac);
        (0.0, d.max(0.0))
    }
}

/// One step's predicted components on one device.
#[derive(Clone, Copy, Debug, Default)]
pub struct StepComponents {
    pub compute: f64,
    pub memory: f64,
    pub delay: f64,
    pub transfer: f64,
}

impl StepComponents {
    pub fn total(&self) -> f64 {
        self.compute + self.memory + self.delay + self.transfer
    }
}

/// Predicted cost of a series under a ratio vector.
#[derive(Clone, Debug)]
pub struct CostEstimate {
    pub total: f64,
    pub t_cpu: f64,
    pub t_gpu: f64,
    /// Per step: `[cpu, gpu]` components.
    pub per_step: Vec<[StepComponents; 2]>,
    pub intermediate_items: Vec<f64>,
    pub transfer_total: f64,
}

/// Predicts the elapsed time of one step series executed with per-step
/// splits `ratios`.
pub fn predict(stats: &SeriesStats, ratios: &[f64], env: &ModelEnv) -> CostEstimate {
    assert_eq!(stats.len(), ratios.len(), "one ratio per step");
    let n = stats.len();
    let mut per_step = vec![[StepComponents::default(); 2]; n];
    let mut intermediates = vec![0.0; n];
    let mut sum_cpu = 0.0f64;
    let mut sum_gpu = 0.0f64;
    let mut transfer_total = 0.0f64;
    let mut t_prev_gpu = 0.0f64;

    if env.charge_dispatch && env.link.enabled && !stats.is_empty() {
        let gpu_share = 1.0 - ratios[0];
        if gpu_share > 0.0 {
            let t = transfer_time(&env.link, gpu_share * stats.input_items * env.input_bytes);
            per_step[0][1].transfer += t;
            transfer_total += t;
        }
    }

    for i in 0..n {
        let st = &stats.steps[i];
        let r = ratios[i];
        let mut comp = [0.0f64; 2];
        let mut mem = [0.0f64; 2];
        for (d, profile) in [&env.cpu, &env.gpu].into_iter().enumerate() {
            let share = if d == 0 { r } else { 1.0 - r };
            let inflation = if d == 0 { st.inflation_cpu } else { st.inflation_gpu };
            let instr_eff = profile.cost(st.step).instr * st.avg_weight * inflation;
            let mem_eff = profile.mem_unit_device(st.step) * st.avg_weight * inflation;
            comp[d] = comp_time(instr_eff, share, st.model_x, profile.device_ipc(), profile.clock_hz);
            mem[d] = mem_time(mem_eff, share, st.model_x);
        }

        let (mut d_cpu, mut d_gpu) = (0.0, 0.0);
        if i > 0 {
            let r_prev = ratios[i - 1];
            (d_cpu, d_gpu) = pipe_delay(
                r_prev,
                r,
                sum_cpu,
                sum_gpu,
                t_prev_gpu,
                comp[0] + mem[0],
                comp[1] + mem[1],
            );
            intermediates[i] = intermediate_items(r_prev, r, st.x);
            if env.link.enabled && intermediates[i] > 0.0 {
                let t = transfer_time(&env.link, intermediates[i] * env.item_bytes);
                // The consumer whose share grew waits on the link.
                if r > r_prev {
                    per_step[i][0].transfer += t;
                } else {
                    per_step[i][1].transfer += t;
                }
                transfer_total += t;
            }
        }

        per_step[i][0].compute = comp[0];
        per_step[i][0].memory = mem[0];
        per_step[i][0].delay = d_cpu;
        per_step[i][1].compute = comp[1];
        per_step[i][1].memory = mem[1];
        per_step[i][1].delay = d_gpu;

        t_prev_gpu = per_step[i][1].total();
        sum_cpu += per_step[i][0].total();
        sum_gpu += t_prev_gpu;
    }

    CostEstimate {
        total: sum_cpu.max(sum_gpu),
        t_cpu: sum_cpu,
        t_gpu: sum_gpu,
        per_step,
        intermediate_items: intermediates,
        transfer_total,
    }
}

/// Predicted total across independent series (barriers between them).
pub fn predict_many(stats: &[SeriesStats], ratios: &[Vec<f64>], env: &ModelEnv) -> f64 {
    stats
        .iter()
        .zip(ratios.iter())
        .map(|(s, r)| predict(s, r, env).total)
        .sum()
}
