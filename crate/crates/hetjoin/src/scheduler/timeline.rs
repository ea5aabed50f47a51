//! Logical-time replay of one step series over the two devices.
//!
//! Items split at each step by a contiguous prefix: the first `floor(r*x)`
//! items of the step's stream go to the narrow device. Where consecutive
//! splits differ, the consumer's extra items are cross-sourced: they only
//! become available as the producer works through them, through the handoff
//! queue (plus a link delay in discrete mode). Each device processes its
//! own-sourced segment first and the cross-sourced segment last; production
//! within a segment is fluid (linear in item position), and waiting shows up
//! as recorded stall so that a device's elapsed time is exactly work plus
//! stall.

use crate::device::{simulate_step, transfer_time, DeviceProfile, TransferLink};
use crate::steps::{SeriesWork, StepId};

use super::EngineError;

/// One step's accounted time on one device.
#[derive(Clone, Copy, Debug)]
pub struct StepTime {
    pub step: StepId,
    pub work: f64,
    pub stall: f64,
}

/// Simulation environment for a series.
pub struct SeriesEnv<'a> {
    pub cpu: &'a DeviceProfile,
    pub gpu: &'a DeviceProfile,
    pub link: TransferLink,
    /// Bytes per intermediate item crossing the device boundary.
    pub item_bytes: f64,
    /// Bytes per input tuple for the series-start dispatch transfer.
    pub dispatch_bytes: f64,
    /// Charge the wide device's input-share transfer at series start.
    pub charge_dispatch: bool,
    /// Handoff queue capacity in items; zero cannot make progress.
    pub handoff_cap_items: usize,
}

/// Result of replaying one series.
#[derive(Clone, Debug)]
pub struct SeriesTimes {
    pub cpu: Vec<StepTime>,
    pub gpu: Vec<StepTime>,
    pub cpu_end: f64,
    pub gpu_end: f64,
    /// Input dispatch transfer charged to the wide device.
    pub dispatch: f64,
    /// Link time spent on intermediate handoffs (informational; the waiting
    /// itself is accounted as stall).
    pub handoff_link: f64,
}

impl SeriesTimes {
    pub fn end(&self) -> f64 {
        self.cpu_end.max(self.gpu_end)
    }
}

/// Production interval of a contiguous item range.
#[derive(Clone, Copy, Debug)]
struct Seg {
    lo: usize,
    hi: usize,
    t0: f64,
    t1: f64,
}

impl Seg {
    /// Completion time of items `[lo, idx)` under fluid production.
    fn completion_at(&self, idx: usize) -> f64 {
        if self.hi == self.lo {
            return self.t1;
        }
        let q = (idx - self.lo) as f64 / (self.hi - self.lo) as f64;
        self.t0 + q * (self.t1 - self.t0)
    }
}

fn avail_first(segs: &[Seg], idx: usize) -> f64 {
    for s in segs {
        if idx < s.hi {
            // First item completes one fluid quantum in; use its completion.
            return s.completion_at(idx + 1);
        }
    }
    segs.last().map(|s| s.t1).unwrap_or(0.0)
}

fn avail_end(segs: &[Seg], end: usize) -> f64 {
    let mut t = 0.0f64;
    for s in segs {
        if end > s.lo {
            t = t.max(s.completion_at(end.min(s.hi)));
        }
    }
    t
}

/// Replays `work` under per-step splits `ratios`, both devices starting at
/// `start`. Returns per-step work and stall, exact by construction:
/// `device_end - start = dispatch + sum(work) + sum(stall)`.
pub fn simulate_series(
    work: &SeriesWork,
    ratios: &[f64],
    env: &SeriesEnv,
    start: f64,
) -> Result<SeriesTimes, EngineError> {
    assert_eq!(ratios.len(), work.steps.len(), "one ratio per step");
    let x = work.x;
    let n = work.steps.len();
    let splits: Vec<usize> = ratios.iter().map(|&r| ((r * x as f64).floor() as usize).min(x)).collect();

    let mut cpu_steps = Vec::with_capacity(n);
    let mut gpu_steps = Vec::with_capacity(n);
    let mut handoff_link = 0.0f64;

    // Input dispatch for the wide device's share of the first step.
    let gpu_first_items = x - splits.first().copied().unwrap_or(x);
    let dispatch = if env.charge_dispatch && env.link.enabled && gpu_first_items > 0 {
        transfer_time(&env.link, gpu_first_items as f64 * env.dispatch_bytes)
    } else {
        0.0
    };

    let mut clock = [start, start + dispatch];
    // Producer holds from over-full handoff queues, applied at the next step.
    let mut pending_hold = [0.0f64, 0.0f64];
    // Production segments of the previous step, per device.
    let mut prev_segs: [Vec<Seg>; 2] = [Vec::new(), Vec::new()];

    for (pos, &step) in work.steps.iter().enumerate() {
        let k = splits[pos];
        let k_prev = if pos == 0 { k } else { splits[pos - 1] };
        let mut next_segs: [Vec<Seg>; 2] = [Vec::new(), Vec::new()];
        let mut times = [StepTime { step, work: 0.0, stall: 0.0 }; 2];

        for d in 0..2usize {
            let profile = if d == 0 { env.cpu } else { env.gpu };
            let unit = profile.unit_cost(step);
            let wtime = |lo: usize, hi: usize| {
                simulate_step(profile, (lo..hi).map(|j| work.weight(pos, j) as f64 * unit))
            };
            // Own-sourced and cross-sourced ranges for this device.
            let (own, cross) = if d == 0 {
                ((0, k.min(k_prev)), (k_prev.min(k), k))
            } else {
                ((k.max(k_prev), x), (k, k_prev.max(k)))
            };

            let hold = std::mem::take(&mut pending_hold[d]);
            times[d].stall += hold;
            clock[d] += hold;

            if own.1 > own.0 {
                let w = wtime(own.0, own.1);
                next_segs[d].push(Seg { lo: own.0, hi: own.1, t0: clock[d], t1: clock[d] + w });
                clock[d] += w;
                times[d].work += w;
            }

            if cross.1 > cross.0 {
                let cross_len = cross.1 - cross.0;
                if env.handoff_cap_items == 0 {
                    return Err(EngineError::HandoffDeadlock(format!(
                        "step {} needs to hand {} items through a zero-capacity queue",
                        step.code(),
                        cross_len
                    )));
                }
                let producer = 1 - d;
                let w = wtime(cross.0, cross.1);
                let xfer = transfer_time(&env.link, cross_len as f64 * env.item_bytes);
                handoff_link += xfer;
                let p_first = avail_first(&prev_segs[producer], cross.0) + xfer;
                let p_last = avail_end(&prev_segs[producer], cross.1) + xfer;
                let stall =
                    (p_first - clock[d]).max(p_last - clock[d] - w).max(0.0);
                times[d].stall += stall;
                clock[d] += stall;
                next_segs[d].push(Seg { lo: cross.0, hi: cross.1, t0: clock[d], t1: clock[d] + w });
                clock[d] += w;
                times[d].work += w;

                if cross_len > env.handoff_cap_items {
                    // Producer blocks while the queue is full: it cannot run
                    // ahead of the consumer by more than the capacity.
                    let overflow = (cross_len - env.handoff_cap_items) as f64 / cross_len as f64;
                    let ahead = (clock[d] - avail_end(&prev_segs[producer], cross.1)).max(0.0);
                    pending_hold[producer] += ahead * overflow;
                }
            }
        }

        cpu_steps.push(times[0]);
        gpu_steps.push(times[1]);
        prev_segs = next_segs;
    }

    Ok(SeriesTimes {
        cpu: cpu_steps,
        gpu: gpu_steps,
        cpu_end: clock[0],
        gpu_end: clock[1],
        dispatch,
        handoff_link,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::canned_profiles;

    fn uniform_work(steps: &[StepId], x: usize) -> SeriesWork {
        let mut w = SeriesWork {
            steps: steps.to_vec(),
            x,
            weights: vec![None; steps.len()],
            model_x: vec![x as f64; steps.len()],
            avg_weight: vec![1.0; steps.len()],
        };
        w.model_x.iter_mut().for_each(|v| *v = x as f64);
        w
    }

    fn env<'a>(cpu: &'a DeviceProfile, gpu: &'a DeviceProfile) -> SeriesEnv<'a> {
        SeriesEnv {
            cpu,
            gpu,
            link: TransferLink::disabled(),
            item_bytes: 8.0,
            dispatch_bytes: 8.0,
            charge_dispatch: false,
            handoff_cap_items: usize::MAX,
        }
    }

    #[test]
    fn cpu_only_run_has_zero_gpu_time() {
        let (cpu, gpu) = canned_profiles();
        let work = uniform_work(&StepId::BUILD, 10_000);
        let t = simulate_series(&work, &[1.0; 4], &env(&cpu, &gpu), 0.0).unwrap();
        assert_eq!(t.gpu_end, 0.0);
        assert!(t.cpu_end > 0.0);
        assert!(t.gpu.iter().all(|s| s.work == 0.0 && s.stall == 0.0));
    }

    #[test]
    fn equal_ratios_record_zero_stall() {
        let (cpu, gpu) = canned_profiles();
        let work = uniform_work(&StepId::BUILD, 50_000);
        for r in [0.0, 0.3, 0.7, 1.0] {
            let t = simulate_series(&work, &[r; 4], &env(&cpu, &gpu), 0.0).unwrap();
            let stall: f64 = t.cpu.iter().chain(t.gpu.iter()).map(|s| s.stall).sum();
            assert_eq!(stall, 0.0, "ratio {r}");
        }
    }

    #[test]
    fn elapsed_equals_work_plus_stall_exactly() {
        let (cpu, gpu) = canned_profiles();
        let work = uniform_work(&StepId::PROBE, 33_333);
        let ratios = [0.1, 0.8, 0.4, 0.9];
        let t = simulate_series(&work, &ratios, &env(&cpu, &gpu), 1.5).unwrap();
        let cpu_total: f64 = t.cpu.iter().map(|s| s.work + s.stall).sum();
        let gpu_total: f64 = t.gpu.iter().map(|s| s.work + s.stall).sum();
        assert_eq!(t.cpu_end, 1.5 + cpu_total);
        assert_eq!(t.gpu_end, 1.5 + t.dispatch + gpu_total);
    }

    #[test]
    fn ratio_change_can_stall_the_grown_side() {
        let (cpu, gpu) = canned_profiles();
        let work = uniform_work(&StepId::BUILD, 100_000);
        // The narrow device picks up most items at step 2 and must wait for
        // the wide device's step-1 output.
        let t = simulate_series(&work, &[0.1, 0.9, 0.9, 0.9], &env(&cpu, &gpu), 0.0).unwrap();
        let cpu_stall: f64 = t.cpu.iter().map(|s| s.stall).sum();
        assert!(cpu_stall > 0.0);
    }

    #[test]
    fn zero_capacity_handoff_is_an_error() {
        let (cpu, gpu) = canned_profiles();
        let work = uniform_work(&StepId::BUILD, 1000);
        let mut e = env(&cpu, &gpu);
        e.handoff_cap_items = 0;
        let err = simulate_series(&work, &[0.2, 0.8, 0.8, 0.8], &e, 0.0);
        assert!(matches!(err, Err(EngineError::HandoffDeadlock(_))));
    }

    #[test]
    fn tiny_capacity_blocks_the_producer() {
        let (cpu, gpu) = canned_profiles();
        let work = uniform_work(&StepId::BUILD, 100_000);
        let ratios = [0.0, 0.9, 0.0, 0.0];
        let mut e = env(&cpu, &gpu);
        let free = simulate_series(&work, &ratios, &e, 0.0).unwrap();
        e.handoff_cap_items = 16;
        let tight = simulate_series(&work, &ratios, &e, 0.0).unwrap();
        assert!(tight.end() >= free.end());
    }

    #[test]
    fn dispatch_transfer_charges_wide_device_start() {
        let (cpu, gpu) = canned_profiles();
        let work = uniform_work(&StepId::BUILD, 10_000);
        let mut e = env(&cpu, &gpu);
        e.link = TransferLink::default_discrete();
        e.charge_dispatch = true;
        let t = simulate_series(&work, &[0.5; 4], &e, 0.0).unwrap();
        assert!(t.dispatch > 0.0);
        let t_cpu_only = simulate_series(&work, &[1.0; 4], &e, 0.0).unwrap();
        assert_eq!(t_cpu_only.dispatch, 0.0);
    }
}
