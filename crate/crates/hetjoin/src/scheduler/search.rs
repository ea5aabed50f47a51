//! Split-vector search over the cost model: one shared grid of candidate
//! ratios, scanned whole-phase for data dividing, per step for off-loading,
//! and per step series with branch-and-bound for pipelined execution.

use crate::costmodel::{pipe_delay, predict, ModelEnv, SeriesStats};
use crate::device::transfer_time;

/// Candidate CPU shares `{0, delta, 2*delta, ..., 1}`.
pub fn ratio_grid(delta: f64) -> Vec<f64> {
    assert!(delta > 0.0 && delta <= 1.0);
    let n = (1.0 / delta).floor() as usize;
    (0..=n).map(|i| (i as f64 * delta).min(1.0)).collect()
}

/// Per-step full-share costs, linear in the share.
struct StepEval {
    cpu_full: f64,
    gpu_full: f64,
    x: f64,
}

fn step_evals(stats: &SeriesStats, env: &ModelEnv) -> Vec<StepEval> {
    stats
        .steps
        .iter()
        .map(|st| {
            let mut full = [0.0f64; 2];
            for (d, profile) in [&env.cpu, &env.gpu].into_iter().enumerate() {
                let inflation = if d == 0 { st.inflation_cpu } else { st.inflation_gpu };
                let instr_eff = profile.cost(st.step).instr * st.avg_weight * inflation;
                let mem_eff = profile.mem_unit_device(st.step) * st.avg_weight * inflation;
                full[d] = crate::costmodel::comp_time(
                    instr_eff,
                    1.0,
                    st.model_x,
                    profile.device_ipc(),
                    profile.clock_hz,
                ) + crate::costmodel::mem_time(mem_eff, 1.0, st.model_x);
            }
            StepEval { cpu_full: full[0], gpu_full: full[1], x: st.x }
        })
        .collect()
}

/// Incremental evaluation state mirroring [`predict`] step by step.
#[derive(Clone, Copy)]
struct EvalState {
    sum_cpu: f64,
    sum_gpu: f64,
    t_prev_gpu: f64,
    r_prev: f64,
}

impl EvalState {
    fn start() -> Self {
        EvalState { sum_cpu: 0.0, sum_gpu: 0.0, t_prev_gpu: 0.0, r_prev: 0.0 }
    }

    fn advance(
        &self,
        i: usize,
        r: f64,
        evals: &[StepEval],
        input_items: f64,
        env: &ModelEnv,
    ) -> EvalState {
        let cpu_cm = r * evals[i].cpu_full;
        let gpu_cm = (1.0 - r) * evals[i].gpu_full;
        let mut cpu_t = cpu_cm;
        let mut gpu_t = gpu_cm;
        if i == 0 {
            if env.charge_dispatch && env.link.enabled && r < 1.0 {
                gpu_t += transfer_time(&env.link, (1.0 - r) * input_items * env.input_bytes);
            }
        } else {
            let (d_cpu, d_gpu) = pipe_delay(
                self.r_prev,
                r,
                self.sum_cpu,
                self.sum_gpu,
                self.t_prev_gpu,
                cpu_cm,
                gpu_cm,
            );
            cpu_t += d_cpu;
            gpu_t += d_gpu;
            if env.link.enabled && r != self.r_prev {
                let t = transfer_time(
                    &env.link,
                    crate::costmodel::intermediate_items(self.r_prev, r, evals[i].x)
                        * env.item_bytes,
                );
                if r > self.r_prev {
                    cpu_t += t;
                } else {
                    gpu_t += t;
                }
            }
        }
        EvalState {
            sum_cpu: self.sum_cpu + cpu_t,
            sum_gpu: self.sum_gpu + gpu_t,
            t_prev_gpu: gpu_t,
            r_prev: r,
        }
    }

    fn bound(&self) -> f64 {
        self.sum_cpu.max(self.sum_gpu)
    }
}

/// Predicted series time for a full ratio vector, via the same path the
/// searches use.
pub fn eval_series(stats: &SeriesStats, ratios: &[f64], env: &ModelEnv) -> f64 {
    predict(stats, ratios, env).total
}

/// Best single share for a group of series sharing one ratio (one phase of
/// data dividing). Ties break toward the larger CPU share.
pub fn search_dd_phase(series: &[&SeriesStats], delta: f64, env: &ModelEnv) -> (f64, f64) {
    let mut best_r = 0.0;
    let mut best_t = f64::INFINITY;
    for &r in &ratio_grid(delta) {
        let total: f64 = series
            .iter()
            .map(|stats| eval_series(stats, &vec![r; stats.len()], env))
            .sum();
        if total <= best_t {
            best_t = total;
            best_r = r;
        }
    }
    (best_r, best_t)
}

/// Off-loading choice for one series. Coupled mode compares each step on its
/// own; discrete mode enumerates all `2^n` assignments including transfers.
pub fn search_ol_series(stats: &SeriesStats, env: &ModelEnv) -> (Vec<f64>, f64) {
    let n = stats.len();
    if !env.link.enabled {
        let evals = step_evals(stats, env);
        let ratios: Vec<f64> =
            evals.iter().map(|e| if e.cpu_full <= e.gpu_full { 1.0 } else { 0.0 }).collect();
        let t = eval_series(stats, &ratios, env);
        return (ratios, t);
    }
    let mut best: Option<(Vec<f64>, f64)> = None;
    for mask in 0u32..(1 << n) {
        let ratios: Vec<f64> =
            (0..n).map(|i| if mask & (1 << i) != 0 { 1.0 } else { 0.0 }).collect();
        let t = eval_series(stats, &ratios, env);
        if best.as_ref().map_or(true, |(_, bt)| t < *bt) {
            best = Some((ratios, t));
        }
    }
    best.unwrap()
}

/// Outcome of a pipelined-split search.
pub struct PlOutcome {
    pub ratios: Vec<f64>,
    pub predicted: f64,
    /// True when the node budget stopped the search early.
    pub budget_hit: bool,
}

/// Grid search over per-step ratios for one series. Branch-and-bound prunes
/// on the running maximum of the two device sums, which only grows, so the
/// result equals the exhaustive scan; `exhaustive` disables pruning anyway
/// for oracle comparisons. Ties keep the first vector in enumeration order.
pub fn search_pl_series(
    stats: &SeriesStats,
    delta: f64,
    env: &ModelEnv,
    exhaustive: bool,
    node_budget: u64,
) -> PlOutcome {
    let grid = ratio_grid(delta);
    let evals = step_evals(stats, env);
    let n = stats.len();

    // Seed the bound with the best constant vector.
    let (dd_r, dd_t) = search_dd_phase(&[stats], delta, env);
    let mut best_t = dd_t;
    let mut best: Vec<f64> = vec![dd_r; n];
    let mut nodes: u64 = 0;
    let mut budget_hit = false;

    struct Frame {
        state: EvalState,
        depth: usize,
        next: usize,
    }
    let mut stack = vec![Frame { state: EvalState::start(), depth: 0, next: 0 }];
    let mut chosen = vec![0usize; n];
    while let Some(frame) = stack.last_mut() {
        if frame.next >= grid.len() {
            stack.pop();
            continue;
        }
        let r = grid[frame.next];
        let depth = frame.depth;
        frame.next += 1;
        nodes += 1;
        if nodes > node_budget {
            budget_hit = true;
            break;
        }
        let state = frame.state.advance(depth, r, &evals, stats.input_items, env);
        if !exhaustive && state.bound() >= best_t {
            continue;
        }
        chosen[depth] = frame.next - 1;
        if depth + 1 == n {
            let t = state.bound();
            if t < best_t {
                best_t = t;
                best = chosen[..n].iter().map(|&gi| grid[gi]).collect();
            }
        } else {
            stack.push(Frame { state, depth: depth + 1, next: 0 });
        }
    }

    PlOutcome { ratios: best, predicted: best_t, budget_hit }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costmodel::SeriesStats;
    use crate::device::{canned_profiles, DeviceProfile, TransferLink};
    use crate::steps::StepId;

    fn coupled_env() -> ModelEnv {
        let (cpu, gpu) = canned_profiles();
        ModelEnv::new(cpu, gpu, TransferLink::disabled())
    }

    #[test]
    fn grid_has_51_points_at_paper_delta() {
        let g = ratio_grid(0.02);
        assert_eq!(g.len(), 51);
        assert_eq!(g[0], 0.0);
        assert_eq!(*g.last().unwrap(), 1.0);
    }

    #[test]
    fn dd_on_identical_devices_splits_evenly() {
        let (cpu, _) = canned_profiles();
        let twin = DeviceProfile { name: "twin".into(), ..cpu.clone() };
        let env = ModelEnv::new(cpu, twin, TransferLink::disabled());
        let stats = SeriesStats::estimate(&StepId::BUILD, 100_000, 1.0, 1.0);
        let (r, _) = search_dd_phase(&[&stats], 0.02, &env);
        assert!((r - 0.5).abs() <= 0.02 + 1e-12, "r = {r}");
    }

    #[test]
    fn dd_degenerate_profile_forces_zero_share() {
        let (cpu, mut gpu) = canned_profiles();
        for step in StepId::ALL {
            gpu.set_cost(step, 0.0, 0.0);
        }
        let env = ModelEnv::new(cpu, gpu, TransferLink::disabled());
        let stats = SeriesStats::estimate(&StepId::BUILD, 10_000, 1.0, 1.0);
        let (r, t) = search_dd_phase(&[&stats], 0.02, &env);
        assert_eq!(r, 0.0);
        assert_eq!(t, 0.0);
    }

    #[test]
    fn ol_coupled_picks_cheaper_device_per_step() {
        let env = coupled_env();
        let stats = SeriesStats::estimate(&StepId::BUILD, 100_000, 1.0, 1.0);
        let (ratios, _) = search_ol_series(&stats, &env);
        // Hashing belongs on the wide device under the canned profiles.
        assert_eq!(ratios[0], 0.0);
        assert_eq!(ratios.len(), 4);
    }

    #[test]
    fn ol_gpu_cheaper_everywhere_degenerates_to_gpu_only() {
        let (cpu, mut gpu) = canned_profiles();
        for step in StepId::ALL {
            let c = gpu.cost(step);
            gpu.set_cost(step, c.instr, 0.01);
        }
        let env = ModelEnv::new(cpu, gpu, TransferLink::disabled());
        let stats = SeriesStats::estimate(&StepId::PROBE, 50_000, 1.0, 1.0);
        let (ratios, _) = search_ol_series(&stats, &env);
        assert!(ratios.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn ol_discrete_enumerates_sixteen_assignments() {
        let (cpu, gpu) = canned_profiles();
        let env = ModelEnv::new(cpu, gpu, TransferLink::default_discrete());
        let stats = SeriesStats::estimate(&StepId::BUILD, 100_000, 1.0, 1.0);
        let (ratios, t) = search_ol_series(&stats, &env);
        assert_eq!(ratios.len(), 4);
        assert!(ratios.iter().all(|&r| r == 0.0 || r == 1.0));
        assert!(t.is_finite());
    }

    #[test]
    fn pl_matches_brute_force_on_toy_grid() {
        let env = coupled_env();
        let stats = SeriesStats::estimate(&[StepId::BuildHash, StepId::BuildKeySearch], 65_536, 1.0, 1.0);
        let out = search_pl_series(&stats, 0.25, &env, true, u64::MAX);
        // Independent brute force over the same 25 vectors.
        let grid = ratio_grid(0.25);
        let mut best = f64::INFINITY;
        let mut best_v = vec![];
        for &a in &grid {
            for &b in &grid {
                let t = eval_series(&stats, &[a, b], &env);
                if t < best {
                    best = t;
                    best_v = vec![a, b];
                }
            }
        }
        assert_eq!(out.ratios, best_v);
        assert!((out.predicted - best).abs() <= 1e-15 * best.max(1.0));
        // Pruned search agrees with the exhaustive one.
        let pruned = search_pl_series(&stats, 0.25, &env, false, u64::MAX);
        assert_eq!(pruned.ratios, out.ratios);
    }

    #[test]
    fn pl_never_loses_to_dd_or_ol() {
        let env = coupled_env();
        for steps in [&StepId::BUILD[..], &StepId::PROBE[..]] {
            let stats = SeriesStats::estimate(steps, 200_000, 1.2, 0.8);
            let pl = search_pl_series(&stats, 0.1, &env, false, u64::MAX);
            let (_, dd_t) = search_dd_phase(&[&stats], 0.1, &env);
            let (_, ol_t) = search_ol_series(&stats, &env);
            assert!(pl.predicted <= dd_t + 1e-12);
            assert!(pl.predicted <= ol_t + 1e-12);
        }
    }

    #[test]
    fn identical_devices_make_pl_collapse_to_dd() {
        let (cpu, _) = canned_profiles();
        let twin = DeviceProfile { name: "twin".into(), ..cpu.clone() };
        let env = ModelEnv::new(cpu, twin, TransferLink::disabled());
        let stats = SeriesStats::estimate(&StepId::BUILD, 100_000, 1.0, 1.0);
        let pl = search_pl_series(&stats, 0.25, &env, false, u64::MAX);
        let (dd_r, dd_t) = search_dd_phase(&[&stats], 0.25, &env);
        assert!((pl.predicted - dd_t).abs() <= 1e-12 * dd_t.max(1.0));
        assert!(pl.ratios.iter().all(|&r| (r - dd_r).abs() < 1e-12));
    }
}
