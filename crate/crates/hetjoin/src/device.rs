//! Modeled compute devices: per-step unit costs, wavefront lockstep
//! semantics, logical clocks, and the emulated interconnect for discrete-mode
//! runs.
//!
//! A device is a logical-time profile, not hardware. The narrow device runs
//! one item per lane (wavefront width 1); the wide device runs lockstep
//! wavefronts whose time is the worst item in the group. Step times divide
//! by the number of concurrently resident wavefront slots
//! (`worker_count / wavefront_width`).

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use thiserror::Error;

use crate::relation::Relation;
use crate::steps::StepId;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed profile line {0}: {1:?}")]
    Parse(usize, String),
    #[error("unknown profile key {0:?}")]
    UnknownKey(String),
    #[error("sample too small for a stable median: {got} items, need {need}")]
    SampleTooSmall { got: usize, need: usize },
}

/// Cost of one unit of work for one step: an instruction count plus a
/// calibrated memory stall.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepCost {
    pub instr: f64,
    pub mem_ns: f64,
}

impl StepCost {
    const ZERO: StepCost = StepCost { instr: 0.0, mem_ns: 0.0 };
}

/// Per-device cost and dispatch parameters.
#[derive(Clone, Debug)]
pub struct DeviceProfile {
    pub name: String,
    pub worker_count: u32,
    pub wavefront_width: u32,
    /// Peak instructions per cycle per lane.
    pub ipc: f64,
    pub clock_hz: f64,
    /// Charged per dynamic chunk pull in coarse-grained scheduling.
    pub sched_overhead_s: f64,
    costs: [StepCost; StepId::COUNT],
}

impl DeviceProfile {
    pub fn new(
        name: &str,
        worker_count: u32,
        wavefront_width: u32,
        ipc: f64,
        clock_hz: f64,
    ) -> Self {
        assert!(wavefront_width >= 1 && worker_count >= 1);
        DeviceProfile {
            name: name.to_string(),
            worker_count,
            wavefront_width,
            ipc,
            clock_hz,
            sched_overhead_s: 0.0,
            costs: [StepCost::ZERO; StepId::COUNT],
        }
    }

    pub fn set_cost(&mut self, step: StepId, instr: f64, mem_ns: f64) {
        self.costs[step.index()] = StepCost { instr, mem_ns };
    }

    pub fn cost(&self, step: StepId) -> StepCost {
        self.costs[step.index()]
    }

    /// Seconds per unit of work of `step` on one lane.
    #[inline]
    pub fn unit_cost(&self, step: StepId) -> f64 {
        let c = self.costs[step.index()];
        c.instr / (self.ipc * self.clock_hz) + c.mem_ns * 1e-9
    }

    /// Per-item cost given the item's workload weight.
    #[inline]
    pub fn item_cost(&self, step: StepId, weight: u32) -> f64 {
        weight as f64 * self.unit_cost(step)
    }

    /// Concurrently resident wavefront slots.
    #[inline]
    pub fn slots(&self) -> f64 {
        self.worker_count as f64 / self.wavefront_width as f64
    }

    /// Device-level peak instruction throughput per cycle.
    pub fn device_ipc(&self) -> f64 {
        self.ipc * self.worker_count as f64
    }

    /// Device-normalized unit memory cost, as the cost model consumes it.
    pub fn mem_unit_device(&self, step: StepId) -> f64 {
        self.costs[step.index()].mem_ns * 1e-9 / self.worker_count as f64
    }

    /// Cost per merged pair, charged to the device running the merge.
    pub fn merge_unit(&self) -> f64 {
        self.unit_cost(StepId::BuildHeader)
            + self.unit_cost(StepId::BuildKeySearch)
            + self.unit_cost(StepId::BuildRidInsert)
    }
}

/// Logical time to run one step over `item_costs`, formed into wavefronts of
/// width `wavefront_width` in input order: the sum over wavefronts of the
/// worst item cost, divided by the concurrent wavefront slots.
pub fn simulate_step<I>(profile: &DeviceProfile, item_costs: I) -> f64
where
    I: IntoIterator<Item = f64>,
{
    let w = profile.wavefront_width as usize;
    let mut total = 0.0f64;
    let mut in_front = 0usize;
    let mut front_max = 0.0f64;
    for c in item_costs {
        if c > front_max {
            front_max = c;
        }
        in_front += 1;
        if in_front == w {
            total += front_max;
            in_front = 0;
            front_max = 0.0;
        }
    }
    if in_front > 0 {
        total += front_max;
    }
    total / profile.slots()
}

/// Ratio of lockstep time to perfectly balanced time for integer weights
/// formed into wavefronts of width `w`: `W * sum(max per front) / sum(w)`.
/// Equals 1.0 when every front is uniform.
pub fn wavefront_inflation(weights: &[u32], w: u32) -> f64 {
    if weights.is_empty() {
        return 1.0;
    }
    let total: u64 = weights.iter().map(|&x| x as u64).sum();
    if total == 0 || w <= 1 {
        return 1.0;
    }
    let mut max_sum = 0u64;
    for front in weights.chunks(w as usize) {
        max_sum += *front.iter().max().unwrap() as u64;
    }
    (w as u64 * max_sum) as f64 / total as f64
}

/// Workload-divergence metric: sum over wavefronts of (max - mean) item
/// weight.
pub fn divergence_metric(weights: &[u32], w: u32) -> f64 {
    let mut total = 0.0;
    for front in weights.chunks(w.max(1) as usize) {
        let max = *front.iter().max().unwrap_or(&0) as f64;
        let mean = front.iter().map(|&x| x as f64).sum::<f64>() / front.len() as f64;
        total += max - mean;
    }
    total
}

/// Emulated interconnect between the two devices.
#[derive(Clone, Copy, Debug)]
pub struct TransferLink {
    pub latency_s: f64,
    pub bandwidth_bps: f64,
    pub enabled: bool,
}

impl TransferLink {
    /// The emulated bus used in discrete mode: 0.015 ms latency, 3 GiB/s.
    pub fn default_discrete() -> Self {
        TransferLink { latency_s: 0.015e-3, bandwidth_bps: 3.0 * (1u64 << 30) as f64, enabled: true }
    }

    pub fn disabled() -> Self {
        TransferLink { latency_s: 0.0, bandwidth_bps: 1.0, enabled: false }
    }
}

/// Transfer delay for `bytes`: `latency + size/bandwidth`, or zero when the
/// link is disabled (coupled mode).
pub fn transfer_time(link: &TransferLink, bytes: f64) -> f64 {
    if !link.enabled {
        return 0.0;
    }
    link.latency_s + bytes / link.bandwidth_bps
}

/// Accumulated logical time with a labeled breakdown.
#[derive(Clone, Debug, Default)]
pub struct LogicalClock {
    total: f64,
    breakdown: Vec<(String, f64)>,
}

impl LogicalClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advance(&mut self, label: &str, dt: f64) {
        assert!(dt >= 0.0, "clocks never run backwards");
        self.total += dt;
        if let Some(slot) = self.breakdown.iter_mut().find(|(l, _)| l == label) {
            slot.1 += dt;
        } else {
            self.breakdown.push((label.to_string(), dt));
        }
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn breakdown(&self) -> &[(String, f64)] {
        &self.breakdown
    }
}

/// Canned per-step unit costs in the order of [`StepId::ALL`]:
/// `(cpu_instr, cpu_mem_ns, gpu_instr, gpu_mem_ns)`.
///
/// These are synthetic logical values: the lane counts and clocks come from
/// the modeled chip (4 lanes at 3.0 GHz against 400 lanes at 0.6 GHz with
/// 64-wide wavefronts), and the per-step costs are chosen so that hashing is
/// more than 15x cheaper per tuple on the wide device while list traversal
/// and emission favor the narrow one.
const CANNED_COSTS: [(f64, f64, f64, f64); StepId::COUNT] = [
    (70.0, 20.33, 70.0, 141.67),   // b1
    (12.0, 18.0, 12.0, 1190.0),    // b2
    (20.0, 140.67, 25.0, 4379.0),  // b3 per key search
    (25.0, 37.83, 30.0, 3175.0),   // b4
    (70.0, 20.33, 70.0, 141.67),   // p1
    (12.0, 18.0, 12.0, 1190.0),    // p2
    (20.0, 140.67, 25.0, 9979.0),  // p3 per key search
    (20.0, 24.67, 40.0, 3566.67),  // p4 per emitted pair
    (70.0, 20.33, 70.0, 141.67),   // n1
    (12.0, 18.0, 12.0, 1190.0),    // n2
    (25.0, 37.83, 30.0, 2775.0),   // n3
];

/// Built-in device pair: a narrow 4-lane 3.0 GHz device and a wide 400-lane
/// 0.6 GHz device with 64-item wavefronts.
pub fn canned_profiles() -> (DeviceProfile, DeviceProfile) {
    let mut cpu = DeviceProfile::new("canned-cpu", 4, 1, 2.0, 3.0e9);
    let mut gpu = DeviceProfile::new("canned-gpu", 400, 64, 2.0, 0.6e9);
    cpu.sched_overhead_s = 2.0e-6;
    gpu.sched_overhead_s = 8.0e-6;
    for (i, step) in StepId::ALL.iter().enumerate() {
        let (ci, cm, gi, gm) = CANNED_COSTS[i];
        cpu.set_cost(*step, ci, cm);
        gpu.set_cost(*step, gi, gm);
    }
    (cpu, gpu)
}

/// How calibration measures unit costs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CalibrationMode {
    /// Deterministic operation counting converted at nominal rates.
    Counted,
    /// Wall-clock micro-runs on the host; labeled measured in output.
    Wall,
}

const CALIBRATION_REPS: usize = 9;

/// Calibrates the memory unit cost of `step` from micro-runs over `sample`,
/// taking the median of nine repetitions. Steps whose work scales with the
/// key list (`b3`/`p3`) are calibrated per key search.
pub fn calibrate(
    profile: &mut DeviceProfile,
    step: StepId,
    sample: &Relation,
    mode: CalibrationMode,
) -> Result<(), ProfileError> {
    if sample.len() < CALIBRATION_REPS {
        return Err(ProfileError::SampleTooSmall { got: sample.len(), need: CALIBRATION_REPS });
    }
    let mut per_unit_ns = Vec::with_capacity(CALIBRATION_REPS);
    for _ in 0..CALIBRATION_REPS {
        per_unit_ns.push(match mode {
            CalibrationMode::Counted => counted_unit_ns(profile, step),
            CalibrationMode::Wall => wall_unit_ns(step, sample),
        });
    }
    per_unit_ns.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = per_unit_ns[CALIBRATION_REPS / 2];
    let instr = profile.costs[step.index()].instr;
    let instr_ns = instr / (profile.ipc * profile.clock_hz) * 1e9;
    profile.costs[step.index()].mem_ns = (median - instr_ns).max(0.0);
    Ok(())
}

/// Deterministic stand-in measurement: nominal per-touch latencies applied
/// to the step's memory touch count.
fn counted_unit_ns(profile: &DeviceProfile, step: StepId) -> f64 {
    let touches = match step {
        StepId::BuildHash | StepId::ProbeHash | StepId::PartHash => 1.0,
        StepId::BuildHeader | StepId::ProbeHeader | StepId::PartHeader => 2.0,
        StepId::BuildKeySearch | StepId::ProbeKeySearch => 3.0,
        StepId::BuildRidInsert | StepId::PartInsert => 4.0,
        StepId::ProbeEmit => 3.0,
    };
    // Wider devices pay more per random touch in this model.
    let per_touch_ns = if profile.wavefront_width > 1 { 120.0 } else { 14.0 };
    let instr = profile.costs[step.index()].instr;
    instr / (profile.ipc * profile.clock_hz) * 1e9 + touches * per_touch_ns
}

/// Host wall-clock micro-run: hash-and-touch over a scratch array sized by
/// the step's access pattern.
fn wall_unit_ns(step: StepId, sample: &Relation) -> f64 {
    let n = sample.len();
    let mut scratch = vec![0u32; n.next_power_of_two()];
    let mask = scratch.len() as u32 - 1;
    let start = Instant::now();
    let mut acc = 0u32;
    for &k in sample.keys() {
        let h = crate::hashtable::murmur2(k, 0x1234_5678);
        match step {
            StepId::BuildHash | StepId::ProbeHash | StepId::PartHash => acc ^= h,
            _ => {
                let idx = (h & mask) as usize;
                scratch[idx] = scratch[idx].wrapping_add(1);
                acc ^= scratch[idx];
            }
        }
    }
    std::hint::black_box(acc);
    start.elapsed().as_secs_f64() * 1e9 / n as f64
}

/// Writes a profile as flat `key=value` text.
pub fn save_profile(path: &Path, profile: &DeviceProfile) -> Result<(), ProfileError> {
    let mut out = String::new();
    writeln!(out, "name={}", profile.name).unwrap();
    writeln!(out, "lanes={}", profile.worker_count).unwrap();
    writeln!(out, "wavefront={}", profile.wavefront_width).unwrap();
    writeln!(out, "ipc={}", profile.ipc).unwrap();
    writeln!(out, "clock_hz={}", profile.clock_hz).unwrap();
    writeln!(out, "sched_overhead_ns={}", profile.sched_overhead_s * 1e9).unwrap();
    for step in StepId::ALL {
        let c = profile.cost(step);
        writeln!(out, "instr.{}={}", step.code(), c.instr).unwrap();
        writeln!(out, "mem_ns.{}={}", step.code(), c.mem_ns).unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Loads a profile written by [`save_profile`].
pub fn load_profile(path: &Path) -> Result<DeviceProfile, ProfileError> {
    let text = std::fs::read_to_string(path)?;
    let mut profile = DeviceProfile::new("unnamed", 1, 1, 1.0, 1.0e9);
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| ProfileError::Parse(lineno + 1, line.to_string()))?;
        macro_rules! parsed {
            ($ty:ty) => {
                value
                    .parse::<$ty>()
                    .map_err(|_| ProfileError::Parse(lineno + 1, line.to_string()))?
            };
        }
        match key {
            "name" => profile.name = value.to_string(),
            "lanes" => profile.worker_count = parsed!(u32),
            "wavefront" => profile.wavefront_width = parsed!(u32),
            "ipc" => profile.ipc = parsed!(f64),
            "clock_hz" => profile.clock_hz = parsed!(f64),
            "sched_overhead_ns" => profile.sched_overhead_s = parsed!(f64) * 1e-9,
            _ => {
                let (kind, code) = key
                    .split_once('.')
                    .ok_or_else(|| ProfileError::UnknownKey(key.to_string()))?;
                let step = StepId::from_code(code)
                    .ok_or_else(|| ProfileError::UnknownKey(key.to_string()))?;
                let v: f64 = parsed!(f64);
                match kind {
                    "instr" => profile.costs[step.index()].instr = v,
                    "mem_ns" => profile.costs[step.index()].mem_ns = v,
                    _ => return Err(ProfileError::UnknownKey(key.to_string())),
                }
            }
        }
    }
    Ok(profile)
}
