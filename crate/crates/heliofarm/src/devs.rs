//! Parallel DEVS modeling and simulation kernel.
//!
//! Atomic models implement [`Atomic`]; they are wired into [`Coupled`]
//! networks through named ports and simulated by a [`Coordinator`] over
//! virtual time. Hierarchical coupled models are flattened to a direct
//! atomic-to-atomic routing table at initialization.

use std::collections::{HashMap, HashSet};
use std::fmt::Debug;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use thiserror::Error;

/// Virtual time in seconds since the simulation epoch.
/// `f64::INFINITY` denotes "passive / never".
pub type SimTime = f64;

/// Default cap on cycles executed at a single virtual time.
pub const DEFAULT_LOOP_CAP: u64 = 1_000_000;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("model validation failed: {0}")]
    Validation(String),
    #[error("simulation exhausted: no event scheduled")]
    Exhausted,
    #[error("illegitimate model: more than {cap} cycles at t={t}")]
    Illegitimate { t: SimTime, cap: u64 },
}

/// One routed message: destination port plus provenance used for
/// canonical ordering and logging.
#[derive(Debug, Clone)]
pub struct BagEntry<M> {
    pub src: String,
    pub src_port: String,
    pub emission: u32,
    pub port: String,
    pub payload: M,
}

/// Multiset of messages delivered to one component in one cycle.
/// Entries are always ordered by (source id, source port, emission index).
#[derive(Debug, Clone)]
pub struct Bag<M> {
    entries: Vec<BagEntry<M>>,
}

impl<M> Bag<M> {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[BagEntry<M>] {
        &self.entries
    }

    /// Builds a bag directly; useful for unit-testing atomics outside a
    /// coordinator.
    pub fn from_entries(entries: Vec<BagEntry<M>>) -> Self {
        Self { entries }
    }

    /// Payloads addressed to a given input port, in canonical order.
    pub fn on_port<'a>(&'a self, port: &'a str) -> impl Iterator<Item = &'a M> {
        self.entries
            .iter()
            .filter(move |e| e.port == port)
            .map(|e| &e.payload)
    }
}

/// Collects the messages an atomic emits from its output function.
pub struct Output<M> {
    items: Vec<(String, M)>,
}

impl<M> Output<M> {
    pub fn push(&mut self, port: &str, payload: M) {
        self.items.push((port.to_string(), payload));
    }

    /// Empty collector for driving λ outside a coordinator (tests).
    #[allow(clippy::new_without_default)]
    pub fn new() -> Self {
        Self { items: Vec::new() }
    }

    pub fn into_items(self) -> Vec<(String, M)> {
        self.items
    }
}

/// The Parallel DEVS atomic contract.
///
/// `output` is invoked exactly once, on the pre-transition state,
/// immediately before each internal or confluent transition.
pub trait Atomic<M>: Send + Sync {
    /// Duration the current state persists; `INFINITY` when passive.
    fn ta(&self) -> SimTime;
    /// Output function λ, evaluated on the pre-transition state.
    fn output(&self, out: &mut Output<M>);
    /// Internal transition δ_int.
    fn delta_int(&mut self);
    /// External transition δ_ext; invoked only when `0 <= e < ta(s)`.
    fn delta_ext(&mut self, e: SimTime, bag: &Bag<M>);
    /// Confluent transition δ_con; invoked when input arrives exactly at
    /// `e = ta(s)`. Defaults to δ_int followed by δ_ext with e = 0.
    fn delta_con(&mut self, bag: &Bag<M>) {
        self.delta_int();
        self.delta_ext(0.0, bag);
    }
}

/// An atomic model together with its identity and declared ports.
pub struct AtomicSpec<M> {
    pub id: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub model: Box<dyn Atomic<M>>,
}

impl<M> AtomicSpec<M> {
    pub fn new(
        id: &str,
        inputs: &[&str],
        outputs: &[&str],
        model: Box<dyn Atomic<M>>,
    ) -> Self {
        Self {
            id: id.to_string(),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            model,
        }
    }
}

/// Coupling endpoint: a child component's port, or (`component == None`)
/// a boundary port of the enclosing coupled model.
#[derive(Debug, Clone)]
struct Endpoint {
    component: Option<String>,
    port: String,
}

#[derive(Debug, Clone)]
struct Coupling {
    from: Endpoint,
    to: Endpoint,
}

enum Child<M> {
    Atomic(AtomicSpec<M>),
    Coupled(Coupled<M>),
}

/// Hierarchical coupled model: children plus EIC/IC/EOC couplings.
pub struct Coupled<M> {
    id: String,
    inputs: Vec<String>,
    outputs: Vec<String>,
    children: Vec<Child<M>>,
    couplings: Vec<Coupling>,
}

impl<M> Coupled<M> {
    pub fn new(id: &str) -> Self {
        Self {
            id: id.to_string(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            children: Vec::new(),
            couplings: Vec::new(),
        }
    }

    pub fn add_input(&mut self, port: &str) -> &mut Self {
        self.inputs.push(port.to_string());
        self
    }

    pub fn add_output(&mut self, port: &str) -> &mut Self {
        self.outputs.push(port.to_string());
        self
    }

    pub fn add_atomic(&mut self, spec: AtomicSpec<M>) -> &mut Self {
        self.children.push(Child::Atomic(spec));
        self
    }

    pub fn add_coupled(&mut self, coupled: Coupled<M>) -> &mut Self {
        self.children.push(Child::Coupled(coupled));
        self
    }

    /// IC coupling: child output port to child input port.
    pub fn couple(&mut self, from: (&str, &str), to: (&str, &str)) -> &mut Self {
        self.couplings.push(Coupling {
            from: Endpoint {
                component: Some(from.0.to_string()),
                port: from.1.to_string(),
            },
            to: Endpoint {
                component: Some(to.0.to_string()),
                port: to.1.to_string(),
            },
        });
        self
    }

    /// EIC coupling: this model's input port to a child input port.
    pub fn couple_input(&mut self, port: &str, to: (&str, &str)) -> &mut Self {
        self.couplings.push(Coupling {
            from: Endpoint {
                component: None,
                port: port.to_string(),
            },
            to: Endpoint {
                component: Some(to.0.to_string()),
                port: to.1.to_string(),
            },
        });
        self
    }

    /// EOC coupling: a child output port to this model's output port.
    pub fn couple_output(&mut self, from: (&str, &str), port: &str) -> &mut Self {
        self.couplings.push(Coupling {
            from: Endpoint {
                component: Some(from.0.to_string()),
                port: from.1.to_string(),
            },
            to: Endpoint {
                component: None,
                port: port.to_string(),
            },
        });
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Sequential,
    Parallel(usize),
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SimulationStats {
    pub cycles: u64,
    pub messages: u64,
    pub transitions: u64,
    pub wall: Duration,
}

struct Comp<M> {
    id: String,
    in_ports: Vec<String>,
    out_ports: Vec<String>,
    model: Box<dyn Atomic<M>>,
    t_last: SimTime,
    t_next: SimTime,
}

/// Flattened root coordinator over virtual time.
pub struct Coordinator<M> {
    // Debug is implemented by hand because `dyn Atomic` is opaque.
    comps: Vec<Comp<M>>,
    /// routes[comp][out_port_index] -> (dst comp, dst port index)
    routes: Vec<Vec<Vec<(usize, usize)>>>,
    t: SimTime,
    epoch: DateTime<Utc>,
    stats: SimulationStats,
    loop_cap: u64,
    mode: Mode,
    pool: Option<rayon::ThreadPool>,
    record_log: bool,
    log: Vec<String>,
    /// Real-time pacing factor (virtual seconds per wall second); None = as fast as possible.
    realtime: Option<f64>,
}

impl<M> Debug for Coordinator<M> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Coordinator")
            .field("components", &self.comps.len())
            .field("t", &self.t)
            .field("mode", &self.mode)
            .finish()
    }
}

impl<M: Clone + Debug + Send + Sync + 'static> Coordinator<M> {
    /// Validates and flattens `root`, returning a coordinator with every
    /// atomic at its initial state and `tN = min ta(s0)`.
    pub fn initialize(root: Coupled<M>, epoch: DateTime<Utc>) -> Result<Self, KernelError> {
        let mut comps: Vec<Comp<M>> = Vec::new();
        // Port graph nodes keyed as "<path>:<dir>:<port>"; path "" is a
        // coupled boundary scope id.
        let mut edges: HashMap<String, Vec<String>> = HashMap::new();
        let mut atomic_index: HashMap<String, usize> = HashMap::new();
        let mut atomic_ports: HashMap<String, (Vec<String>, Vec<String>)> = HashMap::new();

        fn walk<M>(
            coupled: Coupled<M>,
            path: &str,
            comps: &mut Vec<Comp<M>>,
            edges: &mut HashMap<String, Vec<String>>,
            atomic_index: &mut HashMap<String, usize>,
            atomic_ports: &mut HashMap<String, (Vec<String>, Vec<String>)>,
        ) -> Result<(), KernelError> {
            let me = if path.is_empty() {
                coupled.id.clone()
            } else {
                format!("{path}.{}", coupled.id)
            };
            let mut seen: HashSet<String> = HashSet::new();
            let mut child_ports: HashMap<String, (Vec<String>, Vec<String>, bool)> =
                HashMap::new();
            let mut children = Vec::new();
            for child in coupled.children {
                let (id, ins, outs, is_atomic) = match &child {
                    Child::Atomic(a) => (a.id.clone(), a.inputs.clone(), a.outputs.clone(), true),
                    Child::Coupled(c) => (c.id.clone(), c.inputs.clone(), c.outputs.clone(), false),
                };
                if !seen.insert(id.clone()) {
                    return Err(KernelError::Validation(format!(
                        "duplicate component id '{id}' in '{me}'"
                    )));
                }
                child_ports.insert(id, (ins, outs, is_atomic));
                children.push(child);
            }
            // Resolve couplings of this level into the port graph.
            for c in &coupled.couplings {
                let from_key = match &c.from.component {
                    Some(cid) => {
                        let (_, outs, _) = child_ports.get(cid).ok_or_else(|| {
                            KernelError::Validation(format!(
                                "coupling source component '{cid}' not found in '{me}'"
                            ))
                        })?;
                        if !outs.contains(&c.from.port) {
                            return Err(KernelError::Validation(format!(
                                "dangling coupling endpoint: '{me}.{cid}' has no output port '{}'",
                                c.from.port
                            )));
                        }
                        format!("{me}.{cid}:out:{}", c.from.port)
                    }
                    None => {
                        if !coupled.inputs.contains(&c.from.port) {
                            return Err(KernelError::Validation(format!(
                                "dangling coupling endpoint: '{me}' has no input port '{}'",
                                c.from.port
                            )));
                        }
                        format!("{me}:in:{}", c.from.port)
                    }
                };
                let to_key = match &c.to.component {
                    Some(cid) => {
                        let (ins, _, _) = child_ports.get(cid).ok_or_else(|| {
                            KernelError::Validation(format!(
                                "coupling destination component '{cid}' not found in '{me}'"
                            ))
                        })?;
                        if !ins.contains(&c.to.port) {
                            return Err(KernelError::Validation(format!(
                                "dangling coupling endpoint: '{me}.{cid}' has no input port '{}'",
                                c.to.port
                            )));
                        }
                        format!("{me}.{cid}:in:{}", c.to.port)
                    }
                    None => {
                        if !coupled.outputs.contains(&c.to.port) {
                            return Err(KernelError::Validation(format!(
                                "dangling coupling endpoint: '{me}' has no output port '{}'",
                                c.to.port
                            )));
                        }
                        format!("{me}:out:{}", c.to.port)
                    }
                };
                edges.entry(from_key).or_default().push(to_key);
            }
            for child in children {
                match child {
                    Child::Atomic(a) => {
                        let full = format!("{me}.{}", a.id);
                        atomic_index.insert(full.clone(), comps.len());
                        atomic_ports.insert(full.clone(), (a.inputs.clone(), a.outputs.clone()));
                        comps.push(Comp {
                            id: full,
                            in_ports: a.inputs,
                            out_ports: a.outputs,
                            model: a.model,
                            t_last: 0.0,
                            t_next: 0.0,
                        });
                    }
                    Child::Coupled(c) => {
                        walk(c, &me, comps, edges, atomic_index, atomic_ports)?;
                    }
                }
            }
            Ok(())
        }

        walk(
            root,
            "",
            &mut comps,
            &mut edges,
            &mut atomic_index,
            &mut atomic_ports,
        )?;

        // Flatten: for each atomic output port, follow the port graph
        // through coupled boundaries down to atomic input ports.
        let mut routes: Vec<Vec<Vec<(usize, usize)>>> = comps
            .iter()
            .map(|c| vec![Vec::new(); c.out_ports.len()])
            .collect();
        for (ci, comp) in comps.iter().enumerate() {
            for (pi, port) in comp.out_ports.iter().enumerate() {
                let start = format!("{}:out:{port}", comp.id);
                let mut stack = vec![start];
                let mut visited: HashSet<String> = HashSet::new();
                while let Some(node) = stack.pop() {
                    if !visited.insert(node.clone()) {
                        continue;
                    }
                    if let Some(nexts) = edges.get(&node) {
                        for next in nexts {
                            let (path, dir, nport) = split_key(next);
                            if dir == "in" {
                                if let Some(&di) = atomic_index.get(path) {
                                    if di == ci {
                                        return Err(KernelError::Validation(format!(
                                            "zero-delay self-loop on '{}' port '{port}'",
                                            comp.id
                                        )));
                                    }
                                    let dpi = comps[di]
                                        .in_ports
                                        .iter()
                                        .position(|p| p == nport)
                                        .expect("validated port");
                                    routes[ci][pi].push((di, dpi));
                                    continue;
                                }
                            }
                            stack.push(next.clone());
                        }
                    }
                }
                routes[ci][pi].sort();
                routes[ci][pi].dedup();
            }
        }

        for comp in comps.iter_mut() {
            comp.t_next = comp.model.ta();
        }

        Ok(Self {
            comps,
            routes,
            t: 0.0,
            epoch,
            stats: SimulationStats::default(),
            loop_cap: DEFAULT_LOOP_CAP,
            mode: Mode::Sequential,
            pool: None,
            record_log: false,
            log: Vec::new(),
            realtime: None,
        })
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
        self.pool = match mode {
            Mode::Parallel(workers) => Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers.max(1))
                    .build()
                    .expect("worker pool"),
            ),
            Mode::Sequential => None,
        };
    }

    pub fn set_loop_cap(&mut self, cap: u64) {
        self.loop_cap = cap;
    }

    /// Enable best-effort real-time pacing: `scale` virtual seconds per
    /// wall-clock second.
    pub fn set_realtime(&mut self, scale: f64) {
        self.realtime = Some(scale);
    }

    pub fn record_log(&mut self, on: bool) {
        self.record_log = on;
    }

    pub fn log(&self) -> &[String] {
        &self.log
    }

    pub fn time(&self) -> SimTime {
        self.t
    }

    pub fn epoch(&self) -> DateTime<Utc> {
        self.epoch
    }

    pub fn t_next(&self) -> SimTime {
        self.comps
            .iter()
            .map(|c| c.t_next)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn stats(&self) -> SimulationStats {
        self.stats
    }

    pub fn virtual_datetime(&self) -> DateTime<Utc> {
        self.epoch + chrono::Duration::milliseconds((self.t * 1000.0).round() as i64)
    }

    /// Executes one full Parallel DEVS iteration: imminent outputs are
    /// collected, bags routed per the flattened couplings, transitions
    /// applied. Returns the new tN.
    pub fn cycle(&mut self) -> Result<SimTime, KernelError> {
        let tn = self.t_next();
        if !tn.is_finite() {
            return Err(KernelError::Exhausted);
        }
        self.step(tn)?;
        Ok(self.t_next())
    }

    fn step(&mut self, tn: SimTime) -> Result<(), KernelError> {
        let imminent: Vec<usize> = self
            .comps
            .iter()
            .enumerate()
            .filter(|(_, c)| c.t_next == tn)
            .map(|(i, _)| i)
            .collect();

        // Output phase: λ on pre-transition states.
        let outputs: Vec<(usize, Vec<(String, M)>)> = match (&self.pool, self.mode) {
            (Some(pool), Mode::Parallel(_)) => {
                let comps = &self.comps;
                pool.install(|| {
                    use rayon::prelude::*;
                    imminent
                        .par_iter()
                        .map(|&i| {
                            let mut out = Output { items: Vec::new() };
                            comps[i].model.output(&mut out);
                            (i, out.items)
                        })
                        .collect()
                })
            }
            _ => imminent
                .iter()
                .map(|&i| {
                    let mut out = Output { items: Vec::new() };
                    self.comps[i].model.output(&mut out);
                    (i, out.items)
                })
                .collect(),
        };

        // Routing phase.
        let mut inboxes: Vec<Vec<BagEntry<M>>> = vec![Vec::new(); self.comps.len()];
        for (src, items) in &outputs {
            for (emission, (port, payload)) in items.iter().enumerate() {
                let pi = match self.comps[*src].out_ports.iter().position(|p| p == port) {
                    Some(pi) => pi,
                    None => {
                        return Err(KernelError::Validation(format!(
                            "'{}' emitted on undeclared port '{port}'",
                            self.comps[*src].id
                        )))
                    }
                };
                for &(di, dpi) in &self.routes[*src][pi] {
                    self.stats.messages += 1;
                    if self.record_log {
                        self.log.push(format!(
                            "{tn} {}:{port} -> {}:{} {:?}",
                            self.comps[*src].id,
                            self.comps[di].id,
                            self.comps[di].in_ports[dpi],
                            payload
                        ));
                    }
                    inboxes[di].push(BagEntry {
                        src: self.comps[*src].id.clone(),
                        src_port: port.clone(),
                        emission: emission as u32,
                        port: self.comps[di].in_ports[dpi].clone(),
                        payload: payload.clone(),
                    });
                }
            }
        }
        // Canonical bag order makes parallel and sequential runs
        // bit-identical regardless of scheduling.
        for inbox in inboxes.iter_mut() {
            inbox.sort_by(|a, b| {
                (&a.src, &a.src_port, a.emission, &a.port)
                    .cmp(&(&b.src, &b.src_port, b.emission, &b.port))
            });
        }

        // Transition phase.
        let imminent_set: Vec<bool> = self.comps.iter().map(|c| c.t_next == tn).collect();
        let transitions: u64 = match (&self.pool, self.mode) {
            (Some(pool), Mode::Parallel(_)) => {
                let comps = &mut self.comps;
                pool.install(|| {
                    use rayon::prelude::*;
                    comps
                        .par_iter_mut()
                        .zip(inboxes.par_iter())
                        .zip(imminent_set.par_iter())
                        .map(|((comp, inbox), &imm)| {
                            apply_transition(comp, inbox, imm, tn) as u64
                        })
                        .sum()
                })
            }
            _ => {
                let mut n = 0u64;
                for ((comp, inbox), &imm) in self
                    .comps
                    .iter_mut()
                    .zip(inboxes.iter())
                    .zip(imminent_set.iter())
                {
                    n += apply_transition(comp, inbox, imm, tn) as u64;
                }
                n
            }
        };

        self.t = tn;
        self.stats.cycles += 1;
        self.stats.transitions += transitions;
        Ok(())
    }

    /// Runs cycles while `tN <= t_end`. Returns accumulated stats.
    pub fn simulate_until(&mut self, t_end: SimTime) -> Result<SimulationStats, KernelError> {
        let wall_start = Instant::now();
        let virt_start = self.t;
        let mut last_tn = f64::NAN;
        let mut same_tn = 0u64;
        loop {
            let tn = self.t_next();
            if !tn.is_finite() || tn > t_end {
                break;
            }
            if tn == last_tn {
                same_tn += 1;
                if same_tn > self.loop_cap {
                    return Err(KernelError::Illegitimate {
                        t: tn,
                        cap: self.loop_cap,
                    });
                }
            } else {
                last_tn = tn;
                same_tn = 0;
            }
            if let Some(scale) = self.realtime {
                let target = (tn - virt_start) / scale;
                let elapsed = wall_start.elapsed().as_secs_f64();
                if target > elapsed {
                    std::thread::sleep(Duration::from_secs_f64(target - elapsed));
                }
            }
            self.step(tn)?;
        }
        self.stats.wall += wall_start.elapsed();
        Ok(self.stats)
    }
}

fn apply_transition<M: Clone + Debug + Send>(
    comp: &mut Comp<M>,
    inbox: &[BagEntry<M>],
    imminent: bool,
    tn: SimTime,
) -> bool {
    let has_input = !inbox.is_empty();
    if !imminent && !has_input {
        return false;
    }
    let bag = Bag {
        entries: inbox.to_vec(),
    };
    match (imminent, has_input) {
        (true, false) => comp.model.delta_int(),
        (false, true) => comp.model.delta_ext(tn - comp.t_last, &bag),
        (true, true) => comp.model.delta_con(&bag),
        (false, false) => unreachable!(),
    }
    comp.t_last = tn;
    comp.t_next = tn + comp.model.ta();
    true
}

fn split_key(key: &str) -> (&str, &str, &str) {
    let mut it = key.splitn(3, ':');
    (
        it.next().unwrap_or(""),
        it.next().unwrap_or(""),
        it.next().unwrap_or(""),
    )
}

/// Derives a per-component RNG seed from the root seed so that component
/// insertion order cannot perturb other components' noise streams.
/// FNV-1a over the id, mixed with the root seed.
pub fn derive_seed(root_seed: u64, component_id: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325 ^ root_seed.wrapping_mul(0x9e3779b97f4a7c15);
    for b in component_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    #[derive(Debug, Clone, PartialEq)]
    struct Tick(u32);

    /// Emits `Tick(n)` every `period` seconds.
    struct Generator {
        period: f64,
        count: u32,
    }

    impl Atomic<Tick> for Generator {
        fn ta(&self) -> SimTime {
            self.period
        }
        fn output(&self, out: &mut Output<Tick>) {
            out.push("out", Tick(self.count + 1));
        }
        fn delta_int(&mut self) {
            self.count += 1;
        }
        fn delta_ext(&mut self, _e: SimTime, _bag: &Bag<Tick>) {}
    }

    /// Passive counter; records bag sizes and which transition fired.
    #[derive(Default)]
    struct Counter {
        count: u32,
        bag_sizes: Vec<usize>,
    }

    impl Atomic<Tick> for Counter {
        fn ta(&self) -> SimTime {
            f64::INFINITY
        }
        fn output(&self, _out: &mut Output<Tick>) {}
        fn delta_int(&mut self) {}
        fn delta_ext(&mut self, _e: SimTime, bag: &Bag<Tick>) {
            self.count += bag.len() as u32;
            self.bag_sizes.push(bag.len());
        }
    }

    fn epoch() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2010, 6, 1, 0, 0, 0).unwrap()
    }

    fn gen_counter_model(period: f64) -> Coupled<Tick> {
        let mut root = Coupled::new("root");
        root.add_atomic(AtomicSpec::new(
            "gen",
            &[],
            &["out"],
            Box::new(Generator { period, count: 0 }),
        ));
        root.add_atomic(AtomicSpec::new(
            "counter",
            &["in"],
            &[],
            Box::new(Counter::default()),
        ));
        root.couple(("gen", "out"), ("counter", "in"));
        root
    }

    #[test]
    fn single_generator_tn() {
        let mut root = Coupled::new("root");
        root.add_atomic(AtomicSpec::new(
            "gen",
            &[],
            &["out"],
            Box::new(Generator {
                period: 5.0,
                count: 0,
            }),
        ));
        let coord = Coordinator::initialize(root, epoch()).unwrap();
        assert_eq!(coord.t_next(), 5.0);
    }

    #[test]
    fn empty_coupled_is_exhausted() {
        let root: Coupled<Tick> = Coupled::new("root");
        let mut coord = Coordinator::initialize(root, epoch()).unwrap();
        assert_eq!(coord.t_next(), f64::INFINITY);
        let stats = coord.simulate_until(100.0).unwrap();
        assert_eq!(stats.cycles, 0);
        assert!(matches!(coord.cycle(), Err(KernelError::Exhausted)));
    }

    #[test]
    fn generator_counter_hand_trace() {
        let mut coord = Coordinator::initialize(gen_counter_model(3.0), epoch()).unwrap();
        assert_eq!(coord.t_next(), 3.0);
        let tn = coord.cycle().unwrap();
        assert_eq!(tn, 6.0);
        // t_end = 10 -> cycles at t = 9 only (3 and 6 already spent? no:
        // fresh coordinator below).
        let mut coord = Coordinator::initialize(gen_counter_model(3.0), epoch()).unwrap();
        let stats = coord.simulate_until(10.0).unwrap();
        assert_eq!(stats.cycles, 3); // t = 3, 6, 9
        assert_eq!(coord.t_next(), 12.0);
    }

    #[test]
    fn empty_interval_runs_no_cycles() {
        let mut coord = Coordinator::initialize(gen_counter_model(3.0), epoch()).unwrap();
        let stats = coord.simulate_until(2.9).unwrap();
        assert_eq!(stats.cycles, 0);
    }

    #[test]
    fn two_imminent_generators_one_bag() {
        let mut root = Coupled::new("root");
        for id in ["gen_a", "gen_b"] {
            root.add_atomic(AtomicSpec::new(
                id,
                &[],
                &["out"],
                Box::new(Generator {
                    period: 3.0,
                    count: 0,
                }),
            ));
            root.couple((id, "out"), ("counter", "in"));
        }
        root.add_atomic(AtomicSpec::new(
            "counter",
            &["in"],
            &[],
            Box::new(Counter::default()),
        ));
        let mut coord = Coordinator::initialize(root, epoch()).unwrap();
        coord.record_log(true);
        coord.simulate_until(3.0).unwrap();
        // One δ_ext call with a 2-entry bag, not two calls.
        let log_snapshot = coord.log().to_vec();
        assert_eq!(log_snapshot.len(), 2);
        assert_eq!(coord.stats().messages, 2);
        assert_eq!(coord.stats().transitions, 3);
        // The counter transitioned once with both ticks.
        // (bag_sizes observable through the debug log length per cycle)
    }

    /// Atomic that is imminent and also receives input; records which δ ran.
    #[derive(Default)]
    struct Confluent {
        fired: Vec<&'static str>,
        armed: bool,
    }

    impl Atomic<Tick> for Confluent {
        fn ta(&self) -> SimTime {
            if self.armed {
                f64::INFINITY
            } else {
                3.0
            }
        }
        fn output(&self, out: &mut Output<Tick>) {
            out.push("out", Tick(0));
        }
        fn delta_int(&mut self) {
            self.fired.push("int");
            self.armed = true;
        }
        fn delta_ext(&mut self, _e: SimTime, _bag: &Bag<Tick>) {
            self.fired.push("ext");
            self.armed = true;
        }
        fn delta_con(&mut self, _bag: &Bag<Tick>) {
            self.fired.push("con");
            self.armed = true;
        }
    }

    #[test]
    fn confluent_collision_invokes_delta_con_only() {
        let mut root = Coupled::new("root");
        root.add_atomic(AtomicSpec::new(
            "gen",
            &[],
            &["out"],
            Box::new(Generator {
                period: 3.0,
                count: 0,
            }),
        ));
        root.add_atomic(AtomicSpec::new(
            "both",
            &["in"],
            &["out"],
            Box::new(Confluent::default()),
        ));
        root.couple(("gen", "out"), ("both", "in"));
        let mut coord = Coordinator::initialize(root, epoch()).unwrap();
        coord.simulate_until(3.0).unwrap();
        // Cannot reach into the box without Any; assert via behavior:
        // after the confluent transition 'both' is passive, so tN is the
        // generator's next event only.
        assert_eq!(coord.t_next(), 6.0);
    }

    #[test]
    fn dangling_coupling_rejected() {
        let mut root = Coupled::new("root");
        root.add_atomic(AtomicSpec::new(
            "gen",
            &[],
            &["out"],
            Box::new(Generator {
                period: 3.0,
                count: 0,
            }),
        ));
        root.couple(("gen", "out"), ("missing", "in"));
        let err = Coordinator::initialize(root, epoch()).unwrap_err();
        assert!(err.to_string().contains("missing"));
    }

    #[test]
    fn duplicate_component_id_rejected() {
        let mut root = Coupled::new("root");
        for _ in 0..2 {
            root.add_atomic(AtomicSpec::new(
                "gen",
                &[],
                &["out"],
                Box::new(Generator {
                    period: 3.0,
                    count: 0,
                }),
            ));
        }
        let err = Coordinator::initialize(root, epoch()).unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    /// Zero-ta relay; triggers the illegitimate-model cap when looped.
    struct Relay;

    impl Atomic<Tick> for Relay {
        fn ta(&self) -> SimTime {
            0.0
        }
        fn output(&self, out: &mut Output<Tick>) {
            out.push("out", Tick(0));
        }
        fn delta_int(&mut self) {}
        fn delta_ext(&mut self, _e: SimTime, _bag: &Bag<Tick>) {}
    }

    #[test]
    fn zero_time_loop_capped() {
        let mut root = Coupled::new("root");
        root.add_atomic(AtomicSpec::new("a", &["in"], &["out"], Box::new(Relay)));
        root.add_atomic(AtomicSpec::new("b", &["in"], &["out"], Box::new(Relay)));
        root.couple(("a", "out"), ("b", "in"));
        root.couple(("b", "out"), ("a", "in"));
        let mut coord = Coordinator::initialize(root, epoch()).unwrap();
        coord.set_loop_cap(100);
        let err = coord.simulate_until(1.0).unwrap_err();
        assert!(matches!(err, KernelError::Illegitimate { .. }));
    }

    #[test]
    fn self_loop_rejected() {
        let mut root = Coupled::new("root");
        root.add_atomic(AtomicSpec::new("a", &["in"], &["out"], Box::new(Relay)));
        root.couple(("a", "out"), ("a", "in"));
        let err = Coordinator::initialize(root, epoch()).unwrap_err();
        assert!(err.to_string().contains("self-loop"));
    }

    #[test]
    fn hierarchical_flattening_routes_through_boundaries() {
        // inner coupled holding the counter; generator outside.
        let mut inner = Coupled::new("inner");
        inner.add_input("in");
        inner.add_atomic(AtomicSpec::new(
            "counter",
            &["in"],
            &[],
            Box::new(Counter::default()),
        ));
        inner.couple_input("in", ("counter", "in"));

        let mut root = Coupled::new("root");
        root.add_atomic(AtomicSpec::new(
            "gen",
            &[],
            &["out"],
            Box::new(Generator {
                period: 3.0,
                count: 0,
            }),
        ));
        root.add_coupled(inner);
        root.couple(("gen", "out"), ("inner", "in"));
        let mut coord = Coordinator::initialize(root, epoch()).unwrap();
        let stats = coord.simulate_until(9.0).unwrap();
        assert_eq!(stats.messages, 3);
    }

    #[test]
    fn parallel_equals_sequential_on_independent_generators() {
        let build = || {
            let mut root = Coupled::new("root");
            for i in 0..8 {
                root.add_atomic(AtomicSpec::new(
                    &format!("gen{i}"),
                    &[],
                    &["out"],
                    Box::new(Generator {
                        period: 1.0 + i as f64 * 0.5,
                        count: 0,
                    }),
                ));
                root.couple((&format!("gen{i}"), "out"), ("counter", "in"));
            }
            root.add_atomic(AtomicSpec::new(
                "counter",
                &["in"],
                &[],
                Box::new(Counter::default()),
            ));
            root
        };
        let mut seq = Coordinator::initialize(build(), epoch()).unwrap();
        seq.record_log(true);
        seq.simulate_until(20.0).unwrap();
        for workers in [1, 2, 4, 8] {
            let mut par = Coordinator::initialize(build(), epoch()).unwrap();
            par.set_mode(Mode::Parallel(workers));
            par.record_log(true);
            par.simulate_until(20.0).unwrap();
            assert_eq!(seq.log(), par.log(), "workers={workers}");
            assert_eq!(seq.stats().messages, par.stats().messages);
        }
    }

    #[test]
    fn elapsed_time_bound_on_delta_ext() {
        /// Counter that asserts 0 <= e < ta(s) on every external event.
        struct Checker;
        impl Atomic<Tick> for Checker {
            fn ta(&self) -> SimTime {
                100.0
            }
            fn output(&self, _out: &mut Output<Tick>) {}
            fn delta_int(&mut self) {}
            fn delta_ext(&mut self, e: SimTime, _bag: &Bag<Tick>) {
                assert!((0.0..100.0).contains(&e), "e = {e}");
            }
        }
        let mut root = Coupled::new("root");
        root.add_atomic(AtomicSpec::new(
            "gen",
            &[],
            &["out"],
            Box::new(Generator {
                period: 7.0,
                count: 0,
            }),
        ));
        root.add_atomic(AtomicSpec::new("chk", &["in"], &[], Box::new(Checker)));
        root.couple(("gen", "out"), ("chk", "in"));
        let mut coord = Coordinator::initialize(root, epoch()).unwrap();
        coord.simulate_until(95.0).unwrap();
    }

    #[test]
    fn time_monotonicity() {
        let mut coord = Coordinator::initialize(gen_counter_model(2.5), epoch()).unwrap();
        let mut prev = 0.0;
        loop {
            let tn = coord.t_next();
            if tn > 50.0 {
                break;
            }
            assert!(tn >= prev);
            prev = tn;
            coord.cycle().unwrap();
        }
    }

    #[test]
    fn derive_seed_is_stable_and_id_keyed() {
        assert_eq!(derive_seed(42, "a"), derive_seed(42, "a"));
        assert_ne!(derive_seed(42, "a"), derive_seed(42, "b"));
        assert_ne!(derive_seed(42, "a"), derive_seed(43, "a"));
    }
}
