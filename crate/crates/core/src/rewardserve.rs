//! Reward delivery: wire types, an asynchronous submit/collect client, and a
//! discrete-event model of reward-waiting bubbles in the training loop.
//!
//! The HTTP service lives in the `alphagrpo-serve` crate; everything here is
//! transport-agnostic so the trainer can score in-process or remotely through
//! the same [`Scorer`] interface.

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;

use crossbeam_channel::{Receiver, Sender};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dvreward::{self, Question, QuestionSet, RewardBreakdown, ScoreMode, Verifier, VerifyError};
use crate::rng::stream;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ServeError {
    #[error("queue full: {queued} in flight, capacity {capacity}, batch of {batch}")]
    Backpressure { queued: usize, capacity: usize, batch: usize },
    #[error("ticket {ticket} failed: {}", format_failures(.failures))]
    Failed { ticket: u64, failures: Vec<(usize, String)> },
    #[error("client is shut down")]
    Closed,
    #[error("invalid scenario: {0}")]
    Scenario(String),
}

fn format_failures(f: &[(usize, String)]) -> String {
    f.iter().map(|(i, m)| format!("sample {i}: {m}")).collect::<Vec<_>>().join("; ")
}

pub type Result<T> = std::result::Result<T, ServeError>;

/// One question about one sample. Latents travel as plain vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyRequest {
    pub sample: Vec<f64>,
    pub question: Question,
    #[serde(default = "yes_token")]
    pub yes_token: String,
    #[serde(default = "no_token")]
    pub no_token: String,
}

fn yes_token() -> String {
    "Yes".into()
}

fn no_token() -> String {
    "No".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyResponse {
    pub p_yes: f64,
    pub p_no: f64,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreJob {
    pub sample: Vec<f64>,
    pub questions: QuestionSet,
    pub mode: ScoreMode,
    #[serde(default)]
    pub format_penalty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub retryable: bool,
}

pub trait Scorer: Send + Sync {
    fn score(&self, job: &ScoreJob) -> std::result::Result<RewardBreakdown, VerifyError>;
}

/// Scores in-process with [`dvreward::score_image`]. Questions of one sample
/// run serially; concurrency comes from the client's worker pool.
#[derive(Debug, Clone)]
pub struct LocalScorer<V> {
    pub verifier: V,
}

impl<V: Verifier> Scorer for LocalScorer<V> {
    fn score(&self, job: &ScoreJob) -> std::result::Result<RewardBreakdown, VerifyError> {
        dvreward::score_image_with(&job.sample, &job.questions, &self.verifier, job.mode, false)
            .map(|r| r.with_penalty(job.format_penalty))
            .map_err(|e| VerifyError { message: e.to_string(), retryable: false })
    }
}

impl<S: Scorer + ?Sized> Scorer for Arc<S> {
    fn score(&self, job: &ScoreJob) -> std::result::Result<RewardBreakdown, VerifyError> {
        (**self).score(job)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TicketStatus {
    Pending,
    Complete,
    Failed,
}

#[derive(Debug)]
struct TicketState {
    results: Vec<Option<std::result::Result<RewardBreakdown, String>>>,
    remaining: usize,
    status: TicketStatus,
}

#[derive(Debug)]
struct TicketInner {
    state: Mutex<TicketState>,
    done: Condvar,
}

/// Handle to one submitted batch. Cheap to clone and safe to move between
/// threads; every clone observes the same completion.
#[derive(Debug, Clone)]
pub struct Ticket {
    pub id: u64,
    pub len: usize,
    inner: Arc<TicketInner>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Collected {
    Pending,
    Complete(Vec<RewardBreakdown>),
}

impl Ticket {
    pub fn status(&self) -> TicketStatus {
        self.inner.state.lock().expect("ticket lock").status
    }

    /// Results in submission order. Idempotent once the ticket is final.
    pub fn collect(&self, blocking: bool) -> Result<Collected> {
        let mut st = self.inner.state.lock().expect("ticket lock");
        while blocking && st.status == TicketStatus::Pending {
            st = self.inner.done.wait(st).expect("ticket lock");
        }
        match st.status {
            TicketStatus::Pending => Ok(Collected::Pending),
            TicketStatus::Complete => Ok(Collected::Complete(
                st.results.iter().map(|r| r.clone().expect("complete").expect("no failures")).collect(),
            )),
            TicketStatus::Failed => Err(ServeError::Failed {
                ticket: self.id,
                failures: st
                    .results
                    .iter()
                    .enumerate()
                    .filter_map(|(i, r)| match r {
                        Some(Err(m)) => Some((i, m.clone())),
                        _ => None,
                    })
                    .collect(),
            }),
        }
    }

    fn finish(&self, index: usize, result: std::result::Result<RewardBreakdown, String>) {
        let mut st = self.inner.state.lock().expect("ticket lock");
        st.results[index] = Some(result);
        st.remaining -= 1;
        if st.remaining == 0 {
            let failed = st.results.iter().any(|r| matches!(r, Some(Err(_))));
            st.status = if failed { TicketStatus::Failed } else { TicketStatus::Complete };
            self.inner.done.notify_all();
        }
    }
}

struct Work {
    ticket: Ticket,
    index: usize,
    job: ScoreJob,
}

/// Asynchronous scoring client. Samples of a batch are spread over a worker
/// pool; dropping the client drains everything already submitted.
pub struct RewardClient {
    tx: Option<Sender<Work>>,
    workers: Vec<JoinHandle<()>>,
    in_flight: Arc<AtomicUsize>,
    capacity: usize,
    next_id: AtomicU64,
}

impl RewardClient {
    pub fn new(scorer: Arc<dyn Scorer>, workers: usize, capacity: usize) -> Self {
        let (tx, rx): (Sender<Work>, Receiver<Work>) = crossbeam_channel::unbounded();
        let in_flight = Arc::new(AtomicUsize::new(0));
        let workers = (0..workers.max(1))
            .map(|_| {
                let rx = rx.clone();
                let scorer = Arc::clone(&scorer);
                let in_flight = Arc::clone(&in_flight);
                std::thread::spawn(move || {
                    for w in rx {
                        let r = scorer.score(&w.job).map_err(|e| e.message);
                        in_flight.fetch_sub(1, Ordering::AcqRel);
                        w.ticket.finish(w.index, r);
                    }
                })
            })
            .collect();
        RewardClient { tx: Some(tx), workers, in_flight, capacity, next_id: AtomicU64::new(0) }
    }

    /// In-process client over the analytic verifier.
    pub fn local<V: Verifier + 'static>(verifier: V, workers: usize) -> Self {
        Self::new(Arc::new(LocalScorer { verifier }), workers, usize::MAX / 2)
    }

    /// Returns immediately. A batch that would overflow the queue is refused
    /// whole; nothing from it is enqueued.
    pub fn submit_batch(&self, jobs: Vec<ScoreJob>) -> Result<Ticket> {
        let tx = self.tx.as_ref().ok_or(ServeError::Closed)?;
        let n = jobs.len();
        let queued = self.in_flight.load(Ordering::Acquire);
        if queued + n > self.capacity {
            return Err(ServeError::Backpressure { queued, capacity: self.capacity, batch: n });
        }
        let ticket = Ticket {
            id: self.next_id.fetch_add(1, Ordering::Relaxed),
            len: n,
            inner: Arc::new(TicketInner {
                state: Mutex::new(TicketState {
                    results: vec![None; n],
                    remaining: n,
                    status: if n == 0 { TicketStatus::Complete } else { TicketStatus::Pending },
                }),
                done: Condvar::new(),
            }),
        };
        self.in_flight.fetch_add(n, Ordering::AcqRel);
        for (index, job) in jobs.into_iter().enumerate() {
            tx.send(Work { ticket: ticket.clone(), index, job }).map_err(|_| ServeError::Closed)?;
        }
        Ok(ticket)
    }

    pub fn collect(&self, ticket: &Ticket, blocking: bool) -> Result<Collected> {
        ticket.collect(blocking)
    }

    /// Submit and wait.
    pub fn score_all(&self, jobs: Vec<ScoreJob>) -> Result<Vec<RewardBreakdown>> {
        match self.submit_batch(jobs)?.collect(true)? {
            Collected::Complete(r) => Ok(r),
            Collected::Pending => unreachable!("blocking collect returned pending"),
        }
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.load(Ordering::Acquire)
    }

    pub fn shutdown(mut self) {
        self.close();
    }

    fn close(&mut self) {
        self.tx.take();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for RewardClient {
    fn drop(&mut self) {
        self.close();
    }
}

// ---------------------------------------------------------------------------
// Scheduling simulator

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchedulePolicy {
    /// One reward server for all nodes; rewards requested after all rollouts.
    CentralizedSync,
    /// A server per node; rewards requested after all rollouts.
    DecentralizedSync,
    /// A server per node; each mini-batch submitted as soon as it is rolled out.
    DecentralizedAsync,
}

impl SchedulePolicy {
    pub const ALL: [SchedulePolicy; 3] =
        [SchedulePolicy::CentralizedSync, SchedulePolicy::DecentralizedSync, SchedulePolicy::DecentralizedAsync];

    pub fn name(self) -> &'static str {
        match self {
            SchedulePolicy::CentralizedSync => "centralized-sync",
            SchedulePolicy::DecentralizedSync => "decentralized-sync",
            SchedulePolicy::DecentralizedAsync => "decentralized-async",
        }
    }
}

/// Timing model, in seconds. Rollout durations get multiplicative jitter
/// uniform in `[1 - jitter, 1 + jitter]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleScenario {
    pub nodes: usize,
    pub policy: SchedulePolicy,
    pub mini_batches: usize,
    pub steps: usize,
    pub rollout_secs: f64,
    pub update_secs: f64,
    pub per_question_latency_secs: f64,
    pub questions_per_mini_batch: usize,
    pub server_parallelism: usize,
    /// Extra cost of serving a remote node's batch, as a fraction of its
    /// compute time.
    pub transfer_overhead: f64,
    pub jitter: f64,
}

impl ScheduleScenario {
    /// Timings chosen so the three policies land near the reported
    /// 40.8 s / 7.28 s / ~0 s bubbles on four nodes.
    pub fn fitted(policy: SchedulePolicy) -> Self {
        ScheduleScenario {
            nodes: 4,
            policy,
            mini_batches: 4,
            steps: 50,
            rollout_secs: 30.0,
            update_secs: 4.0,
            per_question_latency_secs: 0.0325,
            questions_per_mini_batch: 3584,
            server_parallelism: 64,
            transfer_overhead: 1.9,
            jitter: 0.1,
        }
    }

    /// Compute time for one mini-batch on one server.
    pub fn verify_secs(&self) -> f64 {
        let waves = self.questions_per_mini_batch.div_ceil(self.server_parallelism.max(1));
        self.per_question_latency_secs * waves as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ServeError::Scenario(m.to_string()));
        if self.nodes == 0 || self.mini_batches == 0 || self.server_parallelism == 0 {
            return bad("nodes, mini_batches and server_parallelism must be positive");
        }
        if !(self.rollout_secs > 0.0 && self.update_secs > 0.0) {
            return bad("rollout and update durations must be positive");
        }
        if !(self.per_question_latency_secs >= 0.0 && self.transfer_overhead >= 0.0) {
            return bad("latency and transfer overhead must be non-negative");
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return bad("jitter must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTiming {
    pub step: usize,
    pub node: usize,
    pub wall_ns: u64,
    pub busy_ns: u64,
    pub bubble_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BubbleReport {
    pub policy: SchedulePolicy,
    pub mean_bubble_secs: f64,
    pub std_bubble_secs: f64,
    pub mean_step_secs: f64,
    pub utilization: f64,
    pub log: Vec<StepTiming>,
}

fn ns(secs: f64) -> u64 {
    (secs * 1e9).round() as u64
}

/// Event-driven replay of the trainer/server timeline. Each node rolls out
/// its mini-batches back to back, then runs one gradient chunk per
/// mini-batch; a chunk cannot start before that mini-batch's rewards are
/// back. Idle time in the update phase is the bubble. Nodes start each
/// step together; the wait at that barrier falls outside the step window.
pub fn simulate_schedule(scenario: &ScheduleScenario, seed: u64) -> Result<BubbleReport> {
    scenario.validate()?;
    let n = scenario.nodes;
    let m = scenario.mini_batches;
    let verify = ns(scenario.verify_secs());
    let remote_verify = ns(scenario.verify_secs() * (1.0 + scenario.transfer_overhead));
    let update = ns(scenario.update_secs);
    let mut rng = stream(seed, &[0x5c4e]);

    let mut clocks = vec![0u64; n];
    let mut central_free = 0u64;
    let mut log = Vec::with_capacity(n * scenario.steps);
    for step in 0..scenario.steps {
        // Rollout ends per node and mini-batch.
        let ends: Vec<Vec<u64>> = (0..n)
            .map(|i| {
                let mut t = clocks[i];
                (0..m)
                    .map(|_| {
                        let f = 1.0 + scenario.jitter * (2.0 * rng.random::<f64>() - 1.0);
                        t += ns(scenario.rollout_secs * f);
                        t
                    })
                    .collect()
            })
            .collect();

        // Reward-ready times per node and mini-batch.
        let ready: Vec<Vec<u64>> = match scenario.policy {
            SchedulePolicy::DecentralizedAsync => ends
                .iter()
                .map(|e| {
                    let mut free = 0u64;
                    e.iter()
                        .map(|&sub| {
                            free = free.max(sub) + verify;
                            free
                        })
                        .collect()
                })
                .collect(),
            SchedulePolicy::DecentralizedSync => ends
                .iter()
                .map(|e| {
                    let done = e[m - 1] + m as u64 * verify;
                    vec![done; m]
                })
                .collect(),
            SchedulePolicy::CentralizedSync => {
                // Server on node 0; batches served in arrival order, ties by node.
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by_key(|&i| (ends[i][m - 1], i));
                let mut ready = vec![vec![0u64; m]; n];
                for i in order {
                    let cost = if i == 0 { verify } else { remote_verify };
                    central_free = central_free.max(ends[i][m - 1]) + m as u64 * cost;
                    ready[i] = vec![central_free; m];
                }
                ready
            }
        };

        let mut step_end = 0u64;
        for i in 0..n {
            let start = clocks[i];
            let mut t = ends[i][m - 1];
            let mut bubble = 0u64;
            for &r in &ready[i] {
                if r > t {
                    bubble += r - t;
                    t = r;
                }
                t += update;
            }
            let wall = t - start;
            log.push(StepTiming { step, node: i, wall_ns: wall, busy_ns: wall - bubble, bubble_ns: bubble });
            step_end = step_end.max(t);
        }
        // The gradient all-reduce aligns nodes before the next step.
        clocks.iter_mut().for_each(|c| *c = step_end);
    }

    let k = log.len().max(1) as f64;
    let bubbles: Vec<f64> = log.iter().map(|s| s.bubble_ns as f64 * 1e-9).collect();
    let mean_bubble_secs = bubbles.iter().sum::<f64>() / k;
    let var = bubbles.iter().map(|b| (b - mean_bubble_secs).powi(2)).sum::<f64>() / k;
    let wall: u64 = log.iter().map(|s| s.wall_ns).sum();
    let busy: u64 = log.iter().map(|s| s.busy_ns).sum();
    Ok(BubbleReport {
        policy: scenario.policy,
        mean_bubble_secs,
        std_bubble_secs: var.sqrt(),
        mean_step_secs: wall as f64 * 1e-9 / k,
        utilization: if wall == 0 { 1.0 } else { busy as f64 / wall as f64 },
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dvreward::{decompose, AnalyticVerifier};
    use crate::envtoy::{generate_prompt_set, Catalog};
    use crate::rng::stream;
    use rand_distr::{Distribution, StandardNormal};

    fn jobs(n: usize, seed: u64) -> Vec<ScoreJob> {
        let cat = Catalog::standard(4, 2).unwrap();
        let prompts = generate_prompt_set(&cat, 5, [1, 1, 3], 1).unwrap();
        let mut rng = stream(seed, &[]);
        (0..n)
            .map(|i| ScoreJob {
                sample: (0..2).map(|_| 2.0 * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect(),
                questions: decompose(&prompts[i % prompts.len()]).unwrap(),
                mode: ScoreMode::Confidence,
                format_penalty: if i % 3 == 0 { -0.5 } else { 0.0 },
            })
            .collect()
    }

    fn local(j: &ScoreJob) -> RewardBreakdown {
        dvreward::score_image(&j.sample, &j.questions, &AnalyticVerifier::default(), j.mode)
            .unwrap()
            .with_penalty(j.format_penalty)
    }

    #[test]
    fn async_rewards_equal_local_scoring() {
        let client = RewardClient::local(AnalyticVerifier::default(), 4);
        let js = jobs(40, 1);
        let t = client.submit_batch(js.clone()).unwrap();
        let Collected::Complete(got) = t.collect(true).unwrap() else { panic!() };
        for (j, g) in js.iter().zip(&got) {
            assert_eq!(*g, local(j));
        }
        assert_eq!(t.collect(false).unwrap(), Collected::Complete(got));
    }

    #[test]
    fn reverse_collection_order_changes_nothing() {
        let client = RewardClient::local(AnalyticVerifier::default(), 3);
        let (a, b) = (jobs(10, 2), jobs(10, 3));
        let ta = client.submit_batch(a.clone()).unwrap();
        let tb = client.submit_batch(b.clone()).unwrap();
        let Collected::Complete(rb) = tb.collect(true).unwrap() else { panic!() };
        let Collected::Complete(ra) = ta.collect(true).unwrap() else { panic!() };
        assert_eq!(ra, a.iter().map(local).collect::<Vec<_>>());
        assert_eq!(rb, b.iter().map(local).collect::<Vec<_>>());
    }

    #[test]
    fn empty_batch_is_complete() {
        let client = RewardClient::local(AnalyticVerifier::default(), 1);
        let t = client.submit_batch(vec![]).unwrap();
        assert_eq!(t.status(), TicketStatus::Complete);
        assert_eq!(t.collect(false).unwrap(), Collected::Complete(vec![]));
    }

    struct Gate(Mutex<bool>, Condvar);

    impl Scorer for Gate {
        fn score(&self, _: &ScoreJob) -> std::result::Result<RewardBreakdown, VerifyError> {
            let mut open = self.0.lock().unwrap();
            while !*open {
                open = self.1.wait(open).unwrap();
            }
            Ok(RewardBreakdown::scalar(1.0))
        }
    }

    #[test]
    fn pending_then_complete_and_backpressure() {
        let gate = Arc::new(Gate(Mutex::new(false), Condvar::new()));
        let client = RewardClient::new(gate.clone(), 2, 5);
        let t = client.submit_batch(jobs(4, 4)).unwrap();
        assert_eq!(t.collect(false).unwrap(), Collected::Pending);
        let refused = client.submit_batch(jobs(2, 5)).unwrap_err();
        assert!(matches!(refused, ServeError::Backpressure { queued: 4, capacity: 5, batch: 2 }));
        *gate.0.lock().unwrap() = true;
        gate.1.notify_all();
        let Collected::Complete(r) = t.collect(true).unwrap() else { panic!() };
        assert_eq!(r.len(), 4);
        client.shutdown();
    }

    struct Flaky;

    impl Scorer for Flaky {
        fn score(&self, job: &ScoreJob) -> std::result::Result<RewardBreakdown, VerifyError> {
            if job.format_penalty < 0.0 {
                Err(VerifyError { message: "backend down".into(), retryable: true })
            } else {
                Ok(RewardBreakdown::scalar(0.5))
            }
        }
    }

    #[test]
    fn failed_ticket_reports_each_sample() {
        let client = RewardClient::new(Arc::new(Flaky), 2, 100);
        let t = client.submit_batch(jobs(6, 6)).unwrap();
        let err = t.collect(true).unwrap_err();
        assert_eq!(t.status(), TicketStatus::Failed);
        let ServeError::Failed { failures, .. } = err else { panic!() };
        assert_eq!(failures.iter().map(|f| f.0).collect::<Vec<_>>(), vec![0, 3]);
    }

    #[test]
    fn zero_latency_means_no_bubble() {
        for p in SchedulePolicy::ALL {
            let mut s = ScheduleScenario::fitted(p);
            s.per_question_latency_secs = 0.0;
            assert_eq!(simulate_schedule(&s, 1).unwrap().mean_bubble_secs, 0.0, "{p:?}");
        }
    }

    #[test]
    fn fitted_ordering_and_conservation() {
        let r: Vec<BubbleReport> =
            SchedulePolicy::ALL.iter().map(|&p| simulate_schedule(&ScheduleScenario::fitted(p), 7).unwrap()).collect();
        assert!(r[0].mean_bubble_secs > r[1].mean_bubble_secs);
        assert!(r[1].mean_bubble_secs > r[2].mean_bubble_secs);
        assert!(r[2].mean_bubble_secs < 0.01 * r[0].mean_bubble_secs);
        assert!((r[1].mean_bubble_secs - 7.28).abs() < 0.5, "{}", r[1].mean_bubble_secs);
        assert!((r[0].mean_bubble_secs - 40.8).abs() < 4.0, "{}", r[0].mean_bubble_secs);
        for rep in &r {
            assert!(rep.log.iter().all(|s| s.busy_ns + s.bubble_ns == s.wall_ns));
        }
        assert_eq!(simulate_schedule(&ScheduleScenario::fitted(SchedulePolicy::CentralizedSync), 7).unwrap(), r[0]);
    }
}
