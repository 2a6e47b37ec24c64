//! HTTP front end for reward verification.
//!
//! Endpoints, all JSON:
//!
//! | route          | body                        | reply                      |
//! |----------------|-----------------------------|----------------------------|
//! | `POST /verify` | [`VerifyRequest`]           | [`VerifyResponse`]         |
//! | `POST /score`  | [`ScoreJob`]                | [`RewardBreakdown`]        |
//! | `GET /healthz` |                             | `{"status","backend"}`     |
//!
//! Failures reply with [`ErrorBody`]: 502 when the backend could not be
//! reached (`retryable: true`), 422 when the request itself cannot be
//! answered. `latency_ms` is wall time spent in the backend.
//!
//! The questions of one `/score` sample are answered in parallel.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use alphagrpo::dvreward::{
    self, answer_from_top_logprobs, AnalyticVerifier, Answer, Question, RewardBreakdown, TopLogprob, Verifier,
    VerifyError,
};
use alphagrpo::rewardserve::{ErrorBody, ScoreJob, Scorer, VerifyRequest, VerifyResponse};
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error("runtime: {0}")]
    Runtime(#[from] std::io::Error),
    #[error("http client: {0}")]
    Client(String),
    #[error("server thread panicked")]
    Panicked,
}

/// Asks a remote model for Yes/No log-probabilities.
///
/// Request: `{"prompt", "sample", "max_tokens": 1, "logprobs": true,
/// "top_logprobs": k}`. Reply: `{"top_logprobs": [{"token", "logprob"}]}`.
#[derive(Debug, Clone)]
pub struct RemoteLogprobVerifier {
    url: String,
    client: reqwest::blocking::Client,
    pub yes_token: String,
    pub no_token: String,
    pub top_k: usize,
}

#[derive(Serialize)]
struct LogprobQuery<'a> {
    prompt: &'a str,
    sample: &'a [f64],
    max_tokens: usize,
    logprobs: bool,
    top_logprobs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogprobReply {
    pub top_logprobs: Vec<TopLogprob>,
}

impl RemoteLogprobVerifier {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Result<Self, ServerError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ServerError::Client(e.to_string()))?;
        Ok(RemoteLogprobVerifier { url: url.into(), client, yes_token: "Yes".into(), no_token: "No".into(), top_k: 20 })
    }

    pub fn answer_with(&self, z: &[f64], q: &Question, yes: &str, no: &str) -> Result<Answer, VerifyError> {
        let query = LogprobQuery { prompt: &q.text, sample: z, max_tokens: 1, logprobs: true, top_logprobs: self.top_k };
        let reply = self.client.post(&self.url).json(&query).send().map_err(|e| VerifyError {
            message: format!("backend unreachable: {e}"),
            retryable: true,
        })?;
        let status = reply.status();
        if !status.is_success() {
            return Err(VerifyError { message: format!("backend replied {status}"), retryable: status.is_server_error() });
        }
        let body: LogprobReply =
            reply.json().map_err(|e| VerifyError { message: format!("bad backend reply: {e}"), retryable: false })?;
        let a = answer_from_top_logprobs(&body.top_logprobs, yes, no)
            .map_err(|e| VerifyError { message: e.to_string(), retryable: false })?;
        Ok(if q.polarity { a } else { Answer { p_yes: a.p_no, p_no: a.p_yes } })
    }
}

impl Verifier for RemoteLogprobVerifier {
    fn answer(&self, z: &[f64], q: &Question) -> Result<Answer, VerifyError> {
        self.answer_with(z, q, &self.yes_token, &self.no_token)
    }
}

#[derive(Debug, Clone)]
pub enum Backend {
    Analytic(AnalyticVerifier),
    Remote(RemoteLogprobVerifier),
}

impl Backend {
    pub fn name(&self) -> &'static str {
        match self {
            Backend::Analytic(_) => "analytic",
            Backend::Remote(_) => "remote",
        }
    }

    fn answer_with(&self, z: &[f64], q: &Question, yes: &str, no: &str) -> Result<Answer, VerifyError> {
        match self {
            Backend::Analytic(v) => v.answer(z, q),
            Backend::Remote(v) => v.answer_with(z, q, yes, no),
        }
    }
}

impl Verifier for Backend {
    fn answer(&self, z: &[f64], q: &Question) -> Result<Answer, VerifyError> {
        match self {
            Backend::Analytic(v) => v.answer(z, q),
            Backend::Remote(v) => v.answer(z, q),
        }
    }
}

/// Remembers whether any failure seen was retryable, since aggregated
/// scoring errors only keep the message.
struct Tracking<'a> {
    inner: &'a Backend,
    retryable: AtomicBool,
}

impl Verifier for Tracking<'_> {
    fn answer(&self, z: &[f64], q: &Question) -> Result<Answer, VerifyError> {
        self.inner.answer(z, q).inspect_err(|e| {
            if e.retryable {
                self.retryable.store(true, Ordering::Relaxed);
            }
        })
    }
}

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub addr: SocketAddr,
    pub backend: Backend,
    /// Extra delay per request, for exercising clients under load.
    pub delay: Duration,
    /// Also stop on Ctrl-C.
    pub handle_signals: bool,
}

impl ServeConfig {
    pub fn analytic(addr: SocketAddr) -> Self {
        ServeConfig {
            addr,
            backend: Backend::Analytic(AnalyticVerifier::default()),
            delay: Duration::ZERO,
            handle_signals: false,
        }
    }
}

struct AppState {
    backend: Backend,
    delay: Duration,
    served: AtomicU64,
}

struct ApiError(StatusCode, ErrorBody);

impl From<VerifyError> for ApiError {
    fn from(e: VerifyError) -> Self {
        let code = if e.retryable { StatusCode::BAD_GATEWAY } else { StatusCode::UNPROCESSABLE_ENTITY };
        ApiError(code, ErrorBody { error: e.message, retryable: e.retryable })
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.unwrap_or_else(|e| {
        Err(ApiError(StatusCode::INTERNAL_SERVER_ERROR, ErrorBody { error: e.to_string(), retryable: true }))
    })
}

async fn verify(State(st): State<Arc<AppState>>, Json(req): Json<VerifyRequest>) -> Result<Json<VerifyResponse>, ApiError> {
    if !st.delay.is_zero() {
        tokio::time::sleep(st.delay).await;
    }
    let state = st.clone();
    let reply = blocking(move || {
        let start = Instant::now();
        let a = state.backend.answer_with(&req.sample, &req.question, &req.yes_token, &req.no_token)?;
        Ok(VerifyResponse { p_yes: a.p_yes, p_no: a.p_no, latency_ms: start.elapsed().as_secs_f64() * 1e3 })
    })
    .await?;
    st.served.fetch_add(1, Ordering::Relaxed);
    Ok(Json(reply))
}

async fn score(State(st): State<Arc<AppState>>, Json(job): Json<ScoreJob>) -> Result<Json<RewardBreakdown>, ApiError> {
    if !st.delay.is_zero() {
        tokio::time::sleep(st.delay).await;
    }
    let state = st.clone();
    let reply = blocking(move || {
        let v = Tracking { inner: &state.backend, retryable: AtomicBool::new(false) };
        dvreward::score_image_with(&job.sample, &job.questions, &v, job.mode, true)
            .map(|r| r.with_penalty(job.format_penalty))
            .map_err(|e| VerifyError { message: e.to_string(), retryable: v.retryable.load(Ordering::Relaxed) }.into())
    })
    .await?;
    st.served.fetch_add(1, Ordering::Relaxed);
    Ok(Json(reply))
}

async fn healthz(State(st): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "backend": st.backend.name() }))
}

pub fn router(backend: Backend, delay: Duration) -> Router {
    let state = Arc::new(AppState { backend, delay, served: AtomicU64::new(0) });
    router_with(state)
}

fn router_with(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/verify", post(verify))
        .route("/score", post(score))
        .route("/healthz", get(healthz))
        .with_state(state)
}

/// A running service. Dropping the handle shuts it down.
pub struct ServiceHandle {
    addr: SocketAddr,
    state: Arc<AppState>,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<std::io::Result<()>>>,
}

impl ServiceHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Requests answered successfully so far.
    pub fn served(&self) -> u64 {
        self.state.served.load(Ordering::Relaxed)
    }

    /// Stops accepting connections and waits for in-flight requests.
    pub fn shutdown(mut self) -> Result<(), ServerError> {
        self.stop_and_join()
    }

    /// Blocks until the service stops on its own (Ctrl-C when enabled).
    pub fn wait(mut self) -> Result<(), ServerError> {
        // Dropping the sender would count as a stop request.
        let _keep = self.stop.take();
        self.join()
    }

    fn join(&mut self) -> Result<(), ServerError> {
        match self.thread.take() {
            Some(t) => t.join().map_err(|_| ServerError::Panicked)?.map_err(ServerError::Runtime),
            None => Ok(()),
        }
    }

    fn stop_and_join(&mut self) -> Result<(), ServerError> {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        self.join()
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        let _ = self.stop_and_join();
    }
}

pub fn serve(cfg: ServeConfig) -> Result<ServiceHandle, ServerError> {
    let std_listener =
        std::net::TcpListener::bind(cfg.addr).map_err(|source| ServerError::Bind { addr: cfg.addr, source })?;
    std_listener.set_nonblocking(true)?;
    let addr = std_listener.local_addr()?;
    let state = Arc::new(AppState { backend: cfg.backend, delay: cfg.delay, served: AtomicU64::new(0) });
    let (tx, rx) = oneshot::channel::<()>();
    let app = router_with(state.clone());
    let signals = cfg.handle_signals;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let thread = std::thread::Builder::new().name("reward-server".into()).spawn(move || {
        let out = rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(std_listener)?;
            let stop = async move {
                if signals {
                    tokio::select! {
                        _ = rx => {}
                        _ = tokio::signal::ctrl_c() => {}
                    }
                } else {
                    let _ = rx.await;
                }
            };
            axum::serve(listener, app).with_graceful_shutdown(stop).await
        });
        drop(rt);
        out
    })?;
    Ok(ServiceHandle { addr, state, stop: Some(tx), thread: Some(thread) })
}

/// [`Scorer`] that posts jobs to a running service's `/score`, retrying
/// retryable failures with exponential backoff.
#[derive(Debug, Clone)]
pub struct HttpScorer {
    base: String,
    client: reqwest::blocking::Client,
    pub retries: usize,
    pub backoff: Duration,
}

impl HttpScorer {
    pub fn new(base: impl Into<String>, timeout: Duration) -> Result<Self, ServerError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ServerError::Client(e.to_string()))?;
        Ok(HttpScorer { base: base.into().trim_end_matches('/').to_string(), client, retries: 3, backoff: Duration::from_millis(50) })
    }

    fn post<B: Serialize, R: for<'de> Deserialize<'de>>(&self, path: &str, body: &B) -> Result<R, VerifyError> {
        let mut attempt = 0;
        loop {
            match self.post_once(path, body) {
                Err(e) if e.retryable && attempt < self.retries => {
                    std::thread::sleep(self.backoff * 2u32.pow(attempt as u32));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn post_once<B: Serialize, R: for<'de> Deserialize<'de>>(&self, path: &str, body: &B) -> Result<R, VerifyError> {
        let url = format!("{}{path}", self.base);
        let reply = self
            .client
            .post(&url)
            .json(body)
            .send()
            .map_err(|e| VerifyError { message: format!("{url}: {e}"), retryable: true })?;
        if reply.status().is_success() {
            return reply.json().map_err(|e| VerifyError { message: format!("{url}: {e}"), retryable: false });
        }
        let status = reply.status();
        match reply.json::<ErrorBody>() {
            Ok(b) => Err(VerifyError { message: b.error, retryable: b.retryable }),
            Err(_) => Err(VerifyError { message: format!("{url}: {status}"), retryable: status.is_server_error() }),
        }
    }

    pub fn verify(&self, req: &VerifyRequest) -> Result<VerifyResponse, VerifyError> {
        self.post("/verify", req)
    }
}

impl Scorer for HttpScorer {
    fn score(&self, job: &ScoreJob) -> Result<RewardBreakdown, VerifyError> {
        self.post("/score", job)
    }
}

/// A [`Verifier`] answering through a service's `/verify`.
#[derive(Debug, Clone)]
pub struct HttpVerifier(pub HttpScorer);

impl Verifier for HttpVerifier {
    fn answer(&self, z: &[f64], q: &Question) -> Result<Answer, VerifyError> {
        let req = VerifyRequest { sample: z.to_vec(), question: q.clone(), yes_token: "Yes".into(), no_token: "No".into() };
        self.0.verify(&req).map(|r| Answer { p_yes: r.p_yes, p_no: r.p_no })
    }
}
