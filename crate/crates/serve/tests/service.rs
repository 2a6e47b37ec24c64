use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use alphagrpo::dvreward::{
    self, AnalyticVerifier, Category, Question, QuestionSet, ScoreMode, TopLogprob, Verifier,
};
use alphagrpo::envtoy::{generate_prompt_set, AttributePredicate, Catalog};
use alphagrpo::rewardserve::{Collected, RewardClient, ScoreJob, VerifyRequest};
use alphagrpo_serve::{serve, Backend, HttpScorer, LogprobReply, RemoteLogprobVerifier, ServeConfig};
use axum::routing::post;
use axum::{Json, Router};

fn any_port() -> SocketAddr {
    "127.0.0.1:0".parse().unwrap()
}

fn client(url: &str) -> HttpScorer {
    HttpScorer::new(url, Duration::from_secs(20)).unwrap()
}

fn question_sets(n: usize) -> Vec<QuestionSet> {
    let cat = Catalog::standard(12, 2).unwrap();
    let prompts = generate_prompt_set(&cat, 3, [1, 1, 1], 5).unwrap();
    prompts.iter().take(n).map(|p| dvreward::decompose(p).unwrap()).collect()
}

fn sample(i: usize) -> Vec<f64> {
    let a = i as f64 * 0.7;
    vec![2.0 * a.cos() * (1.0 + 0.1 * i as f64).sin(), 1.5 * (1.3 * a).sin()]
}

#[test]
fn zero_margin_question_answers_half_half() {
    let svc = serve(ServeConfig::analytic(any_port())).unwrap();
    let q = Question::analytic(Category::Spatial, AttributePredicate::HalfPlane { axis: 0, sign: 1, offset: 0.0 });
    let req = VerifyRequest { sample: vec![0.0, 1.3], question: q, yes_token: "Yes".into(), no_token: "No".into() };
    let r = client(&svc.url()).verify(&req).unwrap();
    assert_eq!((r.p_yes, r.p_no), (0.5, 0.5));
    assert!(r.latency_ms >= 0.0);
    svc.shutdown().unwrap();
}

#[test]
fn concurrent_requests_match_serial_oracle() {
    let svc = serve(ServeConfig::analytic(any_port())).unwrap();
    let url = svc.url();
    let sets = Arc::new(question_sets(20));
    let oracle = AnalyticVerifier::default();
    let handles: Vec<_> = (0..100)
        .map(|i| {
            let (url, sets) = (url.clone(), sets.clone());
            std::thread::spawn(move || {
                let c = client(&url);
                let set = &sets[i % sets.len()];
                if i % 2 == 0 {
                    let q = set.sem[i % set.sem.len()].clone();
                    let req = VerifyRequest { sample: sample(i), question: q, yes_token: "Yes".into(), no_token: "No".into() };
                    let r = c.verify(&req).unwrap();
                    (i, vec![r.p_yes, r.p_no])
                } else {
                    let job = ScoreJob { sample: sample(i), questions: set.clone(), mode: ScoreMode::Confidence, format_penalty: -0.5 };
                    use alphagrpo::rewardserve::Scorer;
                    let r = c.score(&job).unwrap();
                    (i, vec![r.image_reward, r.total])
                }
            })
        })
        .collect();
    let mut seen = 0;
    for h in handles {
        let (i, got) = h.join().unwrap();
        let set = &sets[i % sets.len()];
        let want = if i % 2 == 0 {
            let a = oracle.answer(&sample(i), &set.sem[i % set.sem.len()]).unwrap();
            vec![a.p_yes, a.p_no]
        } else {
            let r = dvreward::score_image(&sample(i), set, &oracle, ScoreMode::Confidence).unwrap();
            vec![r.image_reward, r.image_reward - 0.5]
        };
        assert_eq!(got, want, "request {i}");
        seen += 1;
    }
    assert_eq!(seen, 100);
    assert_eq!(svc.served(), 100);
}

#[test]
fn async_client_over_http_matches_local_scoring() {
    let svc = serve(ServeConfig::analytic(any_port())).unwrap();
    let rc = RewardClient::new(Arc::new(client(&svc.url())), 4, 256);
    let sets = question_sets(16);
    let jobs: Vec<ScoreJob> = sets
        .iter()
        .enumerate()
        .map(|(i, s)| ScoreJob { sample: sample(i), questions: s.clone(), mode: ScoreMode::Binary, format_penalty: 0.0 })
        .collect();
    let a = rc.submit_batch(jobs[..8].to_vec()).unwrap();
    let b = rc.submit_batch(jobs[8..].to_vec()).unwrap();
    let mut got = Vec::new();
    for t in [&b, &a] {
        match rc.collect(t, true).unwrap() {
            Collected::Complete(v) => got.push(v),
            Collected::Pending => unreachable!("blocking collect"),
        }
    }
    got.reverse();
    let got: Vec<_> = got.into_iter().flatten().collect();
    for (i, (job, r)) in jobs.iter().zip(&got).enumerate() {
        let local = dvreward::score_image(&job.sample, &job.questions, &AnalyticVerifier::default(), ScoreMode::Binary).unwrap();
        assert!((local.total - r.total).abs() <= 1e-12, "sample {i}");
        assert_eq!(&local, r);
    }
}

#[test]
fn shutdown_drains_in_flight_requests() {
    let mut cfg = ServeConfig::analytic(any_port());
    cfg.delay = Duration::from_millis(400);
    let svc = serve(cfg).unwrap();
    let url = svc.url();
    let sets = Arc::new(question_sets(4));
    let handles: Vec<_> = (0..24)
        .map(|i| {
            let (url, sets) = (url.clone(), sets.clone());
            std::thread::spawn(move || {
                let mut c = client(&url);
                c.retries = 0;
                let job = ScoreJob { sample: sample(i), questions: sets[i % 4].clone(), mode: ScoreMode::Confidence, format_penalty: 0.0 };
                use alphagrpo::rewardserve::Scorer;
                c.score(&job)
            })
        })
        .collect();
    std::thread::sleep(Duration::from_millis(150));
    svc.shutdown().unwrap();
    for h in handles {
        let r = h.join().unwrap().expect("accepted request must complete");
        assert!(r.total.is_finite());
    }
    // Nothing listens any more.
    let mut c = client(&url);
    c.retries = 0;
    let q = sets[0].sem[0].clone();
    let req = VerifyRequest { sample: sample(0), question: q, yes_token: "Yes".into(), no_token: "No".into() };
    assert!(c.verify(&req).unwrap_err().retryable);
}

fn fake_logprob_backend() -> (SocketAddr, std::thread::JoinHandle<()>, tokio::sync::oneshot::Sender<()>) {
    #[derive(serde::Deserialize)]
    struct Query {
        prompt: String,
        sample: Vec<f64>,
    }
    async fn reply(Json(q): Json<Query>) -> Json<LogprobReply> {
        let pred = dvreward::predicate_from_text(&q.prompt).unwrap();
        let a = AnalyticVerifier::default().answer_predicate(&q.sample, &pred);
        Json(LogprobReply {
            top_logprobs: vec![
                TopLogprob { token: " Yes".into(), logprob: a.p_yes.ln() },
                TopLogprob { token: "No".into(), logprob: a.p_no.ln() },
                TopLogprob { token: "Maybe".into(), logprob: -30.0 },
            ],
        })
    }
    let listener = std::net::TcpListener::bind(any_port()).unwrap();
    listener.set_nonblocking(true).unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let t = std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
        rt.block_on(async move {
            let l = tokio::net::TcpListener::from_std(listener).unwrap();
            let app = Router::new().route("/v1/logprobs", post(reply));
            axum::serve(l, app).with_graceful_shutdown(async { let _ = rx.await; }).await.unwrap();
        });
    });
    (addr, t, tx)
}

#[test]
fn remote_backend_matches_analytic_and_reports_unreachable() {
    let (addr, t, stop) = fake_logprob_backend();
    let remote = RemoteLogprobVerifier::new(format!("http://{addr}/v1/logprobs"), Duration::from_secs(10)).unwrap();
    let mut cfg = ServeConfig::analytic(any_port());
    cfg.backend = Backend::Remote(remote);
    let svc = serve(cfg).unwrap();
    let c = client(&svc.url());
    let set = &question_sets(1)[0];
    use alphagrpo::rewardserve::Scorer;
    let job = ScoreJob { sample: sample(3), questions: set.clone(), mode: ScoreMode::Confidence, format_penalty: 0.0 };
    let got = c.score(&job).unwrap();
    let want = dvreward::score_image(&job.sample, set, &AnalyticVerifier::default(), ScoreMode::Confidence).unwrap();
    assert!((got.total - want.total).abs() < 1e-12);
    svc.shutdown().unwrap();

    // Backend gone: the service answers 5xx with the retryable flag.
    let _ = stop.send(());
    t.join().unwrap();
    let remote = RemoteLogprobVerifier::new(format!("http://{addr}/v1/logprobs"), Duration::from_secs(2)).unwrap();
    let mut cfg = ServeConfig::analytic(any_port());
    cfg.backend = Backend::Remote(remote);
    let svc = serve(cfg).unwrap();
    let mut c = client(&svc.url());
    c.retries = 0;
    let err = c.score(&job).unwrap_err();
    assert!(err.retryable, "{err}");
    let raw = reqwest_status(&svc.url(), &job);
    assert!((500..600).contains(&raw), "status {raw}");
}

fn reqwest_status(url: &str, job: &ScoreJob) -> u16 {
    let body = serde_json::to_string(job).unwrap();
    let addr = url.trim_start_matches("http://");
    use std::io::{Read, Write};
    let mut s = std::net::TcpStream::connect(addr).unwrap();
    write!(
        s,
        "POST /score HTTP/1.1\r\nHost: {addr}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut out = String::new();
    s.read_to_string(&mut out).unwrap();
    out.split_whitespace().nth(1).unwrap().parse().unwrap()
}

#[test]
fn healthz_reports_backend() {
    let svc = serve(ServeConfig::analytic(any_port())).unwrap();
    let addr = svc.addr();
    use std::io::{Read, Write};
    let mut s = std::net::TcpStream::connect(addr).unwrap();
    write!(s, "GET /healthz HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").unwrap();
    let mut out = String::new();
    s.read_to_string(&mut out).unwrap();
    assert!(out.starts_with("HTTP/1.1 200"));
    assert!(out.contains("\"backend\":\"analytic\""));
}
