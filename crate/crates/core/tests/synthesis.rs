use std::collections::HashSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use hardneg::synth::{
    augment_pairs, augment_retrieval_pair, brainstorm_tasks, call_with_retry, generate_triplet, no_sleep,
    parse_generation, run_synthesis, BackendError, ChatBackend, ChatRequest, EndpointConfig, HttpBackend, MockBackend,
    PromptPlaceholders, RetryPolicy, SynthConfig, SynthError, NUM_WORDS,
};
use hardneg::triplet::{Source, TaskCategory, TaskSpec, Violation};

fn cfg(n: usize, seed: u64) -> SynthConfig {
    SynthConfig {
        num_triplets: n,
        seed,
        ..SynthConfig::default()
    }
}

fn ph(num_words: u32) -> PromptPlaceholders {
    PromptPlaceholders {
        query_type: "common".into(),
        query_length: "5 to 15 words".into(),
        clarity: "clear".into(),
        num_words,
        difficulty: "college".into(),
        language: "English".into(),
    }
}

fn words(s: &str) -> HashSet<&str> {
    s.split_whitespace().collect()
}

#[test]
fn brainstorm_is_deterministic_and_distinct() {
    let backend = MockBackend::new(1);
    let c = cfg(1, 1);
    let ctx = c.context(&backend, &no_sleep);
    let a = brainstorm_tasks(TaskCategory::ShortLong, 5, &ctx, 1).unwrap();
    let b = brainstorm_tasks(TaskCategory::ShortLong, 5, &ctx, 1).unwrap();
    assert_eq!(a.len(), 5);
    assert_eq!(a, b);
    let distinct: HashSet<String> = a.iter().map(|t| t.description.to_lowercase()).collect();
    assert_eq!(distinct.len(), 5);
    assert!(a
        .iter()
        .all(|t| !t.description.contains('\n') && !t.description.is_empty()));
}

struct Canned(&'static str);

impl ChatBackend for Canned {
    fn complete(&self, _: &ChatRequest) -> Result<String, BackendError> {
        Ok(self.0.to_string())
    }
}

#[test]
fn brainstorm_rejects_non_lists_and_dedups() {
    let c = cfg(1, 1);
    let prose = Canned("Here are some ideas: search for things.");
    match brainstorm_tasks(TaskCategory::Sts, 5, &c.context(&prose, &no_sleep), 0) {
        Err(SynthError::Format { raw, .. }) => assert!(raw.contains("Here are some ideas")),
        other => panic!("{other:?}"),
    }
    let dupes = Canned("['Find A.', 'find a.', 'Find B.', ' Find B. ']");
    let tasks = brainstorm_tasks(TaskCategory::Sts, 10, &c.context(&dupes, &no_sleep), 0).unwrap();
    assert_eq!(tasks.len(), 2);
}

#[test]
fn mock_negatives_lose_overlap_level_by_level() {
    let backend = MockBackend::new(3);
    let c = cfg(1, 3);
    let ctx = c.context(&backend, &no_sleep);
    let task = TaskSpec::new(TaskCategory::ShortLong, "find recipes").unwrap();
    for seed in 0..40 {
        let t = generate_triplet(&task, &ph(NUM_WORDS[(seed % 6) as usize]), &ctx, seed)
            .unwrap()
            .triplet;
        let pos = words(&t.positive);
        let overlaps: Vec<usize> = t
            .negatives
            .iter()
            .map(|n| words(n).intersection(&pos).count())
            .collect();
        assert!(overlaps.windows(2).all(|w| w[0] > w[1]), "{overlaps:?}");
        assert!(t.query.split_whitespace().all(|w| pos.contains(w)));
    }
}

#[test]
fn mock_replaces_ceil_of_rate_times_length() {
    let backend = MockBackend::new(4);
    let c = cfg(1, 4);
    let ctx = c.context(&backend, &no_sleep);
    let task = TaskSpec::new(TaskCategory::ShortLong, "find recipes").unwrap();
    // Augmenting a 20-word positive controls W exactly.
    let positive: Vec<String> = (0..20).map(|i| format!("word{i}")).collect();
    let g = augment_retrieval_pair("word1 word2", &positive.join(" "), &task, &ctx, 9).unwrap();
    let replaced: Vec<usize> = g
        .triplet
        .negatives
        .iter()
        .map(|n| n.split_whitespace().zip(&positive).filter(|(a, b)| a != b).count())
        .collect();
    assert_eq!(replaced, vec![3, 7, 12, 18]);
    assert_eq!(g.triplet.source, Source::RetrievalAugmented);
}

#[test]
fn equal_seeds_give_identical_replies() {
    let req = ChatRequest::user(
        hardneg::synth::render_prompt(&TaskSpec::new(TaskCategory::Sts, "x").unwrap(), &ph(50), 4),
        1.0,
        17,
    );
    assert_eq!(
        MockBackend::new(5).complete(&req).unwrap(),
        MockBackend::new(5).complete(&req).unwrap()
    );
    assert_ne!(
        MockBackend::new(5).complete(&req).unwrap(),
        MockBackend::new(6).complete(&req).unwrap()
    );
}

#[test]
fn pipeline_is_deterministic_with_zero_rejections() {
    let backend = MockBackend::new(5);
    let (a, report) = run_synthesis(&cfg(60, 5), &backend, &no_sleep).unwrap();
    let (b, _) = run_synthesis(&cfg(60, 5), &MockBackend::new(5), &no_sleep).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 60);
    assert_eq!(report.accepted, 60);
    assert_eq!(report.rejected_total(), 0);
    assert!(a.iter().all(|t| t.source == Source::Synthetic && t.validate(4).is_ok()));
    let categories: HashSet<TaskCategory> = a.iter().map(|t| t.task.category).collect();
    assert_eq!(categories.len(), 5);
}

#[test]
fn zero_triplets_is_a_config_error() {
    assert!(matches!(
        run_synthesis(&cfg(0, 1), &MockBackend::new(1), &no_sleep),
        Err(SynthError::Config(_))
    ));
}

#[test]
fn augmentation_contract() {
    let backend = MockBackend::new(8);
    let c = cfg(1, 8);
    let pairs: Vec<(String, String)> = (0..10)
        .map(|i| {
            (
                format!("query number {i}"),
                format!("a positive passage about topic {i} with several words in it"),
            )
        })
        .collect();
    let (a, report) = augment_pairs(&pairs, &c, &backend, &no_sleep).unwrap();
    let (b, _) = augment_pairs(&pairs, &c, &backend, &no_sleep).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 10);
    assert_eq!(report.accepted, 10);
    for (t, (q, p)) in a.iter().zip(&pairs) {
        assert_eq!((&t.query, &t.positive), (q, p));
        assert_eq!(t.source, Source::RetrievalAugmented);
        let distinct: HashSet<&String> = t.negatives.iter().collect();
        assert_eq!(distinct.len(), 4);
        assert!(!t.negatives.contains(p));
    }
    let task = TaskSpec::new(TaskCategory::ShortLong, "t").unwrap();
    let ctx = c.context(&backend, &no_sleep);
    assert!(matches!(
        augment_retrieval_pair("", "p", &task, &ctx, 0),
        Err(SynthError::Precondition(_))
    ));
}

struct Flaky {
    inner: MockBackend,
    failures: usize,
    calls: AtomicUsize,
}

impl ChatBackend for Flaky {
    fn complete(&self, r: &ChatRequest) -> Result<String, BackendError> {
        if self.calls.fetch_add(1, Ordering::SeqCst) < self.failures {
            Err(BackendError::Timeout("simulated".into()))
        } else {
            self.inner.complete(r)
        }
    }
}

#[test]
fn generation_survives_two_timeouts() {
    let backend = Flaky {
        inner: MockBackend::new(1),
        failures: 2,
        calls: AtomicUsize::new(0),
    };
    let c = cfg(1, 1);
    let task = TaskSpec::new(TaskCategory::ShortLong, "find recipes").unwrap();
    let g = generate_triplet(&task, &ph(50), &c.context(&backend, &no_sleep), 1).unwrap();
    assert_eq!(g.retries, 2);
}

#[test]
fn permanent_failure_is_a_transport_error() {
    let backend = Flaky {
        inner: MockBackend::new(1),
        failures: usize::MAX,
        calls: AtomicUsize::new(0),
    };
    let c = cfg(3, 1);
    match run_synthesis(&c, &backend, &no_sleep) {
        Err(SynthError::Transport { attempts, .. }) => assert_eq!(attempts, c.retry.max_retries + 1),
        other => panic!("{other:?}"),
    }
}

/// Sends a malformed reply on every other generation call.
struct Alternating {
    inner: MockBackend,
    calls: AtomicUsize,
}

impl ChatBackend for Alternating {
    fn complete(&self, r: &ChatRequest) -> Result<String, BackendError> {
        if r.prompt().starts_with("You have been assigned")
            && self.calls.fetch_add(1, Ordering::SeqCst).is_multiple_of(2)
        {
            return Ok(r#"{"user_query": "q", "positive_document": "p", "hard_negative_document": []}"#.into());
        }
        self.inner.complete(r)
    }
}

#[test]
fn rejected_reply_is_regenerated_and_counted() {
    let backend = Alternating {
        inner: MockBackend::new(2),
        calls: AtomicUsize::new(0),
    };
    // One worker makes the call order deterministic: every first try fails.
    let c = SynthConfig {
        max_parallel: 1,
        ..cfg(10, 2)
    };
    let (out, report) = run_synthesis(&c, &backend, &no_sleep).unwrap();
    assert_eq!(out.len(), 10);
    assert_eq!(report.regenerated, 10);
    assert_eq!(report.rejected_total(), 0);
}

struct Counting {
    inner: MockBackend,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
}

impl ChatBackend for Counting {
    fn complete(&self, r: &ChatRequest) -> Result<String, BackendError> {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        std::thread::sleep(Duration::from_millis(2));
        let out = self.inner.complete(r);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        out
    }
}

#[test]
fn concurrency_never_exceeds_the_bound() {
    for bound in [1, 3] {
        let backend = Counting {
            inner: MockBackend::new(1),
            in_flight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        };
        let c = SynthConfig {
            max_parallel: bound,
            ..cfg(24, 1)
        };
        let (out, _) = run_synthesis(&c, &backend, &no_sleep).unwrap();
        assert_eq!(out.len(), 24);
        let peak = backend.peak.load(Ordering::SeqCst);
        assert!(peak <= bound, "peak {peak} > bound {bound}");
        assert_eq!(
            out,
            run_synthesis(&cfg(24, 1), &MockBackend::new(1), &no_sleep).unwrap().0
        );
    }
}

#[test]
fn corrupt_fixtures_are_typed() {
    let task = TaskSpec::new(TaskCategory::ShortLong, "t").unwrap();
    let fixture =
        |negs: &str| format!(r#"{{"user_query": "q", "positive_document": "p", "hard_negative_document": {negs}}}"#);
    let kind = |raw: String| parse_generation(&raw, &task, 4).unwrap_err().kind;
    assert_eq!(
        kind(fixture(
            r#"[{"similarity_level": "high", "text": "a"}, {"similarity_level": "medium", "text": "b"}, {"similarity_level": "low", "text": "c"}]"#
        )),
        Violation::NegativeCount
    );
    assert_eq!(
        kind(fixture(
            r#"[{"similarity_level": "high", "text": "a"}, {"similarity_level": "low", "text": "b"}, {"similarity_level": "medium", "text": "c"}, {"similarity_level": "medium", "text": "d"}]"#
        )),
        Violation::LevelOrder
    );
    assert_eq!(
        kind(fixture(
            r#"[{"similarity_level": "high", "text": "a"}, {"similarity_level": "medium", "text": ""}, {"similarity_level": "medium", "text": "c"}, {"similarity_level": "low", "text": "d"}]"#
        )),
        Violation::EmptyText
    );
}

/// Serves one canned HTTP response and returns the raw request it received.
fn one_shot_server(status: &'static str, body: &'static str) -> (String, std::thread::JoinHandle<String>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let handle = std::thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut head = String::new();
        let mut content_length = 0;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                content_length = v.trim().parse().unwrap();
            }
            head.push_str(&line);
            if line == "\r\n" {
                break;
            }
        }
        let mut body_buf = vec![0; content_length];
        reader.read_exact(&mut body_buf).unwrap();
        let mut stream = stream;
        write!(
            stream,
            "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        )
        .unwrap();
        head + &String::from_utf8(body_buf).unwrap()
    });
    (url, handle)
}

#[test]
fn http_backend_speaks_the_wire_protocol() {
    let (url, server) = one_shot_server(
        "200 OK",
        r#"{"choices": [{"message": {"role": "assistant", "content": "hello"}}]}"#,
    );
    let endpoint = EndpointConfig {
        base_url: url,
        path: "/v1/chat/completions".into(),
        model: "test-model".into(),
        api_key_env: None,
        timeout_secs: 5,
    };
    let backend = HttpBackend::with_token(endpoint, Some("secret".into()));
    let reply = backend.complete(&ChatRequest::user("hi there", 0.7, 1)).unwrap();
    assert_eq!(reply, "hello");
    let raw = server.join().unwrap();
    assert!(raw.starts_with("POST /v1/chat/completions "));
    assert!(raw.to_ascii_lowercase().contains("authorization: bearer secret"));
    let body: serde_json::Value = serde_json::from_str(&raw[raw.find("\r\n\r\n").unwrap() + 4..]).unwrap();
    assert_eq!(
        body,
        serde_json::json!({"model": "test-model", "messages": [{"role": "user", "content": "hi there"}], "temperature": 0.7})
    );
}

#[test]
fn http_status_errors_are_classified() {
    let (url, server) = one_shot_server("503 Service Unavailable", r#"{"error": "busy"}"#);
    let endpoint = EndpointConfig {
        base_url: url,
        api_key_env: None,
        timeout_secs: 5,
        ..EndpointConfig::default()
    };
    let err = HttpBackend::new(endpoint)
        .complete(&ChatRequest::user("x", 1.0, 1))
        .unwrap_err();
    server.join().unwrap();
    assert!(matches!(err, BackendError::Status { code: 503, .. }));
    assert!(err.is_retryable());
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    // Bind then drop to get a port nobody listens on.
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let endpoint = EndpointConfig {
        base_url: format!("http://127.0.0.1:{port}"),
        api_key_env: None,
        timeout_secs: 2,
        ..EndpointConfig::default()
    };
    let backend = HttpBackend::new(endpoint);
    let policy = RetryPolicy {
        max_retries: 1,
        ..RetryPolicy::default()
    };
    let r = call_with_retry(&backend, &ChatRequest::user("x", 1.0, 1), &policy, &no_sleep);
    assert!(matches!(
        r,
        Err(SynthError::Transport {
            attempts: 2,
            last: BackendError::Connection(_)
        })
    ));
}
