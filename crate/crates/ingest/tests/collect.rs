use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use iapo::Stream;
use iapo_ingest::{
    build_env_from_log, collect_completions, read_log, write_log, AnswerExtractor, EndpointConfig, LogEnvMode,
    LogEnvParams, PromptTemplate, QueryText,
};
use serde_json::Value;

/// Minimal HTTP/1.1 server. `status_for(n)` picks the status of the n-th request.
fn mock_server(status_for: fn(usize) -> u16) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let n = counter.fetch_add(1, Ordering::SeqCst);
            let status = status_for(n);
            let req: Value = serde_json::from_slice(&body).unwrap();
            let system = req["messages"][0]["content"].as_str().unwrap();
            let user = req["messages"][1]["content"].as_str().unwrap();
            let reply = serde_json::json!({
                "choices": [{"message": {"role": "assistant", "content": format!("{system}|{user}|answer is {}", user.len())}}],
                "usage": {"completion_tokens": system.len() + user.len()},
            })
            .to_string();
            let text = if status == 200 { reply } else { "{}".into() };
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                text.len()
            );
        }
    });
    (format!("http://{addr}/v1"), hits)
}

fn inputs() -> (Vec<PromptTemplate>, Vec<QueryText>) {
    let prompts = ["Be terse.", "Think step by step."]
        .iter()
        .enumerate()
        .map(|(i, t)| PromptTemplate {
            id: format!("p{i}"),
            template: (*t).into(),
        })
        .collect();
    let queries = ["1+1", "12*3", "7-10"]
        .iter()
        .enumerate()
        .map(|(i, t)| QueryText {
            id: format!("q{i}"),
            text: (*t).into(),
        })
        .collect();
    (prompts, queries)
}

fn fast(base: &str) -> EndpointConfig {
    EndpointConfig {
        backoff_ms: 1,
        max_backoff_ms: 4,
        parallelism: 3,
        ..EndpointConfig::new(base, "mock-model")
    }
}

#[test]
fn collects_every_sample_in_order() {
    let (base, hits) = mock_server(|_| 200);
    let (prompts, queries) = inputs();
    let mut log = collect_completions(&fast(&base), &prompts, &queries, 2, &Stream::new(5)).unwrap();
    assert_eq!(log.len(), 12);
    assert_eq!(hits.load(Ordering::SeqCst), 12);
    assert!(log.iter().all(|r| r.is_ok()));
    let keys: Vec<(String, String)> = log.iter().map(|r| (r.prompt_id.clone(), r.query_id.clone())).collect();
    assert_eq!(keys[0], ("p0".into(), "q0".into()));
    assert_eq!(keys[1], ("p0".into(), "q0".into()));
    assert_eq!(keys[2], ("p0".into(), "q1".into()));
    assert_eq!(keys[11], ("p1".into(), "q2".into()));
    assert_eq!(log[2].text.as_deref(), Some("Be terse.|12*3|answer is 4"));
    assert_eq!(log[2].tokens, 13);

    AnswerExtractor::new(r"answer is (\d+)").unwrap().apply(&mut log);
    assert_eq!(log[2].answer.as_deref(), Some("4"));

    let again = collect_completions(&fast(&base), &prompts, &queries, 2, &Stream::new(5)).unwrap();
    let strip = |v: &[iapo_ingest::LogRecord]| -> Vec<(String, String, Option<String>)> {
        v.iter().map(|r| (r.prompt_id.clone(), r.query_id.clone(), r.text.clone())).collect()
    };
    assert_eq!(strip(&again), strip(&log));
}

#[test]
fn endpoint_down_yields_error_rows() {
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let (prompts, queries) = inputs();
    let log = collect_completions(
        &fast(&format!("http://127.0.0.1:{port}")),
        &prompts,
        &queries,
        2,
        &Stream::new(1),
    )
    .unwrap();
    assert_eq!(log.len(), 12);
    assert!(log.iter().all(|r| r.status.starts_with("error: ")));
}

#[test]
fn server_errors_are_retried() {
    // Fail the first two requests only: the first job recovers on its third try.
    let (base, hits) = mock_server(|n| if n < 2 { 503 } else { 200 });
    let (prompts, queries) = inputs();
    let cfg = EndpointConfig {
        parallelism: 1,
        ..fast(&base)
    };
    let log = collect_completions(&cfg, &prompts[..1], &queries[..1], 1, &Stream::new(1)).unwrap();
    assert_eq!(hits.load(Ordering::SeqCst), 3);
    assert!(log[0].is_ok());

    let (base, hits) = mock_server(|_| 500);
    let cfg = EndpointConfig {
        parallelism: 1,
        ..fast(&base)
    };
    let log = collect_completions(&cfg, &prompts[..1], &queries[..1], 1, &Stream::new(1)).unwrap();
    assert_eq!(hits.load(Ordering::SeqCst), 3);
    assert_eq!(log[0].status, "error: HTTP 500");
}

#[test]
fn log_round_trip_and_env_build() {
    let (base, _) = mock_server(|_| 200);
    let (prompts, queries) = inputs();
    let mut log = collect_completions(&fast(&base), &prompts, &queries, 3, &Stream::new(2)).unwrap();
    AnswerExtractor::new(r"answer is (\d+)").unwrap().apply(&mut log);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.jsonl");
    write_log(std::fs::File::create(&path).unwrap(), &log).unwrap();
    let back = read_log(BufReader::new(std::fs::File::open(&path).unwrap())).unwrap();
    assert_eq!(back, log);

    let gold = queries.iter().map(|q| (q.id.clone(), q.text.len().to_string())).collect();
    let params = LogEnvParams {
        name: "mock".into(),
        n_max: 4,
        gold,
        ..Default::default()
    };
    let env = build_env_from_log(&back, LogEnvMode::MvTopK, &params).unwrap();
    assert_eq!(env.summary(), "P=2 X=3 C=3 Nmax=4");
    let env_path = dir.path().join("mock.env.json");
    iapo::env::save_env(&env, &env_path).unwrap();
    assert_eq!(iapo::env::load_env(&env_path).unwrap(), env);
    // Every completion answers correctly, so majority vote always succeeds.
    let credit = env.exact_mv_credit(0, 1, 3, iapo::Side::Train).unwrap();
    assert_eq!(credit, 1.0);
}

#[test]
fn malformed_log_line_is_reported() {
    let text = "{\"prompt_id\":\"p\",\"query_id\":\"q\",\"answer\":\"1\",\"tokens\":3}\n{oops}\n";
    let err = read_log(text.as_bytes()).unwrap_err().to_string();
    assert!(err.starts_with("line 2"), "{err}");
}
