//! Conformance checks for the remote wire protocol, run against [`MockServer`].

use std::time::{Duration, Instant};

use serde_json::{json, Value};
use synthrecord::fill::{fill, FillConfig, Selection};
use synthrecord::masker::{apply_mask, MaskPlan, MaskPolicy};
use synthrecord::mlm::{FillModel, ModelError};
use synthrecord::ner::{EntityTagger, TaggerError};
use synthrecord::remote::{RemoteEmbedder, RemoteModel, RemoteTagger};
use synthrecord::text::tokenize_with_id;

use super::{uniform_fill, MockServer, Reply};

pub const FILL_FIXTURE: &str = include_str!("../fixtures/fill_response.json");

type Check = fn() -> Result<(), String>;

fn ctx(tokens: &[&str]) -> Vec<String> {
    tokens.iter().map(|t| t.to_string()).collect()
}

fn serve_body(status: u16, body: &'static str) -> MockServer {
    MockServer::start(move |_, _| Reply::Json(status, body.to_string()))
}

fn predict(server: &MockServer, masks: &[usize]) -> Result<Vec<synthrecord::mlm::FillDistribution>, ModelError> {
    let model = RemoteModel::new(&server.url, 64, Duration::from_secs(5));
    model.predict(&ctx(&["patient", "[MASK]", "takes", "[MASK]", "daily"]), masks, 5)
}

fn expect_protocol(result: Result<impl std::fmt::Debug, ModelError>, field: &str) -> Result<(), String> {
    match result {
        Err(ModelError::Protocol { field: f, .. }) if f == field => Ok(()),
        other => Err(format!("expected Protocol{{field: {field}}}, got {other:?}")),
    }
}

fn valid_fill() -> Result<(), String> {
    let server = MockServer::start(uniform_fill(&["aspirin", "insulin"]));
    let d = predict(&server, &[1, 3]).map_err(|e| e.to_string())?;
    if d.len() != 2 || d[0].probability("aspirin") != Some(0.5) {
        return Err(format!("unexpected distributions {d:?}"));
    }
    let requests = server.requests.lock().unwrap();
    let (path, body) = &requests[0];
    let expected = json!({
        "context": ["patient", "[MASK]", "takes", "[MASK]", "daily"],
        "mask_positions": [1, 3],
        "top_k": 5,
    });
    if path != "/v1/fill" || body != &expected {
        return Err(format!("unexpected request {path} {body}"));
    }
    Ok(())
}

fn fixture_response() -> Result<(), String> {
    let server = serve_body(200, FILL_FIXTURE);
    let d = predict(&server, &[1, 3]).map_err(|e| e.to_string())?;
    let ok = d[0].candidates[0].token == "aspirin" && d[1].probability("twice") == Some(0.2);
    ok.then_some(()).ok_or_else(|| format!("fixture parsed as {d:?}"))
}

fn invalid_json() -> Result<(), String> {
    expect_protocol(predict(&serve_body(200, "distributions: none"), &[1]), "body")
}

fn non_object() -> Result<(), String> {
    expect_protocol(predict(&serve_body(200, "[1, 2]"), &[1]), "body")
}

fn wrong_count() -> Result<(), String> {
    expect_protocol(predict(&serve_body(200, FILL_FIXTURE), &[1]), "distributions")
}

fn bad_probability() -> Result<(), String> {
    let body = r#"{"distributions": [[{"token": "a", "p": "high"}]]}"#;
    expect_protocol(predict(&serve_body(200, body), &[1]), "distributions[0][0].p")
}

fn missing_token() -> Result<(), String> {
    let body = r#"{"distributions": [[{"token": "a", "p": 0.5}, {"p": 0.2}]]}"#;
    expect_protocol(predict(&serve_body(200, body), &[1]), "distributions[0][1].token")
}

fn overfull_distribution() -> Result<(), String> {
    let body = r#"{"distributions": [[{"token": "a", "p": 0.9}, {"token": "b", "p": 0.6}]]}"#;
    expect_protocol(predict(&serve_body(200, body), &[1]), "distributions[0]")
}

fn error_envelope() -> Result<(), String> {
    let server = serve_body(503, r#"{"error": {"code": "overloaded", "message": "try later"}}"#);
    match predict(&server, &[1]) {
        Err(ModelError::Server { code, message }) if code == "overloaded" && message == "try later" => Ok(()),
        other => Err(format!("expected Server error, got {other:?}")),
    }
}

fn bare_status() -> Result<(), String> {
    match predict(&serve_body(500, "internal"), &[1]) {
        Err(ModelError::Server { code, .. }) if code == "500" => Ok(()),
        other => Err(format!("expected Server 500, got {other:?}")),
    }
}

fn timeout() -> Result<(), String> {
    let server =
        MockServer::start(|_, _| Reply::Delay(Duration::from_secs(3), Box::new(Reply::Json(200, FILL_FIXTURE.into()))));
    let limit = Duration::from_millis(300);
    let model = RemoteModel::new(&server.url, 64, limit);
    let start = Instant::now();
    let result = model.predict(&ctx(&["a", "[MASK]"]), &[1], 5);
    let elapsed = start.elapsed();
    match result {
        Err(ModelError::Timeout(d)) if d == limit && elapsed < Duration::from_secs(2) => Ok(()),
        other => Err(format!(
            "expected Timeout after {limit:?}, got {other:?} in {elapsed:?}"
        )),
    }
}

fn dropped_connection() -> Result<(), String> {
    let server = MockServer::start(|_, _| Reply::Close);
    match predict(&server, &[1]) {
        Err(ModelError::Transport(_)) => Ok(()),
        other => Err(format!("expected Transport, got {other:?}")),
    }
}

fn refused() -> Result<(), String> {
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let model = RemoteModel::new(&format!("http://127.0.0.1:{port}"), 64, Duration::from_secs(2));
    match model.predict(&ctx(&["a", "[MASK]"]), &[1], 5) {
        Err(e @ ModelError::Transport(_)) if e.is_backend() => Ok(()),
        other => Err(format!("expected Transport, got {other:?}")),
    }
}

fn request_checked_locally() -> Result<(), String> {
    let server = MockServer::start(uniform_fill(&["a"]));
    let model = RemoteModel::new(&server.url, 3, Duration::from_secs(2));
    let too_long = model.predict(&ctx(&["a", "b", "c", "[MASK]"]), &[3], 5);
    let outside = model.predict(&ctx(&["a", "[MASK]"]), &[2], 5);
    match (too_long, outside) {
        (Err(a @ ModelError::InvalidRequest(_)), Err(ModelError::InvalidRequest(_)))
            if !a.is_backend() && server.request_count() == 0 =>
        {
            Ok(())
        }
        other => Err(format!("expected local InvalidRequest errors, got {other:?}")),
    }
}

fn embed() -> Result<(), String> {
    let server = MockServer::start(|_, body: &Value| {
        let n = body["tokens"].as_array().map_or(0, Vec::len);
        Reply::Json(200, json!({ "vectors": vec![vec![0.5, -0.5]; n] }).to_string())
    });
    let embedder = RemoteEmbedder::new(&server.url, Duration::from_secs(2));
    let v = embedder
        .embed_tokens(&ctx(&["chest", "pain"]))
        .map_err(|e| e.to_string())?;
    if v != vec![vec![0.5, -0.5]; 2] {
        return Err(format!("unexpected vectors {v:?}"));
    }
    let ragged = serve_body(200, r#"{"vectors": [[1.0, 0.0], [1.0]]}"#);
    expect_protocol(
        RemoteEmbedder::new(&ragged.url, Duration::from_secs(2)).embed_tokens(&ctx(&["a", "b"])),
        "vectors[1]",
    )
}

fn tag() -> Result<(), String> {
    let doc = tokenize_with_id("d1", "Started metformin for diabetes.");
    let good = serve_body(200, r#"{"spans": [{"label": "CHEMICAL", "first": 1, "last": 1}]}"#);
    let tagger = RemoteTagger::new(&good.url, &["DISEASE", "CHEMICAL"], Duration::from_secs(2));
    let spans = tagger.tag(&doc).map_err(|e| e.to_string())?;
    if spans.len() != 1 || spans[0].label != "CHEMICAL" || spans[0].token_first != 1 {
        return Err(format!("unexpected spans {spans:?}"));
    }
    let bad = serve_body(200, r#"{"spans": [{"label": "GENE", "first": 0, "last": 0}]}"#);
    let failed = RemoteTagger::new(&bad.url, &["DISEASE", "CHEMICAL"], Duration::from_secs(2)).tag(&doc);
    if !matches!(&failed, Err(TaggerError::Failed { doc, message }) if doc == "d1" && message.contains("spans[0].label"))
    {
        return Err(format!("expected Failed naming spans[0].label, got {failed:?}"));
    }
    let hang = MockServer::start(|_, _| Reply::Delay(Duration::from_secs(3), Box::new(Reply::Close)));
    match RemoteTagger::new(&hang.url, &["DISEASE"], Duration::from_millis(200)).tag(&doc) {
        Err(TaggerError::Unavailable(_)) => Ok(()),
        other => Err(format!("expected Unavailable, got {other:?}")),
    }
}

fn fill_surfaces_backend_errors() -> Result<(), String> {
    let doc = tokenize_with_id("letter-9", "Patient takes aspirin daily.");
    let policy = MaskPolicy {
        phi_proportion: 0.0,
        ..MaskPolicy::default()
    };
    let mut plan = MaskPlan::empty("letter-9", policy);
    plan.masked_positions = vec![2];
    plan.span_groups = vec![synthrecord::masker::SpanGroup {
        first: 2,
        last: 2,
        reason: synthrecord::masker::MaskReason::Random,
    }];
    let md = apply_mask(&doc, &plan).map_err(|e| e.to_string())?;
    let config = FillConfig {
        selection: Selection::Deterministic,
        ..FillConfig::default()
    };

    let good = MockServer::start(uniform_fill(&["insulin"]));
    let synthetic =
        fill(&md, &RemoteModel::new(&good.url, 64, Duration::from_secs(2)), &config).map_err(|e| e.to_string())?;
    if synthetic.text != "Patient takes insulin daily." {
        return Err(format!("unexpected fill {}", synthetic.text));
    }
    let bad = serve_body(200, "{}");
    match fill(&md, &RemoteModel::new(&bad.url, 64, Duration::from_secs(2)), &config) {
        Err(e) if e.is_backend() && e.to_string().contains("letter-9") => Ok(()),
        other => Err(format!("expected a backend error naming the document, got {other:?}")),
    }
}

pub const SUITE: &[(&str, Check)] = &[
    ("valid fill response and request shape", valid_fill),
    ("fixture fill response", fixture_response),
    ("invalid JSON body", invalid_json),
    ("non-object body", non_object),
    ("distribution count mismatch", wrong_count),
    ("non-numeric probability", bad_probability),
    ("missing token", missing_token),
    ("probabilities above one", overfull_distribution),
    ("error envelope", error_envelope),
    ("bare error status", bare_status),
    ("timeout", timeout),
    ("dropped connection", dropped_connection),
    ("connection refused", refused),
    ("request validated before sending", request_checked_locally),
    ("embedding endpoint", embed),
    ("tagging endpoint", tag),
    ("fill pipeline propagates backend errors", fill_surfaces_backend_errors),
];

/// Runs every check; returns the failures as `(name, reason)`.
pub fn run_suite() -> Vec<(&'static str, String)> {
    SUITE
        .iter()
        .filter_map(|(name, check)| check().err().map(|e| (*name, e)))
        .collect()
}
