//! JSON-over-HTTP client for external fill, embedding and tagging models.
//!
//! Every response is checked field by field before use; problems surface as
//! [`ModelError::Protocol`] naming the offending field.

use std::time::Duration;

use serde::Serialize;
use serde_json::{json, Value};

use crate::annotation::{AnnotationSpan, Namespace, SpanSource};
use crate::mlm::{check_request, Candidate, FillDistribution, FillModel, ModelError};
use crate::ner::{EntityTagger, TaggerError};
use crate::text::Document;

pub const FILL_PATH: &str = "/v1/fill";
pub const EMBED_PATH: &str = "/v1/embed";
pub const TAG_PATH: &str = "/v1/tag";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
pub const DEFAULT_REMOTE_WINDOW: usize = 128;

#[derive(Debug, Serialize)]
struct FillRequest<'a> {
    context: &'a [String],
    mask_positions: &'a [usize],
    top_k: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    hints: Option<&'a [Option<String>]>,
}

#[derive(Debug, Clone)]
pub struct RemoteClient {
    agent: ureq::Agent,
    base: String,
    timeout: Duration,
}

fn protocol(field: impl Into<String>, message: impl Into<String>) -> ModelError {
    ModelError::Protocol {
        field: field.into(),
        message: message.into(),
    }
}

impl RemoteClient {
    pub fn new(endpoint: &str, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            base: endpoint.trim_end_matches('/').to_string(),
            timeout,
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.base
    }

    fn map_error(&self, e: ureq::Error) -> ModelError {
        match e {
            ureq::Error::Timeout(_) => ModelError::Timeout(self.timeout),
            ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => ModelError::Timeout(self.timeout),
            other => ModelError::Transport(other.to_string()),
        }
    }

    /// POSTs `body` and returns the decoded JSON object of a successful
    /// response. Error envelopes become [`ModelError::Server`].
    pub fn post(&self, path: &str, body: &impl Serialize) -> Result<Value, ModelError> {
        let url = format!("{}{path}", self.base);
        let mut response = self.agent.post(&url).send_json(body).map_err(|e| self.map_error(e))?;
        let status = response.status().as_u16();
        let text = response.body_mut().read_to_string().map_err(|e| self.map_error(e))?;
        decode_response(status, &text)
    }
}

/// Decodes a response body, turning the `{error: {code, message}}`
/// envelope and non-success statuses into errors.
pub fn decode_response(status: u16, body: &str) -> Result<Value, ModelError> {
    let value: Result<Value, _> = serde_json::from_str(body);
    if let Ok(Value::Object(obj)) = &value {
        if let Some(err) = obj.get("error") {
            let code = match err.get("code") {
                Some(Value::String(s)) => s.clone(),
                Some(Value::Number(n)) => n.to_string(),
                _ => status.to_string(),
            };
            let message = err
                .get("message")
                .and_then(Value::as_str)
                .unwrap_or("no message")
                .to_string();
            return Err(ModelError::Server { code, message });
        }
    }
    if !(200..300).contains(&status) {
        return Err(ModelError::Server {
            code: status.to_string(),
            message: body.chars().take(200).collect(),
        });
    }
    match value {
        Ok(v @ Value::Object(_)) => Ok(v),
        Ok(_) => Err(protocol("body", "expected a JSON object")),
        Err(e) => Err(protocol("body", format!("invalid JSON: {e}"))),
    }
}

/// Validates a `/v1/fill` response against the request it answers.
pub fn parse_fill_response(value: &Value, expected: usize) -> Result<Vec<FillDistribution>, ModelError> {
    let dists = value
        .get("distributions")
        .ok_or_else(|| protocol("distributions", "missing"))?
        .as_array()
        .ok_or_else(|| protocol("distributions", "expected an array"))?;
    if dists.len() != expected {
        return Err(protocol(
            "distributions",
            format!("{} distributions for {expected} masks", dists.len()),
        ));
    }
    dists
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let field = format!("distributions[{i}]");
            let items = d.as_array().ok_or_else(|| protocol(&field, "expected an array"))?;
            let candidates = items
                .iter()
                .enumerate()
                .map(|(j, c)| {
                    let token = c
                        .get("token")
                        .and_then(Value::as_str)
                        .ok_or_else(|| protocol(format!("{field}[{j}].token"), "expected a string"))?;
                    let p = c
                        .get("p")
                        .and_then(Value::as_f64)
                        .ok_or_else(|| protocol(format!("{field}[{j}].p"), "expected a number"))?;
                    if !(p.is_finite() && p > 0.0) {
                        return Err(protocol(
                            format!("{field}[{j}].p"),
                            format!("probability {p} is not positive"),
                        ));
                    }
                    Ok(Candidate {
                        token: token.to_string(),
                        p,
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            FillDistribution::new(candidates).map_err(|e| protocol(&field, e.to_string()))
        })
        .collect()
}

/// A fill model served over the wire protocol.
#[derive(Debug, Clone)]
pub struct RemoteModel {
    client: RemoteClient,
    window: usize,
}

impl RemoteModel {
    pub fn new(endpoint: &str, window: usize, timeout: Duration) -> Self {
        Self {
            client: RemoteClient::new(endpoint, timeout),
            window,
        }
    }

    /// Like [`FillModel::predict`], forwarding per-mask entity hints.
    pub fn predict_with_hints(
        &self,
        context: &[String],
        mask_positions: &[usize],
        top_k: usize,
        hints: Option<&[Option<String>]>,
    ) -> Result<Vec<FillDistribution>, ModelError> {
        check_request(context, mask_positions, top_k, self.window)?;
        let request = FillRequest {
            context,
            mask_positions,
            top_k,
            hints,
        };
        let value = self.client.post(FILL_PATH, &request)?;
        parse_fill_response(&value, mask_positions.len())
    }
}

impl FillModel for RemoteModel {
    fn window(&self) -> usize {
        self.window
    }

    fn predict(
        &self,
        context: &[String],
        mask_positions: &[usize],
        top_k: usize,
    ) -> Result<Vec<FillDistribution>, ModelError> {
        self.predict_with_hints(context, mask_positions, top_k, None)
    }
}

/// One-shot `/v1/fill` call with the default timeout and no window limit.
pub fn remote_predict(
    endpoint: &str,
    context: &[String],
    mask_positions: &[usize],
    top_k: usize,
) -> Result<Vec<FillDistribution>, ModelError> {
    RemoteModel::new(endpoint, usize::MAX, DEFAULT_TIMEOUT).predict(context, mask_positions, top_k)
}

/// Parses `{vectors: [[number]]}` with one vector per token, all of the
/// same non-zero dimension.
pub fn parse_embed_response(value: &Value, expected: usize) -> Result<Vec<Vec<f64>>, ModelError> {
    let rows = value
        .get("vectors")
        .and_then(Value::as_array)
        .ok_or_else(|| protocol("vectors", "expected an array"))?;
    if rows.len() != expected {
        return Err(protocol(
            "vectors",
            format!("{} vectors for {expected} tokens", rows.len()),
        ));
    }
    let mut out = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let field = format!("vectors[{i}]");
        let row = row.as_array().ok_or_else(|| protocol(&field, "expected an array"))?;
        let v = row
            .iter()
            .map(|x| x.as_f64().filter(|x| x.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| protocol(&field, "expected finite numbers"))?;
        if v.is_empty() || out.first().is_some_and(|f: &Vec<f64>| f.len() != v.len()) {
            return Err(protocol(&field, "inconsistent dimension"));
        }
        out.push(v);
    }
    Ok(out)
}

/// Contextual token vectors from `/v1/embed`.
#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    client: RemoteClient,
}

impl RemoteEmbedder {
    pub fn new(endpoint: &str, timeout: Duration) -> Self {
        Self {
            client: RemoteClient::new(endpoint, timeout),
        }
    }

    pub fn embed_tokens(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>, ModelError> {
        let value = self.client.post(EMBED_PATH, &json!({ "tokens": tokens }))?;
        parse_embed_response(&value, tokens.len())
    }
}

/// Parses `{spans: [{label, first, last}]}` into tagger spans.
pub fn parse_tag_response(value: &Value, tokens: usize, labels: &[String]) -> Result<Vec<AnnotationSpan>, ModelError> {
    let spans = value
        .get("spans")
        .and_then(Value::as_array)
        .ok_or_else(|| protocol("spans", "expected an array"))?;
    spans
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let field = |name: &str| format!("spans[{i}].{name}");
            let label = s
                .get("label")
                .and_then(Value::as_str)
                .ok_or_else(|| protocol(field("label"), "expected a string"))?;
            if !labels.iter().any(|l| l == label) {
                return Err(protocol(field("label"), format!("unknown label {label}")));
            }
            let index = |name: &str| {
                s.get(name)
                    .and_then(Value::as_u64)
                    .map(|v| v as usize)
                    .filter(|&v| v < tokens)
                    .ok_or_else(|| protocol(field(name), "expected a token index inside the document"))
            };
            let (first, last) = (index("first")?, index("last")?);
            if first > last {
                return Err(protocol(field("last"), "precedes first"));
            }
            Ok(AnnotationSpan::new(
                Namespace::Med,
                label,
                first,
                last,
                SpanSource::Tagger,
            ))
        })
        .collect()
}

/// An entity tagger served over `/v1/tag`.
#[derive(Debug, Clone)]
pub struct RemoteTagger {
    client: RemoteClient,
    labels: Vec<String>,
}

impl RemoteTagger {
    pub fn new(endpoint: &str, labels: &[&str], timeout: Duration) -> Self {
        Self {
            client: RemoteClient::new(endpoint, timeout),
            labels: labels.iter().map(|l| l.to_string()).collect(),
        }
    }
}

impl EntityTagger for RemoteTagger {
    fn tag(&self, doc: &Document) -> Result<Vec<AnnotationSpan>, TaggerError> {
        let tokens = doc.token_texts();
        let request = json!({ "tokens": tokens, "labels": self.labels });
        self.client
            .post(TAG_PATH, &request)
            .and_then(|v| parse_tag_response(&v, tokens.len(), &self.labels))
            .map_err(|e| match e {
                ModelError::Transport(_) | ModelError::Timeout(_) => TaggerError::Unavailable(e.to_string()),
                other => TaggerError::Failed {
                    doc: doc.id.clone(),
                    message: other.to_string(),
                },
            })
    }

    fn labels(&self) -> Vec<String> {
        self.labels.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_fill_response() {
        let v: Value =
            serde_json::from_str(r#"{"distributions": [[{"token": "cat", "p": 0.6}, {"token": "dog", "p": 0.3}]]}"#)
                .unwrap();
        let d = parse_fill_response(&v, 1).unwrap();
        assert_eq!(d[0].candidates[0].token, "cat");
        assert_eq!(d[0].probability("dog"), Some(0.3));
    }

    fn field_of(body: &str, expected: usize) -> String {
        let v: Value = serde_json::from_str(body).unwrap();
        match parse_fill_response(&v, expected) {
            Err(ModelError::Protocol { field, .. }) => field,
            other => panic!("expected protocol error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_fill_responses_name_the_field() {
        assert_eq!(field_of(r#"{}"#, 1), "distributions");
        assert_eq!(field_of(r#"{"distributions": []}"#, 1), "distributions");
        assert_eq!(field_of(r#"{"distributions": [{}]}"#, 1), "distributions[0]");
        assert_eq!(
            field_of(r#"{"distributions": [[{"p": 0.5}]]}"#, 1),
            "distributions[0][0].token"
        );
        assert_eq!(
            field_of(r#"{"distributions": [[{"token": "a", "p": -0.1}]]}"#, 1),
            "distributions[0][0].p"
        );
        assert_eq!(
            field_of(
                r#"{"distributions": [[{"token": "a", "p": 0.1}, {"token": "b", "p": 0.5}]]}"#,
                1
            ),
            "distributions[0]"
        );
        assert_eq!(field_of(r#"{"distributions": [[]]}"#, 1), "distributions[0]");
    }

    #[test]
    fn envelopes_and_statuses() {
        let err = decode_response(500, r#"{"error": {"code": "overloaded", "message": "busy"}}"#).unwrap_err();
        assert!(matches!(err, ModelError::Server { ref code, .. } if code == "overloaded"));
        let err = decode_response(503, "gateway down").unwrap_err();
        assert!(matches!(err, ModelError::Server { ref code, .. } if code == "503"));
        let err = decode_response(200, "not json").unwrap_err();
        assert!(matches!(err, ModelError::Protocol { ref field, .. } if field == "body"));
        assert!(decode_response(200, "{}").is_ok());
    }

    #[test]
    fn embed_and_tag_parsing() {
        let v = json!({"vectors": [[1.0, 0.0], [0.0, 1.0]]});
        assert_eq!(parse_embed_response(&v, 2).unwrap().len(), 2);
        assert!(parse_embed_response(&json!({"vectors": [[1.0], [0.0, 1.0]]}), 2).is_err());
        let labels = vec!["DISEASE".to_string()];
        let v = json!({"spans": [{"label": "DISEASE", "first": 1, "last": 2}]});
        let spans = parse_tag_response(&v, 3, &labels).unwrap();
        assert_eq!((spans[0].token_first, spans[0].token_last), (1, 2));
        let v = json!({"spans": [{"label": "DISEASE", "first": 1, "last": 3}]});
        assert!(parse_tag_response(&v, 3, &labels).is_err());
    }

    #[test]
    fn unreachable_endpoint_is_transport_error() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let err = remote_predict(&format!("http://{addr}"), &["[MASK]".into()], &[0], 5).unwrap_err();
        assert!(matches!(err, ModelError::Transport(_)), "{err:?}");
        assert!(err.is_backend());
    }
}
