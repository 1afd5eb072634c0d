use std::time::Duration;

use serde::{Deserialize, Serialize};
use ureq::Agent;

use super::{ChatRequest, ChatResponse, Endpoint, TransportError, Usage};
use crate::strategy::Message;

/// OpenAI-compatible `/v1/chat/completions` endpoint.
pub struct HttpEndpoint {
    id: String,
    url: String,
    served_model: String,
    api_key: Option<String>,
    agent: Agent,
}

#[derive(Serialize)]
struct Body<'a> {
    model: &'a str,
    messages: &'a [Message],
    temperature: f64,
    top_p: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct Reply {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ReplyMessage,
}

#[derive(Deserialize)]
struct ReplyMessage {
    #[serde(default)]
    content: Option<String>,
}

impl HttpEndpoint {
    /// `url` is the full completions URL; `served_model` is what the server
    /// expects in the `model` field.
    pub fn new(
        id: impl Into<String>,
        url: impl Into<String>,
        served_model: impl Into<String>,
        api_key: Option<String>,
        timeout: Duration,
    ) -> Self {
        let config = Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build();
        HttpEndpoint {
            id: id.into(),
            url: url.into(),
            served_model: served_model.into(),
            api_key,
            agent: Agent::new_with_config(config),
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

impl Endpoint for HttpEndpoint {
    fn id(&self) -> &str {
        &self.id
    }

    fn send(&self, request: &ChatRequest<'_>) -> Result<ChatResponse, TransportError> {
        let cfg = request.config;
        let body = Body {
            model: &self.served_model,
            messages: request.messages,
            // Greedy decoding when sampling is off.
            temperature: if cfg.sampling_enabled { cfg.temperature } else { 0.0 },
            top_p: if cfg.sampling_enabled { cfg.top_p } else { 1.0 },
            max_tokens: cfg.max_new_tokens,
            seed: request.seed,
        };
        let mut req = self.agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| TransportError::retryable(format!("{}: {e}", self.url)))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError::retryable(format!("reading body: {e}")))?;
        if status >= 500 || status == 429 {
            return Err(TransportError::retryable(format!("HTTP {status}: {}", snippet(&text))));
        }
        if status >= 400 {
            return Err(TransportError::fatal(format!("HTTP {status}: {}", snippet(&text))));
        }
        let reply: Reply = serde_json::from_str(&text)
            .map_err(|e| TransportError::fatal(format!("malformed response ({e}): {}", snippet(&text))))?;
        let choice = reply
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| TransportError::fatal("response has no choices"))?;
        Ok(ChatResponse {
            text: choice.message.content.unwrap_or_default(),
            usage: reply.usage,
        })
    }
}

fn snippet(s: &str) -> &str {
    match s.char_indices().nth(200) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{GenerationConfig, RequestKey};
    use crate::strategy::{Role, StrategyId};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::mpsc;

    /// Serves one canned response per connection and hands back each body.
    fn serve(responses: Vec<(u16, String)>) -> (String, mpsc::Receiver<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for (status, body) in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let l = line.trim_end();
                    if l.is_empty() {
                        break;
                    }
                    if let Some(v) = l.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                tx.send(String::from_utf8(buf).unwrap()).unwrap();
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (format!("http://{addr}/v1/chat/completions"), rx)
    }

    fn request<'a>(messages: &'a [Message], cfg: &'a GenerationConfig) -> ChatRequest<'a> {
        ChatRequest {
            messages,
            config: cfg,
            seed: Some(7),
            key: RequestKey {
                task_id: 1,
                strategy: StrategyId::Cot,
                turn: 0,
                sample: 0,
            },
        }
    }

    #[test]
    fn round_trip_with_usage() {
        let reply = r#"{"choices":[{"message":{"role":"assistant","content":"assert 1"}}],"usage":{"prompt_tokens":5,"completion_tokens":3,"total_tokens":8}}"#;
        let (url, rx) = serve(vec![(200, reply.into())]);
        let ep = HttpEndpoint::new("m", url, "served-m", Some("k".into()), Duration::from_secs(5));
        let msgs = [Message::new(Role::User, "hi")];
        let cfg = GenerationConfig::default();
        let r = ep.send(&request(&msgs, &cfg)).unwrap();
        assert_eq!(r.text, "assert 1");
        assert_eq!(r.usage.unwrap().completion_tokens, 3);
        let sent: serde_json::Value = serde_json::from_str(&rx.recv().unwrap()).unwrap();
        assert_eq!(sent["model"], "served-m");
        assert_eq!(sent["max_tokens"], 1024);
        assert_eq!(sent["temperature"], 0.2);
        assert_eq!(sent["seed"], 7);
        assert_eq!(sent["messages"][0]["role"], "user");
    }

    #[test]
    fn greedy_when_sampling_disabled() {
        let reply = r#"{"choices":[{"message":{"content":"x"}}]}"#;
        let (url, rx) = serve(vec![(200, reply.into())]);
        let ep = HttpEndpoint::new("m", url, "m", None, Duration::from_secs(5));
        let msgs = [Message::new(Role::User, "hi")];
        let cfg = GenerationConfig {
            sampling_enabled: false,
            ..Default::default()
        };
        let r = ep.send(&request(&msgs, &cfg)).unwrap();
        assert!(r.usage.is_none());
        let sent: serde_json::Value = serde_json::from_str(&rx.recv().unwrap()).unwrap();
        assert_eq!(sent["temperature"], 0.0);
    }

    #[test]
    fn status_classification() {
        let (url, _rx) = serve(vec![(503, "busy".into()), (400, "bad".into())]);
        let ep = HttpEndpoint::new("m", url, "m", None, Duration::from_secs(5));
        let msgs = [Message::new(Role::User, "hi")];
        let cfg = GenerationConfig::default();
        assert!(ep.send(&request(&msgs, &cfg)).unwrap_err().retryable);
        assert!(!ep.send(&request(&msgs, &cfg)).unwrap_err().retryable);
    }

    #[test]
    fn connection_refused_is_retryable() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let ep = HttpEndpoint::new(
            "m",
            format!("http://127.0.0.1:{port}/v1/chat/completions"),
            "m",
            None,
            Duration::from_secs(2),
        );
        let msgs = [Message::new(Role::User, "hi")];
        let cfg = GenerationConfig::default();
        assert!(ep.send(&request(&msgs, &cfg)).unwrap_err().retryable);
    }
}
