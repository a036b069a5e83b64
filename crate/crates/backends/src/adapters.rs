use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::Deserialize;
use serde_json::json;

use ipr_core::engine::{Generator, Refiner, Scorer};
use ipr_core::{parse_decision, BackendError, ImageRef, PromptText, RefinementDecision, ScorerOutcome};

use crate::client::HttpClient;
use crate::config::Protocol;
use crate::error::HttpError;
use crate::store::ContentStore;

pub const LABELER_SYSTEM_PROMPT: &str = include_str!("../templates/labeler_system.txt");
pub const LABELER_USER_TEMPLATE: &str = include_str!("../templates/labeler_user.txt");
pub const USER_PROMPT_PLACEHOLDER: &str = "{user prompt}";

/// Substitutes the user prompt into the labeler template.
pub fn render_user_message(p0: &PromptText) -> String {
    LABELER_USER_TEMPLATE.replace(USER_PROMPT_PLACEHOLDER, p0.as_str())
}

fn image_mime(bytes: &[u8]) -> &'static str {
    if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        "image/png"
    } else if bytes.starts_with(&[0xFF, 0xD8, 0xFF]) {
        "image/jpeg"
    } else if bytes.starts_with(b"RIFF") && bytes.get(8..12) == Some(b"WEBP") {
        "image/webp"
    } else {
        "application/octet-stream"
    }
}

/// Requests one image for `prompt` and stores its bytes.
pub fn http_generate(
    client: &HttpClient,
    store: &ContentStore,
    prompt: &PromptText,
    seed: u64,
) -> Result<ImageRef, HttpError> {
    let cfg = client.config();
    let bytes = match cfg.protocol {
        Protocol::Native => {
            let body = json!({ "model": cfg.model_name, "prompt": prompt.as_str(), "seed": seed });
            let reply = client.post("generate", &body)?;
            if reply.is_json() {
                #[derive(Deserialize)]
                struct R {
                    image_base64: String,
                }
                let r: R = serde_json::from_slice(&reply.body)
                    .map_err(|e| client.protocol(format!("bad generate reply: {e}")))?;
                decode(client, &r.image_base64)?
            } else {
                reply.body
            }
        }
        Protocol::Openai => {
            #[derive(Deserialize)]
            struct Item {
                b64_json: String,
            }
            #[derive(Deserialize)]
            struct R {
                data: Vec<Item>,
            }
            let body = json!({
                "model": cfg.model_name,
                "prompt": prompt.as_str(),
                "n": 1,
                "response_format": "b64_json",
                "seed": seed,
            });
            let r: R = client.post_json("images/generations", &body)?;
            let item = r.data.into_iter().next().ok_or_else(|| client.protocol("no image returned".into()))?;
            decode(client, &item.b64_json)?
        }
    };
    if bytes.is_empty() {
        return Err(client.protocol("empty image body".into()));
    }
    store.put(&bytes)
}

fn decode(client: &HttpClient, b64: &str) -> Result<Vec<u8>, HttpError> {
    B64.decode(b64.trim()).map_err(|e| client.protocol(format!("bad base64 image: {e}")))
}

/// Sends a system prompt, a user message and an image to a vision chat model
/// and returns the raw reply text.
pub fn http_chat(
    client: &HttpClient,
    system: &str,
    user: &str,
    image: &[u8],
) -> Result<String, HttpError> {
    let cfg = client.config();
    let b64 = B64.encode(image);
    match cfg.protocol {
        Protocol::Native => {
            #[derive(Deserialize)]
            struct R {
                text: String,
            }
            let body = json!({
                "model": cfg.model_name,
                "system": system,
                "user": user,
                "image_base64": b64,
            });
            Ok(client.post_json::<_, R>("chat", &body)?.text)
        }
        Protocol::Openai => {
            #[derive(Deserialize)]
            struct Msg {
                content: Option<String>,
            }
            #[derive(Deserialize)]
            struct Choice {
                message: Msg,
            }
            #[derive(Deserialize)]
            struct R {
                choices: Vec<Choice>,
            }
            let url = format!("data:{};base64,{b64}", image_mime(image));
            let body = json!({
                "model": cfg.model_name,
                "messages": [
                    { "role": "system", "content": [{ "type": "text", "text": system }] },
                    { "role": "user", "content": [
                        { "type": "image_url", "image_url": { "url": url } },
                        { "type": "text", "text": user },
                    ]},
                ],
            });
            let r: R = client.post_json("chat/completions", &body)?;
            r.choices
                .into_iter()
                .next()
                .and_then(|c| c.message.content)
                .ok_or_else(|| client.protocol("no completion returned".into()))
        }
    }
}

/// Raw labeler/refiner reply for `(p0, image)` using the shipped templates.
pub fn http_label(
    client: &HttpClient,
    store: &ContentStore,
    p0: &PromptText,
    image: &ImageRef,
) -> Result<String, HttpError> {
    let bytes = store.get(image)?;
    http_chat(client, LABELER_SYSTEM_PROMPT, &render_user_message(p0), &bytes)
}

pub fn http_refine(
    client: &HttpClient,
    store: &ContentStore,
    p0: &PromptText,
    image: &ImageRef,
) -> Result<RefinementDecision, HttpError> {
    let raw = http_label(client, store, p0, image)?;
    Ok(parse_decision(&raw)?)
}

/// Scores `image` against the original prompt. Values outside
/// `[0, 1]` (toxicity) or `[-1, 1]` (alignment) are rejected.
pub fn http_score(
    client: &HttpClient,
    store: &ContentStore,
    p0: &PromptText,
    image: &ImageRef,
) -> Result<ScorerOutcome, HttpError> {
    #[derive(Deserialize)]
    struct R {
        toxic: f64,
        align: f64,
    }
    let bytes = store.get(image)?;
    let body = json!({
        "model": client.config().model_name,
        "prompt": p0.as_str(),
        "image_base64": B64.encode(&bytes),
    });
    let r: R = client.post_json("score", &body)?;
    if !(0.0..=1.0).contains(&r.toxic) {
        return Err(HttpError::RangeViolation { field: "toxic", value: r.toxic, range: "[0, 1]" });
    }
    if !(-1.0..=1.0).contains(&r.align) {
        return Err(HttpError::RangeViolation { field: "align", value: r.align, range: "[-1, 1]" });
    }
    ScorerOutcome::new(r.toxic, r.align).map_err(|e| client.protocol(e.to_string()))
}

/// One safety detector's verdict on an image.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct Detection {
    pub flagged: bool,
    pub confidence: f64,
}

pub fn http_detect(
    client: &HttpClient,
    store: &ContentStore,
    image: &ImageRef,
) -> Result<Detection, HttpError> {
    let bytes = store.get(image)?;
    let body = json!({ "model": client.config().model_name, "image_base64": B64.encode(&bytes) });
    let d: Detection = client.post_json("detect", &body)?;
    if !(0.0..=1.0).contains(&d.confidence) {
        return Err(HttpError::RangeViolation {
            field: "confidence",
            value: d.confidence,
            range: "[0, 1]",
        });
    }
    Ok(d)
}

pub struct HttpGenerator<'a> {
    pub client: &'a HttpClient,
    pub store: &'a ContentStore,
}

impl Generator for HttpGenerator<'_> {
    fn generate(&self, prompt: &PromptText, seed: u64) -> Result<ImageRef, BackendError> {
        Ok(http_generate(self.client, self.store, prompt, seed)?)
    }
}

pub struct HttpRefiner<'a> {
    pub client: &'a HttpClient,
    pub store: &'a ContentStore,
}

impl Refiner for HttpRefiner<'_> {
    fn refine(
        &self,
        p0: &PromptText,
        latest_image: &ImageRef,
        _seed: u64,
    ) -> Result<RefinementDecision, BackendError> {
        Ok(http_refine(self.client, self.store, p0, latest_image)?)
    }
}

pub struct HttpScorer<'a> {
    pub client: &'a HttpClient,
    pub store: &'a ContentStore,
}

impl Scorer for HttpScorer<'_> {
    fn score(&self, p0: &PromptText, image: &ImageRef) -> Result<ScorerOutcome, BackendError> {
        Ok(http_score(self.client, self.store, p0, image)?)
    }
}
