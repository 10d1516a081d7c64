//! HTTP transport: `POST /v1/score`, `POST /v1/generate`, `POST /v1/embed`,
//! `GET /v1/info`. Bodies are single-line JSON messages from [`super::wire`].

use std::net::{SocketAddr, TcpListener};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use tokio::sync::oneshot;

use super::wire::{
    self, EmbedRequest, EmbedResponse, ErrorResponse, GenerateRequest, GenerateResponse, ScoreRequest, WireMessage,
};
use super::{GenParams, ModelInfo, ScorerBackend, ScorerError, TokenScoreRecord};

type SharedBackend = Arc<dyn ScorerBackend>;

fn status_for(err: &ScorerError) -> StatusCode {
    match err {
        ScorerError::Unreachable { .. } => StatusCode::SERVICE_UNAVAILABLE,
        ScorerError::WindowExceeded { .. } => StatusCode::PAYLOAD_TOO_LARGE,
        ScorerError::EmptyTarget => StatusCode::UNPROCESSABLE_ENTITY,
        ScorerError::InvalidRequest { .. } | ScorerError::Protocol { .. } => StatusCode::BAD_REQUEST,
        ScorerError::InvalidConfig { .. } | ScorerError::Backend { .. } => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

fn respond<T: WireMessage>(result: Result<T, ScorerError>) -> Response {
    let (status, body) = match result.and_then(|msg| wire::encode(&msg)) {
        Ok(body) => (StatusCode::OK, body),
        Err(error) => {
            let status = status_for(&error);
            let body = wire::encode(&ErrorResponse { error }).unwrap_or_else(|_| "{}\n".into());
            (status, body)
        }
    };
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ScorerError> + Send + 'static) -> Result<T, ScorerError> {
    tokio::task::spawn_blocking(f)
        .await
        .unwrap_or_else(|e| Err(ScorerError::Backend { message: format!("handler panicked: {e}") }))
}

async fn score(State(backend): State<SharedBackend>, body: String) -> Response {
    let result = match wire::decode::<ScoreRequest>(&body) {
        Ok(req) => blocking(move || backend.score_target(&req.context, &req.target, req.want_attention)).await,
        Err(e) => Err(e),
    };
    respond(result)
}

async fn generate(State(backend): State<SharedBackend>, body: String) -> Response {
    let result = match wire::decode::<GenerateRequest>(&body) {
        Ok(req) => blocking(move || backend.generate(&req.prompt, &req.params()).map(|text| GenerateResponse { text })).await,
        Err(e) => Err(e),
    };
    respond(result)
}

async fn embed(State(backend): State<SharedBackend>, body: String) -> Response {
    let result = match wire::decode::<EmbedRequest>(&body) {
        Ok(req) => blocking(move || backend.embed(&req.text).map(|embedding| EmbedResponse { embedding })).await,
        Err(e) => Err(e),
    };
    respond(result)
}

async fn info(State(backend): State<SharedBackend>) -> Response {
    respond(blocking(move || backend.model_info()).await)
}

pub fn router(backend: SharedBackend) -> Router {
    Router::new()
        .route("/v1/score", post(score))
        .route("/v1/generate", post(generate))
        .route("/v1/embed", post(embed))
        .route("/v1/info", get(info))
        .with_state(backend)
}

/// A protocol server running on a background thread.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<std::io::Result<()>>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server exits.
    pub fn join(mut self) -> std::io::Result<()> {
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(std::io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }

    pub fn shutdown(mut self) -> std::io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(std::io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Binds `addr` (use port 0 for an ephemeral port) and serves `backend`.
pub fn serve(backend: SharedBackend, addr: &str) -> std::io::Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let local = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let thread = std::thread::Builder::new().name("dds-scorer-http".into()).spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener)?;
            axum::serve(listener, router(backend))
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await
        })
    })?;
    Ok(ServerHandle { addr: local, shutdown: Some(tx), thread: Some(thread) })
}

/// Blocking protocol client. One in-flight request per call; safe to share
/// across worker threads.
#[derive(Clone)]
pub struct HttpScorer {
    base: String,
    agent: ureq::Agent,
}

impl std::fmt::Debug for HttpScorer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpScorer").field("base", &self.base).finish()
    }
}

impl HttpScorer {
    pub fn new(base_url: &str, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { base: base_url.trim_end_matches('/').to_string(), agent }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn finish<T: WireMessage>(&self, result: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> Result<T, ScorerError> {
        let mut resp = result.map_err(|e| ScorerError::unreachable(format!("{}: {e}", self.base)))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| ScorerError::unreachable(format!("{}: reading response: {e}", self.base)))?;
        if status == 200 {
            return wire::decode(&body);
        }
        match wire::decode::<ErrorResponse>(&body) {
            Ok(ErrorResponse { error }) => Err(error),
            Err(_) if status == 503 || status == 502 || status == 504 => {
                Err(ScorerError::unreachable(format!("{}: HTTP {status}", self.base)))
            }
            Err(_) => Err(ScorerError::Backend { message: format!("HTTP {status}: {}", body.trim()) }),
        }
    }

    fn post<Req: WireMessage, Resp: WireMessage>(&self, path: &str, req: &Req) -> Result<Resp, ScorerError> {
        let body = wire::encode(req)?;
        let result = self
            .agent
            .post(format!("{}{path}", self.base))
            .header("content-type", "application/json")
            .send(body.as_str());
        self.finish(result)
    }
}

impl ScorerBackend for HttpScorer {
    fn score_target(&self, context: &str, target: &str, want_attention: bool) -> Result<TokenScoreRecord, ScorerError> {
        let req = ScoreRequest { context: context.into(), target: target.into(), want_attention };
        let rec: TokenScoreRecord = self.post("/v1/score", &req)?;
        if rec.attention.is_some() && !want_attention {
            return Err(ScorerError::protocol("attention block returned but not requested"));
        }
        Ok(rec)
    }

    fn generate(&self, prompt: &str, params: &GenParams) -> Result<String, ScorerError> {
        let resp: GenerateResponse = self.post("/v1/generate", &GenerateRequest::from_params(prompt, params))?;
        Ok(resp.text)
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, ScorerError> {
        let resp: EmbedResponse = self.post("/v1/embed", &EmbedRequest { text: text.into() })?;
        Ok(resp.embedding)
    }

    fn model_info(&self) -> Result<ModelInfo, ScorerError> {
        let result = self.agent.get(format!("{}/v1/info", self.base)).call();
        self.finish(result)
    }
}
