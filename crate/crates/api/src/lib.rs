//! Operator HTTP API for a collection site. Every route except login needs a session token,
//! sent as `Authorization: Bearer <token>` or the `imgcollect_session` cookie.

pub mod accounts;
pub mod batch;
pub mod reports;

use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::extract::{Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Extension, Json, Router};
use chrono::{DateTime, Utc};
use imgcollect_core::collector::{Collector, CollectorError, CycleReport, SelectionCriteria};
use imgcollect_core::national_id::validate_national_id;
use imgcollect_core::vault::{OptOutSource, VaultError};
use serde::{Deserialize, Serialize};
use serde_json::json;

use accounts::{AccountError, AccountStore, Role, Session, SessionStore};
use batch::{BatchOutcome, BatchRow, RowError};
use reports::Section;

pub const DEFAULT_PORT: u16 = 8080;
pub const SESSION_COOKIE: &str = "imgcollect_session";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ApiConfig {
    pub bind: SocketAddr,
    pub session_idle_secs: u64,
}

impl Default for ApiConfig {
    fn default() -> Self {
        ApiConfig {
            bind: SocketAddr::from(([127, 0, 0, 1], DEFAULT_PORT)),
            session_idle_secs: 30 * 60,
        }
    }
}

struct Inner {
    collector: Arc<Collector>,
    accounts: AccountStore,
    sessions: SessionStore,
    started: Instant,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(collector: Arc<Collector>, accounts: AccountStore, config: &ApiConfig) -> Self {
        AppState(Arc::new(Inner {
            collector,
            accounts,
            sessions: SessionStore::new(Duration::from_secs(config.session_idle_secs.max(1))),
            started: Instant::now(),
        }))
    }

    pub fn accounts(&self) -> &AccountStore {
        &self.0.accounts
    }

    pub fn collector(&self) -> &Arc<Collector> {
        &self.0.collector
    }
}

/// Error body: `{"error": <code>, "message": <text>, "errors": [...]}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    errors: Vec<serde_json::Value>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
            errors: Vec::new(),
        }
    }

    fn unauthorized() -> Self {
        ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "log in to use this page")
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        tracing::error!(error = %e, "request failed");
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", "internal error")
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": self.code, "message": self.message, "errors": self.errors });
        (self.status, Json(body)).into_response()
    }
}

impl From<AccountError> for ApiError {
    fn from(e: AccountError) -> Self {
        match e {
            AccountError::BadCredentials => ApiError::new(StatusCode::UNAUTHORIZED, "bad-credentials", e.to_string()),
            AccountError::WeakPassword => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "weak-password", e.to_string()),
            AccountError::InvalidSession => ApiError::unauthorized(),
            e => ApiError::internal(e),
        }
    }
}

impl From<CollectorError> for ApiError {
    fn from(e: CollectorError) -> Self {
        match e {
            CollectorError::CycleInProgress => ApiError::new(StatusCode::CONFLICT, "busy", e.to_string()),
            CollectorError::OutsideWindow => ApiError::new(StatusCode::CONFLICT, "outside-window", e.to_string()),
            CollectorError::PacsUnreachable(_) | CollectorError::EndpointUnavailable(_) => {
                ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "unavailable", e.to_string())
            }
            CollectorError::Vault(VaultError::InvalidNationalId(r)) => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid-national-id", format!("invalid national id ({r})"))
            }
            e => ApiError::internal(e),
        }
    }
}

fn row_errors(status: StatusCode, errors: Vec<RowError>) -> ApiError {
    let first = errors.first().map(|e| serde_json::to_value(e.reason).ok());
    let code = match first.flatten().as_ref().and_then(|v| v.as_str()) {
        Some("invalid-national-id") => "invalid-national-id",
        Some("missing-primary-id") => "missing-primary-id",
        Some("missing-trial-code") => "missing-trial-code",
        Some("invalid-date") => "invalid-date",
        Some("duplicate-trial-code") => "duplicate-trial-code",
        Some("already-registered") => "already-registered",
        Some("opted-out") => "opted-out",
        _ => "invalid",
    };
    ApiError {
        status,
        code,
        message: format!("{} error(s); nothing was registered", errors.len()),
        errors: errors.into_iter().filter_map(|e| serde_json::to_value(e).ok()).collect(),
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)
}

fn token_from(headers: &HeaderMap) -> Option<String> {
    if let Some(t) = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
    {
        return Some(t.trim().to_string());
    }
    headers
        .get_all(header::COOKIE)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .flat_map(|v| v.split(';'))
        .find_map(|c| c.trim().strip_prefix(&format!("{SESSION_COOKIE}=")).map(str::to_string))
}

async fn require_session(State(st): State<AppState>, mut req: Request, next: Next) -> Response {
    let session = token_from(req.headers()).and_then(|t| st.0.sessions.touch(&t).ok().map(|s| (t, s)));
    match session {
        Some((token, s)) => {
            req.extensions_mut().insert(s);
            req.extensions_mut().insert(Token(token));
            next.run(req).await
        }
        None => ApiError::unauthorized().into_response(),
    }
}

#[derive(Clone)]
struct Token(String);

fn require_admin(s: &Session) -> Result<(), ApiError> {
    if s.role == Role::Admin {
        Ok(())
    } else {
        Err(ApiError::new(StatusCode::FORBIDDEN, "forbidden", "administrator role required"))
    }
}

pub fn router(state: AppState) -> Router {
    let restricted = Router::new()
        .route("/api/logout", post(logout))
        .route("/api/session", get(session_info))
        .route("/api/password", post(change_password))
        .route("/api/clients", post(register_client))
        .route("/api/clients/batch", post(batch_upload))
        .route("/api/clients/batch/template", get(batch_template))
        .route("/api/clients/check", post(check_clients))
        .route("/api/download", get(download))
        .route("/api/optout", post(opt_out))
        .route("/api/health", get(health))
        .route("/api/collect/run", post(collect_run))
        .route("/api/collect/transfer", post(collect_transfer))
        .route("/api/collect/refresh", post(collect_refresh))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_session));
    Router::new()
        .route("/api/login", post(login))
        .merge(restricted)
        .with_state(state)
}

/// Serves until the listener fails or the task is dropped.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    tracing::info!(addr = ?listener.local_addr().ok(), "admin api listening");
    axum::serve(listener, router(state)).await
}

#[derive(Deserialize)]
struct LoginRequest {
    username: String,
    password: String,
}

async fn login(State(st): State<AppState>, Json(req): Json<LoginRequest>) -> Result<Response, ApiError> {
    let st2 = st.clone();
    let username = req.username.clone();
    let role = blocking(move || st2.0.accounts.authenticate(&req.username, &req.password)).await?;
    let role = match role {
        Ok(r) => r,
        Err(e) => {
            tracing::warn!(%username, "failed login");
            return Err(e.into());
        }
    };
    let token = st.0.sessions.create(Session {
        username: username.clone(),
        role,
    });
    tracing::info!(%username, "login");
    let cookie = format!("{SESSION_COOKIE}={token}; HttpOnly; SameSite=Strict; Path=/");
    Ok(([(header::SET_COOKIE, cookie)], Json(json!({ "token": token, "username": username, "role": role }))).into_response())
}

async fn logout(State(st): State<AppState>, Extension(token): Extension<Token>) -> Response {
    st.0.sessions.remove(&token.0);
    let cookie = format!("{SESSION_COOKIE}=; Max-Age=0; Path=/");
    ([(header::SET_COOKIE, cookie)], Json(json!({ "message": "you have logged out" }))).into_response()
}

async fn session_info(Extension(s): Extension<Session>) -> Json<serde_json::Value> {
    Json(json!({ "username": s.username, "role": s.role }))
}

#[derive(Deserialize)]
struct PasswordRequest {
    current: String,
    new: String,
}

async fn change_password(
    State(st): State<AppState>,
    Extension(s): Extension<Session>,
    Json(req): Json<PasswordRequest>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let res = blocking(move || st.0.accounts.change_password(&s.username, &req.current, &req.new)).await?;
    match res {
        Ok(()) => Ok(Json(json!({ "message": "password changed" }))),
        Err(errors) => {
            let mut e = ApiError::from(errors.into_iter().next().expect("at least one error"));
            // wrong current password is a form error here, not a session problem
            e.status = StatusCode::UNPROCESSABLE_ENTITY;
            Err(e)
        }
    }
}

#[derive(Deserialize)]
struct RegisterRequest {
    primary_id: String,
    #[serde(default)]
    secondary_id: String,
    #[serde(default)]
    trial_code: String,
    #[serde(default)]
    date_enrolled: String,
}

async fn register_client(State(st): State<AppState>, Json(req): Json<RegisterRequest>) -> Result<Response, ApiError> {
    let row = BatchRow {
        row_number: 0,
        primary_id: req.primary_id.trim().to_string(),
        secondary_id: req.secondary_id.trim().to_string(),
        trial_code: req.trial_code.trim().to_string(),
        date_enrolled: req.date_enrolled.trim().to_string(),
    };
    let errors = batch::validate_row(&row);
    if !errors.is_empty() {
        return Err(row_errors(StatusCode::UNPROCESSABLE_ENTITY, errors));
    }
    let reg = imgcollect_core::vault::Registration {
        national_id: row.primary_id.clone(),
        local_id: Some(row.secondary_id.clone()).filter(|s| !s.is_empty()),
        trial_code: row.trial_code.clone(),
        date_enrolled: batch::parse_enrolled(&row.date_enrolled).ok().flatten(),
    };
    let res = blocking(move || st.0.collector.vault().register_client(&reg)).await?;
    match res {
        Ok(r) => Ok((
            StatusCode::CREATED,
            Json(json!({ "message": "client registered", "pseudonym": r.pseudonym, "trial_code": r.trial_code })),
        )
            .into_response()),
        Err(e @ (VaultError::InvalidNationalId(_)
        | VaultError::MissingTrialCode
        | VaultError::DuplicateTrialCode(_)
        | VaultError::AlreadyRegistered
        | VaultError::OptedOut)) => Err(row_errors(StatusCode::UNPROCESSABLE_ENTITY, vec![batch::row_error(0, &e)])),
        Err(e) => Err(ApiError::internal(e)),
    }
}

async fn batch_upload(State(st): State<AppState>, body: String) -> Result<Json<serde_json::Value>, ApiError> {
    let rows = batch::parse_rows(&body).map_err(|e| row_errors(StatusCode::UNPROCESSABLE_ENTITY, e))?;
    match blocking(move || batch::upload(st.0.collector.vault(), &rows)).await? {
        BatchOutcome::Accepted { accepted } => Ok(Json(json!({ "accepted": accepted, "message": format!("{accepted} client(s) registered") }))),
        BatchOutcome::Rejected { errors } => Err(row_errors(StatusCode::UNPROCESSABLE_ENTITY, errors)),
    }
}

async fn batch_template() -> Response {
    attachment("text/csv", "batch_template.csv", batch::template_csv().into_bytes())
}

fn attachment(content_type: &str, name: &str, bytes: Vec<u8>) -> Response {
    (
        [
            (header::CONTENT_TYPE, content_type.to_string()),
            (header::CONTENT_DISPOSITION, format!("attachment; filename=\"{name}\"")),
        ],
        bytes,
    )
        .into_response()
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Terms {
    Text(String),
    List(Vec<String>),
}

#[derive(Deserialize)]
struct CheckRequest {
    terms: Terms,
}

#[derive(Deserialize, Default)]
struct FormatQuery {
    format: Option<String>,
}

async fn check_clients(
    State(st): State<AppState>,
    Query(q): Query<FormatQuery>,
    Json(req): Json<CheckRequest>,
) -> Result<Response, ApiError> {
    let terms = match req.terms {
        Terms::Text(t) => reports::split_terms(&t),
        Terms::List(l) => l.iter().flat_map(|t| reports::split_terms(t)).collect(),
    };
    let rows = blocking(move || reports::check_clients(st.0.collector.vault(), &terms)).await?;
    if q.format.as_deref() == Some("csv") {
        let bytes = reports::checks_csv(&rows).map_err(ApiError::internal)?;
        return Ok(attachment("text/csv", "check_clients.csv", bytes));
    }
    Ok(Json(json!({ "rows": rows })).into_response())
}

#[derive(Deserialize, Default)]
struct DownloadQuery {
    sections: Option<String>,
}

async fn download(State(st): State<AppState>, Query(q): Query<DownloadQuery>) -> Result<Response, ApiError> {
    let sections: BTreeSet<Section> = match q.sections.as_deref().map(str::trim).filter(|s| !s.is_empty()) {
        None => Section::ALL.into_iter().collect(),
        Some(list) => list
            .split(',')
            .map(|s| Section::parse(s).ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "bad-section", format!("unknown section {s:?}"))))
            .collect::<Result<_, _>>()?,
    };
    let zip = blocking(move || -> Result<Vec<u8>, ApiError> {
        let c = &st.0.collector;
        let status = c.status()?;
        let tables = reports::section_tables(c.vault(), &status, &sections).map_err(ApiError::internal)?;
        reports::zip_tables(&tables).map_err(ApiError::internal)
    })
    .await??;
    let name = format!("download_{}.zip", Utc::now().format("%Y%m%dT%H%M%S"));
    Ok(attachment("application/zip", &name, zip))
}

#[derive(Deserialize)]
struct OptOutRequest {
    national_id: String,
}

async fn opt_out(
    State(st): State<AppState>,
    Extension(s): Extension<Session>,
    Json(req): Json<OptOutRequest>,
) -> Result<Json<serde_json::Value>, ApiError> {
    require_admin(&s)?;
    let nid = req.national_id.trim().to_string();
    if let Err(r) = validate_national_id(&nid) {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid-national-id", format!("invalid national id ({r})")));
    }
    let report = blocking(move || st.0.collector.opt_out(&nid, OptOutSource::LocalRequest)).await??;
    tracing::info!(user = %s.username, rows = report.vault_rows_removed, "opt-out recorded");
    Ok(Json(serde_json::to_value(report).map_err(ApiError::internal)?))
}

#[derive(Serialize)]
struct Health {
    version: &'static str,
    uptime_secs: u64,
    disk_available_bytes: Option<u64>,
    disk_total_bytes: Option<u64>,
    clients: usize,
    opt_outs: usize,
    studies_staged: usize,
    studies_transferred: usize,
    studies_quarantined: usize,
    last_cycle_at: Option<DateTime<Utc>>,
    last_cycle: Option<CycleReport>,
    last_transfer_at: Option<DateTime<Utc>>,
}

async fn health(State(st): State<AppState>) -> Result<Json<Health>, ApiError> {
    let h = blocking(move || -> Result<Health, ApiError> {
        let c = &st.0.collector;
        let status = c.status()?;
        let state = c.load_state()?;
        let root = &c.layout().root;
        Ok(Health {
            version: env!("CARGO_PKG_VERSION"),
            uptime_secs: st.0.started.elapsed().as_secs(),
            disk_available_bytes: fs4::available_space(root).ok(),
            disk_total_bytes: fs4::total_space(root).ok(),
            clients: status.clients,
            opt_outs: status.opt_outs,
            studies_staged: status.studies_staged,
            studies_transferred: status.studies_transferred,
            studies_quarantined: status.studies_quarantined,
            last_cycle_at: status.last_cycle_at,
            last_cycle: state.last_cycle,
            last_transfer_at: status.last_transfer_at,
        })
    })
    .await??;
    Ok(Json(h))
}

async fn collect_run(
    State(st): State<AppState>,
    Extension(s): Extension<Session>,
    body: Option<Json<SelectionCriteria>>,
) -> Result<Json<serde_json::Value>, ApiError> {
    require_admin(&s)?;
    let criteria = body.map(|Json(c)| c).unwrap_or_default();
    let r = blocking(move || st.0.collector.run_collection_cycle(&criteria)).await??;
    Ok(Json(serde_json::to_value(r).map_err(ApiError::internal)?))
}

async fn collect_transfer(State(st): State<AppState>, Extension(s): Extension<Session>) -> Result<Json<serde_json::Value>, ApiError> {
    require_admin(&s)?;
    let r = blocking(move || st.0.collector.transfer_nightly()).await??;
    Ok(Json(serde_json::to_value(r).map_err(ApiError::internal)?))
}

async fn collect_refresh(State(st): State<AppState>, Extension(s): Extension<Session>) -> Result<Json<serde_json::Value>, ApiError> {
    require_admin(&s)?;
    let r = blocking(move || st.0.collector.refresh_ground_truth()).await??;
    Ok(Json(serde_json::to_value(r).map_err(ApiError::internal)?))
}
