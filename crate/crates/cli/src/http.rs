use std::io::Write;
use std::sync::Arc;

use anyhow::Result;
use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use hccm::data::Impression;
use hccm::serving::Predictor;
use serde_json::{json, Value};

async fn predict(State(predictor): State<Arc<Predictor>>, body: String) -> (StatusCode, Json<Value>) {
    let request: Impression = match serde_json::from_str(&body) {
        Ok(r) => r,
        Err(e) => return (StatusCode::BAD_REQUEST, Json(json!({ "error": e.to_string() }))),
    };
    match predictor.predict(&request) {
        Ok(resp) => (StatusCode::OK, Json(serde_json::to_value(resp).expect("response serializes"))),
        Err(e) => (StatusCode::UNPROCESSABLE_ENTITY, Json(json!({ "error": e.to_string() }))),
    }
}

async fn health() -> &'static str {
    "ok"
}

/// Serves `POST /predict` until the process is stopped. The bound address is
/// printed to stderr first, so port 0 can be used.
pub fn serve(predictor: Predictor, host: &str, port: u16) -> Result<()> {
    let app = Router::new()
        .route("/predict", post(predict))
        .route("/health", get(health))
        .with_state(Arc::new(predictor));
    let runtime = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind((host, port)).await?;
        let addr = listener.local_addr()?;
        eprintln!("listening on http://{addr}");
        std::io::stderr().flush()?;
        axum::serve(listener, app).await?;
        Ok(())
    })
}
