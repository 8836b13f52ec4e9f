//! Externally controlled time for test mode. The gateway polls a clock
//! endpoint returning `{"now": "<RFC 3339>"}` before each request and
//! each sweep, and reads the cached value in between.

use aarm_core::clock::{Clock, ManualClock};
use aarm_core::model::{format_utc, parse_utc};
use anyhow::Context;
use axum::routing::get;
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use serde_json::{json, Value};
use std::sync::Arc;
use std::time::Duration;

pub struct HttpClock {
    url: String,
    client: reqwest::Client,
    now: Mutex<DateTime<Utc>>,
}

async fn fetch(client: &reqwest::Client, url: &str) -> anyhow::Result<DateTime<Utc>> {
    let v: Value = client.get(url).send().await?.error_for_status()?.json().await?;
    let s = v.get("now").and_then(Value::as_str).context("clock response lacks \"now\"")?;
    parse_utc(s).with_context(|| format!("clock returned {s:?}, not RFC 3339 UTC"))
}

impl HttpClock {
    /// The harness hosting the clock may start after the gateway, so an
    /// unreachable endpoint is tolerated: system time stands in until the
    /// first successful read, and every request re-reads before deciding.
    pub async fn connect(url: &str) -> anyhow::Result<Self> {
        let client = reqwest::Client::builder().timeout(Duration::from_secs(5)).build()?;
        let now = match fetch(&client, url).await {
            Ok(t) => t,
            Err(e) => {
                tracing::warn!(url, error = %e, "test clock not reachable yet; using system time until it is");
                Utc::now()
            }
        };
        Ok(HttpClock { url: url.to_owned(), client, now: Mutex::new(now) })
    }

    /// Re-read the endpoint; keeps the last value when it is unreachable.
    pub async fn refresh(&self) {
        match fetch(&self.client, &self.url).await {
            Ok(t) => *self.now.lock() = t,
            Err(e) => tracing::warn!(error = %e, "test clock unreachable; keeping last reading"),
        }
    }
}

impl Clock for HttpClock {
    fn now(&self) -> DateTime<Utc> {
        *self.now.lock()
    }
}

/// Serves a [`ManualClock`] as `GET /now`, for driving a test-mode gateway.
pub fn manual_clock_router(clock: Arc<ManualClock>) -> Router {
    Router::new().route(
        "/now",
        get(move || {
            let clock = clock.clone();
            async move { Json(json!({"now": format_utc(clock.now())})) }
        }),
    )
}
