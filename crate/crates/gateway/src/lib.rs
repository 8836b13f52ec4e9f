//! The AARM gateway: an HTTP JSON-RPC proxy that puts every agent tool
//! call through the decision engine before it reaches a tool server.

pub mod clock;
pub mod config;
pub mod mock;
pub mod rpc;
pub mod server;
pub mod upstream;

pub use config::GatewayConfig;

use aarm_core::clock::{Clock, SystemClock};
use aarm_core::ids::IdGen;
use aarm_core::intent::Embedder;
use aarm_core::ledger::ContextLedger;
use aarm_core::orchestrator::{Engine, EngineConfig, EngineParts};
use aarm_core::policy::PolicySet;
use aarm_core::receipt::{Ed25519Signer, ReceiptVault};
use aarm_core::telemetry::Telemetry;
use anyhow::{anyhow, bail, Context};
use axum::Router;
use clock::HttpClock;
use server::AppState;
use std::future::Future;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;
use tower_http::services::ServeDir;
use upstream::HttpForwarder;

/// Command-line switches that are not part of the configuration file.
#[derive(Debug, Clone, Default)]
pub struct ServeOptions {
    /// Clock endpoint; only set in test mode.
    pub test_clock: Option<String>,
    /// Seed for deterministic ids; only set in test mode.
    pub seed: Option<u64>,
    /// Serve the approval console assets under /console.
    pub console: bool,
    /// Overrides `console_dir` from the configuration.
    pub console_dir: Option<PathBuf>,
}

pub struct Gateway {
    state: Arc<AppState>,
    console_dir: Option<PathBuf>,
    sweep_every: Duration,
}

fn secs(s: f64, what: &str) -> anyhow::Result<Duration> {
    Duration::try_from_secs_f64(s).map_err(|_| anyhow!("{what} must be a non-negative number of seconds"))
}

impl Gateway {
    pub async fn build(config: GatewayConfig, opts: ServeOptions) -> anyhow::Result<Self> {
        let policy_bytes =
            std::fs::read(&config.policy_file).with_context(|| format!("reading {}", config.policy_file.display()))?;
        let policies = PolicySet::parse_bytes(&policy_bytes)
            .map_err(|e| anyhow!("{}: {e}", config.policy_file.display()))?;
        std::fs::create_dir_all(&config.data_dir).with_context(|| format!("creating {}", config.data_dir.display()))?;

        let test_clock = match &opts.test_clock {
            Some(url) => Some(Arc::new(HttpClock::connect(url).await?)),
            None => None,
        };
        let clock: Arc<dyn Clock> = match &test_clock {
            Some(c) => c.clone(),
            None => Arc::new(SystemClock),
        };
        let ids = Arc::new(match opts.seed {
            Some(s) => IdGen::seeded(s),
            None => IdGen::random(),
        });
        let signer = Ed25519Signer::load_or_create(&config.signing_key_path())?;
        let vault = ReceiptVault::open(&config.data_dir, Arc::new(signer), ids.clone(), clock.clone())?
            .with_redaction(config.redact_params.iter().cloned());
        let ledger = ContextLedger::open(config.data_dir.clone())?;
        let telemetry = match &config.telemetry {
            Some(sink) => Telemetry::start(
                sink.clone(),
                config.telemetry_filter.clone(),
                &config.data_dir,
                ids.clone(),
                clock.clone(),
            ),
            None => Telemetry::disabled(ids.clone(), clock.clone()),
        };
        let embedder: Arc<dyn Embedder> = Arc::from(config.embedder.build(config.dimension).map_err(|e| anyhow!(e))?);
        let t = &config.timeouts;
        let forwarder = Arc::new(HttpForwarder::new(config.tools.clone(), secs(t.upstream_secs, "upstream_secs")?)?);
        let engine = Engine::new(EngineParts {
            policies: Arc::new(policies),
            ledger: Arc::new(ledger),
            vault: Arc::new(vault),
            telemetry: Arc::new(telemetry),
            embedder,
            forwarder: forwarder.clone(),
            clock,
            ids,
            config: EngineConfig {
                step_up_timeout: Duration::from_secs(t.step_up_secs),
                defer_timeout: Duration::from_secs(t.defer_secs),
                cascade_limit: config.cascade_limit,
                approvers: config.approvers.clone(),
            },
        });
        let console_dir = match (opts.console, opts.console_dir.or(config.console_dir.clone())) {
            (false, _) => None,
            (true, Some(d)) if d.is_dir() => Some(d),
            (true, Some(d)) => bail!("console directory {} does not exist", d.display()),
            (true, None) => bail!("--console needs console_dir in the configuration or --console-dir"),
        };
        let sweep_every = secs(t.sweep_secs, "sweep_secs")?;
        if sweep_every.is_zero() {
            bail!("sweep_secs must be positive");
        }
        Ok(Gateway {
            state: Arc::new(AppState {
                engine: Arc::new(engine),
                forwarder,
                test_clock,
                data_dir: config.data_dir.clone(),
                hold: secs(t.hold_secs, "hold_secs")?,
            }),
            console_dir,
            sweep_every,
        })
    }

    pub fn engine(&self) -> &Arc<Engine> {
        &self.state.engine
    }

    pub fn router(&self) -> Router {
        let api = server::router(self.state.clone());
        match &self.console_dir {
            Some(dir) => api.nest_service("/console", ServeDir::new(dir).append_index_html_on_directories(true)),
            None => api,
        }
    }

    /// Expire timed-out items and re-evaluate defers on a fixed period.
    pub fn spawn_sweeper(&self) -> tokio::task::JoinHandle<()> {
        let state = self.state.clone();
        let every = self.sweep_every;
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(every);
            tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
            loop {
                tick.tick().await;
                if let Some(c) = &state.test_clock {
                    c.refresh().await;
                }
                state.engine.sweep().await;
            }
        })
    }

    pub async fn serve(self, listener: tokio::net::TcpListener, shutdown: impl Future<Output = ()> + Send + 'static) -> anyhow::Result<()> {
        let sweeper = self.spawn_sweeper();
        let engine = self.state.engine.clone();
        axum::serve(listener, self.router()).with_graceful_shutdown(shutdown).await?;
        sweeper.abort();
        if !engine.telemetry().flush(Duration::from_secs(5)) {
            tracing::warn!("telemetry queue not drained at shutdown");
        }
        Ok(())
    }
}
