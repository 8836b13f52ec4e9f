use aarm_conform::fixture::{self, POLICIES};
use aarm_conform::harness::{ExternalTarget, Harness, APPROVER, APPROVER_TOKEN, TOOLS};
use aarm_conform::RunOptions;
use aarm_core::receipt::{verify_receipts_text, Ed25519Signer, PublicKeys, Signer};
use aarm_gateway::mock::MockUpstream;
use aarm_gateway::{Gateway, GatewayConfig, ServeOptions};
use anyhow::Context;
use clap::{Parser, Subcommand};
use serde_json::json;
use std::path::PathBuf;
use std::process::ExitCode;

pub const TEST_CLOCK_ENV: &str = "AARM_TEST_CLOCK";
const DEFAULT_SEED: u64 = 42;

#[derive(Parser)]
#[command(name = "aarm", version, about = "Authorization runtime for agent tool calls")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the gateway.
    Serve {
        #[arg(long, env = "AARM_CONFIG")]
        config: PathBuf,
        /// Overrides the configured listen address.
        #[arg(long)]
        listen: Option<String>,
        /// Honor AARM_TEST_CLOCK and seed id generation.
        #[arg(long)]
        test_mode: bool,
        /// Id seed in test mode.
        #[arg(long, default_value_t = DEFAULT_SEED, requires = "test_mode")]
        seed: u64,
        /// Serve the approval console under /console.
        #[arg(long)]
        console: bool,
        /// Console assets; overrides console_dir in the config.
        #[arg(long)]
        console_dir: Option<PathBuf>,
    },
    /// Check receipt signatures offline.
    VerifyReceipts {
        #[arg(long)]
        receipts: PathBuf,
        #[arg(long)]
        keys: PathBuf,
    },
    /// Run the conformance checks and threat scenarios.
    Conform(ConformArgs),
    /// Create an Ed25519 signing key.
    Keygen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Run the mock tool server alone.
    MockUpstream {
        #[arg(long, default_value = "127.0.0.1:9100")]
        listen: String,
        /// Where upstream_calls.jsonl is written.
        #[arg(long, default_value = ".")]
        dir: PathBuf,
    },
}

#[derive(clap::Args)]
struct ConformArgs {
    /// Gateway under test; without it a gateway is started in-process.
    #[arg(long)]
    target: Option<String>,
    /// The target's data directory, needed for ledger tamper trials.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Where the harness serves the mock tool server for an external target.
    #[arg(long, default_value = "127.0.0.1:9100")]
    mock_listen: String,
    /// Where the harness serves the test clock for an external target.
    #[arg(long, default_value = "127.0.0.1:9101")]
    clock_listen: String,
    #[arg(long, default_value = APPROVER_TOKEN)]
    approver_token: String,
    /// The target's configured cascade limit.
    #[arg(long, default_value_t = 8)]
    cascade_limit: usize,
    /// Prepended to every session id, so reruns against one target do not collide.
    #[arg(long, default_value = "")]
    session_prefix: String,
    #[arg(long = "requirement", value_name = "ID")]
    requirements: Vec<String>,
    #[arg(long = "scenario", value_name = "ID")]
    scenarios: Vec<String>,
    /// Load scenario fixtures from a directory instead of the shipped set.
    #[arg(long)]
    scenarios_dir: Option<PathBuf>,
    /// Write the JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    parallel: bool,
    /// Write the policy set and a gateway config for an external target, then exit.
    #[arg(long, value_name = "DIR")]
    emit_config: Option<PathBuf>,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().expect("tokio runtime");
    match rt.block_on(dispatch(cli.command)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

async fn dispatch(cmd: Command) -> anyhow::Result<ExitCode> {
    match cmd {
        Command::Serve { config, listen, test_mode, seed, console, console_dir } => {
            serve(config, listen, test_mode, seed, console, console_dir).await
        }
        Command::VerifyReceipts { receipts, keys } => verify(receipts, keys),
        Command::Conform(args) => conform(args).await,
        Command::Keygen { out, force } => keygen(out, force),
        Command::MockUpstream { listen, dir } => mock(listen, dir).await,
    }
}

async fn serve(
    config: PathBuf,
    listen: Option<String>,
    test_mode: bool,
    seed: u64,
    console: bool,
    console_dir: Option<PathBuf>,
) -> anyhow::Result<ExitCode> {
    let mut cfg = GatewayConfig::load(&config)?;
    if let Some(l) = listen {
        cfg.listen = l;
    }
    let test_clock = std::env::var(TEST_CLOCK_ENV).ok().filter(|s| !s.is_empty());
    if test_clock.is_some() && !test_mode {
        tracing::warn!("{TEST_CLOCK_ENV} is ignored without --test-mode");
    }
    let opts = ServeOptions {
        test_clock: test_clock.filter(|_| test_mode),
        seed: test_mode.then_some(seed),
        console,
        console_dir,
    };
    let addr = cfg.listen.clone();
    let gw = Gateway::build(cfg, opts).await?;
    let listener = tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("binding {addr}"))?;
    eprintln!("aarm gateway listening on http://{}", listener.local_addr()?);
    gw.serve(listener, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await?;
    Ok(ExitCode::SUCCESS)
}

fn verify(receipts: PathBuf, keys: PathBuf) -> anyhow::Result<ExitCode> {
    let keys = PublicKeys::load(&keys)?;
    let text = std::fs::read_to_string(&receipts).with_context(|| receipts.display().to_string())?;
    let verdicts = verify_receipts_text(&text, &keys);
    let mut invalid = 0;
    for v in &verdicts {
        if let Err(e) = &v.result {
            invalid += 1;
            println!("INVALID line {} {}: {e}", v.line, v.receipt_id.as_deref().unwrap_or("-"));
        }
    }
    println!("{} receipts, {} valid, {invalid} invalid", verdicts.len(), verdicts.len() - invalid);
    Ok(if invalid == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn keygen(out: PathBuf, force: bool) -> anyhow::Result<ExitCode> {
    anyhow::ensure!(force || !out.exists(), "{} exists; pass --force to replace it", out.display());
    if force && out.exists() {
        std::fs::remove_file(&out).with_context(|| out.display().to_string())?;
    }
    let signer = Ed25519Signer::generate();
    signer.save(&out)?;
    let mut keys = PublicKeys::default();
    keys.insert(signer.public_key())?;
    println!("{}", keys.to_json());
    Ok(ExitCode::SUCCESS)
}

async fn mock(listen: String, dir: PathBuf) -> anyhow::Result<ExitCode> {
    let m = MockUpstream::create(&dir)?;
    let listener = tokio::net::TcpListener::bind(&listen).await.with_context(|| format!("binding {listen}"))?;
    eprintln!("mock tool server on http://{}/rpc, calls in {}", listener.local_addr()?, m.path().display());
    axum::serve(listener, m.router())
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(ExitCode::SUCCESS)
}

fn emit_config(dir: &std::path::Path, args: &ConformArgs) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("policies.json"), POLICIES)?;
    let tools: serde_json::Map<String, serde_json::Value> =
        TOOLS.iter().map(|t| (t.to_string(), json!(format!("http://{}/rpc", args.mock_listen)))).collect();
    let config = json!({
        "listen": "127.0.0.1:8080",
        "policy_file": "policies.json",
        "data_dir": "data",
        "tools": tools,
        "approvers": {args.approver_token.clone(): APPROVER},
        "cascade_limit": args.cascade_limit,
        "timeouts": {"hold_secs": 0.05},
        "telemetry": {"file": "events.jsonl"}
    });
    std::fs::write(dir.join("gateway.json"), serde_json::to_string_pretty(&config)? + "\n")?;
    println!("wrote {0}/policies.json and {0}/gateway.json", dir.display());
    println!("start the target with: {TEST_CLOCK_ENV}=http://{}/now aarm serve --test-mode --config {}/gateway.json", args.clock_listen, dir.display());
    Ok(())
}

async fn conform(args: ConformArgs) -> anyhow::Result<ExitCode> {
    if let Some(dir) = &args.emit_config {
        emit_config(dir, &args)?;
        return Ok(ExitCode::SUCCESS);
    }
    let corpus = match &args.scenarios_dir {
        Some(d) => fixture::load_dir(d)?,
        None => fixture::shipped(),
    };
    let h = match &args.target {
        None => Harness::self_hosted().await?,
        Some(url) => {
            Harness::external(ExternalTarget {
                url: url.clone(),
                data_dir: args.data_dir.clone(),
                mock_listen: args.mock_listen.clone(),
                clock_listen: args.clock_listen.clone(),
                approver_token: args.approver_token.clone(),
                cascade_limit: args.cascade_limit,
                session_prefix: args.session_prefix.clone(),
            })
            .await?
        }
    };
    let opts = RunOptions { requirements: args.requirements, scenarios: args.scenarios, parallel: args.parallel };
    let report = aarm_conform::run(&h, &corpus, &opts).await?;
    print!("{}", report.to_text());
    if let Some(path) = &args.report {
        std::fs::write(path, serde_json::to_string_pretty(&report)? + "\n").with_context(|| path.display().to_string())?;
    }
    Ok(if report.success() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
