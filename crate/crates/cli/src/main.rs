//! Command-line front end: compile and check monitoring applications, run
//! them offline against capture files, and operate a master/agent mesh.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use dstreamon::bus::{action_payload, Publisher, PublisherConfig, Subscriber};
use dstreamon::control::{
    request, Agent, AgentConfig, ControlCommand, ControlReply, Master, MasterConfig, ProbeRow, ProgramImage,
    DEFAULT_HEARTBEAT,
};
use dstreamon::dsl::{self, deserialize_program, serialize_program, ProbeProgram, PROGRAM_MAGIC};
use dstreamon::pipeline::Pipeline;
use dstreamon::traffic::{
    bench, read_pcap, replay, synflood_trace, write_pcap, PcapHeader, PcapRecord, Rate, ReplayPlan, SynFloodSpec,
    SyntheticSpec, TimestampUnit,
};

const DEFAULT_MASTER: &str = "127.0.0.1:7700";

#[derive(Parser)]
#[command(name = "dstreamon", version, about = "Stream-based network monitoring probes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate an application and print its diagnostics.
    Check { file: PathBuf },
    /// Compile an application to a program image.
    Compile {
        file: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Run a program over a capture file and print emitted actions.
    Run {
        #[arg(long)]
        program: PathBuf,
        #[arg(long)]
        pcap: PathBuf,
        /// Packets per second; unlimited when omitted.
        #[arg(long)]
        rate: Option<f64>,
        /// Bus address to publish actions on.
        #[arg(long)]
        publish: Option<String>,
        /// Wait for this many subscribers before replaying.
        #[arg(long, default_value_t = 0)]
        wait_subscribers: u64,
        /// Drive timeouts from the wall clock instead of capture timestamps.
        #[arg(long)]
        real_time: bool,
        #[arg(long, default_value = "run")]
        id: String,
    },
    /// Start a probe agent.
    Agent {
        /// Control endpoint.
        #[arg(long)]
        listen: String,
        #[arg(long)]
        master: Option<String>,
        #[arg(long)]
        id: String,
        #[arg(long)]
        publish: Option<String>,
        /// Upstream probe bus address for remote events.
        #[arg(long)]
        upstream: Option<String>,
        /// Program installed at start as version 1.
        #[arg(long)]
        program: Option<PathBuf>,
        /// Capture file to feed into the pipeline once started.
        #[arg(long)]
        pcap: Option<PathBuf>,
        #[arg(long)]
        rate: Option<f64>,
        #[arg(long, default_value_t = DEFAULT_HEARTBEAT.as_millis() as u64)]
        heartbeat_ms: u64,
    },
    /// Start the master controller.
    Master {
        #[arg(long, default_value = DEFAULT_MASTER)]
        listen: String,
        #[arg(long, default_value_t = DEFAULT_HEARTBEAT.as_millis() as u64)]
        heartbeat_ms: u64,
    },
    /// Compile (if needed) and push a program to a probe through the master.
    Push {
        probe_id: String,
        file: PathBuf,
        #[arg(long, default_value = DEFAULT_MASTER)]
        master: String,
        #[arg(long)]
        version: Option<u64>,
    },
    /// List the probes known to the master.
    Probes {
        #[arg(long, default_value = DEFAULT_MASTER)]
        master: String,
    },
    /// Print messages published on a probe's bus.
    Tap {
        #[arg(long)]
        subscribe: String,
        /// Topic prefix pattern; repeatable.
        #[arg(long, required = true)]
        topic: Vec<String>,
        /// Exit after this many messages.
        #[arg(long)]
        count: Option<u64>,
    },
    /// Write a synthetic capture file.
    Synth {
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        count: u64,
        #[arg(long, default_value_t = 4)]
        flows: usize,
        #[arg(long, default_value_t = 100)]
        size: usize,
        #[arg(long, default_value_t = 22_500.0)]
        rate: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Write the SYN-flood scenario instead of constant-rate UDP flows.
        #[arg(long)]
        synflood: bool,
        #[arg(long, default_value_t = 10.0)]
        duration: f64,
    },
    /// Replicated paced runs over synthetic UDP traffic.
    Bench {
        #[arg(long)]
        program: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "22500,45000,68750")]
        rates: Vec<f64>,
        #[arg(long, default_value_t = 10)]
        replications: usize,
        #[arg(long, default_value_t = 20_000)]
        packets: u64,
        #[arg(long)]
        csv: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DSTREAMON_LOG", "warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Check { file } => check(&file),
        Command::Compile { file, output } => {
            let p = load_program(&file)?;
            std::fs::write(&output, serialize_program(&p)).with_context(|| format!("writing {}", output.display()))?;
            println!(
                "{} -> {} ({} events, {} metrics, {} states)",
                file.display(),
                output.display(),
                p.events.len(),
                p.metrics.len(),
                p.xfsm.states.len()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Run { program, pcap, rate, publish, wait_subscribers, real_time, id } => {
            run(&program, &pcap, rate, publish, wait_subscribers, real_time, &id)
        }
        Command::Agent { listen, master, id, publish, upstream, program, pcap, rate, heartbeat_ms } => {
            let mut cfg = AgentConfig::new(&id);
            cfg.control_listen = listen;
            cfg.master = master;
            cfg.publish = publish;
            cfg.upstream = upstream;
            cfg.heartbeat = Duration::from_millis(heartbeat_ms.max(1));
            let initial = program.as_deref().map(load_program).transpose()?;
            let agent = Agent::start_with(cfg, initial, None)?;
            println!("agent {id} control on {}", agent.control_addr());
            if let Some(a) = agent.publish_addr() {
                println!("agent {id} publishing on {a}");
            }
            if let Some(path) = pcap {
                feed_agent(&agent, &path, rate)?;
            }
            loop {
                thread::park();
            }
        }
        Command::Master { listen, heartbeat_ms } => {
            let m = Master::start(MasterConfig {
                listen,
                heartbeat: Duration::from_millis(heartbeat_ms.max(1)),
                ..MasterConfig::default()
            })?;
            println!("master listening on {}", m.local_addr());
            loop {
                thread::park();
            }
        }
        Command::Push { probe_id, file, master, version } => {
            let p = load_program(&file)?;
            let cmd = ControlCommand::Push { probe_id: probe_id.clone(), program: ProgramImage::encode(&p), version };
            match request(&master, cmd, Duration::from_secs(10))? {
                ControlReply::Installed { version } => {
                    println!("installed {} v{version} on {probe_id}", p.name);
                    Ok(ExitCode::SUCCESS)
                }
                ControlReply::Rejected { reason } => bail!("rejected: {reason}"),
                ControlReply::Unreachable { reason } => bail!("unreachable: {reason}"),
                other => bail!("unexpected reply {other:?}"),
            }
        }
        Command::Probes { master } => match request(&master, ControlCommand::ListProbes, Duration::from_secs(5))? {
            ControlReply::Probes { rows } => {
                print!("{}", probe_table(&rows));
                Ok(ExitCode::SUCCESS)
            }
            other => bail!("unexpected reply {other:?}"),
        },
        Command::Tap { subscribe, topic, count } => {
            let patterns: Vec<&str> = topic.iter().map(String::as_str).collect();
            let sub = Subscriber::connect(&subscribe, &patterns, "tap")?;
            let mut seen = 0u64;
            let mut out = std::io::stdout().lock();
            while count.is_none_or(|c| seen < c) {
                if let Some(m) = sub.recv_timeout(Duration::from_millis(200)) {
                    let payload = String::from_utf8_lossy(&m.payload);
                    writeln!(out, "{} {} #{} ts={} {payload}", m.topic, m.probe_id, m.seq, m.ts)?;
                    out.flush()?;
                    seen += 1;
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Synth { output, count, flows, size, rate, seed, synflood, duration } => {
            let frames: Vec<(u64, Vec<u8>)> = if synflood {
                synflood_trace(&SynFloodSpec {
                    duration_s: duration,
                    packet_size: size,
                    seed,
                    ..SynFloodSpec::default()
                })
            } else {
                SyntheticSpec { flows, packet_size: size, rate_pps: rate, seed, ..SyntheticSpec::default() }
                    .generate(count)?
                    .collect()
            };
            let records: Vec<PcapRecord> = frames.into_iter().map(|(ts, f)| PcapRecord::new(ts, f)).collect();
            write_pcap(&output, PcapHeader::new(TimestampUnit::Micros), &records)?;
            println!("wrote {} packets to {}", records.len(), output.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Bench { program, rates, replications, packets, csv } => {
            let p = load_program(&program)?;
            let report = bench(&rates, &SyntheticSpec::default(), &p, replications, packets)?;
            print!("{}", if csv { report.to_csv() } else { report.to_table() });
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn check(file: &Path) -> Result<ExitCode> {
    let text = read_text(file)?;
    let name = file.display();
    let spec = match dsl::parse(&text) {
        Ok(s) => s,
        Err(e) => {
            println!("{name}:{}:{}: error: {}", e.line, e.col, e.message);
            if !e.expected.is_empty() {
                println!("  expected {}", e.expected.join(", "));
            }
            println!("1 errors, 0 warnings");
            return Ok(ExitCode::from(1));
        }
    };
    let report = dsl::validate(&spec);
    for d in &report.diagnostics {
        println!("{name}:{d}");
    }
    let errors = report.errors().count();
    println!("{errors} errors, {} warnings", report.warnings().count());
    Ok(if errors > 0 { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn read_text(file: &Path) -> Result<String> {
    std::fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))
}

/// A program image, or application source compiled on the fly.
fn load_program(file: &Path) -> Result<ProbeProgram> {
    let bytes = std::fs::read(file).with_context(|| format!("reading {}", file.display()))?;
    if bytes.starts_with(&PROGRAM_MAGIC) {
        return deserialize_program(&bytes).with_context(|| format!("decoding {}", file.display()));
    }
    let text =
        String::from_utf8(bytes).map_err(|_| anyhow!("{} is neither a program image nor text", file.display()))?;
    dsl::load(&text).with_context(|| format!("compiling {}", file.display()))
}

fn rate_of(rate: Option<f64>) -> Result<Rate> {
    match rate {
        None => Ok(Rate::Unlimited),
        Some(r) if r.is_finite() && r > 0.0 => Ok(Rate::Pps(r)),
        Some(r) => bail!("rate must be positive, got {r}"),
    }
}

fn pcap_frames(path: &Path) -> Result<Vec<(u64, Vec<u8>)>> {
    let mut out = Vec::new();
    for rec in read_pcap(path).with_context(|| format!("opening {}", path.display()))? {
        match rec {
            Ok(r) => out.push((r.ts, r.data)),
            Err(e) => {
                log::warn!("{}: {e}; using the {} complete records", path.display(), out.len());
                break;
            }
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn run(
    program: &Path,
    pcap: &Path,
    rate: Option<f64>,
    publish: Option<String>,
    wait_subscribers: u64,
    real_time: bool,
    id: &str,
) -> Result<ExitCode> {
    let p = load_program(program)?;
    let app = p.name.clone();
    let frames = pcap_frames(pcap)?;
    let mut publisher = publish.map(|a| Publisher::bind(&a, id, PublisherConfig::default())).transpose()?;
    if let Some(pb) = &publisher {
        info!("publishing on {}", pb.local_addr());
        if wait_subscribers > 0 && !pb.wait_for_subscribers(wait_subscribers, Duration::from_secs(30)) {
            bail!("timed out waiting for {wait_subscribers} subscribers");
        }
    }
    let mut pipeline = Pipeline::new(p)?;
    let plan = ReplayPlan { rate: rate_of(rate)?, virtual_time: !real_time, ..ReplayPlan::default() };
    let mut out = std::io::stdout().lock();
    let stats = replay(frames, &mut pipeline, &plan, |a| {
        let payload = action_payload(&a, id, &app);
        let _ = writeln!(out, "{} {}", a.topic, String::from_utf8_lossy(&payload));
        if let Some(pb) = &mut publisher {
            let _ = pb.publish(&a.topic, a.ts, payload);
        }
    });
    if let Some(pb) = &publisher {
        pb.flush(Duration::from_secs(5));
    }
    let c = pipeline.counters();
    eprintln!(
        "{} packets ({} unparsed), {} events, {} actions, {:.0} pps{}",
        stats.packets,
        c.truncated,
        c.events_matched,
        stats.actions,
        stats.achieved_pps,
        if stats.rate_unsustainable { " (rate unsustainable)" } else { "" }
    );
    Ok(ExitCode::SUCCESS)
}

fn feed_agent(agent: &Agent, path: &Path, rate: Option<f64>) -> Result<()> {
    let frames = pcap_frames(path)?;
    let gap = match rate_of(rate)? {
        Rate::Pps(r) => Some(Duration::from_secs_f64(1.0 / r)),
        Rate::Unlimited => None,
    };
    let h = agent.handle();
    let n = frames.len();
    for (ts, f) in frames {
        h.frame(ts, f);
        if let Some(g) = gap {
            thread::sleep(g);
        }
    }
    h.sync();
    println!("fed {n} packets from {}", path.display());
    Ok(())
}

fn probe_table(rows: &[ProbeRow]) -> String {
    let mut s = format!(
        "{:<16} {:<22} {:<9} {:>7} {:<16} {:>10} {:>8} {:>8} {:>9}\n",
        "PROBE", "CONTROL", "STATE", "VERSION", "PROGRAM", "PACKETS", "ACTIONS", "ENTITIES", "LAST_HB"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<16} {:<22} {:<9} {:>7} {:<16} {:>10} {:>8} {:>8} {:>7}ms\n",
            r.probe_id,
            r.control_addr,
            r.health.to_string(),
            r.version,
            r.program.as_deref().unwrap_or("-"),
            r.packets,
            r.actions_emitted,
            r.entities,
            r.last_heartbeat_ms
        ));
    }
    s
}
