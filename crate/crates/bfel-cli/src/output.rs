//! Run-directory layout: config copy, `metrics.csv`, `trace.csv`,
//! `summary.txt`, and `chains/` holding binary chain files plus a structured
//! text export of each.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use bfel_core::federation::{MetricsRow, RunOutput};
use bfel_core::ledger::{Block, BlockPayload, SubchainState};
use bfel_core::netsim::TraceRecord;
use bfel_core::sign::to_hex;

pub const TRACE_HEADER: &str = "time_ms,src,dst,msg_type,size_bytes";

/// One-line run summary; `key=value` pairs so it stays greppable.
pub fn summary_line(scenario: &str, seed: u64, out: &RunOutput) -> String {
    let (ratio, exposure) = out
        .metrics
        .last()
        .map(|r| (r.compression_ratio, r.exposure_ratio))
        .unwrap_or((1.0, 1.0));
    format!(
        "scenario={} seed={} rounds={} final_accuracy={:.6} total_bytes={} simulated_time_ms={} compression_ratio={:.4} exposure_ratio={:.10}",
        scenario,
        seed,
        out.metrics.len(),
        out.final_accuracy,
        out.total_bytes,
        out.total_time_ms,
        ratio,
        exposure,
    )
}

/// Writes every artifact of a finished run under `dir`.
pub fn write_run_dir(dir: &Path, config_text: &str, out: &RunOutput, summary: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.toml"), config_text)?;

    let mut metrics = String::from(MetricsRow::CSV_HEADER);
    metrics.push('\n');
    for row in &out.metrics {
        metrics.push_str(&row.csv_row());
        metrics.push('\n');
    }
    std::fs::write(dir.join("metrics.csv"), metrics)?;

    let mut trace = String::from(TRACE_HEADER);
    trace.push('\n');
    for rec in &out.trace {
        trace.push_str(&rec.csv_row());
        trace.push('\n');
    }
    std::fs::write(dir.join("trace.csv"), trace)?;

    std::fs::write(dir.join("summary.txt"), format!("{summary}\n"))?;

    if !out.training_chains.is_empty() {
        let chains_dir = dir.join("chains");
        std::fs::create_dir_all(&chains_dir)?;
        for chain in out
            .training_chains
            .iter()
            .chain(out.trading_chain.iter())
            .chain(out.main_chain.iter())
        {
            crate::chainfile::write_chain(&chains_dir.join(format!("{}.chain", chain.chain_id())), chain)?;
            std::fs::write(
                chains_dir.join(format!("{}.txt", chain.chain_id())),
                render_chain_text(chain),
            )?;
        }
    }

    if !out.log.is_empty() {
        std::fs::write(dir.join("run.log"), out.log.join("\n") + "\n")?;
    }
    Ok(())
}

/// All chain files in a run directory.
pub fn chain_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let chains_dir = dir.join("chains");
    let mut out = Vec::new();
    if chains_dir.is_dir() {
        for entry in std::fs::read_dir(&chains_dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "chain") {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn render_chain_text(chain: &SubchainState) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "chain {} kind={:?} height={} access={} writers={}",
        chain.chain_id(),
        chain.kind(),
        chain.height(),
        chain.access_list().len(),
        chain.writers().len()
    );
    for block in chain.blocks() {
        s.push_str(&render_block_text(block));
    }
    s
}

pub fn render_block_text(block: &Block) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "block {}", block.height);
    let _ = writeln!(s, "  timestamp_ms: {}", block.timestamp_ms);
    let _ = writeln!(s, "  leader: {}", block.leader_id);
    let _ = writeln!(s, "  prev_hash: {}", to_hex(&block.prev_hash));
    let _ = writeln!(s, "  merkle_root: {}", to_hex(&block.merkle_root));
    let _ = writeln!(s, "  header_hash: {}", to_hex(&block.header_hash()));
    match &block.payload {
        BlockPayload::Genesis(info) => {
            let _ = writeln!(s, "  payload: genesis chain_id={} kind={:?}", info.chain_id, info.kind);
            let _ = writeln!(
                s,
                "    access_list: {}",
                info.access_list.iter().map(|e| e.as_str()).collect::<Vec<_>>().join(" ")
            );
            let _ = writeln!(
                s,
                "    writers: {}",
                info.writers.iter().map(|e| e.as_str()).collect::<Vec<_>>().join(" ")
            );
        }
        BlockPayload::Training(p) => {
            let _ = writeln!(
                s,
                "  payload: training round={} updates={} responses={} slashes={}",
                p.round,
                p.updates.len(),
                p.responses.len(),
                p.slashes.len()
            );
            let _ = writeln!(s, "    model_digest: {}", to_hex(&p.global_model_digest));
            for u in &p.updates {
                let _ = writeln!(
                    s,
                    "    update worker={} entries={} timestamp_ms={}",
                    u.worker_id,
                    u.sparse.len(),
                    u.timestamp_ms
                );
            }
            for r in &p.responses {
                let _ = writeln!(
                    s,
                    "    response verifier={} qualified={} agreements={}",
                    r.verifier_id,
                    r.qualified.len(),
                    r.comparison.iter().filter(|(_, a)| *a).count()
                );
            }
            for sl in &p.slashes {
                let _ = writeln!(s, "    slash miner={} reason={:?} round={}", sl.miner_id, sl.reason, sl.round);
            }
        }
        BlockPayload::Trade(trades) => {
            let _ = writeln!(s, "  payload: trade records={}", trades.len());
            for t in trades {
                let _ = writeln!(
                    s,
                    "    trade seller={} buyer={} price={} model_digest={}",
                    t.seller_id,
                    t.buyer_id,
                    t.price,
                    to_hex(&t.model_digest)
                );
            }
        }
        BlockPayload::Anchor(entries) => {
            let _ = writeln!(s, "  payload: anchor records={}", entries.len());
            for e in entries {
                let _ = writeln!(
                    s,
                    "    anchor subchain={} range={}..={} root={} locator={}",
                    e.record.subchain_id,
                    e.record.from_height,
                    e.record.to_height,
                    to_hex(&e.record.anchored_root),
                    e.locator
                );
            }
        }
    }
    s
}

/// Parses a metrics CSV back into rows.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().context("empty metrics file")?;
    if header != MetricsRow::CSV_HEADER {
        anyhow::bail!("unexpected metrics header: {header}");
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            anyhow::bail!("metrics row {}: expected 9 fields", lineno + 2);
        }
        rows.push(MetricsRow {
            round: f[0].parse()?,
            global_test_accuracy: f[1].parse()?,
            bytes_this_round: f[2].parse()?,
            cumulative_bytes: f[3].parse()?,
            compression_ratio: f[4].parse()?,
            exposure_ratio: f[5].parse()?,
            qualified_count: f[6].parse()?,
            slashed_count: f[7].parse()?,
            simulated_time_ms: f[8].parse()?,
        });
    }
    Ok(rows)
}

/// Parses a trace CSV back into records.
pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().context("empty trace file")?;
    if header != TRACE_HEADER {
        anyhow::bail!("unexpected trace header: {header}");
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            anyhow::bail!("trace row {}: expected 5 fields", lineno + 2);
        }
        rows.push(TraceRecord {
            time_ms: f[0].parse()?,
            src: f[1].into(),
            dst: f[2].into(),
            msg_type: f[3].to_string(),
            size_bytes: f[4].parse()?,
        });
    }
    Ok(rows)
}

/// Parses a `key=value` summary line into pairs.
pub fn parse_summary(text: &str) -> Result<std::collections::BTreeMap<String, String>> {
    let mut out = std::collections::BTreeMap::new();
    for pair in text.split_whitespace() {
        let (k, v) = pair
            .split_once('=')
            .with_context(|| format!("bad summary token {pair}"))?;
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}
