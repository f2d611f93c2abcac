//! Artifact verification: revalidates chains, anchors, and trades, and
//! recomputes every summary number from the raw trace and chain files.
//!
//! The run config is the root of trust here: it regenerates the identity
//! registry (so signatures can be rechecked), the datasets, and the model
//! init, which is enough to replay the whole training trajectory out of the
//! committed blocks.

use std::path::Path;

use anyhow::{Context, Result};

use bfel_core::consensus::compute_global_update;
use bfel_core::federation::{
    build_authority, initial_global_model, MSG_ANCHOR, MSG_DENSE_UPDATE, MSG_GLOBAL_UPDATE,
    MSG_LOCAL_UPDATE, MSG_ROUND_FAILED, MSG_TRADE,
};
use bfel_core::ledger::{
    anchored_up_to, main_chain_anchors, verify_anchor, BlockPayload, ChainKind, SubchainState,
};
use bfel_core::model::evaluate_accuracy;
use bfel_core::netsim::communication_cost;

use crate::config::ExperimentConfig;
use crate::output::{chain_paths, parse_summary, read_metrics, read_trace};

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Default)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    fn pass(&mut self, name: &str, detail: impl Into<String>) {
        self.checks.push(Check { name: name.to_string(), passed: true, detail: detail.into() });
    }

    fn fail(&mut self, name: &str, detail: impl Into<String>) {
        self.checks.push(Check { name: name.to_string(), passed: false, detail: detail.into() });
    }

    fn check(&mut self, name: &str, ok: bool, detail: impl Into<String>) {
        if ok {
            self.pass(name, detail);
        } else {
            self.fail(name, detail);
        }
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            s.push_str(&format!(
                "{} {}: {}\n",
                if c.passed { "ok  " } else { "FAIL" },
                c.name,
                c.detail
            ));
        }
        s.push_str(&format!(
            "{} of {} checks passed\n",
            self.checks.iter().filter(|c| c.passed).count(),
            self.checks.len()
        ));
        s
    }
}

/// Revalidates everything in a run directory.
pub fn verify_run_dir(dir: &Path) -> Result<Report> {
    let mut report = Report::default();

    let config_path = dir.join("config.toml");
    let config = ExperimentConfig::load(&config_path)?;
    let run_cfg = config.to_run_config(dir)?;
    report.pass("config", format!("parsed {}", config_path.display()));

    let authority = build_authority(&run_cfg).map_err(|e| anyhow::anyhow!("{e}"))?;

    // Chains: decode, validate, sort by kind.
    let mut training: Vec<SubchainState> = Vec::new();
    let mut trading: Option<SubchainState> = None;
    let mut main: Option<SubchainState> = None;
    for path in chain_paths(dir)? {
        let chain = crate::chainfile::read_chain(&path)?;
        let validity = chain.validate_chain(Some(&authority));
        report.check(
            "chain-valid",
            validity.is_valid(),
            format!("{}: {:?}", chain.chain_id(), validity),
        );
        match chain.kind() {
            ChainKind::Training => training.push(chain),
            ChainKind::Trading => trading = Some(chain),
            ChainKind::Main => main = Some(chain),
        }
    }
    training.sort_by(|a, b| a.chain_id().cmp(b.chain_id()));

    let scenario = config.scenario();
    if scenario.uses_consensus() {
        let main = main.as_ref().context("main chain file missing")?;

        // The main chain may hold only anchor payloads.
        let clean = main
            .blocks()
            .iter()
            .skip(1)
            .all(|b| matches!(b.payload, BlockPayload::Anchor(_)));
        report.check("main-chain-payloads", clean, "main chain stores anchor records only");

        // Every anchor recomputes; ranges are contiguous per subchain.
        let mut all_chains: Vec<&SubchainState> = training.iter().collect();
        if let Some(t) = &trading {
            all_chains.push(t);
        }
        let mut anchors_ok = true;
        let mut detail = String::new();
        let mut next_expected: std::collections::BTreeMap<&str, u64> = Default::default();
        for entry in main_chain_anchors(main) {
            let rec = &entry.record;
            let chain = all_chains.iter().find(|c| c.chain_id() == rec.subchain_id);
            match chain {
                Some(chain) => {
                    let expected_from = next_expected.get(rec.subchain_id.as_str()).copied().unwrap_or(0);
                    if rec.from_height != expected_from {
                        anchors_ok = false;
                        detail = format!("{}: gap before height {}", rec.subchain_id, rec.from_height);
                        break;
                    }
                    match verify_anchor(rec, chain) {
                        Ok(true) => {}
                        _ => {
                            anchors_ok = false;
                            detail = format!("{}: root mismatch at {}..={}", rec.subchain_id, rec.from_height, rec.to_height);
                            break;
                        }
                    }
                    next_expected.insert(chain.chain_id(), rec.to_height + 1);
                }
                None => {
                    anchors_ok = false;
                    detail = format!("anchor names unknown chain {}", rec.subchain_id);
                    break;
                }
            }
        }
        if anchors_ok {
            detail = format!("{} anchor records verified", main_chain_anchors(main).len());
        }
        report.check("anchors", anchors_ok, detail);

        // Every training head is anchored.
        for chain in &training {
            report.check(
                "head-anchored",
                anchored_up_to(main, chain.chain_id()) == Some(chain.height()),
                format!("{} head {}", chain.chain_id(), chain.height()),
            );
        }

        // Trades: signatures and anchored model digests.
        if let Some(trading) = &trading {
            let refs: Vec<&SubchainState> = training.iter().collect();
            let mut trades_ok = true;
            let mut n = 0;
            for block in trading.blocks().iter().skip(1) {
                if let BlockPayload::Trade(trades) = &block.payload {
                    for t in trades {
                        n += 1;
                        let signing = bfel_core::ledger::TradeRecord::signing_bytes(
                            &t.seller_id,
                            &t.buyer_id,
                            &t.model_digest,
                            t.price,
                            t.timestamp_ms,
                        );
                        if !authority.verify(&t.seller_id, &signing, &t.seller_signature)
                            || !authority.verify(&t.buyer_id, &signing, &t.buyer_signature)
                            || !bfel_core::ledger::model_digest_anchored(&t.model_digest, main, &refs)
                        {
                            trades_ok = false;
                        }
                    }
                }
            }
            report.check("trades", trades_ok, format!("{n} trade record(s) verified"));
        }

        // Model replay: rebuild each publisher's trajectory from its chain
        // and recheck the committed digests.
        let (train, test) = crate::dataset::prepare(&config.dataset, dir, config.seed)?;
        let spec = run_cfg.model.spec(train.feature_dim(), train.num_classes() as usize);
        for (p, chain) in training.iter().enumerate() {
            let mut model = initial_global_model(&run_cfg, &train, &test, p)
                .map_err(|e| anyhow::anyhow!("{e}"))?;
            let mut ok = true;
            let mut detail = String::new();
            for block in chain.blocks().iter().skip(1) {
                model = compute_global_update(block, &model, run_cfg.learning_rate)
                    .map_err(|e| anyhow::anyhow!("{e}"))?;
                if let BlockPayload::Training(pl) = &block.payload {
                    if model.digest() != pl.global_model_digest {
                        ok = false;
                        detail = format!("digest mismatch at height {}", block.height);
                        break;
                    }
                }
            }
            if ok {
                detail = format!("{} blocks replayed, digests match", chain.height());
            }
            report.check("model-replay", ok, format!("{}: {detail}", chain.chain_id()));

            if p == 0 {
                let acc = evaluate_accuracy(spec, &model, &test.all()).map_err(|e| anyhow::anyhow!("{e}"))?;
                let summary = parse_summary(&std::fs::read_to_string(dir.join("summary.txt"))?)?;
                let reported: f64 = summary
                    .get("final_accuracy")
                    .context("summary missing final_accuracy")?
                    .parse()?;
                report.check(
                    "final-accuracy",
                    (acc - reported).abs() < 5e-7,
                    format!("replayed {acc:.6} vs reported {reported:.6}"),
                );
            }
        }
    }

    // Trace and metrics reconciliation.
    let trace = read_trace(&dir.join("trace.csv"))?;
    let metrics = read_metrics(&dir.join("metrics.csv"))?;
    let summary = parse_summary(&std::fs::read_to_string(dir.join("summary.txt"))?)?;

    let trace_bytes: u64 = trace.iter().map(|r| r.size_bytes).sum();
    let reported_bytes: u64 = summary.get("total_bytes").context("summary missing total_bytes")?.parse()?;
    report.check(
        "total-bytes",
        trace_bytes == reported_bytes,
        format!("trace {trace_bytes} vs summary {reported_bytes}"),
    );

    // Exposure is exactly the reciprocal of the compression ratio.
    let reciprocal_ok = metrics
        .iter()
        .all(|r| (r.exposure_ratio - 1.0 / r.compression_ratio).abs() < 1e-12);
    report.check(
        "exposure-reciprocal",
        reciprocal_ok,
        "exposure_ratio = 1/compression_ratio on every row",
    );

    if run_cfg.publishers == 1 {
        // Per-publisher byte accounting: everything except the synthesized
        // cross-chain records came from publisher 0's queue.
        let queue_bytes: u64 = trace
            .iter()
            .filter(|r| r.msg_type != MSG_ANCHOR && r.msg_type != MSG_TRADE)
            .map(|r| r.size_bytes)
            .sum();
        let last = metrics.last().context("metrics file has no rows")?;
        report.check(
            "metrics-bytes",
            queue_bytes == last.cumulative_bytes,
            format!("trace {queue_bytes} vs metrics {}", last.cumulative_bytes),
        );

        // Critical-path time recomputation from the trace (only well-defined
        // without jitter or dropped rounds).
        let had_failures = trace.iter().any(|r| r.msg_type == MSG_ROUND_FAILED);
        if !had_failures && run_cfg.cost.jitter_ms == 0 {
            let cost = communication_cost(
                &trace,
                &run_cfg.cost,
                &[MSG_LOCAL_UPDATE, MSG_DENSE_UPDATE],
                &[MSG_GLOBAL_UPDATE, MSG_ROUND_FAILED],
                scenario.uses_consensus(),
            );
            report.check(
                "simulated-time",
                cost.total_time_ms == last.simulated_time_ms,
                format!("recomputed {} vs metrics {}", cost.total_time_ms, last.simulated_time_ms),
            );
            report.check(
                "round-count",
                cost.rounds == metrics.len() as u64,
                format!("trace shows {} rounds, metrics {}", cost.rounds, metrics.len()),
            );
        }

        // Transport-log reconciliation: recover transmitted entry counts
        // from upload message sizes and compare with the metrics ratio.
        if scenario.uses_compression() {
            let mut entries: u64 = 0;
            let mut parse_ok = true;
            for r in trace.iter().filter(|r| r.msg_type == MSG_LOCAL_UPDATE) {
                // tag(1) + str(src)(4+len) + round(4) + bytes(sparse)(4+12+12e) + ts(8) + sig(32)
                let overhead = 1 + 4 + r.src.as_str().len() as u64 + 4 + 4 + 12 + 8 + 32;
                if r.size_bytes < overhead || !(r.size_bytes - overhead).is_multiple_of(12) {
                    parse_ok = false;
                    break;
                }
                entries += (r.size_bytes - overhead) / 12;
            }
            let last = metrics.last().context("metrics file has no rows")?;
            let dim = spec_param_count(&config, dir)?;
            let slots = last.round as u64 * run_cfg.workers as u64;
            let ratio_from_trace = (dim * slots) as f64 / entries.max(1) as f64;
            report.check(
                "transport-log-ratio",
                parse_ok && (ratio_from_trace - last.compression_ratio).abs() < 1e-9 * last.compression_ratio.max(1.0),
                format!(
                    "bytes-derived ratio {ratio_from_trace:.4} vs metrics {:.4}",
                    last.compression_ratio
                ),
            );
        }
    }

    // Summary time cross-check.
    let reported_time: u64 = summary
        .get("simulated_time_ms")
        .context("summary missing simulated_time_ms")?
        .parse()?;
    let metrics_time = metrics.last().map(|r| r.simulated_time_ms).unwrap_or(0);
    if run_cfg.publishers == 1 {
        report.check(
            "summary-time",
            reported_time == metrics_time,
            format!("summary {reported_time} vs metrics {metrics_time}"),
        );
    }

    Ok(report)
}

fn spec_param_count(config: &ExperimentConfig, dir: &Path) -> Result<u64> {
    let (train, _) = crate::dataset::prepare(&config.dataset, dir, config.seed)?;
    let run_cfg = config.to_run_config(dir)?;
    Ok(run_cfg.model.spec(train.feature_dim(), train.num_classes() as usize).param_count() as u64)
}
