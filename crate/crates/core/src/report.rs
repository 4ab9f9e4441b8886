//! Run-log rendering: the per-round CSV, the newline-delimited decision log,
//! and the summary table with communication-cost accounting. All output is
//! byte-deterministic given the same records.

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::fed::RoundRecord;

pub const CSV_HEADER: &str =
    "round,client,rank1,map,pruning_ratio,klaw,weight,upload_bytes,download_bytes";

pub fn render_rounds_csv(records: &[RoundRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        for c in &r.clients {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}\n",
                r.round,
                c.client_id,
                c.rank1,
                c.map,
                c.pruning_ratio,
                c.klaw_raw,
                c.weight,
                c.upload_bytes,
                c.download_bytes
            ));
        }
    }
    out
}

pub fn render_decisions(records: &[RoundRecord]) -> String {
    let mut out = String::new();
    for r in records {
        for c in &r.clients {
            out.push_str(&format!(
                "round={} client={} rank1={:.4} decision={}\n",
                r.round, c.client_id, c.rank1, c.decision
            ));
        }
    }
    out
}

/// One parsed CSV data row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub round: usize,
    pub client: usize,
    pub rank1: f64,
    pub map: f64,
    pub pruning_ratio: f64,
    pub klaw: f64,
    pub weight: f64,
    pub upload_bytes: u64,
    pub download_bytes: u64,
}

pub fn parse_rounds_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(Error::InvalidParameter(format!(
                "unexpected CSV header {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(Error::InvalidParameter(format!(
                "CSV line {} has {} fields",
                n + 2,
                fields.len()
            )));
        }
        let bad = |what: &str| Error::InvalidParameter(format!("CSV line {}: bad {what}", n + 2));
        rows.push(CsvRow {
            round: fields[0].parse().map_err(|_| bad("round"))?,
            client: fields[1].parse().map_err(|_| bad("client"))?,
            rank1: fields[2].parse().map_err(|_| bad("rank1"))?,
            map: fields[3].parse().map_err(|_| bad("map"))?,
            pruning_ratio: fields[4].parse().map_err(|_| bad("pruning_ratio"))?,
            klaw: fields[5].parse().map_err(|_| bad("klaw"))?,
            weight: fields[6].parse().map_err(|_| bad("weight"))?,
            upload_bytes: fields[7].parse().map_err(|_| bad("upload_bytes"))?,
            download_bytes: fields[8].parse().map_err(|_| bad("download_bytes"))?,
        });
    }
    Ok(rows)
}

/// Per-client communication totals against the analytic dense baseline
/// (`rounds * 4 bytes * param_count` in each direction, no mask overhead).
#[derive(Debug, Clone, PartialEq)]
pub struct ClientSummary {
    pub client: usize,
    pub final_rank1: f64,
    pub final_map: f64,
    pub final_pruning_ratio: f64,
    pub upload_bytes: u64,
    pub download_bytes: u64,
    pub cc_reduction_pct: f64,
}

pub fn summarize_rows(cfg: &ExperimentConfig, rows: &[CsvRow]) -> Result<Vec<ClientSummary>> {
    if rows.is_empty() {
        return Err(Error::EmptyInput("summary rows"));
    }
    let dense_per_round = 4 * cfg.net_config().param_count() as u64;
    let mut clients: Vec<usize> = rows.iter().map(|r| r.client).collect();
    clients.sort_unstable();
    clients.dedup();
    let mut out = Vec::with_capacity(clients.len());
    for &client in &clients {
        let mine: Vec<&CsvRow> = rows.iter().filter(|r| r.client == client).collect();
        let last = mine
            .iter()
            .max_by_key(|r| r.round)
            .expect("client has rows");
        let upload: u64 = mine.iter().map(|r| r.upload_bytes).sum();
        let download: u64 = mine.iter().map(|r| r.download_bytes).sum();
        let baseline = 2 * dense_per_round * mine.len() as u64;
        let reduction = 100.0 * (1.0 - (upload + download) as f64 / baseline as f64);
        out.push(ClientSummary {
            client,
            final_rank1: last.rank1,
            final_map: last.map,
            final_pruning_ratio: last.pruning_ratio,
            upload_bytes: upload,
            download_bytes: download,
            cc_reduction_pct: reduction,
        });
    }
    Ok(out)
}

/// The summary table: one line per client plus the experiment totals.
pub fn render_summary(cfg: &ExperimentConfig, rows: &[CsvRow]) -> Result<String> {
    let summaries = summarize_rows(cfg, rows)?;
    let dense_per_round = 4 * cfg.net_config().param_count() as u64;
    let mut out = String::new();
    out.push_str("client,final_rank1,final_map,final_pruning_ratio,upload_bytes,download_bytes,total_cc,cc_reduction_pct\n");
    let mut total_up = 0u64;
    let mut total_down = 0u64;
    let mut total_rounds = 0u64;
    for s in &summaries {
        total_up += s.upload_bytes;
        total_down += s.download_bytes;
        total_rounds += rows.iter().filter(|r| r.client == s.client).count() as u64;
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{},{},{},{:.2}\n",
            s.client,
            s.final_rank1,
            s.final_map,
            s.final_pruning_ratio,
            s.upload_bytes,
            s.download_bytes,
            s.upload_bytes + s.download_bytes,
            s.cc_reduction_pct
        ));
    }
    let baseline = 2 * dense_per_round * total_rounds;
    let total = total_up + total_down;
    let mean_rank1: f64 =
        summaries.iter().map(|s| s.final_rank1).sum::<f64>() / summaries.len() as f64;
    let mean_map: f64 = summaries.iter().map(|s| s.final_map).sum::<f64>() / summaries.len() as f64;
    out.push_str(&format!(
        "total,{:.6},{:.6},,{},{},{},{:.2}\n",
        mean_rank1,
        mean_map,
        total_up,
        total_down,
        total,
        100.0 * (1.0 - total as f64 / baseline as f64)
    ));
    out.push_str(&format!(
        "# dense baseline: {} bytes per direction per round per client\n",
        dense_per_round
    ));
    Ok(out)
}
