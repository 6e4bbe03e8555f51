use crate::error::{Error, Result};

use super::run::RunRecord;

pub const CSV_HEADER: &str = "config_id,blocks,lk_channels,lc_channels,attention_tail,full_resolution,params,macs,rf_final,final_loss_mean,final_loss_std,diverged,wall_seconds,seeds";

fn list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("/")
}

/// Header plus one newline-terminated row per record. Losses use the
/// shortest decimal form that parses back to the same bits.
pub fn write_csv(records: &[RunRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let row = [
            r.config_id.clone(),
            list(&r.blocks),
            list(&r.lk_channels),
            list(&r.lc_channels),
            list(&r.attention_tail),
            r.full_resolution.to_string(),
            r.params.to_string(),
            r.macs.to_string(),
            r.rf_final.to_string(),
            r.final_loss_mean.to_string(),
            r.final_loss_std.to_string(),
            r.diverged.to_string(),
            format!("{:.3}", r.wall_seconds),
            r.seeds.to_string(),
        ];
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn field<T: std::str::FromStr>(line: usize, name: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Parse(format!("line {line}: bad {name} {raw:?}")))
}

fn parse_list(line: usize, name: &str, raw: &str) -> Result<Vec<usize>> {
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    raw.split('/').map(|x| field(line, name, x)).collect()
}

/// Inverse of [`write_csv`].
pub fn parse_csv(text: &str) -> Result<Vec<RunRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        Some(h) => return Err(Error::Parse(format!("unexpected CSV header {h:?}"))),
        None => return Err(Error::Parse("empty CSV document".into())),
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let n = i + 2;
            let c: Vec<&str> = l.split(',').collect();
            if c.len() != 14 {
                return Err(Error::Parse(format!("line {n}: expected 14 fields, found {}", c.len())));
            }
            Ok(RunRecord {
                config_id: c[0].to_string(),
                blocks: parse_list(n, "blocks", c[1])?,
                lk_channels: parse_list(n, "lk_channels", c[2])?,
                lc_channels: parse_list(n, "lc_channels", c[3])?,
                attention_tail: parse_list(n, "attention_tail", c[4])?,
                full_resolution: field(n, "full_resolution", c[5])?,
                params: field(n, "params", c[6])?,
                macs: field(n, "macs", c[7])?,
                rf_final: c[8].parse()?,
                final_loss_mean: field(n, "final_loss_mean", c[9])?,
                final_loss_std: field(n, "final_loss_std", c[10])?,
                diverged: field(n, "diverged", c[11])?,
                wall_seconds: field(n, "wall_seconds", c[12])?,
                seeds: field(n, "seeds", c[13])?,
            })
        })
        .collect()
}
