use std::fmt::Write;

use awb_core::pipeline::EpochRecord;

pub const CSV_HEADER: &str =
    "epoch,phase,loss_total,loss_hard_ce,loss_soft_ce,loss_tri,k,inertia,mAP,cmc1,cmc5,cmc10,pair_diff,wall_seconds";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per epoch under a fixed header. Missing metrics are empty
/// fields; wall time is written as 0 unless `wall_clock` is set, so the
/// table is reproducible from the configuration alone.
pub fn metrics_csv(records: &[EpochRecord], wall_clock: bool) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let cmc = r.cmc.map(|c| c.map(|v| v.to_string())).unwrap_or_default();
        let l = &r.losses;
        let wall = if wall_clock { r.wall_seconds } else { 0.0 };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.phase,
            l.total,
            l.hard_ce,
            l.soft_ce,
            l.tri,
            r.k,
            opt(r.inertia),
            opt(r.map),
            cmc[0],
            cmc[1],
            cmc[2],
            opt(r.pair_diff),
            wall
        );
    }
    out
}
