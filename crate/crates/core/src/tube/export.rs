use std::io::Write;

use super::BoundSchedule;
use crate::error::Result;

/// CSV with columns `t, K, p, xhat_i..., lo_i..., hi_i...`.
///
/// `comment` lines are written first, each prefixed with `# `.
pub fn write_schedule_csv<W: Write>(mut w: W, schedule: &BoundSchedule, comment: &[String]) -> Result<()> {
    for c in comment {
        writeln!(w, "# {c}")?;
    }
    let mut wr = csv::Writer::from_writer(w);
    let n = schedule.steps.first().map_or(0, |s| s.center.len());
    let mut header = vec!["t".to_string(), "K".to_string(), "p".to_string()];
    for prefix in ["xhat", "lo", "hi"] {
        header.extend((1..=n).map(|i| format!("{prefix}_{i}")));
    }
    wr.write_record(&header)?;
    for s in &schedule.steps {
        let mut row = vec![s.t.to_string(), s.k.to_string(), s.p.to_string()];
        row.extend(s.center.iter().map(f64::to_string));
        row.extend(s.region.lower().iter().map(f64::to_string));
        row.extend(s.region.upper().iter().map(f64::to_string));
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}
