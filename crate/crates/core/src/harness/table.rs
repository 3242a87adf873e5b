use std::fmt::Write;

use super::experiment::ForgettingReport;

pub const CSV_HEADER: &str = "variant,task,checkpoint,perplexity,metric_kind,metric_value,delta";

/// Published figures, printed for orientation only. They came from a much
/// larger model and private data and are not expected to be reproduced.
const REFERENCE_NOTE: &str = "Reference (not reproducible here): PNN task-1 perplexity 22.1 -> 22.3 (delta 0.2), \
baseline degraded by 13.5 points; BLEU 0.72, code accuracy 0.85.";

/// Renders `reports` as a markdown table and a CSV file with one row per
/// task and checkpoint. A task not yet registered at a checkpoint gets a
/// row with empty values. Output depends only on the reports.
pub fn emit_table(reports: &[ForgettingReport]) -> (String, String) {
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    let mut md = String::new();
    writeln!(md, "# Perplexity and task metric per checkpoint\n").unwrap();
    writeln!(md, "{REFERENCE_NOTE}\n").unwrap();
    writeln!(
        md,
        "| variant | seed | task | checkpoint | perplexity | metric | value | delta |"
    )
    .unwrap();
    writeln!(md, "|---|---|---|---|---|---|---|---|").unwrap();
    for r in reports {
        let mut tasks: Vec<&str> = Vec::new();
        for c in &r.cells {
            if !tasks.contains(&c.task.as_str()) {
                tasks.push(&c.task);
            }
        }
        let mut checkpoints: Vec<usize> = r.cells.iter().map(|c| c.checkpoint).collect();
        checkpoints.dedup();
        for &cp in &checkpoints {
            for &task in &tasks {
                let variant = csv_field(&r.variant);
                match r.cells.iter().find(|c| c.checkpoint == cp && c.task == task) {
                    Some(c) => {
                        writeln!(
                            csv,
                            "{variant},{},{cp},{:.6},{},{:.6},{:.6}",
                            csv_field(task),
                            c.perplexity,
                            c.metric_kind,
                            c.metric_value,
                            c.delta
                        )
                        .unwrap();
                        writeln!(
                            md,
                            "| {} | {} | {task} | {cp} | {:.3} | {} | {:.3} | {:+.3} |",
                            r.variant, r.seed, c.perplexity, c.metric_kind, c.metric_value, c.delta
                        )
                        .unwrap();
                    }
                    None => {
                        writeln!(csv, "{variant},{},{cp},,,,", csv_field(task)).unwrap();
                        writeln!(md, "| {} | {} | {task} | {cp} | - | - | - | - |", r.variant, r.seed).unwrap();
                    }
                }
            }
        }
    }
    (md, csv)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::ForgettingCell;

    #[test]
    fn empty_is_header_only() {
        let (_, csv) = emit_table(&[]);
        assert_eq!(csv, format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn rows_and_quoting() {
        let cell = |checkpoint, task: &str| ForgettingCell {
            checkpoint,
            task: task.into(),
            perplexity: 2.5,
            metric_kind: "bleu".into(),
            metric_value: 0.5,
            delta: 0.0,
        };
        let r = ForgettingReport {
            variant: "a,b".into(),
            seed: 1,
            cells: vec![cell(0, "t"), cell(1, "t"), cell(1, "u")],
        };
        let (md, csv) = emit_table(&[r.clone()]);
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.contains("\"a,b\",u,0,,,,\n"));
        assert!(csv.contains("\"a,b\",t,1,2.500000,bleu,0.500000,0.000000"));
        assert_eq!(emit_table(&[r]).0, md);
    }
}
