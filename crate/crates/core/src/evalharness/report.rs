use std::fmt::Write;

use super::{ClassificationReport, PccReport, RetrievalReport, SweepRow};

pub const SWEEP_CSV_HEADER: &str = "alpha,top1,mean_pcc,r_excluded";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_CSV_HEADER}\n");
    for r in rows {
        writeln!(out, "{:.2},{:.6},{:.6},{}", r.alpha, r.top1, r.mean_pcc, r.r_excluded).unwrap();
    }
    out
}

pub fn sweep_text(rows: &[SweepRow]) -> String {
    let mut out = format!("{:>6}  {:>8}  {:>9}  {:>10}\n", "alpha", "top1(%)", "mean_pcc", "r_excluded");
    for r in rows {
        writeln!(
            out,
            "{:>6.2}  {:>8.2}  {:>9.4}  {:>10}",
            r.alpha,
            100.0 * r.top1,
            r.mean_pcc,
            r.r_excluded
        )
        .unwrap();
    }
    out
}

impl ClassificationReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "objective   {}", self.objective).unwrap();
        writeln!(out, "images      {}", self.num_images).unwrap();
        writeln!(out, "top1        {:.2}%", 100.0 * self.top1).unwrap();
        writeln!(out, "{:>6}  {:>8}", "class", "acc(%)").unwrap();
        for (k, a) in self.per_class_accuracy.iter().enumerate() {
            match a {
                Some(a) => writeln!(out, "{k:>6}  {:>8.2}", 100.0 * a).unwrap(),
                None => writeln!(out, "{k:>6}  {:>8}", "-").unwrap(),
            }
        }
        out
    }
}

impl PccReport {
    pub fn to_text(&self) -> String {
        format!(
            "pair        {}\nmean_pcc    {:.4}\nexcluded    {}\n",
            self.pair, self.mean_pcc, self.excluded
        )
    }
}

impl RetrievalReport {
    pub fn to_text(&self) -> String {
        let mut out = format!("{:?} ({} queries)\n", self.direction, self.queries);
        for (k, r) in &self.recalls {
            writeln!(out, "  R@{k:<3} {:>7.2}%", 100.0 * r).unwrap();
        }
        out
    }
}
