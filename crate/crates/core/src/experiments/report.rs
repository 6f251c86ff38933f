use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::delta::{delta_table, Baseline, DeltaTable};
use crate::corpus::{Dimension, SplitTask};
use crate::error::{Error, Result};
use crate::finetune::{BaseModel, ResultRecord, SpecDomain, Subset, Task};
use crate::specialize::Method;

/// Fails when one country's records were produced from different corpora.
pub fn check_digests(records: &[ResultRecord]) -> Result<()> {
    let mut seen: BTreeMap<(&str, Dimension, SplitTask), &str> = BTreeMap::new();
    for r in records {
        let key = (r.country.as_str(), r.dimension, r.dataset);
        match seen.get(&key) {
            Some(&d) if d != r.corpus_digest => {
                return Err(Error::DigestMismatch(format!(
                    "{} {} {} results come from corpora {} and {}",
                    r.country, r.dimension, r.dataset, d, r.corpus_digest
                )))
            }
            Some(_) => {}
            None => {
                seen.insert(key, &r.corpus_digest);
            }
        }
    }
    Ok(())
}

fn points(v: f64) -> String {
    format!("{v:.2}")
}

/// Seed-averaged F1 per (country, dimension, base model, method, domain)
/// row and (task, subset) column.
fn f1_table(records: &[ResultRecord]) -> String {
    type Row<'a> = (&'a str, Dimension, BaseModel, Method, SpecDomain);
    let mut cells: BTreeMap<(Row, (Task, SplitTask, Subset)), Vec<f64>> = BTreeMap::new();
    let mut columns = BTreeSet::new();
    for r in records {
        let col = (r.task, r.dataset, r.subset);
        columns.insert(col);
        cells
            .entry(((r.country.as_str(), r.dimension, r.base_model, r.method, r.spec_domain), col))
            .or_default()
            .push(100.0 * r.f1);
    }
    let rows: BTreeSet<Row> = cells.keys().map(|(r, _)| *r).collect();
    let mut out = String::from("country\tdimension\tbase_model\tmethod\tspec_domain");
    for (task, dataset, subset) in &columns {
        let _ = write!(out, "\t{task}:{dataset}:{subset}");
    }
    out.push('\n');
    for row in rows {
        let (country, dim, base, method, domain) = row;
        let _ = write!(out, "{country}\t{dim}\t{}\t{method}\t{}", base.as_str(), domain.as_str());
        for col in &columns {
            match cells.get(&(row, *col)) {
                Some(v) => {
                    let _ = write!(out, "\t{}", points(v.iter().sum::<f64>() / v.len() as f64));
                }
                None => out.push_str("\tNA"),
            }
        }
        out.push('\n');
    }
    out
}

fn delta_tsv(table: &DeltaTable) -> String {
    let mut out = String::from(
        "country\tdimension\ttask\tdataset\tbase_model\tmethod\tspec_domain\tsubset\tcell_f1\tbaseline_f1\tdelta\tseeds\n",
    );
    for r in &table.rows {
        let k = &r.key;
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            k.country,
            k.dimension,
            k.task,
            k.dataset,
            k.base_model.as_str(),
            k.method,
            k.spec_domain.as_str(),
            k.subset,
            points(r.cell_f1),
            points(r.baseline_f1),
            points(r.delta),
            r.cell_seeds
        );
    }
    out
}

/// Writes `f1_table.tsv`, `delta_vs_vanilla.tsv` and `delta_out_vs_in.tsv`
/// under `dir`, returning the written paths.
pub fn write_report(records: &[ResultRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        return Err(Error::InsufficientData("results store holds no records".into()));
    }
    check_digests(records)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = [
        ("f1_table.tsv", f1_table(records)),
        ("delta_vs_vanilla.tsv", delta_tsv(&delta_table(records, Baseline::Vanilla))),
        ("delta_out_vs_in.tsv", delta_tsv(&delta_table(records, Baseline::InDomain))),
    ];
    let mut written = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
