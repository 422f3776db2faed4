//! Consolidated experiment report: configuration, task scores, and
//! representation-similarity tables assembled from the run ledger, plus
//! the headline density-reduction figure.

use std::fs;
use std::path::Path;

use crate::checkpoint;
use crate::{Error, Result};

use super::{nonzero_total, ExperimentConfig, LedgerRow, OutDirs, RunLedger, RunVariant};

/// Fraction of the teacher's weights that pruning removed:
/// `1 − nonzero(pruned)/total(teacher)`.
pub fn density_reduction(teacher_total: usize, pruned_nonzero: usize) -> f64 {
    1.0 - pruned_nonzero as f64 / teacher_total as f64
}

/// What the reduction should be when a fraction `embedding_fraction` of
/// the weights is exempt from pruning and the rest is pruned at
/// `sparsity`: `(1 − e) · s`.
pub fn expected_reduction(embedding_fraction: f64, sparsity: f64) -> f64 {
    (1.0 - embedding_fraction) * sparsity
}

/// Everything the report needs from one ledger row, validated complete.
struct Complete {
    variant: RunVariant,
    params_total: usize,
    params_nonzero: usize,
    upstream_nted: f64,
    downstream_nted: f64,
    downstream_f1: f64,
    cka_vs_teacher: Option<f64>,
}

fn completeness(variant: RunVariant, row: &LedgerRow, missing: &mut Vec<String>) -> Option<Complete> {
    let tag = variant.tag();
    let mut need = |runs: &str, absent: bool| {
        if absent {
            missing.push(runs.to_string());
        }
    };
    need(&format!("docpress train {tag}"), row.checkpoint.is_none() || row.params_total.is_none());
    need(&format!("docpress evaluate {tag} reading test"), row.upstream_nted.is_none());
    need(&format!("docpress evaluate {tag} kie test"), row.downstream_nted.is_none());
    if variant != RunVariant::Teacher {
        need(&format!("docpress cka teacher {tag}"), row.cka_vs_teacher.is_none());
    }
    Some(Complete {
        variant,
        params_total: row.params_total?,
        params_nonzero: row.params_nonzero?,
        upstream_nted: row.upstream_nted?,
        downstream_nted: row.downstream_nted?,
        downstream_f1: row.downstream_f1?,
        cka_vs_teacher: row.cka_vs_teacher,
    })
}

/// Re-derive the parameter counts from the checkpoint on disk and make
/// sure the ledger still describes it.
fn cross_check(out: &Path, row: &Complete, checkpoint_rel: &str) -> Result<()> {
    let (model, _) = checkpoint::load(&out.join(checkpoint_rel))?;
    let total = model.count_params().total;
    let nonzero = nonzero_total(&model);
    if total != row.params_total || nonzero != row.params_nonzero {
        return Err(Error::Contract(format!(
            "ledger says {} has {}/{} nonzero/total weights but its checkpoint holds {nonzero}/{total}; \
             the checkpoint was retrained after the ledger row was written",
            row.variant, row.params_nonzero, row.params_total
        )));
    }
    Ok(())
}

/// Assemble the report tables from the ledger. Every variant present in
/// the ledger must be fully evaluated; otherwise the error lists each
/// command still to run. Returns the rendered markdown.
pub fn cmd_report(cfg: &ExperimentConfig, out: &Path) -> Result<String> {
    cfg.validate()?;
    let dirs = OutDirs::new(out);
    let ledger = RunLedger::load(&dirs.ledger())?;
    if ledger.rows.is_empty() {
        return Err(Error::Contract(
            "ledger is empty; train and evaluate at least one variant first".to_string(),
        ));
    }

    let mut missing = Vec::new();
    let mut rows = Vec::new();
    for variant in RunVariant::ALL {
        if let Some(raw) = ledger.row(variant) {
            if let Some(complete) = completeness(variant, raw, &mut missing) {
                cross_check(out, &complete, raw.checkpoint.as_deref().unwrap())?;
                rows.push(complete);
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Contract(format!(
            "ledger is incomplete; still to run:\n  {}",
            missing.join("\n  ")
        )));
    }

    let mut config_csv = String::from("variant,params_total,params_nonzero,density\n");
    let mut upstream_csv = String::from("variant,nted_accuracy\n");
    let mut downstream_csv = String::from("variant,nted_accuracy,field_f1\n");
    let mut cka_csv = String::from("variant,cka_vs_teacher\n");
    for r in &rows {
        let density = r.params_nonzero as f64 / r.params_total as f64;
        config_csv.push_str(&format!(
            "{},{},{},{}\n",
            r.variant, r.params_total, r.params_nonzero, density
        ));
        upstream_csv.push_str(&format!("{},{}\n", r.variant, r.upstream_nted));
        downstream_csv.push_str(&format!("{},{},{}\n", r.variant, r.downstream_nted, r.downstream_f1));
        if let Some(index) = r.cka_vs_teacher {
            cka_csv.push_str(&format!("{},{}\n", r.variant, index));
        }
    }

    let headline = {
        let teacher = rows.iter().find(|r| r.variant == RunVariant::Teacher);
        let pruned = rows.iter().find(|r| r.variant == RunVariant::Pruned);
        match (teacher, pruned) {
            (Some(t), Some(p)) => Some(density_reduction(t.params_total, p.params_nonzero)),
            _ => None,
        }
    };

    let mut md = String::from("# Compression lab report\n\n## Model configurations\n\n");
    md.push_str("| variant | params | nonzero | density |\n|---|---|---|---|\n");
    for r in &rows {
        md.push_str(&format!(
            "| {} | {} | {} | {:.6} |\n",
            r.variant,
            r.params_total,
            r.params_nonzero,
            r.params_nonzero as f64 / r.params_total as f64
        ));
    }
    if let Some(h) = headline {
        md.push_str(&format!(
            "\nDensity reduction vs teacher: **{h:.4}** (1 − nonzero(pruned)/total(teacher))\n"
        ));
    }
    md.push_str("\n## Reading task (upstream)\n\n| variant | N-TED accuracy |\n|---|---|\n");
    for r in &rows {
        md.push_str(&format!("| {} | {:.4} |\n", r.variant, r.upstream_nted));
    }
    md.push_str("\n## Extraction task (downstream)\n\n| variant | N-TED accuracy | field F1 |\n|---|---|---|\n");
    for r in &rows {
        md.push_str(&format!("| {} | {:.4} | {:.4} |\n", r.variant, r.downstream_nted, r.downstream_f1));
    }
    md.push_str("\n## Representation similarity vs teacher\n\n| variant | global CKA index |\n|---|---|\n");
    for r in &rows {
        if let Some(index) = r.cka_vs_teacher {
            md.push_str(&format!("| {} | {:.4} |\n", r.variant, index));
        }
    }

    let report = dirs.report_dir();
    fs::create_dir_all(&report)?;
    fs::write(report.join("config.csv"), &config_csv)?;
    fs::write(report.join("upstream.csv"), &upstream_csv)?;
    fs::write(report.join("downstream.csv"), &downstream_csv)?;
    fs::write(report.join("cka.csv"), &cka_csv)?;
    fs::write(report.join("report.md"), &md)?;
    Ok(md)
}
