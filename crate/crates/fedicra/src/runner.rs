//! Experiment execution and the run directory layout.
//!
//! ```text
//! <out>/resolved_config.json
//! <out>/metrics.csv
//! <out>/summary.json
//! <out>/attention.csv                 (attention enabled)
//! <out>/predictions/site<k>/test_<i>.pgm
//! <out>/checkpoints/round<r>/{phi,theta}.fws
//! <out>/final/{phi,theta}.fws, site<k>_theta.fws, site<k>_w.fws
//! ```
//!
//! Prediction PGMs hold raw class ids (0 background). Nothing in the run
//! directory depends on wall-clock time or thread count.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use fedicra_core::federation::{self, Ablation, FederationState, Report, RoundRecord, SiteEval, SiteExecutor};
use fedicra_core::segnet::{self, ForwardOptions, ModelParams, ModelVars, SiteEncoding};
use fedicra_core::synthdata::{self, SiteData};
use fedicra_core::tensor::Tape;
use serde::{Deserialize, Serialize};

use crate::config::{annotation_name, ExperimentConfig};
use crate::dataset;
use crate::error::{Error, Result};
use crate::pgm::{self, Gray};
use crate::snapshot;

pub const METRICS_HEADER: &str = "round,site,loss_pce,loss_mstree,loss_gcrf,loss_con,dsc,hd95";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flags {
    pub aa: bool,
    pub scr: bool,
    pub mstree: bool,
    pub gcrf: bool,
}

impl From<Ablation> for Flags {
    fn from(a: Ablation) -> Self {
        Self {
            aa: a.aa,
            scr: a.scr,
            mstree: a.mstree,
            gcrf: a.gcrf,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureSummary {
    pub name: String,
    pub dsc: f64,
    pub hd95: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteSummary {
    pub site: usize,
    pub annotation: String,
    pub dsc: f64,
    pub hd95: f64,
    pub structures: Vec<StructureSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Average {
    pub dsc: f64,
    pub hd95: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AaSite {
    pub site: usize,
    /// Mean aggregation weight after the last round.
    pub final_mean_w: f64,
    pub total_epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AaDiagnostics {
    pub sites: Vec<AaSite>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScrDiagnostics {
    /// Mean over site pairs of the channel-averaged absolute difference of
    /// their test-set mean attention vectors.
    pub mean_pairwise_distance: f64,
    /// Channel-averaged attention per site.
    pub site_mean_attention: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub seed: u64,
    pub rounds: usize,
    pub flags: Flags,
    pub sites: Vec<SiteSummary>,
    pub average: Average,
    pub max_simplex_error: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aa: Option<AaDiagnostics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scr: Option<ScrDiagnostics>,
}

pub struct RunResult {
    pub summary: Summary,
    pub report: Report,
    pub state: FederationState,
    pub dir: PathBuf,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(Error::io(path))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(Error::io(path))
}

/// Generates the configured sites, or loads them from `data_dir`. A fresh
/// cache is written and read back so first and later runs see the same
/// 8-bit images.
pub fn prepare_data<E: SiteExecutor>(cfg: &ExperimentConfig, exec: &E) -> Result<Vec<SiteData>> {
    let specs = cfg.site_specs();
    if let Some(dir) = &cfg.data_dir {
        if !dir.join(dataset::MANIFEST).exists() {
            let sites = generate(&specs, exec)?;
            dataset::dump(dir, &sites)?;
        }
        return dataset::load(dir, &specs);
    }
    generate(&specs, exec)
}

pub fn generate<E: SiteExecutor>(specs: &[synthdata::SiteSpec], exec: &E) -> Result<Vec<SiteData>> {
    let sites = exec
        .map_sites(specs.len(), |k| synthdata::generate_site(&specs[k]))
        .into_iter()
        .collect::<fedicra_core::Result<Vec<_>>>()?;
    Ok(sites)
}

fn csv_row(out: &mut String, round: usize, r: &federation::SiteRound) {
    let l = &r.losses;
    let _ = write!(out, "{},{},{},{},{},{},", round, r.site, l.pce, l.mstree, l.gcrf, l.con);
    match &r.eval {
        Some(e) => {
            let _ = writeln!(out, "{},{}", e.dsc, e.hd95);
        }
        None => out.push_str(",\n"),
    }
}

/// Mean attention vector of one site over `samples`.
pub fn mean_attention(params: &ModelParams, samples: &[synthdata::Sample], site: SiteEncoding) -> Result<Vec<f64>> {
    let mut acc: Vec<f64> = Vec::new();
    for s in samples {
        let mut tape = Tape::new();
        let vars = ModelVars::register(&mut tape, params, false, false);
        let x = tape.constant(s.image.clone());
        let out = segnet::forward(&mut tape, &vars, x, site, ForwardOptions { scr: true, all_sites: false })?;
        let att = out.attention.ok_or_else(|| Error::Config("attention requested without scr".into()))?;
        let v = tape.value(att).data();
        if acc.is_empty() {
            acc = vec![0.0; v.len()];
        }
        for (a, b) in acc.iter_mut().zip(v) {
            *a += b;
        }
    }
    let n = samples.len().max(1) as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

fn scr_diagnostics(attn: &[Vec<f64>]) -> ScrDiagnostics {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..attn.len() {
        for j in i + 1..attn.len() {
            let c = attn[i].len().max(1) as f64;
            total += attn[i].iter().zip(&attn[j]).map(|(a, b)| (a - b).abs()).sum::<f64>() / c;
            pairs += 1;
        }
    }
    ScrDiagnostics {
        mean_pairwise_distance: if pairs == 0 { 0.0 } else { total / pairs as f64 },
        site_mean_attention: attn.iter().map(|v| v.iter().sum::<f64>() / v.len().max(1) as f64).collect(),
    }
}

fn site_summaries(cfg: &ExperimentConfig, evals: &[SiteEval]) -> Vec<SiteSummary> {
    evals
        .iter()
        .map(|e| SiteSummary {
            site: e.site,
            annotation: annotation_name(cfg.site_specs()[e.site].annotation).into(),
            dsc: e.dsc,
            hd95: e.hd95,
            structures: e
                .structures
                .iter()
                .map(|s| StructureSummary {
                    name: s.name.into(),
                    dsc: s.dsc,
                    hd95: s.hd95,
                })
                .collect(),
        })
        .collect()
}

fn write_params(dir: &Path, params: &ModelParams) -> Result<()> {
    mkdir(dir)?;
    snapshot::write(&dir.join("phi.fws"), &params.phi)?;
    snapshot::write(&dir.join("theta.fws"), &params.theta)
}

/// Runs the experiment and writes the run directory `cfg.out_dir`.
pub fn run<E: SiteExecutor>(cfg: &ExperimentConfig, exec: &E) -> Result<RunResult> {
    let fed = cfg.federation()?;
    let dir = cfg.out_dir.clone();
    mkdir(&dir)?;
    write_text(&dir.join("resolved_config.json"), &(cfg.to_json()? + "\n"))?;
    let sites = prepare_data(cfg, exec)?;
    if cfg.output.dump_data {
        dataset::dump(&dir.join("data"), &sites)?;
    }

    let mut csv = String::from(METRICS_HEADER);
    csv.push('\n');
    let metrics_path = dir.join("metrics.csv");
    write_text(&metrics_path, &csv)?;
    let mut aa_epochs = vec![0usize; sites.len()];
    let mut final_w = vec![1.0; sites.len()];
    let observer = |state: &FederationState, record: &RoundRecord| -> fedicra_core::Result<()> {
        for s in &record.sites {
            aa_epochs[s.site] += s.aa_epochs;
            final_w[s.site] = s.mean_w;
        }
        if cfg.output.checkpoints {
            let cp = dir.join("checkpoints").join(format!("round{:04}", record.round));
            write_params(&cp, &state.global)
                .map_err(|e| fedicra_core::Error::InvalidConfig(format!("checkpoint: {}", e)))?;
        }
        Ok(())
    };
    let (state, report) = federation::run_federation(&fed, &sites, exec, observer)?;

    for record in &report.rounds {
        for s in &record.sites {
            csv_row(&mut csv, record.round, s);
        }
    }
    write_text(&metrics_path, &csv)?;

    let final_dir = dir.join("final");
    write_params(&final_dir, &state.global)?;
    for (k, s) in state.sites.iter().enumerate() {
        snapshot::write(&final_dir.join(format!("site{}_theta.fws", k)), &s.theta)?;
        snapshot::write(&final_dir.join(format!("site{}_w.fws", k)), &s.w)?;
    }

    if cfg.output.predictions {
        let preds = federation::evaluate_all(&fed, &state, &sites, exec)?;
        for (k, (_, masks)) in preds.iter().enumerate() {
            let pdir = dir.join("predictions").join(format!("site{}", k));
            mkdir(&pdir)?;
            for (sample, mask) in sites[k].test.iter().zip(masks) {
                let (_, h, w) = sample.image.dims3()?;
                let img = Gray {
                    width: w,
                    height: h,
                    pixels: mask.clone(),
                };
                pgm::write(&pdir.join(format!("test_{:04}.pgm", sample.index)), &img)?;
            }
        }
    }

    let ablation = fed.ablation;
    let attention = if ablation.scr {
        let per_site = exec
            .map_sites(sites.len(), |k| {
                let enc = SiteEncoding::new(k, fed.model.num_sites)?;
                mean_attention(&state.personalized(k, ablation), &sites[k].test, enc)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        if cfg.output.attention {
            let mut text = String::from("site,channel,attention\n");
            for (k, v) in per_site.iter().enumerate() {
                for (c, a) in v.iter().enumerate() {
                    let _ = writeln!(text, "{},{},{}", k, c, a);
                }
            }
            write_text(&dir.join("attention.csv"), &text)?;
        }
        Some(scr_diagnostics(&per_site))
    } else {
        None
    };

    let summary = Summary {
        method: mode_label(cfg),
        seed: cfg.seed,
        rounds: fed.train.rounds,
        flags: ablation.into(),
        sites: site_summaries(cfg, &report.sites),
        average: Average {
            dsc: report.average_dsc,
            hd95: report.average_hd95,
        },
        max_simplex_error: report.max_simplex_error,
        aa: ablation.aa.then(|| AaDiagnostics {
            sites: (0..sites.len())
                .map(|k| AaSite {
                    site: k,
                    final_mean_w: final_w[k],
                    total_epochs: aa_epochs[k],
                })
                .collect(),
        }),
        scr: attention,
    };
    write_text(&dir.join("summary.json"), &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    Ok(RunResult {
        summary,
        report,
        state,
        dir,
    })
}

/// `fedicra`, `fedavg`, or `custom` when the flags differ from both presets.
fn mode_label(cfg: &ExperimentConfig) -> String {
    use fedicra_core::federation::Mode;
    let a = cfg.ablation();
    if a == Mode::FedIcra.ablation() {
        "fedicra".into()
    } else if a == Mode::FedAvg.ablation() {
        "fedavg".into()
    } else {
        "custom".into()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub sites: Vec<SiteSummary>,
    pub average: Average,
}

/// Re-evaluates the final models of an existing run directory.
pub fn evaluate_run<E: SiteExecutor>(dir: &Path, exec: &E) -> Result<EvalSummary> {
    let path = dir.join("resolved_config.json");
    let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
    let mut cfg: ExperimentConfig = serde_json::from_str(&text)?;
    cfg.resolve()?;
    let fed = cfg.federation()?;
    let sites = prepare_data(&cfg, exec)?;
    let final_dir = dir.join("final");
    let phi = snapshot::read(&final_dir.join("phi.fws"))?;
    let global_theta = snapshot::read(&final_dir.join("theta.fws"))?;
    let evals = exec
        .map_sites(sites.len(), |k| -> Result<SiteEval> {
            let theta = if fed.ablation.aa {
                snapshot::read(&final_dir.join(format!("site{}_theta.fws", k)))?
            } else {
                global_theta.clone()
            };
            let params = ModelParams { phi: phi.clone(), theta };
            let enc = SiteEncoding::new(k, fed.model.num_sites)?;
            Ok(federation::evaluate(&params, &sites[k].test, sites[k].spec.task, enc, fed.ablation.scr)?.0)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let n = evals.len().max(1) as f64;
    let summary = EvalSummary {
        sites: site_summaries(&cfg, &evals),
        average: Average {
            dsc: evals.iter().map(|e| e.dsc).sum::<f64>() / n,
            hd95: evals.iter().map(|e| e.hd95).sum::<f64>() / n,
        },
    };
    write_text(&dir.join("eval.json"), &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scr_distance_of_identical_sites_is_zero() {
        let d = scr_diagnostics(&[vec![0.2, 0.4], vec![0.2, 0.4], vec![0.6, 0.4]]);
        assert!((d.mean_pairwise_distance - (0.0 + 0.2 + 0.2) / 3.0).abs() < 1e-15);
        assert_eq!(d.site_mean_attention.len(), 3);
    }
}
