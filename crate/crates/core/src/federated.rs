//! In-process simulation of the multi-site estimation protocol.
//!
//! L source sites and one target site exchange only serialized fitted
//! models, density-ratio models, and bias-term statistics; raw source rows
//! never leave their site. Sites are in-process actors running on scoped
//! threads with the coordinator enforcing phase barriers; every cross-site
//! payload passes through real serialization, so the protocol exercises the
//! byte boundary without network nondeterminism.
//!
//! The resulting model is bit-identical to the monolithic pipeline on the
//! same inputs and seeds: both paths share the fitting kernels, the seed
//! derivation, and the Gram assembly, and predictor JSON round-trips are
//! bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Half, SourceGroup, TargetSample};
use crate::drl::{
    assemble_model, fit_site, resolve_split, DRLModel, FitConfig, ShiftMode, SolverInfo,
};
use crate::error::{Error, Result};
use crate::gamma::{
    assemble_bias_corrected, bias_term_column, plugin_gamma, psd_repair, BiasTermMatrix,
    Provenance,
};
use crate::learners::{FitScope, FittedPredictor};
use crate::ratio::DensityRatioModel;
use crate::weights::solve_weights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    PredictorBundle,
    RatioBundle,
    BiasTerms,
    TargetCovariates,
    GammaRequest,
    WeightResult,
}

/// Protocol phases in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    LocalFits,
    Broadcast,
    BiasTermComputation,
    Transmit,
    Assembly,
    WeightSolve,
}

/// One cross-site message: serialized payload plus routing metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteMessage {
    pub kind: MessageKind,
    pub sender: String,
    pub receiver: String,
    pub payload: Vec<u8>,
    pub phase: Phase,
}

impl SiteMessage {
    pub fn byte_size(&self) -> usize {
        self.payload.len()
    }
}

/// Metadata-only view used for the JSONL export.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MessageMeta {
    pub kind: MessageKind,
    pub sender: String,
    pub receiver: String,
    pub byte_size: usize,
    pub phase: Phase,
}

/// Ordered transcript of every message exchanged in a run.
#[derive(Debug, Clone, Default)]
pub struct TranscriptLog {
    pub messages: Vec<SiteMessage>,
}

impl TranscriptLog {
    pub fn push(&mut self, msg: SiteMessage) {
        self.messages.push(msg);
    }

    pub fn count(&self, kind: MessageKind) -> usize {
        self.messages.iter().filter(|m| m.kind == kind).count()
    }

    /// Phases must appear in protocol order.
    pub fn phases_ordered(&self) -> bool {
        self.messages.windows(2).all(|w| w[0].phase <= w[1].phase)
    }

    pub fn to_jsonl(&self) -> String {
        self.messages
            .iter()
            .map(|m| {
                serde_json::to_string(&MessageMeta {
                    kind: m.kind,
                    sender: m.sender.clone(),
                    receiver: m.receiver.clone(),
                    byte_size: m.byte_size(),
                    phase: m.phase,
                })
                .expect("metadata serializes")
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_jsonl() + "\n")?;
        Ok(())
    }
}

fn site_name(l: usize) -> String {
    format!("site-{l}")
}

#[derive(Serialize, Deserialize)]
struct BiasColumns {
    group_id: usize,
    a: Vec<f64>,
    b: Vec<f64>,
}

fn to_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    Ok(serde_json::to_vec(v)?)
}

fn from_bytes<'a, T: Deserialize<'a>>(b: &'a [u8]) -> Result<T> {
    Ok(serde_json::from_slice(b)?)
}

/// Run the full protocol and return the aggregated model together with the
/// message transcript. Under `shift_mode = none` the target-covariates
/// broadcast is skipped entirely.
pub fn run_protocol(
    groups: &[SourceGroup],
    target: &TargetSample,
    config: &FitConfig,
) -> Result<(DRLModel, TranscriptLog)> {
    crate::drl::validate_inputs(groups, target)?;
    let l = groups.len();
    let mut log = TranscriptLog::default();
    let shift = matches!(config.shift_mode, ShiftMode::LogisticRatio { .. });

    let resolved: Vec<SourceGroup> = groups
        .iter()
        .map(|g| resolve_split(g, config))
        .collect::<Result<_>>()
        .map_err(|e| e.at_stage("protocol:local_fits"))?;

    // Phase 1: local fits (the ratio fits need the target covariates first).
    if shift {
        let rows: Vec<Vec<f64>> = (0..target.n())
            .map(|i| (0..target.p()).map(|c| target.covariates()[(i, c)]).collect())
            .collect();
        log.push(SiteMessage {
            kind: MessageKind::TargetCovariates,
            sender: "target".into(),
            receiver: "all-sources".into(),
            payload: to_bytes(&rows)?,
            phase: Phase::LocalFits,
        });
    }
    let ratio_target = if shift { Some(target) } else { None };
    let fits: Vec<crate::drl::SiteFits> = std::thread::scope(|scope| {
        let handles: Vec<_> = resolved
            .iter()
            .map(|g| scope.spawn(move || fit_site(g, ratio_target, config)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("site thread panicked"))
            .collect::<Result<Vec<_>>>()
    })
    .map_err(|e| e.at_stage("protocol:local_fits"))?;

    // Phase 2: broadcast split-scope predictors and ratios to every site
    // (self-delivery skipped; the target also receives the broadcast).
    let mut bc_pred_a: Vec<Vec<u8>> = Vec::with_capacity(l);
    let mut bc_pred_b: Vec<Vec<u8>> = Vec::with_capacity(l);
    let mut bc_ratio_a: Vec<Vec<u8>> = Vec::with_capacity(l);
    let mut bc_ratio_b: Vec<Vec<u8>> = Vec::with_capacity(l);
    for (li, f) in fits.iter().enumerate() {
        let pa = to_bytes(&f.half_a)?;
        let pb = to_bytes(&f.half_b)?;
        log.push(SiteMessage {
            kind: MessageKind::PredictorBundle,
            sender: site_name(li + 1),
            receiver: "all".into(),
            payload: pa.clone(),
            phase: Phase::Broadcast,
        });
        log.push(SiteMessage {
            kind: MessageKind::PredictorBundle,
            sender: site_name(li + 1),
            receiver: "all".into(),
            payload: pb.clone(),
            phase: Phase::Broadcast,
        });
        bc_pred_a.push(pa);
        bc_pred_b.push(pb);
        if shift {
            let ra = to_bytes(&f.ratio_a)?;
            let rb = to_bytes(&f.ratio_b)?;
            log.push(SiteMessage {
                kind: MessageKind::RatioBundle,
                sender: site_name(li + 1),
                receiver: "all".into(),
                payload: ra.clone(),
                phase: Phase::Broadcast,
            });
            log.push(SiteMessage {
                kind: MessageKind::RatioBundle,
                sender: site_name(li + 1),
                receiver: "all".into(),
                payload: rb.clone(),
                phase: Phase::Broadcast,
            });
            bc_ratio_a.push(ra);
            bc_ratio_b.push(rb);
        }
    }

    // Phase 3: bias-term columns, computed at the site holding the rows.
    log.push(SiteMessage {
        kind: MessageKind::GammaRequest,
        sender: "target".into(),
        receiver: "all-sources".into(),
        payload: to_bytes(&serde_json::json!({"request": "bias_terms"}))?,
        phase: Phase::BiasTermComputation,
    });
    let columns: Vec<BiasColumns> = std::thread::scope(|scope| {
        let bc_pred_a = &bc_pred_a;
        let bc_pred_b = &bc_pred_b;
        let fits = &fits;
        let handles: Vec<_> = resolved
            .iter()
            .enumerate()
            .map(|(li, g)| {
                scope.spawn(move || -> Result<BiasColumns> {
                    // Rebuild the peer bundles from the broadcast bytes; the
                    // site's own models are used directly.
                    let mut bundle_a = Vec::with_capacity(bc_pred_a.len());
                    let mut bundle_b = Vec::with_capacity(bc_pred_b.len());
                    for k in 0..bc_pred_a.len() {
                        if k == li {
                            bundle_a.push(fits[li].half_a.clone());
                            bundle_b.push(fits[li].half_b.clone());
                        } else {
                            bundle_a.push(from_bytes::<FittedPredictor>(&bc_pred_a[k])?);
                            bundle_b.push(from_bytes::<FittedPredictor>(&bc_pred_b[k])?);
                        }
                    }
                    let a = bias_term_column(&bundle_a, g, &fits[li].ratio_a, Half::B)?;
                    let b = bias_term_column(&bundle_b, g, &fits[li].ratio_b, Half::A)?;
                    Ok(BiasColumns {
                        group_id: g.group_id(),
                        a,
                        b,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("site thread panicked"))
            .collect::<Result<Vec<_>>>()
    })
    .map_err(|e| e.at_stage("protocol:bias_terms"))?;
    for col in &columns {
        log.push(SiteMessage {
            kind: MessageKind::BiasTerms,
            sender: site_name(col.group_id),
            receiver: "target".into(),
            payload: to_bytes(col)?,
            phase: Phase::BiasTermComputation,
        });
    }

    // Phase 4: transmit the full-data predictors to the target site.
    let mut full_bytes: Vec<Vec<u8>> = Vec::with_capacity(l);
    for (li, f) in fits.iter().enumerate() {
        let payload = to_bytes(&f.full)?;
        log.push(SiteMessage {
            kind: MessageKind::PredictorBundle,
            sender: site_name(li + 1),
            receiver: "target".into(),
            payload: payload.clone(),
            phase: Phase::Transmit,
        });
        full_bytes.push(payload);
    }

    // Phase 5: assembly at the target, entirely from received bytes.
    let preds_a: Vec<FittedPredictor> = bc_pred_a
        .iter()
        .map(|b| from_bytes(b))
        .collect::<Result<_>>()
        .map_err(|e| e.at_stage("protocol:assembly"))?;
    let preds_b: Vec<FittedPredictor> = bc_pred_b
        .iter()
        .map(|b| from_bytes(b))
        .collect::<Result<_>>()
        .map_err(|e| e.at_stage("protocol:assembly"))?;
    let full: Vec<FittedPredictor> = full_bytes
        .iter()
        .map(|b| from_bytes(b))
        .collect::<Result<_>>()
        .map_err(|e| e.at_stage("protocol:assembly"))?;
    let plug_a = plugin_gamma(&preds_a, target)
        .map_err(|e| e.at_stage("protocol:assembly"))?
        .values()
        .clone();
    let plug_b = plugin_gamma(&preds_b, target)
        .map_err(|e| e.at_stage("protocol:assembly"))?
        .values()
        .clone();
    let bias_a = BiasTermMatrix::from_columns(columns.iter().map(|c| c.a.clone()).collect(), FitScope::HalfA)?;
    let bias_b = BiasTermMatrix::from_columns(columns.iter().map(|c| c.b.clone()).collect(), FitScope::HalfB)?;
    let ratios_identity = if shift {
        let check = |b: &Vec<u8>| -> Result<bool> {
            Ok(from_bytes::<DensityRatioModel>(b)?.is_identity())
        };
        bc_ratio_a.iter().chain(bc_ratio_b.iter()).try_fold(true, |acc, b| {
            Ok::<bool, Error>(acc && check(b)?)
        })?
    } else {
        true
    };
    let provenance = if ratios_identity {
        Provenance::BiasCorrectedNoshift
    } else {
        Provenance::BiasCorrectedShift
    };
    let gamma_raw = assemble_bias_corrected(&plug_a, &plug_b, &bias_a, &bias_b, provenance)
        .map_err(|e| e.at_stage("protocol:assembly"))?;
    let repaired = psd_repair(&gamma_raw, config.psd_ridge);

    // Phase 6: weight solve and result broadcast.
    let solution =
        solve_weights(&repaired, &config.h_set).map_err(|e| e.at_stage("protocol:weight_solve"))?;
    log.push(SiteMessage {
        kind: MessageKind::WeightResult,
        sender: "target".into(),
        receiver: "all".into(),
        payload: to_bytes(&solution.q)?,
        phase: Phase::WeightSolve,
    });

    let model = assemble_model(
        solution.q.clone(),
        full,
        gamma_raw,
        repaired,
        config.h_set.clone(),
        config.fingerprint(),
        Some(bias_a),
        Some(bias_b),
        SolverInfo::from(&solution),
        Vec::new(),
    )?;
    Ok((model, log))
}

/// One scanned edge with its total byte volume.
#[derive(Debug, Clone, Serialize)]
pub struct EdgeBytes {
    pub sender: String,
    pub receiver: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    pub passed: bool,
    /// Human-readable descriptions of offending messages.
    pub violations: Vec<String>,
    pub bytes_per_edge: Vec<EdgeBytes>,
    pub total_bytes: usize,
}

/// Verify that no payload embeds a raw source covariate row or a source
/// outcome vector (exact serialized match). Target-covariate messages are
/// exempt: the protocol explicitly ships unlabeled target rows to the
/// sources when density ratios must be estimated.
pub fn audit_privacy(transcript: &TranscriptLog, groups: &[SourceGroup]) -> AuditReport {
    let mut needles: Vec<(String, String)> = Vec::new();
    for g in groups {
        for i in 0..g.n() {
            let row: Vec<f64> = (0..g.p()).map(|c| g.covariates()[(i, c)]).collect();
            needles.push((
                format!("group {} covariate row {}", g.label(), i + 1),
                serde_json::to_string(&row).expect("row serializes"),
            ));
        }
        let outcomes: Vec<f64> = g.outcomes().iter().copied().collect();
        needles.push((
            format!("group {} outcome vector", g.label()),
            serde_json::to_string(&outcomes).expect("outcomes serialize"),
        ));
    }

    let mut violations = Vec::new();
    let mut edges: std::collections::BTreeMap<(String, String), usize> = Default::default();
    let mut total = 0usize;
    for (mi, msg) in transcript.messages.iter().enumerate() {
        *edges
            .entry((msg.sender.clone(), msg.receiver.clone()))
            .or_default() += msg.byte_size();
        total += msg.byte_size();
        if msg.kind == MessageKind::TargetCovariates {
            continue;
        }
        let text = String::from_utf8_lossy(&msg.payload);
        for (what, needle) in &needles {
            if text.contains(needle.as_str()) {
                violations.push(format!(
                    "message {mi} ({:?} from {} to {}) embeds {what}",
                    msg.kind, msg.sender, msg.receiver
                ));
            }
        }
    }
    AuditReport {
        passed: violations.is_empty(),
        violations,
        bytes_per_edge: edges
            .into_iter()
            .map(|((sender, receiver), bytes)| EdgeBytes {
                sender,
                receiver,
                bytes,
            })
            .collect(),
        total_bytes: total,
    }
}
