//! The live session behind the `/api` routes.
//!
//! Mutations are accepted under a short lock that assigns the next version
//! and records the new config. Recomputes then run one at a time behind the
//! worker lock; a recompute that finds a newer accepted version skips itself,
//! since the newer one will simulate the latest config anyway. Readers copy
//! out an `Arc` snapshot and never wait on a simulation.

use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::http::StatusCode;
use tokio::sync::Mutex as AsyncMutex;
use vstpr_core::analysis::StripeFitResult;
use vstpr_core::config::ExperimentConfig;
use vstpr_core::experiment::{Experiment, Simulation};
use vstpr_core::nulling::{null, NullOptions, NullReport};
use vstpr_protocol::{
    CurrentsRequest, HistoryEntry, HistoryResponse, MutationResponse, MutationStatus, NullRequest, PulsePatch, Readout,
    StateSummary, SYNC_ATOM_LIMIT,
};

use crate::error::Failure;

/// Frames and fit of one applied version.
#[derive(Debug)]
pub struct Snapshot {
    pub version: u64,
    pub currents: [f64; 3],
    pub sim: Simulation,
    pub fit: StripeFitResult,
}

struct Shared {
    version: u64,
    config: ExperimentConfig,
    snapshot: Option<Arc<Snapshot>>,
    history: Vec<HistoryEntry>,
    in_flight: usize,
    nulling: bool,
    last_error: Option<String>,
    last_null: Option<Arc<NullReport>>,
    /// Built experiments, most recent last.
    experiments: Vec<Arc<Experiment>>,
}

const EXPERIMENT_CACHE: usize = 2;

#[derive(Clone)]
pub struct Session {
    shared: Arc<Mutex<Shared>>,
    worker: Arc<AsyncMutex<()>>,
    sync_atom_limit: usize,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// The config up to the coil currents, which change without a rebuild.
fn same_setup(a: &ExperimentConfig, b: &ExperimentConfig) -> bool {
    let mut a = a.clone();
    a.coils = a.coils.with_currents(b.coils.currents());
    a == *b
}

impl Session {
    pub fn new(config: ExperimentConfig) -> Result<Self, Failure> {
        config.validate()?;
        Ok(Session {
            shared: Arc::new(Mutex::new(Shared {
                version: 0,
                config,
                snapshot: None,
                history: Vec::new(),
                in_flight: 0,
                nulling: false,
                last_error: None,
                last_null: None,
                experiments: Vec::new(),
            })),
            worker: Arc::new(AsyncMutex::new(())),
            sync_atom_limit: SYNC_ATOM_LIMIT,
        })
    }

    /// Overrides the atom count above which mutations answer 202.
    pub fn with_sync_atom_limit(mut self, limit: usize) -> Self {
        self.sync_atom_limit = limit;
        self
    }

    fn lock(&self) -> MutexGuard<'_, Shared> {
        self.shared.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn summary(&self) -> StateSummary {
        let s = self.lock();
        StateSummary {
            version: s.version,
            applied_version: s.snapshot.as_ref().map(|x| x.version),
            pending: s.in_flight > 0 || s.nulling,
            nulling: s.nulling,
            currents: s.config.coils.currents(),
            applied_currents: s.snapshot.as_ref().map(|x| x.currents),
            readout: s.snapshot.as_ref().map(|x| Readout::from(&x.fit)),
            history_len: s.history.len(),
            last_error: s.last_error.clone(),
            config: s.config.clone(),
        }
    }

    pub fn snapshot(&self) -> Option<Arc<Snapshot>> {
        self.lock().snapshot.clone()
    }

    pub fn history(&self) -> HistoryResponse {
        let s = self.lock();
        HistoryResponse {
            version: s.version,
            entries: s.history.clone(),
        }
    }

    pub fn last_null(&self) -> Option<Arc<NullReport>> {
        self.lock().last_null.clone()
    }

    fn cached_experiment(&self, config: &ExperimentConfig) -> Option<Arc<Experiment>> {
        self.lock().experiments.iter().rev().find(|e| same_setup(e.config(), config)).cloned()
    }

    fn remember(&self, e: Arc<Experiment>) {
        let mut s = self.lock();
        s.experiments.retain(|x| !same_setup(x.config(), e.config()));
        s.experiments.push(e);
        let excess = s.experiments.len().saturating_sub(EXPERIMENT_CACHE);
        s.experiments.drain(..excess);
    }

    /// Blocking: the experiment for `config`, built if not cached.
    fn experiment(&self, config: &ExperimentConfig) -> Result<Arc<Experiment>, Failure> {
        if let Some(e) = self.cached_experiment(config) {
            return Ok(e);
        }
        let e = Arc::new(Experiment::new(config.clone())?);
        self.remember(e.clone());
        Ok(e)
    }

    pub async fn set_currents(&self, req: CurrentsRequest) -> Result<(StatusCode, MutationResponse), Failure> {
        for (name, v) in [("ix", req.ix), ("iy", req.iy), ("iz", req.iz)] {
            if !v.is_finite() {
                return Err(Failure {
                    status: StatusCode::BAD_REQUEST,
                    body: vstpr_protocol::ApiError {
                        error: format!("{name} must be a finite current in amps"),
                        field: Some(name.into()),
                    },
                });
            }
        }
        let currents = req.to_array();
        self.mutate(move |cfg| {
            cfg.coils = cfg.coils.with_currents(currents);
            Ok(())
        })
        .await
    }

    pub async fn patch_pulse(&self, patch: PulsePatch) -> Result<(StatusCode, MutationResponse), Failure> {
        let assignments = patch.assignments();
        if assignments.is_empty() {
            return Err(Failure::bad_request("pulse patch sets no field"));
        }
        let mut candidate = self.lock().config.clone();
        for (k, v) in &assignments {
            candidate.set(k, v)?;
        }
        candidate.validate()?;
        // a pulse the template cannot be built for is rejected before acceptance
        let this = self.clone();
        tokio::task::spawn_blocking(move || this.experiment(&candidate).map(|_| ()))
            .await
            .map_err(|e| Failure::internal(e.to_string()))??;
        self.mutate(move |cfg| {
            for (k, v) in &assignments {
                cfg.set(k, v)?;
            }
            Ok(())
        })
        .await
    }

    async fn mutate(
        &self,
        edit: impl FnOnce(&mut ExperimentConfig) -> vstpr_core::Result<()>,
    ) -> Result<(StatusCode, MutationResponse), Failure> {
        let (version, background) = {
            let mut s = self.lock();
            if s.nulling {
                return Err(Failure::conflict("automated nulling in progress"));
            }
            let mut cfg = s.config.clone();
            edit(&mut cfg)?;
            cfg.validate()?;
            s.version += 1;
            s.in_flight += 1;
            s.config = cfg;
            (s.version, s.config.ensemble.atom_count > self.sync_atom_limit)
        };
        let this = self.clone();
        let task = tokio::spawn(async move { this.recompute(version).await });
        if background {
            return Ok((
                StatusCode::ACCEPTED,
                MutationResponse {
                    version,
                    status: MutationStatus::Pending,
                },
            ));
        }
        let status = task.await.map_err(|e| Failure::internal(e.to_string()))??;
        Ok((StatusCode::OK, MutationResponse { version, status }))
    }

    async fn recompute(&self, version: u64) -> Result<MutationStatus, Failure> {
        let guard = self.worker.clone().lock_owned().await;
        let this = self.clone();
        let outcome = tokio::task::spawn_blocking(move || {
            let _guard = guard;
            this.recompute_blocking(version)
        })
        .await
        .unwrap_or_else(|e| Err(Failure::internal(e.to_string())));
        let mut s = self.lock();
        s.in_flight -= 1;
        match &outcome {
            Ok(MutationStatus::Applied) => s.last_error = None,
            Err(e) => s.last_error = Some(e.body.error.clone()),
            _ => {}
        }
        outcome
    }

    fn recompute_blocking(&self, version: u64) -> Result<MutationStatus, Failure> {
        let config = {
            let s = self.lock();
            if s.version > version {
                return Ok(MutationStatus::Superseded);
            }
            s.config.clone()
        };
        let experiment = self.experiment(&config)?;
        let mapping = experiment.mapping()?;
        let currents = config.coils.currents();
        let (sim, m) = experiment.measure(&experiment.coils_at(currents), &mapping)?;
        let mut s = self.lock();
        if s.snapshot.as_ref().is_some_and(|x| x.version > version) {
            return Ok(MutationStatus::Superseded);
        }
        s.history.push(HistoryEntry {
            version,
            currents,
            status: m.fit.status,
            larmor: m.fit.larmor,
            objective: None,
            timestamp: now(),
        });
        s.snapshot = Some(Arc::new(Snapshot {
            version,
            currents,
            sim,
            fit: m.fit,
        }));
        Ok(MutationStatus::Applied)
    }

    /// Starts the automated nulling in the background. Every evaluation bumps
    /// the version and appends to the history; the final currents become the
    /// session currents.
    pub fn start_null(&self, req: NullRequest) -> Result<MutationResponse, Failure> {
        let opts = req.options.unwrap_or_default();
        opts.validate()?;
        let (version, config, start) = {
            let mut s = self.lock();
            if s.nulling {
                return Err(Failure::conflict("automated nulling already running"));
            }
            let start = req.start.unwrap_or_else(|| s.config.coils.currents());
            if start.iter().any(|c| !c.is_finite()) {
                return Err(Failure::bad_request("start currents must be finite"));
            }
            s.nulling = true;
            s.version += 1;
            (s.version, s.config.clone(), start)
        };
        let this = self.clone();
        tokio::spawn(async move {
            let guard = this.worker.clone().lock_owned().await;
            let worker = this.clone();
            let outcome = tokio::task::spawn_blocking(move || {
                let _guard = guard;
                worker.null_blocking(&config, start, &opts)
            })
            .await
            .unwrap_or_else(|e| Err(Failure::internal(e.to_string())));
            let mut s = this.lock();
            s.nulling = false;
            s.last_error = outcome.err().map(|e| e.body.error);
        });
        Ok(MutationResponse {
            version,
            status: MutationStatus::Pending,
        })
    }

    fn null_blocking(&self, config: &ExperimentConfig, start: [f64; 3], opts: &NullOptions) -> Result<(), Failure> {
        let experiment = self.experiment(config)?;
        let mapping = experiment.mapping()?;
        let report = null(&experiment, start, &mapping, opts, &mut |ev, fit| {
            let mut s = self.lock();
            s.version += 1;
            let version = s.version;
            s.history.push(HistoryEntry {
                version,
                currents: ev.currents,
                status: fit.status,
                larmor: fit.larmor,
                objective: Some(ev.objective),
                timestamp: now(),
            });
        })?;
        let (sim, m) = experiment.measure(&experiment.coils_at(report.currents), &mapping)?;
        let mut s = self.lock();
        s.version += 1;
        let version = s.version;
        s.config.coils = s.config.coils.with_currents(report.currents);
        s.history.push(HistoryEntry {
            version,
            currents: report.currents,
            status: m.fit.status,
            larmor: m.fit.larmor,
            objective: None,
            timestamp: now(),
        });
        s.snapshot = Some(Arc::new(Snapshot {
            version,
            currents: report.currents,
            sim,
            fit: m.fit,
        }));
        s.last_null = Some(Arc::new(report));
        Ok(())
    }
}
