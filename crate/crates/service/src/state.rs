//! Loaded galleries and live sessions.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, MutexGuard, TryLockError};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use icr_core::session::{EngineConfig, EngineContext, Session};
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

pub const DEFAULT_IDLE_TIMEOUT: Duration = Duration::from_secs(3600);

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub engine: EngineConfig,
    /// Candidates returned with every response.
    pub top_k: usize,
    pub idle_timeout: Duration,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            engine: EngineConfig::default(),
            top_k: 10,
            idle_timeout: DEFAULT_IDLE_TIMEOUT,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Human,
    SimReplay,
}

pub struct SessionSlot {
    pub id: String,
    pub gallery_ref: String,
    pub mode: Mode,
    pub created_at: u64,
    /// Goal item; only set in sim_replay mode.
    pub target: Option<String>,
    session: Mutex<Session>,
    last_used: Mutex<Instant>,
}

impl SessionSlot {
    /// Locks the session for one request. A second request arriving while
    /// the first is still running is turned away instead of queued.
    pub fn try_session(&self) -> Result<MutexGuard<'_, Session>, ApiError> {
        *self.last_used.lock().unwrap_or_else(|e| e.into_inner()) = Instant::now();
        match self.session.try_lock() {
            Ok(guard) => Ok(guard),
            Err(TryLockError::WouldBlock) => Err(ApiError::Busy(self.id.clone())),
            Err(TryLockError::Poisoned(_)) => {
                Err(ApiError::Internal(format!("session `{}` is poisoned", self.id)))
            }
        }
    }

    fn idle_since(&self) -> Instant {
        *self.last_used.lock().unwrap_or_else(|e| e.into_inner())
    }
}

pub struct AppState {
    pub config: ServiceConfig,
    galleries: BTreeMap<String, EngineContext>,
    sessions: Mutex<HashMap<String, Arc<SessionSlot>>>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        Self {
            config,
            galleries: BTreeMap::new(),
            sessions: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_gallery(mut self, name: impl Into<String>, ctx: EngineContext) -> Self {
        self.galleries.insert(name.into(), ctx);
        self
    }

    pub fn galleries(&self) -> &BTreeMap<String, EngineContext> {
        &self.galleries
    }

    pub fn gallery(&self, name: &str) -> Result<&EngineContext, ApiError> {
        self.galleries
            .get(name)
            .ok_or_else(|| ApiError::BadRequest(format!("unknown gallery `{name}`")))
    }

    pub fn has_reasoner(&self) -> bool {
        self.galleries.values().any(|c| c.reasoner.is_some())
    }

    fn sessions(&self) -> MutexGuard<'_, HashMap<String, Arc<SessionSlot>>> {
        self.sessions.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn session_count(&self) -> usize {
        self.sessions().len()
    }

    pub fn insert(
        &self,
        gallery_ref: &str,
        mode: Mode,
        target: Option<String>,
        session: Session,
    ) -> Arc<SessionSlot> {
        let created_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let slot = Arc::new(SessionSlot {
            id: uuid::Uuid::new_v4().simple().to_string(),
            gallery_ref: gallery_ref.to_string(),
            mode,
            created_at,
            target,
            session: Mutex::new(session),
            last_used: Mutex::new(Instant::now()),
        });
        self.sessions().insert(slot.id.clone(), slot.clone());
        slot
    }

    pub fn get(&self, id: &str) -> Result<Arc<SessionSlot>, ApiError> {
        self.sessions()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::UnknownSession(id.to_string()))
    }

    /// Drops sessions idle for longer than the configured timeout. Returns
    /// how many were removed.
    pub fn evict_idle(&self, now: Instant) -> usize {
        let timeout = self.config.idle_timeout;
        let mut sessions = self.sessions();
        let before = sessions.len();
        sessions.retain(|_, slot| now.saturating_duration_since(slot.idle_since()) < timeout);
        before - sessions.len()
    }
}
