//! Time-limited access credentials and their refresh discipline.
//!
//! Data nodes only accept requests carrying an unexpired token. A staging run
//! lasts far longer than one token, so the scheduler asks the
//! [`CredentialManager`] for a fresh credential before each dispatch wave;
//! the manager reissues once the remaining lifetime falls to the refresh
//! margin. Tokens are opaque bytes; nothing here does certificate crypto.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Duration, Utc};
use rand::RngCore;

use crate::clock::SharedClock;

pub const DEFAULT_LIFETIME_S: i64 = 259_200;
pub const DEFAULT_REFRESH_MARGIN_S: i64 = 86_400;

/// Header carrying `<id>:<expiry unix seconds>` on every data-node request.
pub const TOKEN_HEADER: &str = "X-Stage-Token";

#[derive(Clone, PartialEq, Eq)]
pub struct Credential {
    pub id: String,
    pub token: Vec<u8>,
    pub issued_at: DateTime<Utc>,
    pub expires_at: DateTime<Utc>,
}

impl Credential {
    pub fn header_value(&self) -> String {
        format!("{}:{}", self.id, self.expires_at.timestamp())
    }

    pub fn lifetime(&self) -> Duration {
        self.expires_at - self.issued_at
    }
}

impl fmt::Debug for Credential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Credential")
            .field("id", &self.id)
            .field("token", &format_args!("<{} bytes>", self.token.len()))
            .field("issued_at", &self.issued_at)
            .field("expires_at", &self.expires_at)
            .finish()
    }
}

/// Parses an `X-Stage-Token` value back into `(id, expiry)`.
pub fn parse_token_header(value: &str) -> Option<(String, DateTime<Utc>)> {
    let (id, expiry) = value.rsplit_once(':')?;
    if id.is_empty() {
        return None;
    }
    let secs: i64 = expiry.parse().ok()?;
    Some((id.to_string(), DateTime::from_timestamp(secs, 0)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CredentialPolicy {
    lifetime_s: i64,
    refresh_margin_s: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("credential policy needs 0 < refresh_margin_s ({refresh_margin_s}) < lifetime_s ({lifetime_s})")]
pub struct InvalidPolicy {
    pub lifetime_s: i64,
    pub refresh_margin_s: i64,
}

impl CredentialPolicy {
    pub fn new(lifetime_s: i64, refresh_margin_s: i64) -> Result<Self, InvalidPolicy> {
        if 0 < refresh_margin_s && refresh_margin_s < lifetime_s {
            Ok(Self {
                lifetime_s,
                refresh_margin_s,
            })
        } else {
            Err(InvalidPolicy {
                lifetime_s,
                refresh_margin_s,
            })
        }
    }

    pub fn lifetime_s(&self) -> i64 {
        self.lifetime_s
    }

    pub fn refresh_margin_s(&self) -> i64 {
        self.refresh_margin_s
    }
}

impl Default for CredentialPolicy {
    fn default() -> Self {
        Self {
            lifetime_s: DEFAULT_LIFETIME_S,
            refresh_margin_s: DEFAULT_REFRESH_MARGIN_S,
        }
    }
}

/// Signed; negative once expired.
pub fn remaining(c: &Credential, now: DateTime<Utc>) -> Duration {
    c.expires_at - now
}

pub fn needs_refresh(c: &Credential, now: DateTime<Utc>, p: &CredentialPolicy) -> bool {
    remaining(c, now) <= Duration::seconds(p.refresh_margin_s)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("credential refresh failed: {0}")]
pub struct RefreshFailed(pub String);

pub trait CredentialProvider: Send + Sync + fmt::Debug {
    /// Issues a credential valid from now for `lifetime_s` seconds.
    fn issue(&self, lifetime_s: i64) -> Result<Credential, RefreshFailed>;
}

/// Returns `current` untouched while it is outside the refresh margin,
/// otherwise a newly issued credential.
pub fn ensure_fresh(
    provider: &dyn CredentialProvider,
    current: Option<Credential>,
    now: DateTime<Utc>,
    p: &CredentialPolicy,
) -> Result<Credential, RefreshFailed> {
    match current {
        Some(c) if !needs_refresh(&c, now, p) => Ok(c),
        _ => provider.issue(p.lifetime_s),
    }
}

/// Built-in issuer: random opaque tokens stamped with the shared clock.
/// Simulated data nodes accept any token whose embedded expiry is in the
/// future, so this is also the fleet's provider.
#[derive(Debug)]
pub struct LocalIssuer {
    clock: SharedClock,
    issued: AtomicU64,
    fail: std::sync::atomic::AtomicBool,
}

impl LocalIssuer {
    pub fn new(clock: SharedClock) -> Self {
        Self {
            clock,
            issued: AtomicU64::new(0),
            fail: std::sync::atomic::AtomicBool::new(false),
        }
    }

    pub fn issued_count(&self) -> u64 {
        self.issued.load(Ordering::SeqCst)
    }

    /// Makes subsequent `issue` calls fail, standing in for an unreachable
    /// identity service.
    pub fn set_unreachable(&self, unreachable: bool) {
        self.fail.store(unreachable, Ordering::SeqCst);
    }
}

impl CredentialProvider for LocalIssuer {
    fn issue(&self, lifetime_s: i64) -> Result<Credential, RefreshFailed> {
        if self.fail.load(Ordering::SeqCst) {
            return Err(RefreshFailed("identity provider unreachable".into()));
        }
        let n = self.issued.fetch_add(1, Ordering::SeqCst) + 1;
        let issued_at = self.clock.now();
        let mut token = vec![0u8; 32];
        rand::rng().fill_bytes(&mut token);
        Ok(Credential {
            id: format!("cred-{n}"),
            token,
            issued_at,
            expires_at: issued_at + Duration::seconds(lifetime_s),
        })
    }
}

/// Holds the run's current credential. Refreshes are serialized; readers
/// always see a whole credential, old or new.
#[derive(Debug)]
pub struct CredentialManager {
    provider: Arc<dyn CredentialProvider>,
    policy: CredentialPolicy,
    clock: SharedClock,
    current: RwLock<Option<Arc<Credential>>>,
    refresh_lock: Mutex<()>,
    auto_refresh: bool,
}

impl CredentialManager {
    pub fn new(
        provider: Arc<dyn CredentialProvider>,
        policy: CredentialPolicy,
        clock: SharedClock,
    ) -> Self {
        Self {
            provider,
            policy,
            clock,
            current: RwLock::new(None),
            refresh_lock: Mutex::new(()),
            auto_refresh: true,
        }
    }

    /// With auto refresh off the manager only bootstraps the first
    /// credential and then keeps handing it out, expired or not.
    pub fn with_auto_refresh(mut self, enabled: bool) -> Self {
        self.auto_refresh = enabled;
        self
    }

    pub fn policy(&self) -> &CredentialPolicy {
        &self.policy
    }

    pub fn clock(&self) -> &SharedClock {
        &self.clock
    }

    pub fn current(&self) -> Option<Arc<Credential>> {
        self.current.read().unwrap().clone()
    }

    fn usable(&self, c: &Credential) -> bool {
        !self.auto_refresh || !needs_refresh(c, self.clock.now(), &self.policy)
    }

    pub fn ensure_fresh(&self) -> Result<Arc<Credential>, RefreshFailed> {
        if let Some(c) = self.current().filter(|c| self.usable(c)) {
            return Ok(c);
        }
        let _guard = self.refresh_lock.lock().unwrap();
        // Another caller may have refreshed while we waited.
        if let Some(c) = self.current().filter(|c| self.usable(c)) {
            return Ok(c);
        }
        let fresh = Arc::new(ensure_fresh(
            self.provider.as_ref(),
            None,
            self.clock.now(),
            &self.policy,
        )?);
        *self.current.write().unwrap() = Some(fresh.clone());
        Ok(fresh)
    }

    /// Reissues regardless of remaining lifetime (a node rejected the token
    /// we believed valid). No-op when auto refresh is disabled.
    pub fn force_refresh(&self) -> Result<Arc<Credential>, RefreshFailed> {
        if !self.auto_refresh {
            return self.current().ok_or_else(|| RefreshFailed("no credential".into()));
        }
        let _guard = self.refresh_lock.lock().unwrap();
        let fresh = Arc::new(self.provider.issue(self.policy.lifetime_s)?);
        *self.current.write().unwrap() = Some(fresh.clone());
        Ok(fresh)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::{Clock, ManualClock};

    fn t0() -> DateTime<Utc> {
        DateTime::parse_from_rfc3339("2013-07-26T08:00:00Z")
            .unwrap()
            .with_timezone(&Utc)
    }

    fn cred(issued: DateTime<Utc>, lifetime_s: i64) -> Credential {
        Credential {
            id: "c".into(),
            token: vec![1, 2, 3],
            issued_at: issued,
            expires_at: issued + Duration::seconds(lifetime_s),
        }
    }

    #[test]
    fn remaining_arithmetic() {
        let c = cred(t0(), 259_200);
        assert_eq!(remaining(&c, c.expires_at), Duration::zero());
        assert_eq!(remaining(&c, t0()), Duration::seconds(259_200));
        assert_eq!(
            remaining(&c, t0() + Duration::seconds(172_800)),
            Duration::seconds(86_400)
        );
        assert!(remaining(&c, c.expires_at + Duration::seconds(1)) < Duration::zero());
    }

    #[test]
    fn refresh_margin_is_inclusive() {
        let p = CredentialPolicy::default();
        let c = cred(t0(), 259_200);
        assert!(!needs_refresh(&c, t0(), &p));
        assert!(needs_refresh(&c, c.expires_at - Duration::seconds(86_400), &p));
        assert!(!needs_refresh(&c, c.expires_at - Duration::seconds(86_401), &p));
    }

    #[test]
    fn needs_refresh_is_monotone() {
        let p = CredentialPolicy::default();
        let c = cred(t0(), 259_200);
        let mut was = false;
        for h in 0..100 {
            let now = t0() + Duration::hours(h);
            let r = needs_refresh(&c, now, &p);
            assert!(!was || r, "flipped back at hour {h}");
            was = r;
        }
    }

    #[test]
    fn policy_bounds() {
        assert!(CredentialPolicy::new(100, 0).is_err());
        assert!(CredentialPolicy::new(100, 100).is_err());
        assert!(CredentialPolicy::new(100, 99).is_ok());
    }

    #[test]
    fn token_header_round_trip() {
        let c = cred(t0(), 10);
        let (id, exp) = parse_token_header(&c.header_value()).unwrap();
        assert_eq!(id, "c");
        assert_eq!(exp, c.expires_at);
        assert!(parse_token_header(":123").is_none());
        assert!(parse_token_header("abc").is_none());
    }

    #[derive(Debug)]
    struct CountingProvider {
        inner: LocalIssuer,
    }

    impl CredentialProvider for CountingProvider {
        fn issue(&self, lifetime_s: i64) -> Result<Credential, RefreshFailed> {
            self.inner.issue(lifetime_s)
        }
    }

    #[test]
    fn ensure_fresh_cases() {
        let clock = Arc::new(ManualClock::new(t0()));
        let provider = CountingProvider {
            inner: LocalIssuer::new(clock.clone()),
        };
        let p = CredentialPolicy::default();

        let first = ensure_fresh(&provider, None, clock.now(), &p).unwrap();
        assert_eq!(provider.inner.issued_count(), 1);

        let same = ensure_fresh(&provider, Some(first.clone()), clock.now(), &p).unwrap();
        assert_eq!(same, first);
        assert_eq!(provider.inner.issued_count(), 1);

        clock.advance(Duration::days(4));
        let renewed = ensure_fresh(&provider, Some(first.clone()), clock.now(), &p).unwrap();
        assert_ne!(renewed.id, first.id);
        assert_eq!(remaining(&renewed, clock.now()), Duration::seconds(p.lifetime_s()));
    }

    #[test]
    fn refresh_failure_surfaces() {
        let clock = Arc::new(ManualClock::new(t0()));
        let issuer = Arc::new(LocalIssuer::new(clock.clone()));
        let mgr = CredentialManager::new(issuer.clone(), CredentialPolicy::default(), clock.clone());
        mgr.ensure_fresh().unwrap();
        issuer.set_unreachable(true);
        clock.advance(Duration::days(2));
        assert!(mgr.ensure_fresh().is_err());
    }

    #[test]
    fn manager_never_hands_out_expired_over_ten_lifetimes() {
        let clock = Arc::new(ManualClock::new(t0()));
        let issuer = Arc::new(LocalIssuer::new(clock.clone()));
        let mgr = CredentialManager::new(issuer.clone(), CredentialPolicy::default(), clock.clone());
        for _ in 0..(30 * 24) {
            let c = mgr.ensure_fresh().unwrap();
            assert!(remaining(&c, clock.now()) > Duration::zero());
            clock.advance(Duration::hours(1));
        }
        // hours 0, 48, ..., 672
        assert_eq!(issuer.issued_count(), 15);
    }

    #[test]
    fn disabled_refresh_keeps_stale_credential() {
        let clock = Arc::new(ManualClock::new(t0()));
        let issuer = Arc::new(LocalIssuer::new(clock.clone()));
        let mgr = CredentialManager::new(issuer.clone(), CredentialPolicy::default(), clock.clone())
            .with_auto_refresh(false);
        let c = mgr.ensure_fresh().unwrap();
        clock.advance(Duration::days(5));
        assert_eq!(mgr.ensure_fresh().unwrap().id, c.id);
        assert_eq!(issuer.issued_count(), 1);
    }

    #[test]
    fn concurrent_readers_see_whole_credentials() {
        let clock = Arc::new(ManualClock::new(t0()));
        let issuer = Arc::new(LocalIssuer::new(clock.clone()));
        let mgr = Arc::new(CredentialManager::new(
            issuer.clone(),
            CredentialPolicy::default(),
            clock.clone(),
        ));
        mgr.ensure_fresh().unwrap();
        clock.advance(Duration::days(2));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let mgr = mgr.clone();
                std::thread::spawn(move || mgr.ensure_fresh().unwrap())
            })
            .collect();
        let ids: std::collections::HashSet<_> =
            handles.into_iter().map(|h| h.join().unwrap().id.clone()).collect();
        assert_eq!(ids.len(), 1, "refresh must be serialized");
        assert_eq!(issuer.issued_count(), 2);
    }
}
