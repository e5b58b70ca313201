//! The key authority: owns both master secrets, registers sources and
//! issues functional keys that pass the weights filter.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::feip::{
    mi_derive_key, mi_party_key, mi_setup, si_derive_key, si_setup, MiFunctionalKey, MiMasterKeys,
    MiPartyKey, SiFunctionalKey, SiMasterSecret, SiPublicKey,
};
use crate::group::GroupParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Si,
    Mi,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightsFilterPolicy {
    pub tau: usize,
    pub eta_limit: usize,
    pub eta_vec_limit: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Reject(String),
}

impl Verdict {
    pub fn is_accept(&self) -> bool {
        matches!(self, Verdict::Accept)
    }
}

impl WeightsFilterPolicy {
    pub fn new(tau: usize, eta_limit: usize, eta_vec_limit: Vec<usize>) -> Result<Self> {
        if tau < 2 {
            return Err(Error::InvalidArgument(format!("tau must be at least 2, got {tau}")));
        }
        Ok(WeightsFilterPolicy {
            tau,
            eta_limit,
            eta_vec_limit,
        })
    }
}

/// Accepts iff `y` has at least `tau` non-zero entries and the length fits
/// the scheme.
pub fn filter_check(policy: &WeightsFilterPolicy, y: &[i64], scheme: Scheme) -> Verdict {
    match scheme {
        Scheme::Si if y.len() > policy.eta_limit => {
            return Verdict::Reject(format!(
                "vector length {} exceeds eta {}",
                y.len(),
                policy.eta_limit
            ));
        }
        Scheme::Mi => {
            let total: usize = policy.eta_vec_limit.iter().sum();
            if y.len() != total {
                return Verdict::Reject(format!(
                    "vector length {} differs from the partition total {total}",
                    y.len()
                ));
            }
        }
        Scheme::Si => {}
    }
    let nonzero = y.iter().filter(|&&v| v != 0).count();
    if nonzero < policy.tau {
        return Verdict::Reject(format!(
            "{nonzero} non-zero entries, the filter requires at least {}",
            policy.tau
        ));
    }
    Verdict::Accept
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Issued,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyRequestRecord {
    pub timestamp_ms: u64,
    pub scheme: Scheme,
    pub y_digest: String,
    pub verdict: Outcome,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reason: Option<String>,
}

/// Anything that can hand out functional keys: the in-process authority or
/// a remote connection to one.
pub trait KeyService {
    fn request_si_key(&mut self, y: &[i64]) -> Result<SiFunctionalKey>;
    fn request_mi_key(&mut self, y: &[i64]) -> Result<MiFunctionalKey>;
}

impl<T: KeyService + ?Sized> KeyService for &mut T {
    fn request_si_key(&mut self, y: &[i64]) -> Result<SiFunctionalKey> {
        (**self).request_si_key(y)
    }

    fn request_mi_key(&mut self, y: &[i64]) -> Result<MiFunctionalKey> {
        (**self).request_mi_key(y)
    }
}

/// Material handed to a source on registration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceKeys {
    pub si_public: SiPublicKey,
    pub mi_party: MiPartyKey,
    pub eta: usize,
    pub etas: Vec<usize>,
}

#[derive(Debug)]
pub struct Authority {
    params: GroupParams,
    si_public: SiPublicKey,
    si_secret: SiMasterSecret,
    mi: MiMasterKeys,
    registered: BTreeSet<usize>,
    policy: WeightsFilterPolicy,
    weight_limit: u64,
    log: Vec<KeyRequestRecord>,
    log_file: Option<File>,
}

impl Authority {
    /// `weight_limit` caps the magnitude of encoded key-vector entries.
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        params: &GroupParams,
        eta: usize,
        etas: &[usize],
        n: usize,
        tau: usize,
        weight_limit: u64,
        rng: &mut R,
    ) -> Result<Self> {
        let policy = WeightsFilterPolicy::new(tau, eta, etas.to_vec())?;
        if n != etas.len() {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: etas.len(),
            });
        }
        let (si_public, si_secret) = si_setup(params, eta, rng)?;
        let mi = mi_setup(params, etas, n, rng)?;
        Ok(Authority {
            params: params.clone(),
            si_public,
            si_secret,
            mi,
            registered: BTreeSet::new(),
            policy,
            weight_limit,
            log: Vec::new(),
            log_file: None,
        })
    }

    /// Appends every future log record to `path` as a JSON line.
    pub fn with_log_file(mut self, path: &Path) -> Result<Self> {
        self.log_file = Some(OpenOptions::new().create(true).append(true).open(path)?);
        Ok(self)
    }

    pub fn params(&self) -> &GroupParams {
        &self.params
    }

    pub fn policy(&self) -> &WeightsFilterPolicy {
        &self.policy
    }

    pub fn si_public_key(&self) -> &SiPublicKey {
        &self.si_public
    }

    pub fn si_master_secret(&self) -> &SiMasterSecret {
        &self.si_secret
    }

    pub fn mi_master_keys(&self) -> &MiMasterKeys {
        &self.mi
    }

    pub fn log(&self) -> &[KeyRequestRecord] {
        &self.log
    }

    pub fn registered(&self) -> &BTreeSet<usize> {
        &self.registered
    }

    /// Registers a multi-input slot `1..=n` and delivers its keys once.
    pub fn register_source(&mut self, source_id: usize) -> Result<SourceKeys> {
        if self.registered.contains(&source_id) {
            return Err(Error::DuplicateSource(source_id));
        }
        if self.registered.len() >= self.mi.n() {
            return Err(Error::CapacityExceeded { n: self.mi.n() });
        }
        let mi_party = mi_party_key(&self.mi, source_id)?;
        self.registered.insert(source_id);
        Ok(SourceKeys {
            si_public: self.si_public.clone(),
            mi_party,
            eta: self.si_secret.eta(),
            etas: self.mi.etas(),
        })
    }

    fn record(&mut self, scheme: Scheme, y: &[i64], verdict: &Verdict) -> Result<()> {
        let mut hasher = Sha256::new();
        for v in y {
            hasher.update(v.to_le_bytes());
        }
        let record = KeyRequestRecord {
            timestamp_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
            scheme,
            y_digest: hex::encode(hasher.finalize()),
            verdict: if verdict.is_accept() {
                Outcome::Issued
            } else {
                Outcome::Rejected
            },
            reason: match verdict {
                Verdict::Reject(r) => Some(r.clone()),
                Verdict::Accept => None,
            },
        };
        if let Some(f) = self.log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&record)?)?;
        }
        self.log.push(record);
        Ok(())
    }

    fn screen(&mut self, y: &[i64], scheme: Scheme) -> Result<()> {
        let mut verdict = filter_check(&self.policy, y, scheme);
        if verdict.is_accept() {
            if let Some(v) = y.iter().find(|v| v.unsigned_abs() > self.weight_limit) {
                verdict = Verdict::Reject(format!(
                    "entry {v} exceeds the encoded weight limit {}",
                    self.weight_limit
                ));
            }
        }
        self.record(scheme, y, &verdict)?;
        match verdict {
            Verdict::Accept => Ok(()),
            Verdict::Reject(reason) => Err(Error::FilterRejected(reason)),
        }
    }

    pub fn serve_si_key(&mut self, y: &[i64]) -> Result<SiFunctionalKey> {
        self.screen(y, Scheme::Si)?;
        si_derive_key(&self.si_secret, y, self.weight_limit)
    }

    pub fn serve_mi_key(&mut self, y: &[i64]) -> Result<MiFunctionalKey> {
        self.screen(y, Scheme::Mi)?;
        mi_derive_key(&self.mi, y, self.weight_limit)
    }
}

impl KeyService for Authority {
    fn request_si_key(&mut self, y: &[i64]) -> Result<SiFunctionalKey> {
        self.serve_si_key(y)
    }

    fn request_mi_key(&mut self, y: &[i64]) -> Result<MiFunctionalKey> {
        self.serve_mi_key(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feip::{si_decrypt, si_encrypt};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn authority() -> Authority {
        let params = GroupParams::named("test64").unwrap();
        Authority::init(&params, 4, &[2, 2], 2, 2, 100, &mut ChaCha8Rng::seed_from_u64(41)).unwrap()
    }

    #[test]
    fn init_checks() {
        let params = GroupParams::named("test64").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = authority();
        for (h, s) in a.si_public_key().h().iter().zip(a.si_master_secret().s()) {
            assert_eq!(h, &params.exp_g(s));
        }
        assert!(a.registered().is_empty());
        assert!(Authority::init(&params, 4, &[2, 2], 2, 1, 100, &mut rng).is_err());
        assert!(Authority::init(&params, 4, &[2, 2], 3, 2, 100, &mut rng).is_err());
    }

    #[test]
    fn registration() {
        let mut a = authority();
        let keys = a.register_source(1).unwrap();
        assert_eq!(keys.mi_party.source_id(), 1);
        assert_eq!(keys.etas, vec![2, 2]);
        assert!(matches!(a.register_source(1), Err(Error::DuplicateSource(1))));
        a.register_source(2).unwrap();
        assert!(matches!(a.register_source(3), Err(Error::CapacityExceeded { n: 2 })));
    }

    #[test]
    fn filter_examples() {
        let policy = WeightsFilterPolicy::new(2, 3, vec![2, 2]).unwrap();
        let mut unit = vec![0i64; 3];
        unit[0] = 1;
        assert!(!filter_check(&policy, &unit, Scheme::Si).is_accept());
        assert!(filter_check(&policy, &[1, 1, 0], Scheme::Si).is_accept());
        assert!(!filter_check(&policy, &[1, 1, 1, 1], Scheme::Si).is_accept());
        assert!(filter_check(&policy, &[1, 1, 1, 1], Scheme::Mi).is_accept());
        assert!(!filter_check(&policy, &[1, 1, 1], Scheme::Mi).is_accept());
    }

    #[test]
    fn serving_logs_every_request() {
        let mut a = authority();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = a.serve_si_key(&[3, -1, 2, 5]).unwrap();
        assert_eq!(a.log().len(), 1);
        assert_eq!(a.log()[0].verdict, Outcome::Issued);
        let solver = crate::dlog::DlogSolver::build(a.params(), 1000, crate::dlog::DlogMode::Bsgs).unwrap();
        let ct = si_encrypt(a.si_public_key(), &[1, 1, 1, 1], 10, &mut rng).unwrap();
        assert_eq!(si_decrypt(a.si_public_key(), &ct, &k, &solver).unwrap(), 9);

        assert!(matches!(a.serve_si_key(&[0, 1, 0, 0]), Err(Error::FilterRejected(_))));
        assert!(matches!(a.serve_si_key(&[0, 0, 0, 0]), Err(Error::FilterRejected(_))));
        assert!(matches!(a.serve_si_key(&[500, 1, 0, 0]), Err(Error::FilterRejected(_))));
        assert!(a.serve_mi_key(&[1, 2, 3, 4]).is_ok());
        assert_eq!(a.log().len(), 5);
        let rejected: Vec<_> = a.log().iter().filter(|r| r.verdict == Outcome::Rejected).collect();
        assert_eq!(rejected.len(), 3);
        assert!(rejected.iter().all(|r| r.reason.is_some()));
    }

    #[test]
    fn log_file_is_appended() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("keys.log");
        let mut a = authority().with_log_file(&path).unwrap();
        a.serve_si_key(&[1, 1, 0, 0]).unwrap();
        let _ = a.serve_si_key(&[1, 0, 0, 0]);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
    }
}
