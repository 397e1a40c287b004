//! Content-based routing core: filters and publications, the covering
//! index, sealed envelopes, the simulated enclave with its paging cost
//! model, measurement-gated provisioning, sealed file bundles and the
//! workload/sweep harness.

pub mod bundle;
pub mod codec;
pub mod enclave;
pub mod envelope;
pub mod filter;
pub mod ids;
pub mod index;
pub mod par;
pub mod provisioning;
pub mod workload;

pub use enclave::{CostModel, EcallResult, Enclave, Measurement, Outcome, Reject};
pub use envelope::{Context, EnvelopeError, Identity, KeyRing, SealedEnvelope};
pub use filter::{parse_filter, render_filter, AttrValue, Constraint, Filter, FilterError, Predicate, Publication};
pub use ids::{FilterId, KeyId, PubId, SenderId, SubscriberId};
pub use index::{ContainmentIndex, IndexError, Match, MatchResult, MatchStats, Subscription};
pub use provisioning::{ScfTable, StartupConfig};
pub use workload::{Profile, RunRecord, Workload, WorkloadError, WorkloadSpec};
