pub mod adgrad;
pub mod evalkit;
pub mod formats;
pub mod numkit;
pub mod policynet;
pub mod qstate;
pub mod rng;
pub mod trainer;
