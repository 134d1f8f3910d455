//! Composable radio-network emulators and the business-scenario harnesses
//! built on them.
//!
//! Basic emulators: [`users`] (mobility and service arrivals),
//! [`largescale`] (path loss, antenna pattern, shadowing), [`channel`]
//! (small-scale fading and RE-level responses) and [`phy`] (measurement,
//! link abstraction and scheduling). [`combined`] composes them into the
//! protocol-stack, coverage and link-channel services. [`rl`], [`csi`] and
//! [`traffic`] are the scenario harnesses; [`store`] persists datasets by
//! canonical parameter key.

pub mod channel;
pub mod combined;
pub mod csi;
pub mod largescale;
pub mod linalg;
pub mod phy;
pub mod rl;
pub mod rng;
pub mod scenario;
pub mod store;
pub mod traffic;
pub mod users;
