//! Headless MMS messaging stack.
//!
//! Player side: [`mime`] decapsulation, [`syntax`] parsing into a
//! [`smil::SmilTree`], [`layout`] fitting and the [`scheduler`] timing
//! engine. Authoring side: [`composer`] turns a slide manifest into a tree
//! and an encapsulated `.mms` file. Network side: [`transport`] frames and
//! client sessions, the [`relay`] store-and-forward server, and the
//! deterministic [`sim`] harness used for scenarios and benchmarks.

pub mod composer;
pub mod layout;
pub mod mime;
pub mod net;
pub mod relay;
pub mod scheduler;
pub mod server;
pub mod sim;
pub mod smil;
pub mod syntax;
pub mod transport;
