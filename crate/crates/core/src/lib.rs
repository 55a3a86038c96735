//! Simulation of the enhanced pRide privacy-preserving ride-hailing
//! protocol and the driver-location harvesting attack against its blinded
//! distance comparison.
//!
//! The crate is organised along the protocol's moving parts:
//!
//! - [`geo`] — exact integer UTM geometry: squared distances, grid
//!   bookkeeping, and rectangle-corner multilateration.
//! - [`she`] — the somewhat-homomorphic encryption interface with a
//!   transparent reference backend.
//! - [`protocol`] — service provider, rider, and driver state machines for
//!   the basic and enhanced protocol, producing adversary-view transcripts.
//! - [`attack`] — blinding-factor recovery by pairwise differences and GCD,
//!   unblinding, and location recovery with a rider-circle filter and
//!   nearest-road tiebreak.
//! - [`roadnet`] — the local road store standing in for an external
//!   nearest-road service, plus synthetic city generation.
//! - [`experiment`] — the seeded benchmark harness and report rendering.

pub mod attack;
pub mod experiment;
pub mod geo;
pub mod protocol;
pub mod roadnet;
pub mod seeds;
pub mod she;
