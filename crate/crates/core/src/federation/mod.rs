//! Clients, server, message protocol and the synchronous round driver.

mod client;
mod message;
mod replay;
mod round;
mod sampler;
mod server;
pub mod wire;

pub use client::{LocalStep, SourceClient, TargetClient};
pub use message::{ClientId, Message, TARGET_ID};
pub use replay::ReplayReport;
pub use round::{Federation, InitReport, RoundReport, RoundSchedule};
pub use sampler::BatchSampler;
pub use server::{ConsistencyStep, DiscStep, Server};
