//! Backend services: job queue, REST API and HTTP gateway.

pub mod clock;
pub mod jobs;
pub mod services;
pub mod config;
pub mod http;
