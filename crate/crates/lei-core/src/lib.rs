//! Edge-side pipeline that asks a remote LLM to propose analytic tasks for a
//! local sensor stream, turns the proposals into Python scripts, validates and
//! repairs them in a sandbox, and schedules the survivors under CPU/memory
//! headroom gates — while recording latency, token throughput, reliability,
//! and resource-utilization metrics for every run.

pub mod clock;
pub mod code_generator;
pub mod config;
pub mod fsutil;
pub mod ingestion;
pub mod llm_client;
pub mod metrics;
pub mod pipeline;
pub mod resource_monitor;
pub mod sandbox;
pub mod scheduler;
pub mod step;
pub mod task_generator;
pub mod validator;
