//! Learning and applying first-order-logic judgment rules for legal judgment
//! prediction.
//!
//! The engine runs in three phases:
//!
//! 1. **Initialization** ([`rule_init`]): an agent summarizes grouped
//!    precedents, defines predicate symbols and emits one rule per target label.
//! 2. **Optimization** ([`opt_tree`], [`quiz`], [`cacl`]): each rule is scored
//!    on a quiz built from confusable cases ([`confusable`]) and refined by
//!    contrasting correct and incorrect reasoning, growing a weighted tree of
//!    rule versions.
//! 3. **Examination** ([`examination`]): a lightweight classifier proposes
//!    candidate labels and the agent checks each candidate's rule against the
//!    fact.
//!
//! [`pipeline`] wires the phases into resumable stages over a run directory.

pub mod agents;
pub mod cacl;
pub mod confusable;
pub mod corpus;
pub mod examination;
pub mod exec;
pub mod fol_rules;
pub mod jurist;
pub mod metrics;
pub mod opt_tree;
pub mod pipeline;
pub mod prompts;
pub mod quiz;
pub mod rule_init;
pub mod synthetic;

pub use exec::Executor;
