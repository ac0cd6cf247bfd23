//! Task definitions, data loading, synthetic generators and metrics.

pub mod metrics;
mod spec;
pub mod synth;
pub mod tokenizer;

pub use metrics::{aggregate, Aggregate, Metric, MetricBundle, Score};
pub use spec::{load_task, read_examples, score_grid, score_string, DataSource, Example, Splits, Target, TaskSpec};
pub use synth::{synth_task, synthetic_spec, topic_corpus};
pub use tokenizer::Tokenizer;
