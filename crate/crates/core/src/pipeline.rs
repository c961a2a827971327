//! Stage helpers shared by the command line and the end-to-end tests.

use crate::config::RunConfig;
use crate::dataset::{Phase, SplitDataset};
use crate::error::Result;
use crate::evalharness::{baselines, evaluate, MetricsReport};
use crate::glpf::polynomial_filter;
use crate::graph::{build_cooccurrence, CooccurrenceGraph};
use crate::model::{
    concat_inputs, load_external, pretrain_id_embeddings, text_surrogate_embeddings, train, EmbeddingTable,
    TrainOutcome,
};

/// Skip-gram vectors, low-pass filtered on `graph` when G-LPF is enabled.
pub fn id_embeddings(split: &SplitDataset, graph: &CooccurrenceGraph, config: &RunConfig) -> Result<EmbeddingTable> {
    let mut table = pretrain_id_embeddings(split, &config.skipgram)?.table;
    if config.glpf.enabled {
        table.vectors = polynomial_filter(graph, &config.glpf.spec()?, &table.vectors)?;
    }
    Ok(table)
}

pub fn text_embeddings(split: &SplitDataset, config: &RunConfig) -> Result<EmbeddingTable> {
    match &config.text.external {
        Some(path) => load_external(path, &split.items, config.text.d_text),
        None => text_surrogate_embeddings(split, config.text.d_text, config.text.seed),
    }
}

#[derive(Debug, Clone)]
pub struct EndToEnd {
    pub outcome: TrainOutcome,
    pub test: MetricsReport,
    pub random: MetricsReport,
    pub popularity: MetricsReport,
}

/// Graph, embeddings, training, then test metrics for the model and both floors.
pub fn run_end_to_end(split: &SplitDataset, config: &RunConfig) -> Result<EndToEnd> {
    config.validate()?;
    let graph = build_cooccurrence(split, config.glpf.binarize)?;
    let id = id_embeddings(split, &graph, config)?;
    let text = text_embeddings(split, config)?;
    let inputs = concat_inputs(&id, &text)?;
    let outcome = train(split, &inputs, &config.model, &config.train, &config.eval)?;
    let encoder = config.model.encoder()?;
    let tokens = outcome.mlp.forward(&inputs);
    let mut test = evaluate(&encoder, &tokens, split, Phase::Test, &config.eval)?;
    let hash = config.hash();
    test.config_hash = Some(hash.clone());
    let mut floors = baselines(split, Phase::Test, &config.eval)?;
    for f in &mut floors {
        f.config_hash = Some(hash.clone());
    }
    let popularity = floors.pop().unwrap();
    let random = floors.pop().unwrap();
    Ok(EndToEnd {
        outcome,
        test,
        random,
        popularity,
    })
}
