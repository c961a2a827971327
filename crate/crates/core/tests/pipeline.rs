use freqlab::analysis::{trace_spectral_profile, user_band_energies};
use freqlab::dataset::{build_split, synthesize, SplitDataset, SynthConfig};
use freqlab::graph::{build_cooccurrence, local_subgraph, CooccurrenceGraph};
use freqlab::model::{cosine, fuse, pretrain_id_embeddings, text_surrogate_embeddings, ModelConfig, SkipGramConfig, TfmSettings};
use freqlab::numcore::DenseMatrix;
use freqlab::tfm::ButterworthSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixture() -> (SplitDataset, CooccurrenceGraph) {
    let out = synthesize(&SynthConfig {
        users: 300,
        items: 150,
        mean_len: 15,
        seed: 77,
        ..SynthConfig::default()
    })
    .unwrap();
    let split = build_split(&out.log, 5, 50).unwrap();
    let graph = build_cooccurrence(&split, true).unwrap();
    (split, graph)
}

fn tokens(split: &SplitDataset, model: &ModelConfig) -> DenseMatrix {
    let id = pretrain_id_embeddings(split, &SkipGramConfig { epochs: 2, ..Default::default() }).unwrap().table;
    let text = text_surrogate_embeddings(split, model.d_text, 1).unwrap();
    fuse(&id, &text, &model.init_mlp()).unwrap()
}

#[test]
fn held_out_neighbours_are_closer_than_random_pairs() {
    let (split, _) = fixture();
    let table = pretrain_id_embeddings(&split, &SkipGramConfig::default()).unwrap().table;
    let row = |i: usize| table.vectors.row(i).to_vec();
    let mut adjacent = 0.0;
    for s in &split.sequences {
        let h = s.test_history();
        adjacent += cosine(&row(h[h.len() - 1]), &row(s.test_target()));
    }
    adjacent /= split.sequences.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = split.n_items();
    let random: f64 = (0..2000)
        .map(|_| cosine(&row(rng.random_range(0..n)), &row(rng.random_range(0..n))))
        .sum::<f64>()
        / 2000.0;
    assert!(adjacent > random + 0.1, "adjacent {adjacent:.3} vs random {random:.3}");
}

#[test]
fn profiles_add_over_users() {
    let (split, graph) = fixture();
    let model = ModelConfig {
        tfm: TfmSettings::on(ButterworthSpec::new(0.3, 2).unwrap()),
        ..ModelConfig::default()
    };
    let tok = tokens(&split, &model);
    let enc = model.encoder().unwrap();
    let seqs: Vec<Vec<usize>> = split.sequences.iter().map(|s| s.train().to_vec()).collect();
    let (a, b) = seqs.split_at(seqs.len() / 3);
    let whole = trace_spectral_profile(&enc, &tok, &seqs, &graph, 4).unwrap();
    let mut parts = trace_spectral_profile(&enc, &tok, a, &graph, 4).unwrap();
    parts.merge(&trace_spectral_profile(&enc, &tok, b, &graph, 4).unwrap()).unwrap();
    assert_eq!(whole.users, parts.users);
    for (x, y) in whole.raw.iter().flatten().zip(parts.raw.iter().flatten()) {
        assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
    }
    for layer in whole.shares() {
        assert!((layer.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn band_energies_preserve_each_users_energy() {
    let (split, graph) = fixture();
    let model = ModelConfig::default();
    let tok = tokens(&split, &model);
    let enc = model.encoder().unwrap();
    let mut checked = 0;
    for s in split.sequences.iter().take(40) {
        let seq = s.train();
        let local = local_subgraph(&graph, &seq[1..]).unwrap();
        if local.is_edgeless() {
            continue;
        }
        let trace = enc.encode(&tok, &seq[..seq.len() - 1], true).unwrap().trace.unwrap();
        let bands = user_band_energies(&trace.layers, &local, 4).unwrap();
        for (h, e) in trace.layers.iter().zip(&bands) {
            let total: f64 = e.iter().sum();
            assert!((total - h.frobenius_sq()).abs() <= 1e-10 * h.frobenius_sq());
        }
        checked += 1;
    }
    assert!(checked > 20);
}

#[test]
fn tfm_changes_only_hidden_states_not_the_input_layer() {
    let (split, _) = fixture();
    let mut model = ModelConfig::default();
    let tok = tokens(&split, &model);
    let seq = split.sequences[0].train();
    let off = model.encoder().unwrap().encode(&tok, seq, true).unwrap().trace.unwrap();
    model.tfm = TfmSettings::on(ButterworthSpec::new(0.3, 2).unwrap());
    let on = model.encoder().unwrap().encode(&tok, seq, true).unwrap().trace.unwrap();
    assert_eq!(off.layers[0].as_slice(), on.layers[0].as_slice());
    assert!(off.layers[1].max_abs_diff(&on.layers[1]) > 1e-6);
}
