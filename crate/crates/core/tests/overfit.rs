//! Every valid combination must be able to memorize one small batch.

use multiattn::combination::CombinationConfig;
use multiattn::model::{ModelConfig, MultiSourceModel, SourceKind};
use multiattn::optim::{Adam, AdamConfig};
use multiattn::recurrent::DecoderKind;
use multiattn::tasks::{gen_masked_copy, masked_copy_vocab, MaskedCopyParams};

#[test]
fn every_configuration_overfits_one_batch() {
    let params = MaskedCopyParams {
        n: 4,
        min_len: 4,
        max_len: 6,
        vocab_size: 8,
        mask_rate: 0.3,
    };
    let data = gen_masked_copy(5, &params).unwrap();
    for combination in CombinationConfig::all_valid() {
        let mut config = ModelConfig::new(vec![SourceKind::Text, SourceKind::Text], combination, DecoderKind::Cgru);
        config.embed_dim = 16;
        config.hidden_dim = 16;
        config.attn_dim = 16;
        let mut model = MultiSourceModel::new(config, masked_copy_vocab(8, 6), 1).unwrap();
        let batch: Vec<_> = data.iter().map(|e| model.encode_example(e).unwrap()).collect();
        let mut adam = Adam::new(AdamConfig { lr: 0.02, ..Default::default() }, model.store()).unwrap();
        let mut loss = f64::INFINITY;
        for _ in 0..2000 {
            let (l, grads) = model.batch_gradients(&batch).unwrap();
            loss = l;
            if loss < 0.05 {
                break;
            }
            adam.step(model.store_mut(), &grads).unwrap();
        }
        assert!(loss < 0.05, "{} stuck at loss {loss}", combination.label());
    }
}
