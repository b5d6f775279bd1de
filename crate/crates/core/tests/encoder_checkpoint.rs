use textguard_core::encoder::{init_model, parameter_count, EncoderError, EncoderModel, TransformerConfig};

#[test]
fn base_preset_reloads_with_twelve_layers() {
    let mut config = TransformerConfig::base(64, 2);
    config.max_len = 16;
    let model = init_model::<f32>(&config, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("base.ckpt");
    model.save_checkpoint(&path).unwrap();
    drop(model);
    let back = EncoderModel::<f32>::load_checkpoint(&path).unwrap();
    assert_eq!(back.config.num_layers, 12);
    assert_eq!(back.params.layers.len(), 12);
    assert_eq!((back.config.hidden, back.config.num_heads, back.config.ff_size), (768, 12, 3072));
    assert_eq!(back.parameter_count(), parameter_count(&config));
}

#[test]
fn mini_round_trip_is_bitwise_and_corruption_is_reported() {
    let config = TransformerConfig::mini(50, 4);
    let model = init_model::<f32>(&config, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mini.ckpt");
    model.save_checkpoint(&path).unwrap();
    let back = EncoderModel::<f32>::load_checkpoint(&path).unwrap();
    let bits = |m: &EncoderModel<f32>| -> Vec<u32> {
        m.params.named().into_iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
    };
    assert_eq!(bits(&back), bits(&model));
    assert_eq!(back.config, model.config);

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] ^= 0xff;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(EncoderModel::<f32>::load_checkpoint(&path), Err(EncoderError::Checkpoint(_))));
    assert!(matches!(
        EncoderModel::<f32>::load_checkpoint(dir.path().join("absent.ckpt")),
        Err(EncoderError::Checkpoint(_))
    ));
}
