mod common;

use common::*;
use mmave::model::{config_hash, load_checkpoint, save_checkpoint, AblationConfig, Model};

fn model(ablation: AblationConfig) -> Model<f32> {
    let t = toy(3, 8, 8, 5, 4, 1, 6, 10);
    Model::<f32>::new(t.config, ablation, t.scheme, t.vocab, 21).unwrap()
}

#[test]
fn saved_models_forward_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    for ab in [AblationConfig::multimodal(), AblationConfig { use_mtl: false, ..AblationConfig::text_only() }] {
        let mut m = model(ab);
        if let Some(vp) = m.value_params.as_mut() {
            vp.get_mut("head.w6").unwrap().data_mut()[0] += 1.0;
        }
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.ablation, m.ablation);
        assert_eq!(back.scheme, m.scheme);
        assert_eq!(back.vocab, m.vocab);
        assert_eq!(back.params, m.params);
        assert_eq!(back.value_params, m.value_params);
        let mut r = rng(2);
        for i in 0..20 {
            let inst = instance("x", 1 + i % 6, &[(0, 1, 1)], random_image(&mut r, 5, 4));
            let (a, b) = (m.forward(&inst).unwrap(), back.forward(&inst).unwrap());
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.y_attr), bits(&b.y_attr));
            assert_eq!(bits(a.y_value.data()), bits(b.y_value.data()));
            assert_eq!(m.predict(&inst).unwrap(), back.predict(&inst).unwrap());
        }
        // Saving the reloaded model reproduces the file.
        let again = dir.path().join("again.ckpt");
        save_checkpoint(&back, &again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }
}

#[test]
fn tampered_or_truncated_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let m = model(AblationConfig::multimodal());
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&m, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let text = String::from_utf8_lossy(&bytes);
    assert!(text.contains(&config_hash(&m.config, &m.ablation).unwrap()));

    let tampered = text.replacen("\"d_a\":8", "\"d_a\":9", 1);
    assert_ne!(tampered, text);
    let bad = dir.path().join("bad.ckpt");
    let header_len = bytes.windows(9).position(|w| w == b"\npayload\n").unwrap() + 9;
    let mut out = tampered.as_bytes()[..tampered.find("\npayload\n").unwrap() + 9].to_vec();
    out.extend_from_slice(&bytes[header_len..]);
    std::fs::write(&bad, out).unwrap();
    assert!(load_checkpoint(&bad).unwrap_err().to_string().contains("hash"));

    std::fs::write(&bad, &bytes[..bytes.len() - 6]).unwrap();
    assert!(load_checkpoint(&bad).is_err());
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    assert!(load_checkpoint(&bad).is_err());
    assert!(load_checkpoint(&dir.path().join("missing.ckpt")).is_err());
}
