mod common;

use rand::Rng;

use common::{rng, span_cls_equivalence};
use spfg::encoder::{read_checkpoint, write_checkpoint, Checkpoint, Encoder, EncoderConfig};
use spfg::numcore::{Graph, ParamStore};

#[test]
fn span_cls_equals_masked_full_sequence() {
    let worst = span_cls_equivalence(100, 21);
    assert!(worst <= 1e-6, "max deviation {worst:e}");
}

fn small_encoder(seed: u64) -> (Encoder, ParamStore<f64>) {
    let mut r = rng(seed);
    let mut store = ParamStore::<f64>::new();
    let cfg = EncoderConfig {
        vocab_size: 20,
        hidden: 8,
        layers: 2,
        heads: 2,
        intermediate: 16,
        max_positions: 16,
        dropout: 0.0,
        attention_dropout: 0.0,
    };
    (Encoder::new(&mut store, cfg, &mut r).unwrap(), store)
}

fn encode(enc: &Encoder, store: &ParamStore<f64>, ids: &[usize], mask: &[bool]) -> Vec<Vec<f64>> {
    let mut g = Graph::<f64>::eval();
    let vars = store.bind(&mut g);
    let h = enc.encode(&mut g, &vars, ids, mask).unwrap();
    g.value(h).to_rows()
}

#[test]
fn masked_keys_do_not_influence_visible_positions() {
    let (enc, store) = small_encoder(1);
    let mut r = rng(2);
    for _ in 0..20 {
        let len = r.random_range(2..12);
        let ids: Vec<usize> = (0..len).map(|_| r.random_range(0..20)).collect();
        let mut mask: Vec<bool> = (0..len).map(|_| r.random_bool(0.6)).collect();
        mask[0] = true;
        let mut other = ids.clone();
        for (i, id) in other.iter_mut().enumerate() {
            if !mask[i] {
                *id = (*id + 1 + r.random_range(0..18)) % 20;
            }
        }
        let a = encode(&enc, &store, &ids, &mask);
        let b = encode(&enc, &store, &other, &mask);
        for i in (0..len).filter(|&i| mask[i]) {
            assert_eq!(a[i], b[i], "visible position {i} changed");
        }
    }
}

#[test]
fn encoder_rejects_bad_inputs() {
    let (enc, store) = small_encoder(3);
    let mut g = Graph::<f64>::eval();
    let vars = store.bind(&mut g);
    assert!(enc.encode(&mut g, &vars, &[], &[]).is_err());
    assert!(enc.encode(&mut g, &vars, &[1; 17], &[true; 17]).is_err());
    assert!(enc.encode(&mut g, &vars, &[1, 2], &[true]).is_err());
    assert!(enc.encode(&mut g, &vars, &[1, 2], &[false, false]).is_err());
    let bad = EncoderConfig {
        hidden: 10,
        heads: 3,
        ..EncoderConfig::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let (_, store) = small_encoder(4);
    let ckpt = Checkpoint {
        kind: "si".into(),
        config: serde_json::json!({ "hidden": 8 }),
        meta: serde_json::json!({ "vocab": ["a", "b"] }),
        params: store.cast::<f32>(),
    };
    let bytes = ckpt.to_bytes().unwrap();
    assert!(bytes.starts_with(b"SPFG1\n"));
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert_eq!(back.params.names(), ckpt.params.names());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    write_checkpoint(&path, &ckpt).unwrap();
    assert_eq!(read_checkpoint(&path).unwrap().to_bytes().unwrap(), bytes);

    let mut corrupt = bytes.clone();
    corrupt[0] = b'X';
    assert!(Checkpoint::from_bytes(&corrupt).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
}
