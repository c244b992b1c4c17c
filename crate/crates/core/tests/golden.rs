//! Byte-stable outputs for fixed seeds. Regenerate with `IJEPA_BLESS=1`.

use std::path::PathBuf;

use ijepa::backbone::{Encoder, ViTConfig};
use ijepa::data::{self, SynthConfig};
use ijepa::evaluation::{extract_features, Representation};
use ijepa::masking::{sample_masks, MaskRecord, MaskSpec};
use ijepa::patch::{embed_patches, Image};
use ijepa::predictor::{Predictor, PredictorConfig};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct Golden {
    shape: Vec<usize>,
    values: Vec<f32>,
}

fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name)
}

fn check_text(name: &str, text: &str) {
    let path = golden_path(name);
    if std::env::var_os("IJEPA_BLESS").is_some() {
        std::fs::write(&path, text).unwrap();
    }
    let want =
        std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e} (run with IJEPA_BLESS=1)", path.display()));
    assert_eq!(text, want, "{name} drifted");
}

fn check_array(name: &str, a: &Array2<f32>) {
    let g = Golden {
        shape: a.shape().to_vec(),
        values: a.iter().copied().collect(),
    };
    check_text(name, &serde_json::to_string(&g).unwrap());
    // Exact float round trip through the file.
    let back: Golden = serde_json::from_str(&std::fs::read_to_string(golden_path(name)).unwrap()).unwrap();
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back.values), bits(&g.values));
}

fn images(n: usize) -> Vec<Image> {
    let cfg = SynthConfig {
        count: n,
        seed: 2024,
        ..SynthConfig::default()
    };
    data::generate(&cfg).unwrap().images
}

#[test]
fn embed_patches_golden() {
    let (enc, params) = Encoder::<f32>::init(ViTConfig::default(), 11).unwrap();
    let img = &images(1)[0];
    let patches = enc.patches(img).unwrap();
    let idx: Vec<usize> = (0..patches.nrows()).step_by(5).collect();
    let rows = patches.select(ndarray::Axis(0), &idx);
    let pos = enc.pos_table().select(ndarray::Axis(0), &idx);
    let w = params.matrix(params.id("patch_embed.weight").unwrap());
    let b = params.vector(params.id("patch_embed.bias").unwrap());
    let t = embed_patches(&idx, rows.view(), w, b, pos.view()).unwrap();
    check_array("embed_patches.json", &t.embeddings);
}

#[test]
fn encoder_forward_golden() {
    let (enc, params) = Encoder::<f32>::init(ViTConfig::default(), 11).unwrap();
    let out = enc.forward_full_image(&params, &images(1)[0]).unwrap();
    check_array("encoder_forward.json", &out.embeddings);
}

#[test]
fn predictor_golden() {
    let cfg = ViTConfig::default();
    let (enc, params) = Encoder::<f32>::init(cfg, 11).unwrap();
    let ctx_idx: Vec<usize> = (0..32).collect();
    let ctx = enc.forward_indices(&params, &images(1)[0], &ctx_idx).unwrap();
    let (pred, pp) = Predictor::<f32>::init(
        PredictorConfig::desk_default(cfg.width, cfg.heads),
        enc.pos_table().clone(),
        cfg.width,
        12,
    )
    .unwrap();
    let out = pred.predict_block(&pp, &ctx, &[42, 43, 50, 51]).unwrap();
    check_array("predictor_block.json", &out.embeddings);
}

#[test]
fn mask_sampler_golden() {
    let samples = sample_masks(14, 14, &MaskSpec::default(), 5, 4).unwrap();
    let records: Vec<MaskRecord> = samples.iter().map(|(c, t)| MaskRecord::new(c, t)).collect();
    check_text("masks_14x14_seed5.json", &serde_json::to_string(&records).unwrap());
}

#[test]
fn features_golden() {
    let (enc, params) = Encoder::<f32>::init(ViTConfig::default(), 11).unwrap();
    let f = extract_features(&enc, &params, &images(8), Representation::LastLayerAvgPool).unwrap();
    check_array("features_8.json", &f.mapv(|v| v as f32));
}
