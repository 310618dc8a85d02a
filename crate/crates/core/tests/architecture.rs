mod common;

use std::collections::BTreeSet;

use common::{random_tensor, small_cfg};
use tetranet::arch::{
    build_model, wiring, Dec2Variant, Edge, EdgeKind, MapRef, ModelConfig, Resample, StageBlock, WiringTable,
};
use tetranet::data::RegistrationPair;
use tetranet::losses::LossConfig;
use tetranet::train::loss_and_grads;

fn field_shape(cfg: &ModelConfig, side: usize) -> Vec<usize> {
    let net = build_model(cfg, 3).unwrap();
    let fixed = random_tensor(&[1, 1, side, side, side], 1, 1.0);
    let moving = random_tensor(&[1, 1, side, side, side], 2, 1.0);
    net.predict(&fixed, &moving).unwrap().shape().to_vec()
}

#[test]
fn every_variant_emits_full_resolution_field() {
    for v in Dec2Variant::ALL {
        assert_eq!(field_shape(&small_cfg(2, v), 16), vec![1, 3, 16, 16, 16], "{v}");
    }
}

#[test]
fn levels_one_to_four_emit_full_resolution_field() {
    for levels in 1..=4 {
        assert_eq!(field_shape(&small_cfg(levels, Dec2Variant::Unet), 16), vec![1, 3, 16, 16, 16]);
    }
}

#[test]
fn default_widths_at_32_cubed() {
    let cfg = ModelConfig {
        decoder_levels: 1,
        ..ModelConfig::default()
    };
    assert_eq!(field_shape(&cfg, 32), vec![1, 3, 32, 32, 32]);
}

#[test]
fn parameter_count_increases_with_levels() {
    for v in Dec2Variant::ALL {
        let counts: Vec<usize> = (1..=4)
            .map(|l| build_model(&small_cfg(l, v), 0).unwrap().param_count())
            .collect();
        assert!(counts.windows(2).all(|w| w[1] > w[0]), "{v}: {counts:?}");
    }
    let defaults: Vec<usize> = (1..=4)
        .map(|l| {
            let cfg = ModelConfig {
                decoder_levels: l,
                ..ModelConfig::default()
            };
            build_model(&cfg, 0).unwrap().param_count()
        })
        .collect();
    assert!(defaults.windows(2).all(|w| w[1] > w[0]), "{defaults:?}");
}

/// Labelled edge set of a wiring level with maps named independently of the
/// table's own types.
fn edge_set(table: &WiringTable, level: usize) -> BTreeSet<(String, String, String, usize)> {
    let name = |m: MapRef| match m {
        MapRef::Enc(i) => format!("enc{i}"),
        MapRef::Dec { level, stage } => format!("dec{level}.{stage}"),
    };
    let mut out = BTreeSet::new();
    for s in &table.levels[level - 1] {
        for e in s.edges() {
            out.insert((name(e.source), format!("dec{level}.{}", s.stage), format!("{:?}", e.resample), e.channels));
        }
    }
    out
}

#[test]
fn one_level_model_is_a_plain_unet() {
    for widths in [&[4usize, 6, 6, 8][..], &[16, 32, 32, 64], &[3, 5]] {
        let cfg = ModelConfig {
            decoder_levels: 1,
            ..ModelConfig::with_widths(widths)
        };
        let table = wiring(&cfg).unwrap();
        let l = widths.len();
        let enc_ch = |i: usize| if i == 0 { cfg.in_channels } else { widths[i - 1] };
        let dec_ch = |k: usize| if k == 0 { widths[l - 1] } else { widths[l - k] };

        // Plain U-Net: upsample the bottleneck, then at every scale
        // concatenate the encoder map with the upsampled decoder map.
        let mut plain = BTreeSet::new();
        plain.insert((format!("enc{l}"), "dec1.0".to_string(), "Identity".to_string(), enc_ch(l)));
        for k in 1..=l {
            plain.insert((format!("enc{}", l - k), format!("dec1.{k}"), "Identity".to_string(), enc_ch(l - k)));
            plain.insert((format!("dec1.{}", k - 1), format!("dec1.{k}"), "Identity".to_string(), dec_ch(k - 1)));
        }
        assert_eq!(edge_set(&table, 1), plain);

        assert_eq!(table.levels.len(), 1);
        let stages = &table.levels[0];
        assert_eq!(stages.len(), l + 1);
        for (k, s) in stages.iter().enumerate() {
            assert!(s.fused.is_empty());
            assert_eq!(s.upsample, k < l);
            assert_eq!(s.block, if k == 0 { StageBlock::UpOnly } else { StageBlock::Conv });
            assert_eq!(s.out_channels, dec_ch(k));
        }

        let net = build_model(&cfg, 0).unwrap();
        for name in net.params().names() {
            assert!(
                name.starts_with("enc.") || name.starts_with("dec1.") || name.starts_with("head."),
                "{name}"
            );
        }
    }
}

#[test]
fn encoder_skip_toggle_only_removes_encoder_edges() {
    for v in Dec2Variant::ALL {
        for levels in 2..=3 {
            let on = small_cfg(levels, v);
            let off = ModelConfig {
                use_encoder_skips_in_dec2: false,
                ..on.clone()
            };
            let (a, b) = (wiring(&on).unwrap(), wiring(&off).unwrap());
            assert_eq!(a.levels[0], b.levels[0], "{v}: first level must not change");
            for (sa, sb) in a.levels.iter().flatten().zip(b.levels.iter().flatten()).skip(a.levels[0].len()) {
                let keep = |es: &[Edge]| -> Vec<Edge> {
                    es.iter().filter(|e| e.kind != EdgeKind::EncoderSkip).copied().collect()
                };
                assert_eq!(keep(&sa.fused), sb.fused, "{v}");
                assert_eq!(keep(&sa.direct), sb.direct, "{v}");
                assert!(sb.edges().all(|e| e.kind != EdgeKind::EncoderSkip));
                assert_eq!((sa.scale, sa.block, sa.upsample, sa.out_channels), (sb.scale, sb.block, sb.upsample, sb.out_channels));
                if sa.stage > 0 {
                    assert_eq!(sa.edges().filter(|e| e.kind == EdgeKind::EncoderSkip).count(), 1, "{v}");
                }
            }
        }
    }
}

#[test]
fn every_parameter_receives_gradient() {
    for v in Dec2Variant::ALL {
        for levels in [1, 2, 3] {
            if levels == 1 && v != Dec2Variant::Unet {
                continue;
            }
            let cfg = small_cfg(levels, v);
            let net = build_model(&cfg, 5).unwrap();
            let pair = RegistrationPair {
                name: "r".into(),
                fixed: common::random_volume([16, 16, 16], 11),
                moving: common::random_volume([16, 16, 16], 12),
                fixed_labels: None,
                moving_labels: None,
            };
            let (_, grads) = loss_and_grads(&net, &pair, &LossConfig::default()).unwrap();
            assert_eq!(grads.len(), net.params().len());
            for (name, g) in &grads {
                assert!(g.data().iter().any(|&x| x != 0.0), "{v} levels {levels}: `{name}` gets no gradient");
            }
        }
    }
}

#[test]
fn identical_images_give_near_zero_field_at_init() {
    for seed in 0..5 {
        let net = build_model(&small_cfg(2, Dec2Variant::Unet), seed).unwrap();
        let img = random_tensor(&[1, 1, 16, 16, 16], 100 + seed, 1.0);
        let f = net.predict(&img, &img).unwrap();
        let max = f.data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(max < 0.1, "seed {seed}: {max}");
    }
}

#[test]
fn forward_is_deterministic() {
    let cfg = small_cfg(2, Dec2Variant::Unet3Plus);
    let a = build_model(&cfg, 9).unwrap();
    let b = build_model(&cfg, 9).unwrap();
    let fixed = random_tensor(&[1, 1, 16, 16, 16], 1, 1.0);
    let moving = random_tensor(&[1, 1, 16, 16, 16], 2, 1.0);
    assert_eq!(a.params(), b.params());
    assert_eq!(a.predict(&fixed, &moving).unwrap(), b.predict(&fixed, &moving).unwrap());
    assert_ne!(build_model(&cfg, 10).unwrap().params(), a.params());
}

#[test]
fn unet_second_level_channel_bookkeeping() {
    let cfg = small_cfg(2, Dec2Variant::Unet);
    let table = wiring(&cfg).unwrap();
    for k in 1..=cfg.scales {
        let s = table.stage(2, k);
        let total: usize = s.edges().map(|e| e.channels).sum();
        assert_eq!(total, cfg.enc_width(cfg.scales - k) + 2 * cfg.dec_width(k - 1));
        assert!(s.edges().all(|e| e.resample == Resample::Identity));
    }
}

#[test]
fn rejects_indivisible_input() {
    let net = build_model(&small_cfg(1, Dec2Variant::Unet), 0).unwrap();
    let x = random_tensor(&[1, 1, 12, 16, 16], 0, 1.0);
    assert!(net.predict(&x, &x).is_err());
}
