use proptest::prelude::*;
use roofseg::backbone::FEATURE_WIDTH;
use roofseg::geom::Point3;
use roofseg::model::{ModelConfig, RoofSegModel};
use roofseg::nn::Ctx;
use roofseg::params::ParamStore;
use roofseg::pipeline::{Checkpoint, RunConfig};
use roofseg::querydec::DecoderConfig;
use roofseg::roofgen::{generate_roof, RoofFamily, RoofSpec};

fn small_model() -> (ParamStore<f32>, RoofSegModel) {
    let mut store = ParamStore::new();
    let config = ModelConfig {
        decoder: DecoderConfig {
            decoders: 4,
            ..Default::default()
        },
        ..Default::default()
    };
    let model = RoofSegModel::new(&mut store, config).unwrap();
    (store, model)
}

#[test]
fn forward_shapes_follow_the_hierarchy() {
    let (store, model) = small_model();
    for n in [256usize, 500, 2048] {
        let s = generate_roof(&RoofSpec::random(RoofFamily::Hip, n, 0.005, n as u64)).unwrap();
        let mut ctx = Ctx::eval(&store);
        let out = model.forward(&mut ctx, s.cloud.coords()).unwrap();
        let sizes = out.features.sizes();
        assert_eq!(sizes, (0..4).map(|l| n.div_ceil(4usize.pow(l))).collect::<Vec<_>>());
        for level in &out.features.levels {
            assert_eq!(ctx.tape.shape(level.features).1, FEATURE_WIDTH);
        }
        assert_eq!(out.levels.len(), 4);
        for l in &out.levels {
            assert_eq!(ctx.tape.shape(l.affinity), (16, n));
            assert_eq!(ctx.tape.shape(l.semantic), (16, 1));
        }
        assert_eq!(ctx.tape.shape(out.edge), (n, 1));
    }
}

#[test]
fn checkpoint_round_trip_gives_identical_predictions() {
    let dir = tempfile::TempDir::new().unwrap();
    let mut config = RunConfig::default();
    config.decoders = 4;
    config.seed = 3;
    let mut store = ParamStore::<f32>::new();
    let model = RoofSegModel::new(&mut store, config.model_config()).unwrap();
    let opt = roofseg::optim::AdamW::new(&store, config.weight_decay);
    let rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let path = dir.path().join("m.ckpt");
    Checkpoint::capture(&config, &store, &opt, &rng, 0, 0).save(&path).unwrap();
    let (_, loaded, loaded_store) = Checkpoint::load(&path).unwrap().build_model().unwrap();

    let s = generate_roof(&RoofSpec::random(RoofFamily::CrossHipped, 400, 0.01, 1)).unwrap();
    let c = s.cloud.coords();
    let a = model.predict(&mut Ctx::eval(&store), c, true).unwrap();
    let b = loaded.predict(&mut Ctx::eval(&loaded_store), c, true).unwrap();
    assert_eq!(a.masks.affinity, b.masks.affinity);
    assert_eq!(a.segmentation.labels, b.segmentation.labels);
}

fn arbitrary_cloud() -> impl Strategy<Value = Vec<Point3>> {
    let scale = prop_oneof![Just(1e-3), Just(1.0), Just(1e3)];
    (prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..160), scale)
        .prop_map(|(pts, s)| pts.into_iter().map(|p| p.map(|x| x * s)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn predictions_are_finite_and_normalized(coords in arbitrary_cloud(), dup in 0usize..3) {
        let (store, model) = small_model();
        let mut coords = coords;
        if dup > 0 {
            let first = coords[0];
            coords.extend(std::iter::repeat_n(first, 10 * dup));
        }
        let mut ctx = Ctx::eval(&store);
        let p = model.predict(&mut ctx, &coords, true).unwrap();
        prop_assert_eq!(p.segmentation.labels.len(), coords.len());
        prop_assert!(p.masks.probabilities.iter().all(|x| x.is_finite() && (0.0..=1.0).contains(x)));
        prop_assert!(p.masks.scores.iter().all(|x| x.is_finite() && (0.0..=1.0).contains(x)));
        prop_assert!(p.segmentation.labels.iter().all(|l| p.segmentation.positive.contains(l)));
    }
}
