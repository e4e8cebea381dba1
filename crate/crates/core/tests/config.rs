use accut::config::{parse_config, parse_config_str, ExperimentConfig, LoadedConfig};
use accut::objectives::OperatingMode;
use accut::phantom::PhantomParams;
use accut::Error;

fn key_of(text: &str) -> String {
    match parse_config_str(text).unwrap_err() {
        Error::Config { key, .. } => key,
        other => panic!("expected a config error, got {other}"),
    }
}

#[test]
fn empty_file_gives_defaults() {
    let c = parse_config_str("").unwrap();
    assert_eq!(c.config, ExperimentConfig::default());
    assert_eq!(c, LoadedConfig::defaults());
    assert_eq!(c.config.data.target, PhantomParams::target());
}

#[test]
fn mode_strings_select_weight_tables() {
    let c = parse_config_str("[loss]\nmode = \"accut_s\"\n").unwrap();
    assert_eq!(c.config.loss.mode, OperatingMode::AccutS);
    let w = c.config.loss.weights();
    assert_eq!((w.seg_source, w.seg_target), (1.0, 0.0));
    let c = parse_config_str("[loss]\nmode = \"accut_st\"\n").unwrap();
    let w = c.config.loss.weights();
    assert_eq!((w.seg_source, w.seg_target), (0.5, 0.5));
    assert_eq!(key_of("[loss]\nmode = \"accut_x\"\n"), "loss.mode");
}

#[test]
fn errors_name_the_key() {
    assert_eq!(key_of("[train]\nepochz = 3\n"), "train.epochz");
    assert_eq!(key_of("[train]\nepochs = \"three\"\n"), "train.epochs");
    assert_eq!(key_of("[data.target]\nspeckle_strength = []\n"), "data.target.speckle_strength");
    assert_eq!(key_of("[loss]\ntemperature = 0.0\n"), "loss.temperature");
    assert_eq!(key_of("bogus = 1\n"), "bogus");
    let e = parse_config_str("[train]\nepochs = 1\nepochs = 2\n").unwrap_err();
    assert!(e.to_string().contains("duplicate"), "{e}");
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn partial_sections_keep_their_own_defaults() {
    let c = parse_config_str("[data.target]\nspeckle_strength = 0.2\n[eval.uda]\nfolds = 3\n").unwrap();
    let expected = PhantomParams {
        speckle_strength: 0.2,
        ..PhantomParams::target()
    };
    assert_eq!(c.config.data.target, expected);
    assert_eq!(c.config.eval.uda.folds, 3);
    assert_eq!(c.config.eval.uda.epochs, 15);
}

#[test]
fn hash_tracks_the_resolved_config() {
    let a = parse_config_str("[train]\nepochs = 250\n").unwrap();
    let b = parse_config_str("").unwrap();
    let c = parse_config_str("[train]\nepochs = 10\n").unwrap();
    assert_eq!(a.hash, b.hash);
    assert_ne!(a.hash, c.hash);
    assert_eq!(a.hash.len(), 64);

    let dir = tempfile::tempdir().unwrap();
    let path = c.write_into(dir.path()).unwrap();
    let back = parse_config(&path).unwrap();
    assert_eq!(back, c);
}

#[test]
fn cross_section_checks() {
    assert_eq!(key_of("[train]\nimage_size = [32, 64]\n"), "train.image_size");
    assert_eq!(key_of("[eval.uda.backbone]\nkind = \"efficientnet_b2\"\n"), "eval.uda.backbone.kind");
    let c = parse_config_str("[eval.uda.backbone]\nkind = \"unet\"\nwidth = 8\nlevels = 3\n").unwrap();
    assert_eq!(
        c.config.eval.uda.backbone,
        accut::uda::Backbone::Unet { width: 8, levels: 3 }
    );
    assert!(parse_config(std::path::Path::new("/nonexistent/x.toml")).is_err());
}
