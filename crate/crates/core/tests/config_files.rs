use agnet::config::RunConfig;

#[test]
fn shipped_configs_parse() {
    for text in [include_str!("../../../configs/desk.toml"), include_str!("../../../configs/manifest.toml")] {
        let cfg = RunConfig::from_toml_str(text).unwrap();
        cfg.schema.resolve().unwrap();
    }
}

#[test]
fn readme_config_example_parses() {
    let readme = include_str!("../../../README.md");
    let start = readme.find("```toml\n").expect("toml block") + "```toml\n".len();
    let end = start + readme[start..].find("```").expect("closing fence");
    let cfg = RunConfig::from_toml_str(&readme[start..end]).unwrap();
    assert_eq!(cfg.train.crop, Some(56));
}
