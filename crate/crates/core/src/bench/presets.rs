//! Experiment matrices shipped in `presets/`.

/// `(name, spec file text)`.
pub const PRESETS: &[(&str, &str)] = &[
    ("ingest", include_str!("../../../../presets/ingest.toml")),
    ("count", include_str!("../../../../presets/count.toml")),
    ("filter-8p", include_str!("../../../../presets/filter-8p.toml")),
    ("filter-4p", include_str!("../../../../presets/filter-4p.toml")),
    ("constrained", include_str!("../../../../presets/constrained.toml")),
    ("small-chunks", include_str!("../../../../presets/small-chunks.toml")),
    ("wordcount", include_str!("../../../../presets/wordcount.toml")),
];

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}
