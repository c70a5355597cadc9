//! Shipped experiment presets.

pub const NAMES: [&str; 4] = ["appendix-a2", "k0-sweep", "heterogeneity-slabel", "merit-descent"];

pub fn preset_text(name: &str) -> Option<&'static str> {
    Some(match name {
        "appendix-a2" => include_str!("presets/appendix-a2.toml"),
        "k0-sweep" => include_str!("presets/k0-sweep.toml"),
        "heterogeneity-slabel" => include_str!("presets/heterogeneity-slabel.toml"),
        "merit-descent" => include_str!("presets/merit-descent.toml"),
        _ => return None,
    })
}
