//! Canonical tissue label ids shared across the toolkit.

use std::collections::BTreeMap;

pub const BACKGROUND: u16 = 0;
pub const CSF: u16 = 1;
pub const CORTICAL_GM: u16 = 2;
pub const WM: u16 = 3;
pub const VENTRICLES: u16 = 4;
pub const CEREBELLUM: u16 = 5;
pub const DEEP_GM: u16 = 6;
pub const BRAINSTEM: u16 = 7;
/// Non-brain shell used by phantoms; never part of the 7 tissue classes.
pub const SKULL: u16 = 8;

pub const TISSUE_CLASSES: [u16; 7] = [
    CSF,
    CORTICAL_GM,
    WM,
    VENTRICLES,
    CEREBELLUM,
    DEEP_GM,
    BRAINSTEM,
];

pub fn name(label: u16) -> &'static str {
    match label {
        BACKGROUND => "background",
        CSF => "csf",
        CORTICAL_GM => "cortical_gm",
        WM => "wm",
        VENTRICLES => "ventricles",
        CEREBELLUM => "cerebellum",
        DEEP_GM => "deep_gm",
        BRAINSTEM => "brainstem",
        SKULL => "skull",
        _ => "unknown",
    }
}

/// Label table for the 7 tissue classes.
pub fn tissue_table() -> BTreeMap<u16, String> {
    TISSUE_CLASSES
        .iter()
        .map(|&l| (l, name(l).to_string()))
        .collect()
}

/// Tissue table plus the phantom skull shell.
pub fn tissue_table_with_skull() -> BTreeMap<u16, String> {
    let mut t = tissue_table();
    t.insert(SKULL, name(SKULL).to_string());
    t
}
