//! Learning-technique grids mirroring the MagnaTagATune (A–I) and
//! MTG-Jamendo (J–O) result tables.

use anyhow::{bail, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridRow {
    pub name: char,
    pub fine_tune_augment: bool,
    pub fine_tune_contrastive: bool,
    pub load_pretrain: bool,
    /// Only meaningful with the contrastive term on.
    pub alpha: Option<f64>,
}

const fn row(name: char, augment: bool, contrastive: bool, load: bool, alpha: Option<f64>) -> GridRow {
    GridRow {
        name,
        fine_tune_augment: augment,
        fine_tune_contrastive: contrastive,
        load_pretrain: load,
        alpha,
    }
}

pub const MTAT_ROWS: [GridRow; 9] = [
    row('A', false, false, false, None),
    row('B', true, false, false, None),
    row('C', false, false, true, None),
    row('D', true, true, true, Some(0.1)),
    row('E', false, true, true, Some(0.1)),
    row('F', true, true, true, Some(1.0)),
    row('G', false, true, true, Some(1.0)),
    row('H', true, true, true, Some(10.0)),
    row('I', false, true, true, Some(10.0)),
];

pub const MTG_ROWS: [GridRow; 6] = [
    row('J', true, true, true, Some(0.05)),
    row('K', false, true, true, Some(0.05)),
    row('L', true, true, true, Some(0.1)),
    row('M', false, true, true, Some(0.1)),
    row('N', true, true, true, Some(1.0)),
    row('O', false, true, true, Some(1.0)),
];

pub fn rows(preset: &str) -> Result<&'static [GridRow]> {
    match preset {
        "mtat" => Ok(&MTAT_ROWS),
        "mtg" => Ok(&MTG_ROWS),
        other => bail!("unknown grid preset {other:?} (expected mtat or mtg)"),
    }
}

impl GridRow {
    pub fn describe(&self) -> String {
        let yn = |b: bool| if b { "yes" } else { "no" };
        let alpha = self.alpha.map_or_else(|| "-".to_string(), |a| a.to_string());
        format!(
            "row={} augment={} contrastive={} load={} alpha={alpha}",
            self.name,
            yn(self.fine_tune_augment),
            yn(self.fine_tune_contrastive),
            yn(self.load_pretrain)
        )
    }
}
