//! Land-cover class table.
//!
//! The 19 classes follow the North American land-cover legend, re-indexed
//! from zero. Canopy heights and reflection coefficients are defaults that a
//! config file may override per class.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LANDCOVER_CLASS_COUNT: usize = 19;

pub mod ids {
    pub const TEMPERATE_NEEDLELEAF_FOREST: u8 = 0;
    pub const TAIGA_NEEDLELEAF_FOREST: u8 = 1;
    pub const TROPICAL_BROADLEAF_EVERGREEN: u8 = 2;
    pub const TROPICAL_BROADLEAF_DECIDUOUS: u8 = 3;
    pub const TEMPERATE_BROADLEAF_DECIDUOUS: u8 = 4;
    pub const MIXED_FOREST: u8 = 5;
    pub const TROPICAL_SHRUBLAND: u8 = 6;
    pub const TEMPERATE_SHRUBLAND: u8 = 7;
    pub const TROPICAL_GRASSLAND: u8 = 8;
    pub const TEMPERATE_GRASSLAND: u8 = 9;
    pub const POLAR_SHRUB_LICHEN_MOSS: u8 = 10;
    pub const POLAR_GRASS_LICHEN_MOSS: u8 = 11;
    pub const POLAR_BARREN_LICHEN_MOSS: u8 = 12;
    pub const WETLAND: u8 = 13;
    pub const CROPLAND: u8 = 14;
    pub const BARREN: u8 = 15;
    pub const URBAN: u8 = 16;
    pub const WATER: u8 = 17;
    pub const SNOW_ICE: u8 = 18;
}

/// Integer class id of a raster value, if it is one of the 19 classes.
pub fn class_index(v: f64) -> Option<u8> {
    (v >= 0.0 && v.fract() == 0.0 && v < LANDCOVER_CLASS_COUNT as f64).then_some(v as u8)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandCoverClass {
    pub class_id: u8,
    pub name: String,
    /// Representative height of the cover above bare ground, metres.
    pub canopy_height: f64,
    pub is_vegetation: bool,
    /// Linear reflection attenuation coefficient in [-1, 1].
    pub beta_reflect: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandCoverTable {
    classes: Vec<LandCoverClass>,
}

impl Default for LandCoverTable {
    fn default() -> Self {
        use ids::*;
        const FOREST_CANOPY: f64 = 15.0;
        const SHRUB_CANOPY: f64 = 2.0;
        const LOW_CANOPY: f64 = 0.5;
        let row = |id: u8, name: &str, canopy: f64, veg: bool, beta: f64| LandCoverClass {
            class_id: id,
            name: name.to_string(),
            canopy_height: canopy,
            is_vegetation: veg,
            beta_reflect: beta,
        };
        let classes = vec![
            row(TEMPERATE_NEEDLELEAF_FOREST, "temperate or sub-polar needleleaf forest", FOREST_CANOPY, true, -0.10),
            row(TAIGA_NEEDLELEAF_FOREST, "sub-polar taiga needleleaf forest", FOREST_CANOPY, true, -0.10),
            row(TROPICAL_BROADLEAF_EVERGREEN, "tropical or sub-tropical broadleaf evergreen forest", FOREST_CANOPY, true, -0.10),
            row(TROPICAL_BROADLEAF_DECIDUOUS, "tropical or sub-tropical broadleaf deciduous forest", FOREST_CANOPY, true, -0.10),
            row(TEMPERATE_BROADLEAF_DECIDUOUS, "temperate or sub-polar broadleaf deciduous forest", FOREST_CANOPY, true, -0.10),
            row(MIXED_FOREST, "mixed forest", FOREST_CANOPY, true, -0.10),
            row(TROPICAL_SHRUBLAND, "tropical or sub-tropical shrubland", SHRUB_CANOPY, true, -0.05),
            row(TEMPERATE_SHRUBLAND, "temperate or sub-polar shrubland", SHRUB_CANOPY, true, -0.05),
            row(TROPICAL_GRASSLAND, "tropical or sub-tropical grassland", LOW_CANOPY, true, 0.0),
            row(TEMPERATE_GRASSLAND, "temperate or sub-polar grassland", LOW_CANOPY, true, 0.0),
            row(POLAR_SHRUB_LICHEN_MOSS, "sub-polar or polar shrubland-lichen-moss", SHRUB_CANOPY, true, -0.05),
            row(POLAR_GRASS_LICHEN_MOSS, "sub-polar or polar grassland-lichen-moss", LOW_CANOPY, true, 0.0),
            row(POLAR_BARREN_LICHEN_MOSS, "sub-polar or polar barren-lichen-moss", 0.0, false, 0.0),
            row(WETLAND, "wetland", LOW_CANOPY, true, 0.20),
            row(CROPLAND, "cropland", LOW_CANOPY, true, 0.0),
            row(BARREN, "barren land", 0.0, false, 0.0),
            row(URBAN, "urban and built-up", 0.0, false, 0.0),
            row(WATER, "water", 0.0, false, 0.50),
            row(SNOW_ICE, "snow and ice", 0.0, false, 0.30),
        ];
        Self { classes }
    }
}

impl LandCoverTable {
    pub fn new(classes: Vec<LandCoverClass>) -> Result<Self> {
        let table = Self { classes };
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() != LANDCOVER_CLASS_COUNT {
            return Err(Error::Validation(format!(
                "land-cover table must have {LANDCOVER_CLASS_COUNT} classes, has {}",
                self.classes.len()
            )));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.class_id as usize != i {
                return Err(Error::Validation(format!("class at position {i} has id {}", c.class_id)));
            }
            if !(-1.0..=1.0).contains(&c.beta_reflect) {
                return Err(Error::Validation(format!("class {i}: beta {} outside [-1, 1]", c.beta_reflect)));
            }
            if !(c.canopy_height >= 0.0) {
                return Err(Error::Validation(format!("class {i}: negative canopy height")));
            }
        }
        Ok(())
    }

    pub fn classes(&self) -> &[LandCoverClass] {
        &self.classes
    }

    pub fn get(&self, id: u8) -> Option<&LandCoverClass> {
        self.classes.get(id as usize)
    }

    /// Class for a raw raster value; `None` for nodata or out-of-table values.
    pub fn lookup(&self, v: f64) -> Option<&LandCoverClass> {
        class_index(v).and_then(|id| self.get(id))
    }

    pub fn canopy_height(&self, v: f64) -> f64 {
        self.lookup(v).map_or(0.0, |c| c.canopy_height)
    }

    /// Override canopy height and/or beta for one class.
    pub fn set_class(&mut self, id: u8, canopy_height: Option<f64>, beta: Option<f64>) -> Result<()> {
        let mut next = self.clone();
        let c = next
            .classes
            .get_mut(id as usize)
            .ok_or_else(|| Error::Validation(format!("unknown land-cover class {id}")))?;
        if let Some(h) = canopy_height {
            c.canopy_height = h;
        }
        if let Some(b) = beta {
            c.beta_reflect = b;
        }
        next.validate()?;
        *self = next;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_table_is_valid_with_19_classes() {
        let t = LandCoverTable::default();
        t.validate().unwrap();
        assert_eq!(t.classes().len(), 19);
        assert_eq!(t.get(ids::WATER).unwrap().beta_reflect, 0.5);
        assert_eq!(t.get(ids::MIXED_FOREST).unwrap().beta_reflect, -0.1);
    }

    #[test]
    fn class_index_bounds() {
        assert_eq!(class_index(0.0), Some(0));
        assert_eq!(class_index(18.0), Some(18));
        assert_eq!(class_index(19.0), None);
        assert_eq!(class_index(2.5), None);
        assert_eq!(class_index(-1.0), None);
    }

    #[test]
    fn override_rejects_out_of_range_beta() {
        let mut t = LandCoverTable::default();
        assert!(t.set_class(ids::WATER, None, Some(1.5)).is_err());
    }
}
