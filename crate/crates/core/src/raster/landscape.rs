use super::{LandCoverClass, LandCoverTable, RasterGrid, TileIndex};
use crate::error::{Error, Result};

/// Effective terrain height: bilinear DEM height plus the canopy height of the
/// land-cover class at the point.
pub fn effective_height(
    dem: &RasterGrid,
    landcover: &RasterGrid,
    table: &LandCoverTable,
    x: f64,
    y: f64,
) -> Result<f64> {
    let ground = dem.sample_height(x, y)?;
    let canopy = landcover
        .value_at(x, y)?
        .map_or(0.0, |v| table.canopy_height(v));
    Ok(ground + canopy)
}

/// DEM tiles plus optional land cover: everything the ray tracer needs to
/// know about the ground.
#[derive(Debug)]
pub struct Landscape {
    pub dem: TileIndex,
    pub landcover: Option<TileIndex>,
    pub classes: LandCoverTable,
    max_effective_height: f64,
}

impl Landscape {
    /// Builds the landscape, loading every DEM tile once to find the highest
    /// effective height (needed to truncate traced segments).
    pub fn new(dem: TileIndex, landcover: Option<TileIndex>, classes: LandCoverTable) -> Result<Self> {
        let max_canopy = classes
            .classes()
            .iter()
            .map(|c| c.canopy_height)
            .fold(0.0, f64::max);
        let mut max_ground = f64::NEG_INFINITY;
        for g in dem.load_all()? {
            if let Some((_, hi)) = g.min_max() {
                max_ground = max_ground.max(hi);
            }
        }
        if !max_ground.is_finite() {
            return Err(Error::Validation("DEM holds no valid cells".into()));
        }
        let max_canopy = if landcover.is_some() { max_canopy } else { 0.0 };
        Ok(Self {
            dem,
            landcover,
            classes,
            max_effective_height: max_ground + max_canopy,
        })
    }

    pub fn from_grids(dem: RasterGrid, landcover: Option<RasterGrid>, classes: LandCoverTable) -> Result<Self> {
        if let Some(lc) = &landcover {
            if !lc.bounds().contains_closed(dem.bounds().min_x, dem.bounds().min_y)
                || !lc.bounds().contains_closed(dem.bounds().max_x, dem.bounds().max_y)
            {
                return Err(Error::Geometry("land cover does not cover the DEM".into()));
            }
        }
        Self::new(
            TileIndex::from_grid(dem),
            landcover.map(TileIndex::from_grid),
            classes,
        )
    }

    /// Upper bound on terrain plus canopy anywhere in the region.
    pub fn max_effective_height(&self) -> f64 {
        self.max_effective_height
    }

    /// Land-cover class at a point, `None` outside the cover or on nodata.
    pub fn class_at(&self, x: f64, y: f64) -> Option<&LandCoverClass> {
        let lc = self.landcover.as_ref()?;
        let v = lc.value_at(x, y).ok()??;
        self.classes.lookup(v)
    }

    pub fn canopy_at(&self, x: f64, y: f64) -> f64 {
        self.class_at(x, y).map_or(0.0, |c| c.canopy_height)
    }

    /// Bare-ground bilinear height.
    pub fn ground_height(&self, x: f64, y: f64) -> Result<f64> {
        self.dem.sample_height(x, y)
    }

    pub fn effective_height(&self, x: f64, y: f64) -> Result<f64> {
        Ok(self.ground_height(x, y)? + self.canopy_at(x, y))
    }

    /// Ground and canopy height of a DEM lattice pixel (no interpolation).
    pub fn pixel_heights(&self, row: i64, col: i64) -> Result<(f64, f64)> {
        let (x, y) = self.dem.lattice_center(row, col);
        let ground = self.dem.lattice_value(row, col)?.ok_or(Error::Nodata { x, y })?;
        Ok((ground, self.canopy_at(x, y)))
    }
}

#[cfg(test)]
mod tests {
    use super::super::landcover::ids;
    use super::super::GridGeometry;
    use super::*;

    fn grids(dem_v: f64, class: u8) -> (RasterGrid, RasterGrid) {
        let geo = GridGeometry::new(0.0, 30.0, 10.0, 3, 3).unwrap();
        (
            RasterGrid::filled(geo, -9999.0, dem_v),
            RasterGrid::filled(geo, 255.0, class as f64),
        )
    }

    #[test]
    fn barren_adds_nothing() {
        let (dem, lc) = grids(100.0, ids::BARREN);
        let h = effective_height(&dem, &lc, &LandCoverTable::default(), 15.0, 15.0).unwrap();
        assert_eq!(h, 100.0);
    }

    #[test]
    fn needleleaf_forest_adds_canopy() {
        let (dem, lc) = grids(100.0, ids::TEMPERATE_NEEDLELEAF_FOREST);
        let h = effective_height(&dem, &lc, &LandCoverTable::default(), 15.0, 15.0).unwrap();
        assert_eq!(h, 115.0);
    }

    #[test]
    fn nodata_dem_is_an_error() {
        let (dem, lc) = grids(-9999.0, ids::BARREN);
        let r = effective_height(&dem, &lc, &LandCoverTable::default(), 15.0, 15.0);
        assert!(matches!(r, Err(Error::Nodata { .. })));
    }

    #[test]
    fn effective_never_below_ground() {
        let (dem, lc) = grids(42.0, ids::WETLAND);
        let land = Landscape::from_grids(dem, Some(lc), LandCoverTable::default()).unwrap();
        for (x, y) in [(1.0, 1.0), (15.0, 15.0), (29.0, 3.0)] {
            assert!(land.effective_height(x, y).unwrap() >= land.ground_height(x, y).unwrap());
        }
        assert_eq!(land.max_effective_height(), 42.0 + 15.0);
    }
}
