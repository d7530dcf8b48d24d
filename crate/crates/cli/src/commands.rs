//! Subcommand implementations. Every stage reads its inputs from the run
//! configuration and the output directory, and writes its artifacts back there.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use agc_core::config::RunConfig;
use agc_core::diffusion::{export_tiles, fit_normalizer, import_predictions, mosaic, ObservationSet, Observation, RegionLayers};
use agc_core::engine::{
    attenuation_maps, moving_average_circular, pearson, region_report, region_sweep, sign_agreement, ChannelEstimate,
    ReflectionLayer, Scene, TraceRecord,
};
use agc_core::geometry::LinkSpec;
use agc_core::losses::read_weather_csv;
use agc_core::raster::{
    class_index, read_agt1, read_agt1_header, write_agt1, BandKind, LandCoverTable, Landscape, RasterGrid, TileIndex,
};
use agc_core::reflection::{apply_landcover, terrain_reflect_score, ReflectionMap};
use agc_core::sampling::{design_samples, read_manifest, write_manifest, SamplingInputs, SatGeometry};
use agc_core::stats::percentile;
use agc_core::terrain::{derive_terrain, weiss_from_dem, TerrainDerivatives, WEISS_NODATA};
use agc_core::trace::trace_link;
use anyhow::{Context, Result};
use serde::Serialize;

use crate::output::{read_json, update_lock, write_json, StageRecord};
use crate::{Command, GlobalArgs, ImportArgs, Invalid, Metric, MetricsArgs, SampleArgs, TraceArgs};

const DEM_NODATA: f64 = -9999.0;
const CLASS_NODATA: f64 = 255.0;
const DEFAULT_OUT: &str = "agc-out";

const DEM_FILE: &str = "dem.agt";
const LANDCOVER_FILE: &str = "landcover.agt";
const FUNCTION_FILE: &str = "function.agt";
const MANIFEST_FILE: &str = "manifest.csv";
const ESTIMATES_FILE: &str = "estimates.json";

struct Run {
    cfg: RunConfig,
    out: PathBuf,
}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

/// Apply one `a.b.c=value` override; the value is parsed as TOML, else
/// taken as a string.
fn set_dotted(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| invalid(format!("--set expects KEY=VALUE, got '{assignment}'")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut node = table;
    for p in parents {
        node = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| invalid(format!("--set {key}: '{p}' is not a table")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

fn load_config(g: &GlobalArgs) -> Result<RunConfig> {
    let text = match &g.config {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?,
        None => String::new(),
    };
    let mut table: toml::Table = toml::from_str(&text).map_err(|e| invalid(format!("config: {e}")))?;
    for o in &g.overrides {
        set_dotted(&mut table, o)?;
    }
    let merged = toml::to_string(&table).map_err(|e| invalid(format!("config: {e}")))?;
    let mut cfg = RunConfig::from_toml_str(&merged)?;
    let root = g
        .data_dir
        .clone()
        .or_else(|| g.config.as_ref().and_then(|p| p.parent().map(Path::to_path_buf)));
    if let Some(root) = root {
        cfg.paths.resolve(&root);
    }
    let p = &mut cfg.paths;
    for (slot, flag) in [
        (&mut p.dem, &g.dem),
        (&mut p.landcover, &g.landcover),
        (&mut p.function, &g.function),
        (&mut p.weather, &g.weather),
        (&mut p.output, &g.out),
    ] {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

impl Run {
    fn new(g: &GlobalArgs) -> Result<Self> {
        let cfg = load_config(g)?;
        let out = cfg.paths.output.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        Ok(Self { cfg, out })
    }

    fn ensure_out(&self) -> Result<()> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))
    }

    fn file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn grid(&self, name: &str, stage: &str) -> Result<RasterGrid> {
        let path = self.file(name);
        if !path.exists() {
            anyhow::bail!("{} is missing; run `agc {stage}` first", path.display());
        }
        Ok(read_agt1(&path)?)
    }

    fn optional_grid(&self, name: &str) -> Result<Option<RasterGrid>> {
        let path = self.file(name);
        if path.exists() {
            Ok(Some(read_agt1(&path)?))
        } else {
            Ok(None)
        }
    }

    fn dem_path(&self) -> Result<&Path> {
        self.cfg
            .paths
            .dem
            .as_deref()
            .ok_or_else(|| invalid("no DEM configured: set paths.dem or pass --dem"))
    }

    fn landscape(&self) -> Result<Landscape> {
        let rules = self.cfg.validation;
        let dem = TileIndex::open(self.dem_path()?, BandKind::Dem, rules)?;
        let lc = match &self.cfg.paths.landcover {
            Some(p) => Some(TileIndex::open(p, BandKind::Landcover, rules)?),
            None => None,
        };
        Ok(Landscape::new(dem, lc, self.cfg.landcover_table()?)?)
    }

    fn lock(&self, command: &str) -> Result<()> {
        let record = StageRecord {
            command,
            args: std::env::args().skip(1).collect(),
            seed: self.cfg.seed,
            version: env!("CARGO_PKG_VERSION"),
            config: &self.cfg,
        };
        update_lock(&self.out, &record)
    }
}

pub fn dispatch(g: &GlobalArgs, cmd: &Command) -> Result<()> {
    if let Command::Metrics(m) = cmd {
        return metrics(m);
    }
    let mut run = Run::new(g)?;
    let name = match cmd {
        Command::Ingest => {
            ingest(&run)?;
            "ingest"
        }
        Command::Terrain => {
            terrain(&run)?;
            "terrain"
        }
        Command::Cluster(a) => {
            apply_sample_args(&mut run.cfg, a)?;
            design(&run, false)?;
            "cluster"
        }
        Command::Sample(a) => {
            apply_sample_args(&mut run.cfg, a)?;
            design(&run, true)?;
            "sample"
        }
        Command::Trace(a) => return trace(&run, a),
        Command::Estimate => {
            estimate(&run)?;
            "estimate"
        }
        Command::Map => {
            map(&run)?;
            "map"
        }
        Command::ExportTiles => {
            export(&run)?;
            "export-tiles"
        }
        Command::ImportPreds(a) => {
            import(&run, a)?;
            "import-preds"
        }
        Command::Metrics(_) => unreachable!("handled above"),
    };
    run.lock(name)
}

#[derive(Serialize)]
struct GridSummary {
    tiles: usize,
    origin_x: f64,
    origin_y: f64,
    cell_size: f64,
    width: usize,
    height: usize,
    valid_cells: usize,
    min: Option<f64>,
    max: Option<f64>,
}

fn summarize(grid: &RasterGrid, tiles: usize) -> GridSummary {
    let g = grid.geometry;
    let vals: Vec<f64> = grid.valid_values().collect();
    GridSummary {
        tiles,
        origin_x: g.origin_x,
        origin_y: g.origin_y,
        cell_size: g.cell_size,
        width: g.width,
        height: g.height,
        valid_cells: vals.len(),
        min: vals.iter().copied().reduce(f64::min),
        max: vals.iter().copied().reduce(f64::max),
    }
}

fn class_histogram(grid: &RasterGrid) -> BTreeMap<String, usize> {
    let mut h = BTreeMap::new();
    for v in grid.valid_values() {
        *h.entry(format!("{v}")).or_insert(0) += 1;
    }
    h
}

fn ingest(run: &Run) -> Result<()> {
    let rules = run.cfg.validation;
    let dem_idx = TileIndex::open(run.dem_path()?, BandKind::Dem, rules)?;
    let dem = dem_idx.mosaic(DEM_NODATA)?;
    run.ensure_out()?;
    write_agt1(&dem, run.file(DEM_FILE))?;
    let mut summary = BTreeMap::new();
    summary.insert("dem", serde_json::to_value(summarize(&dem, dem_idx.len()))?);

    for (path, kind, file, key) in [
        (&run.cfg.paths.landcover, BandKind::Landcover, LANDCOVER_FILE, "landcover"),
        (&run.cfg.paths.function, BandKind::Function, FUNCTION_FILE, "function"),
    ] {
        let Some(path) = path else { continue };
        let idx = TileIndex::open(path, kind, rules)?;
        let aligned = idx.mosaic(CLASS_NODATA)?.resample_nearest(&dem.geometry);
        if kind == BandKind::Landcover {
            if let Some(bad) = aligned.valid_values().find(|&v| class_index(v).is_none()) {
                return Err(invalid(format!("{}: unknown land-cover class {bad}", path.display())));
            }
        }
        write_agt1(&aligned, run.file(file))?;
        let mut v = serde_json::to_value(summarize(&aligned, idx.len()))?;
        v["classes"] = serde_json::to_value(class_histogram(&aligned))?;
        summary.insert(key, v);
    }
    if let Some(w) = &run.cfg.paths.weather {
        let records = read_weather_csv(w)?;
        summary.insert("weather_records", serde_json::json!(records.len()));
    }
    write_json(&run.file("ingest.json"), &summary)
}

fn reflection_map(run: &Run, derivs: &TerrainDerivatives, lc: Option<&RasterGrid>, table: &LandCoverTable) -> Result<ReflectionMap> {
    let w = run.cfg.reflection;
    let t = terrain_reflect_score(derivs, &w)?;
    Ok(match lc {
        Some(lc) => apply_landcover(&t, lc, table, w)?,
        None => ReflectionMap {
            grid: t,
            weights: w,
            betas: table.classes().iter().map(|c| c.beta_reflect).collect(),
        },
    })
}

fn terrain(run: &Run) -> Result<()> {
    let dem = run.grid(DEM_FILE, "ingest")?;
    let lc = run.optional_grid(LANDCOVER_FILE)?;
    let derivs = derive_terrain(&dem)?;
    let weiss = weiss_from_dem(&dem, &derivs, &run.cfg.terrain)?;
    let table = run.cfg.landcover_table()?;
    let reflect = reflection_map(run, &derivs, lc.as_ref(), &table)?;
    for (name, g) in [
        ("slope.agt", &derivs.slope),
        ("aspect.agt", &derivs.aspect),
        ("roughness.agt", &derivs.roughness),
        ("curvature.agt", &derivs.curvature),
        ("tpi.agt", &derivs.tpi),
        ("tri.agt", &derivs.tri),
        ("weiss.agt", &weiss),
        ("reflect.agt", &reflect.grid),
    ] {
        write_agt1(g, run.file(name))?;
    }
    let mut landforms = BTreeMap::new();
    for v in weiss.values().iter().filter(|&&v| v != WEISS_NODATA) {
        *landforms.entry(format!("{v}")).or_insert(0usize) += 1;
    }
    let slope_pct: BTreeMap<String, Option<f64>> = [5.0, 50.0, 95.0]
        .iter()
        .map(|&p| (format!("p{p}"), percentile(derivs.slope.valid_values(), p)))
        .collect();
    let summary = serde_json::json!({
        "landforms": landforms,
        "slope_deg": slope_pct,
        "reflect_max": reflect.grid.valid_values().reduce(f64::max),
    });
    write_json(&run.file("terrain.json"), &summary)
}

fn apply_sample_args(cfg: &mut RunConfig, a: &SampleArgs) -> Result<()> {
    if let Some(p) = &a.preset {
        cfg.sampling.preset = p.parse()?;
    }
    if let Some(s) = a.budget {
        cfg.sampling.budget = s;
    }
    if let Some(k) = a.clusters {
        cfg.sampling.k = k;
    }
    cfg.validate()?;
    Ok(())
}

fn design(run: &Run, manifest: bool) -> Result<()> {
    let dem = run.grid(DEM_FILE, "ingest")?;
    let landcover = run
        .optional_grid(LANDCOVER_FILE)?
        .ok_or_else(|| invalid("sampling needs a land-cover raster: set paths.landcover and rerun `agc ingest`"))?;
    let function = run.optional_grid(FUNCTION_FILE)?;
    let weiss = run.grid("weiss.agt", "terrain")?;
    let slope = run.grid("slope.agt", "terrain")?;
    let roughness = run.grid("roughness.agt", "terrain")?;
    let inputs = SamplingInputs {
        dem: &dem,
        weiss: &weiss,
        slope: &slope,
        roughness: &roughness,
        landcover: &landcover,
        function: function.as_ref(),
    };
    let d = design_samples(&inputs, &run.cfg.sampling, run.cfg.seed)?;
    if manifest {
        write_manifest(run.file(MANIFEST_FILE), &d.manifest())?;
        write_json(&run.file("design.json"), &d)
    } else {
        let summary = serde_json::json!({
            "clusters": d.clusters,
            "combinations": d.combinations,
            "inertia": d.inertia,
        });
        write_json(&run.file("clusters.json"), &summary)
    }
}

fn manifest_rows(run: &Run) -> Result<Vec<agc_core::sampling::ManifestRow>> {
    let path = run.file(MANIFEST_FILE);
    if !path.exists() {
        anyhow::bail!("{} is missing; run `agc sample` first", path.display());
    }
    Ok(read_manifest(&path)?)
}

fn trace(run: &Run, a: &TraceArgs) -> Result<()> {
    let rows = manifest_rows(run)?;
    let row = rows
        .iter()
        .find(|r| r.point_id == a.point)
        .ok_or_else(|| invalid(format!("point {} is not in the manifest", a.point)))?;
    let alt = match a.alt {
        Some(v) => v,
        None => *run
            .cfg
            .sampling
            .satellites
            .altitudes_km
            .first()
            .ok_or_else(|| invalid("no satellite altitude configured; pass --alt"))?,
    };
    let link = LinkSpec::new(row.x, row.y, a.elev, a.az, alt, run.cfg.link.frequency_hz)?
        .with_ut_height(run.cfg.link.ut_height_agl);
    link.validate()?;
    let land = run.landscape()?;
    let profile = trace_link(&link, &land, &run.cfg.engine.trace)?;
    print!("{}", crate::output::canonical_json(&TraceRecord::new(a.point, &link, &profile))?);
    Ok(())
}

fn estimate(run: &Run) -> Result<()> {
    let rows = manifest_rows(run)?;
    let dem = run.grid(DEM_FILE, "ingest")?;
    let lc = run.optional_grid(LANDCOVER_FILE)?;
    let table = run.cfg.landcover_table()?;
    let derivs = derive_terrain(&dem)?;
    let map = reflection_map(run, &derivs, lc.as_ref(), &table)?;
    let mut scene = Scene::new(run.landscape()?);
    scene.reflection = Some(ReflectionLayer { map, derivs });
    if let Some(w) = &run.cfg.paths.weather {
        scene.weather = read_weather_csv(w)?;
    }
    let outcome = region_sweep(&rows, &scene, &run.cfg.engine, &run.cfg.link.sweep())?;
    write_json(&run.file(ESTIMATES_FILE), &outcome.estimates)?;
    write_json(&run.file("failures.json"), &outcome.failures)?;
    write_json(&run.file("report.json"), &outcome.report)
}

fn estimates(run: &Run) -> Result<Vec<ChannelEstimate>> {
    read_json(&run.file(ESTIMATES_FILE))
}

fn map(run: &Run) -> Result<()> {
    let est = estimates(run)?;
    let geo = read_agt1_header(run.file(DEM_FILE)).context("reading the DEM grid; run `agc ingest` first")?;
    let dir = run.file("maps");
    fs::create_dir_all(&dir)?;
    for (el, grid) in attenuation_maps(&est, &geo)? {
        write_agt1(&grid, dir.join(format!("excess_el{el:05.1}.agt")))?;
    }
    let failures: Vec<serde_json::Value> = read_json(&run.file("failures.json")).unwrap_or_default();
    let report = region_report(&est, failures.len());
    let mut csv = String::from("elev_deg,links,nlos,rate,mean_excess_db\n");
    for r in &report.obstruction_rate_by_elevation {
        csv.push_str(&format!("{},{},{},{},{}\n", r.elev_deg, r.links, r.nlos, r.rate, r.mean_excess_db));
    }
    fs::write(run.file("obstruction.csv"), csv)?;
    Ok(())
}

fn geometry_key(g: &SatGeometry) -> (u64, u64, u64) {
    // all three are non-negative, so bit order is numeric order
    (g.elev_deg.to_bits(), g.az_deg.to_bits(), g.alt_km.to_bits())
}

fn export(run: &Run) -> Result<()> {
    let est = estimates(run)?;
    let dem = run.grid(DEM_FILE, "ingest")?;
    let lc = run.optional_grid(LANDCOVER_FILE)?;
    let derivs = derive_terrain(&dem)?;
    let mut sets: BTreeMap<(u64, u64, u64), ObservationSet> = BTreeMap::new();
    for e in &est {
        let geometry = SatGeometry {
            elev_deg: e.link.elevation_deg,
            az_deg: e.link.azimuth_deg,
            alt_km: e.link.altitude_km,
        };
        sets.entry(geometry_key(&geometry))
            .or_insert_with(|| ObservationSet {
                geometry,
                observations: Vec::new(),
            })
            .observations
            .push(Observation {
                x: e.link.ut_x,
                y: e.link.ut_y,
                excess_db: e.breakdown.total_excess_db,
            });
    }
    let excess: Vec<f64> = est.iter().map(|e| e.breakdown.total_excess_db).collect();
    let norm = fit_normalizer(&excess)?;
    let layers = RegionLayers {
        dem: &dem,
        derivs: &derivs,
        landcover: lc.as_ref(),
    };
    let dir = run.file("tiles");
    fs::create_dir_all(&dir)?;
    let sets: Vec<ObservationSet> = sets.into_values().collect();
    let written = export_tiles(&layers, &sets, &norm, &run.cfg.diffusion.export, &dir, "region")?;
    let names: Vec<String> = written
        .iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    write_json(&dir.join("index.json"), &serde_json::json!({ "normalizer": norm, "tiles": names }))
}

fn agx_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "agx"))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(invalid("no .agx files found in the given inputs"));
    }
    Ok(out)
}

fn import(run: &Run, a: &ImportArgs) -> Result<()> {
    let files = agx_files(&a.inputs)?;
    let geo = read_agt1_header(run.file(DEM_FILE)).context("reading the DEM grid; run `agc ingest` first")?;
    let mut groups: BTreeMap<(u64, u64, u64), Vec<_>> = BTreeMap::new();
    for t in import_predictions(&files)? {
        let g = SatGeometry {
            elev_deg: t.meta.elev_deg,
            az_deg: t.meta.az_deg,
            alt_km: t.meta.alt_km,
        };
        groups.entry(geometry_key(&g)).or_default().push(t);
    }
    let dir = run.file("predictions");
    fs::create_dir_all(&dir)?;
    let mut index = Vec::new();
    for tiles in groups.values() {
        let m = &tiles[0].meta;
        let name = format!("pred_el{:05.1}_az{:05.1}_alt{:04.0}.agt", m.elev_deg, m.az_deg, m.alt_km);
        write_agt1(&mosaic(tiles, &geo), dir.join(&name))?;
        index.push(serde_json::json!({
            "file": name,
            "elev_deg": m.elev_deg,
            "az_deg": m.az_deg,
            "alt_km": m.alt_km,
            "tiles": tiles.len(),
        }));
    }
    write_json(&dir.join("index.json"), &index)
}

/// One numeric column of a CSV file; a non-numeric first row is a header.
fn read_series(path: &Path, column: Option<&str>) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).peekable();
    let mut idx = 0usize;
    if let Some((_, first)) = lines.peek() {
        let cells: Vec<&str> = first.split(',').map(str::trim).collect();
        let numeric = cells.iter().all(|c| c.parse::<f64>().is_ok());
        if !numeric {
            if let Some(name) = column {
                idx = cells
                    .iter()
                    .position(|c| *c == name)
                    .ok_or_else(|| invalid(format!("{}: no column '{name}'", path.display())))?;
            }
            lines.next();
        } else if column.is_some() {
            return Err(invalid(format!("{}: --column given but the file has no header", path.display())));
        }
    }
    lines
        .map(|(n, l)| {
            let cell = l.split(',').nth(idx).map(str::trim).unwrap_or("");
            cell.parse::<f64>()
                .map_err(|_| invalid(format!("{}:{}: '{cell}' is not a number", path.display(), n + 1)))
        })
        .collect()
}

fn metrics(a: &MetricsArgs) -> Result<()> {
    let mut x = read_series(&a.a, a.column.as_deref())?;
    let mut y = read_series(&a.b, a.column.as_deref())?;
    if let Some(w) = a.window {
        x = moving_average_circular(&x, w)?;
        y = moving_average_circular(&y, w)?;
    }
    match a.metric {
        Metric::Pearson => {
            let c = pearson(&x, &y)?;
            if a.json {
                print!("{}", crate::output::canonical_json(&c)?);
            } else {
                println!("r={:?} p={:?} n={}", c.r, c.p_value, c.n);
            }
        }
        Metric::Sign => {
            let s = sign_agreement(&x, &y)?;
            if a.json {
                print!("{}", crate::output::canonical_json(&serde_json::json!({ "sign_agreement": s, "n": x.len() }))?);
            } else {
                println!("sign_agreement={s:?} n={}", x.len());
            }
        }
    }
    Ok(())
}
