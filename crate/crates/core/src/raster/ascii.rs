//! ESRI ASCII grid reader/writer.

use std::fmt::Write as _;
use std::path::Path;

use super::{GridGeometry, RasterGrid};
use crate::error::{Error, Result};

const DEFAULT_NODATA: f64 = -9999.0;

/// Whitespace tokens paired with their byte offset.
fn tokens(text: &str) -> impl Iterator<Item = (usize, &str)> {
    let base = text.as_ptr() as usize;
    text.split_ascii_whitespace()
        .map(move |t| (t.as_ptr() as usize - base, t))
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

#[derive(Default)]
struct Header {
    ncols: Option<usize>,
    nrows: Option<usize>,
    xll: Option<(f64, bool)>,
    yll: Option<(f64, bool)>,
    cellsize: Option<f64>,
    nodata: Option<f64>,
}

/// Parse the header, returning it and the iterator positioned at the first value.
fn parse_header<'a, I>(toks: &mut std::iter::Peekable<I>, end_offset: usize) -> Result<(GridGeometry, f64)>
where
    I: Iterator<Item = (usize, &'a str)>,
{
    let mut h = Header::default();
    while let Some(&(off, key)) = toks.peek() {
        if !key.starts_with(|c: char| c.is_ascii_alphabetic()) {
            break;
        }
        toks.next();
        let (voff, raw) = toks
            .next()
            .ok_or_else(|| parse_err(end_offset, format!("missing value for header key `{key}`")))?;
        let num = || -> Result<f64> {
            raw.parse::<f64>()
                .map_err(|_| parse_err(voff, format!("bad number `{raw}` for `{key}`")))
        };
        let count = || -> Result<usize> {
            raw.parse::<usize>()
                .map_err(|_| parse_err(voff, format!("bad count `{raw}` for `{key}`")))
        };
        match key.to_ascii_lowercase().as_str() {
            "ncols" => h.ncols = Some(count()?),
            "nrows" => h.nrows = Some(count()?),
            "xllcorner" => h.xll = Some((num()?, false)),
            "xllcenter" => h.xll = Some((num()?, true)),
            "yllcorner" => h.yll = Some((num()?, false)),
            "yllcenter" => h.yll = Some((num()?, true)),
            "cellsize" => h.cellsize = Some(num()?),
            "nodata_value" => h.nodata = Some(num()?),
            _ => return Err(parse_err(off, format!("unknown header key `{key}`"))),
        }
    }
    let at = toks.peek().map_or(end_offset, |t| t.0);
    let ncols = h.ncols.ok_or_else(|| parse_err(at, "header lacks ncols"))?;
    let nrows = h.nrows.ok_or_else(|| parse_err(at, "header lacks nrows"))?;
    let (xll, xc) = h.xll.ok_or_else(|| parse_err(at, "header lacks xllcorner"))?;
    let (yll, yc) = h.yll.ok_or_else(|| parse_err(at, "header lacks yllcorner"))?;
    let cs = h.cellsize.ok_or_else(|| parse_err(at, "header lacks cellsize"))?;
    if ncols == 0 || nrows == 0 {
        return Err(parse_err(0, format!("degenerate dimensions ncols={ncols} nrows={nrows}")));
    }
    if !(cs > 0.0) {
        return Err(parse_err(0, format!("cellsize must be positive, got {cs}")));
    }
    let origin_x = if xc { xll - cs / 2.0 } else { xll };
    let south = if yc { yll - cs / 2.0 } else { yll };
    let origin_y = south + nrows as f64 * cs;
    let geometry = GridGeometry::new(origin_x, origin_y, cs, ncols, nrows)?;
    Ok((geometry, h.nodata.unwrap_or(DEFAULT_NODATA)))
}

pub fn parse_ascii_grid(text: &str) -> Result<RasterGrid> {
    let mut toks = tokens(text).peekable();
    let (geometry, nodata) = parse_header(&mut toks, text.len())?;
    let mut values = Vec::with_capacity(geometry.len());
    for (off, t) in toks.by_ref().take(geometry.len()) {
        let v = t
            .parse::<f64>()
            .map_err(|_| parse_err(off, format!("bad cell value `{t}`")))?;
        values.push(v);
    }
    if values.len() < geometry.len() {
        return Err(parse_err(
            text.len(),
            format!("expected {} cell values, found {}", geometry.len(), values.len()),
        ));
    }
    if let Some((off, t)) = toks.next() {
        return Err(parse_err(off, format!("trailing data `{t}` after {} values", geometry.len())));
    }
    RasterGrid::new(geometry, nodata, values)
}

pub fn read_ascii_header(path: &Path) -> Result<GridGeometry> {
    use std::io::{BufRead, BufReader};
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = String::new();
    let mut reader = BufReader::new(f);
    for _ in 0..6 {
        if reader.read_line(&mut head).map_err(|e| Error::io(path, e))? == 0 {
            break;
        }
    }
    // Cut at the first line that starts with a number so only header keys remain.
    let mut text = String::new();
    for line in head.lines() {
        if line.trim_start().starts_with(|c: char| c.is_ascii_alphabetic()) {
            text.push_str(line);
            text.push('\n');
        }
    }
    let mut toks = tokens(&text).peekable();
    parse_header(&mut toks, text.len()).map(|(g, _)| g)
}

pub fn write_ascii_grid(grid: &RasterGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let g = &grid.geometry;
    let mut out = String::new();
    let _ = writeln!(out, "ncols {}", g.width);
    let _ = writeln!(out, "nrows {}", g.height);
    let _ = writeln!(out, "xllcorner {}", g.origin_x);
    let _ = writeln!(out, "yllcorner {}", g.origin_y - g.height as f64 * g.cell_size);
    let _ = writeln!(out, "cellsize {}", g.cell_size);
    let _ = writeln!(out, "NODATA_value {}", grid.nodata);
    for row in grid.values().chunks(g.width) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const GRID: &str = "ncols 3\nnrows 3\nxllcorner 0\nyllcorner 0\ncellsize 10\nNODATA_value -9999\n\
                        100 100 100\n100 100 100\n100 100 100\n";

    #[test]
    fn parses_constant_grid() {
        let g = parse_ascii_grid(GRID).unwrap();
        assert_eq!((g.width(), g.height()), (3, 3));
        assert!(g.values().iter().all(|&v| v == 100.0));
        assert_eq!(g.geometry.origin_y, 30.0);
    }

    #[test]
    fn zero_columns_is_parse_error() {
        let bad = GRID.replace("ncols 3", "ncols 0");
        assert!(matches!(parse_ascii_grid(&bad), Err(Error::Parse { .. })));
    }

    #[test]
    fn bad_value_reports_offset() {
        let bad = GRID.replacen("100 100 100\n100 100 100\n100 100 100", "100 100 100\n100 1x0 100\n100 100 100", 1);
        match parse_ascii_grid(&bad) {
            Err(Error::Parse { offset, .. }) => assert_eq!(&bad[offset..offset + 3], "1x0"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn short_payload_is_parse_error() {
        let bad = GRID.trim_end().trim_end_matches("100").to_string();
        assert!(matches!(parse_ascii_grid(&bad), Err(Error::Parse { .. })));
    }

    #[test]
    fn center_registration_shifts_origin() {
        let text = GRID.replace("xllcorner 0", "xllcenter 5").replace("yllcorner 0", "yllcenter 5");
        let g = parse_ascii_grid(&text).unwrap();
        assert_eq!(g.geometry.origin_x, 0.0);
        assert_eq!(g.geometry.origin_y, 30.0);
    }
}
