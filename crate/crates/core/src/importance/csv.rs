//! Heatmap CSV export: one file per condition, layers down, timesteps
//! across, 6-decimal fixed point.

use std::fs;
use std::path::{Path, PathBuf};

use super::ImportanceMap;
use crate::conditions::CONDITION_TAGS;
use crate::error::{Error, Result};

/// Writes style.csv / subject.csv / glyph.csv under `dir` and returns the
/// paths. Layout: header row of timestep indices, leading column of layer
/// indices.
pub fn export_heatmaps(map: &ImportanceMap, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::with_capacity(3);
    for (c, tag) in CONDITION_TAGS.iter().enumerate() {
        let mut text = String::from("layer");
        for t in 0..map.timesteps {
            text.push_str(&format!(",{t}"));
        }
        text.push('\n');
        for b in 0..map.layers {
            text.push_str(&b.to_string());
            for t in 0..map.timesteps {
                text.push_str(&format!(",{:.6}", map.get(c, b, t)));
            }
            text.push('\n');
        }
        let path = dir.join(format!("{}.csv", tag.name()));
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Parses one heatmap CSV back into a layer x timestep grid.
pub fn read_heatmap_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse {
        file: path.to_path_buf(),
        offset: 0,
        msg: "empty heatmap file".into(),
    })?;
    let timesteps = header.split(',').count() - 1;
    let mut grid = Vec::new();
    let mut offset = header.len() + 1;
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let _layer = fields.next();
        let row: Vec<f64> = fields
            .map(|f| {
                f.parse::<f64>().map_err(|_| Error::Parse {
                    file: path.to_path_buf(),
                    offset,
                    msg: format!("bad float {f:?}"),
                })
            })
            .collect::<Result<_>>()?;
        if row.len() != timesteps {
            return Err(Error::Parse {
                file: path.to_path_buf(),
                offset,
                msg: format!("row has {} cells, header promises {timesteps}", row.len()),
            });
        }
        grid.push(row);
        offset += line.len() + 1;
    }
    Ok(grid)
}

/// Reads the three exported heatmaps back into an [`ImportanceMap`].
/// `sample_count` and the fingerprint are not stored in CSV; callers that
/// need them keep the JSON sidecar instead.
pub fn read_heatmaps(dir: &Path) -> Result<ImportanceMap> {
    let mut values = Vec::with_capacity(3);
    for tag in CONDITION_TAGS {
        let grid = read_heatmap_csv(&dir.join(format!("{}.csv", tag.name())))?;
        values.push(grid);
    }
    let layers = values[0].len();
    let timesteps = values[0].first().map_or(0, Vec::len);
    for grid in &values {
        if grid.len() != layers || grid.first().map_or(0, Vec::len) != timesteps {
            return Err(Error::contract(
                "heatmap files disagree on layer/timestep extents",
            ));
        }
    }
    let mut map = ImportanceMap::zeros(layers, timesteps);
    map.values = values;
    map.sample_count = 0;
    map.validate()?;
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heatmap_round_trip_and_layout() {
        let mut map = ImportanceMap::zeros(6, 8);
        for c in 0..3 {
            for b in 0..6 {
                for t in 0..8 {
                    map.values[c][b][t] = (c as f64 + 1.0) * (b as f64 * 8.0 + t as f64) / 300.0;
                }
            }
        }
        map.sample_count = 2;
        let dir = tempfile::tempdir().unwrap();
        let paths = export_heatmaps(&map, dir.path()).unwrap();
        assert_eq!(paths.len(), 3);

        // exactly 1 label column + 8 value columns; 1 header + 6 data rows
        let text = std::fs::read_to_string(&paths[0]).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 7);
        assert_eq!(lines[0], "layer,0,1,2,3,4,5,6,7");
        for line in &lines[1..] {
            assert_eq!(line.split(',').count(), 9);
        }

        let back = read_heatmaps(dir.path()).unwrap();
        for c in 0..3 {
            for b in 0..6 {
                for t in 0..8 {
                    assert!((back.get(c, b, t) - map.get(c, b, t)).abs() < 1e-6);
                }
            }
        }
    }
}
