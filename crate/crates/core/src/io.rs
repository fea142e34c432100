//! File formats: expression and coordinate CSVs, MatrixMarket expression
//! input, and a binary array container used for features, fitted pipelines
//! and checkpoints.
//!
//! Container layout: 16-byte magic, `u64` little-endian header length, a
//! UTF-8 JSON header, then every array as little-endian `f64` in row-major
//! order. The header lists each array's name, shape and element offset.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::preprocess::{ExpressionMatrix, FeaturePipeline, PcaModel};
use crate::spatial::SpatialCoords;
use crate::tensor::Tensor;
use crate::trainer::TrainConfig;
use crate::vae::{ModelDims, ModelParams, PARAM_NAMES};

pub const MAGIC: [u8; 16] = *b"DPGEN-ARRAYS\0\0\0\x01";
const MAX_HEADER: u64 = 1 << 30;
const MAX_LISTED: usize = 10;

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = name.to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = dir.join(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

fn parse_cell(s: &str, row: usize, column: usize) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| Error::Parse {
        row,
        column,
        reason: format!("not a number: {s:?}"),
    })
}

fn list(ids: &[&str]) -> String {
    let mut s = ids
        .iter()
        .take(MAX_LISTED)
        .copied()
        .collect::<Vec<_>>()
        .join(", ");
    if ids.len() > MAX_LISTED {
        s.push_str(&format!(" and {} more", ids.len() - MAX_LISTED));
    }
    s
}

fn check_unique(ids: &[String], what: &str) -> Result<()> {
    let mut seen = BTreeSet::new();
    let dups: Vec<&str> = ids
        .iter()
        .filter(|id| !seen.insert(id.as_str()))
        .map(String::as_str)
        .collect();
    if !dups.is_empty() {
        return Err(Error::Format(format!("duplicate {what}: {}", list(&dups))));
    }
    Ok(())
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    Ok(csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(false)
        .from_path(path)?)
}

/// Reads a spots x genes CSV whose header is `spot_id,<gene ids...>`.
pub fn read_expression_csv(path: &Path) -> Result<ExpressionMatrix> {
    let mut rdr = csv_reader(path)?;
    let mut records = rdr.records();
    let header = records
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty file", path.display())))??;
    if header.get(0).map(str::trim) != Some("spot_id") {
        return Err(Error::Format(format!(
            "{}: first header cell must be spot_id",
            path.display()
        )));
    }
    let genes: Vec<String> = header
        .iter()
        .skip(1)
        .map(|s| s.trim().to_string())
        .collect();
    if genes.is_empty() {
        return Err(Error::Format(format!(
            "{}: no gene columns",
            path.display()
        )));
    }
    check_unique(&genes, "gene ids")?;
    let mut spots = Vec::new();
    let mut values = Vec::new();
    for (r, rec) in records.enumerate() {
        let rec = rec?;
        let row = r + 2;
        spots.push(rec.get(0).unwrap_or_default().trim().to_string());
        for (c, cell) in rec.iter().enumerate().skip(1) {
            values.push(parse_cell(cell, row, c + 1)?);
        }
    }
    check_unique(&spots, "spot ids")?;
    let n = spots.len();
    ExpressionMatrix::new(Tensor::matrix(n, genes.len(), values)?, spots, genes)
}

pub fn write_expression_csv(path: &Path, x: &ExpressionMatrix) -> Result<()> {
    let mut out = String::from("spot_id");
    for g in &x.gene_ids {
        out.push(',');
        out.push_str(g);
    }
    out.push('\n');
    for (i, id) in x.spot_ids.iter().enumerate() {
        out.push_str(id);
        for v in x.values.row(i) {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Reads a `spot_id,x,y` CSV in file order.
pub fn read_coords_csv(path: &Path) -> Result<SpatialCoords> {
    let mut rdr = csv_reader(path)?;
    let mut records = rdr.records();
    let header = records
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty file", path.display())))??;
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    let find = |name: &str| {
        cols.iter()
            .position(|c| *c == name)
            .ok_or_else(|| Error::Format(format!("{}: missing column {name}", path.display())))
    };
    let (ci, cx, cy) = (find("spot_id")?, find("x")?, find("y")?);
    let mut ids = Vec::new();
    let mut data = Vec::new();
    for (r, rec) in records.enumerate() {
        let rec = rec?;
        let row = r + 2;
        ids.push(rec.get(ci).unwrap_or_default().trim().to_string());
        data.push(parse_cell(rec.get(cx).unwrap_or_default(), row, cx + 1)?);
        data.push(parse_cell(rec.get(cy).unwrap_or_default(), row, cy + 1)?);
    }
    check_unique(&ids, "spot ids")?;
    let n = ids.len();
    SpatialCoords::new(ids, Tensor::matrix(n, 2, data)?)
}

pub fn write_coords_csv(path: &Path, coords: &SpatialCoords) -> Result<()> {
    let mut out = String::from("spot_id,x,y\n");
    for (i, id) in coords.spot_ids.iter().enumerate() {
        let [x, y] = coords.point(i);
        out.push_str(&format!("{id},{x},{y}\n"));
    }
    write_atomic(path, out.as_bytes())
}

/// Reorders `coords` to follow `spot_ids`. Fails naming any id present on
/// only one side.
pub fn align_coords(spot_ids: &[String], coords: &SpatialCoords) -> Result<SpatialCoords> {
    let index: HashMap<&str, usize> = coords
        .spot_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let missing: Vec<&str> = spot_ids
        .iter()
        .filter(|s| !index.contains_key(s.as_str()))
        .map(String::as_str)
        .collect();
    let wanted: BTreeSet<&str> = spot_ids.iter().map(String::as_str).collect();
    let extra: Vec<&str> = coords
        .spot_ids
        .iter()
        .filter(|s| !wanted.contains(s.as_str()))
        .map(String::as_str)
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        let mut parts = Vec::new();
        if !missing.is_empty() {
            parts.push(format!("spots without coordinates: {}", list(&missing)));
        }
        if !extra.is_empty() {
            parts.push(format!("coordinates for unknown spots: {}", list(&extra)));
        }
        return Err(Error::Format(parts.join("; ")));
    }
    let order: Vec<usize> = spot_ids.iter().map(|s| index[s.as_str()]).collect();
    Ok(coords.subset(&order))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .map(|l| l.split('\t').next().unwrap_or_default().trim().to_string())
        .filter(|l| !l.is_empty())
        .collect())
}

/// Reads a MatrixMarket coordinate file with `genes.txt` and `spots.txt`
/// beside it (one id per line; only the first tab-separated field is used).
/// The matrix may be genes x spots or spots x genes; when both fit, genes x
/// spots is assumed.
pub fn read_matrix_market(path: &Path) -> Result<ExpressionMatrix> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let genes = read_lines(&dir.join("genes.txt"))?;
    let spots = read_lines(&dir.join("spots.txt"))?;
    check_unique(&genes, "gene ids")?;
    check_unique(&spots, "spot ids")?;
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, banner) = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty file", path.display())))?;
    let banner_l = banner.to_ascii_lowercase();
    let fields: Vec<&str> = banner_l.split_whitespace().collect();
    if fields.len() < 5
        || fields[0] != "%%matrixmarket"
        || fields[1] != "matrix"
        || fields[2] != "coordinate"
    {
        return Err(Error::Format(format!(
            "{}: not a MatrixMarket coordinate file",
            path.display()
        )));
    }
    if !matches!(fields[3], "real" | "integer" | "double") || fields[4] != "general" {
        return Err(Error::Format(format!(
            "{}: unsupported MatrixMarket field/symmetry {} {}",
            path.display(),
            fields[3],
            fields[4]
        )));
    }
    let mut body = lines.filter(|(_, l)| !l.trim_start().starts_with('%') && !l.trim().is_empty());
    let (size_line, size) = body
        .next()
        .ok_or_else(|| Error::Format(format!("{}: missing size line", path.display())))?;
    let dims: Vec<usize> = size
        .split_whitespace()
        .enumerate()
        .map(|(c, s)| {
            s.parse::<usize>().map_err(|_| Error::Parse {
                row: size_line + 1,
                column: c + 1,
                reason: format!("not a count: {s:?}"),
            })
        })
        .collect::<Result<_>>()?;
    if dims.len() != 3 {
        return Err(Error::Format(format!(
            "{}: size line needs 3 fields",
            path.display()
        )));
    }
    let (nr, nc, nnz) = (dims[0], dims[1], dims[2]);
    let genes_by_spots = nr == genes.len() && nc == spots.len();
    if !genes_by_spots && !(nr == spots.len() && nc == genes.len()) {
        return Err(Error::Format(format!(
            "{}: matrix is {nr} x {nc} but there are {} genes and {} spots",
            path.display(),
            genes.len(),
            spots.len()
        )));
    }
    let mut values = vec![0.0; spots.len() * genes.len()];
    let mut count = 0;
    for (ln, line) in body {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(Error::Parse {
                row: ln + 1,
                column: parts.len().min(3) + 1,
                reason: "expected `row col value`".into(),
            });
        }
        let idx = |c: usize| -> Result<usize> {
            let bound = if c == 0 { nr } else { nc };
            match parts[c].parse::<usize>() {
                Ok(v) if v >= 1 && v <= bound => Ok(v - 1),
                _ => Err(Error::Parse {
                    row: ln + 1,
                    column: c + 1,
                    reason: format!("index {:?} outside 1..={bound}", parts[c]),
                }),
            }
        };
        let (r, c) = (idx(0)?, idx(1)?);
        let v = parse_cell(parts[2], ln + 1, 3)?;
        let (spot, gene) = if genes_by_spots { (c, r) } else { (r, c) };
        values[spot * genes.len() + gene] += v;
        count += 1;
    }
    if count != nnz {
        return Err(Error::Format(format!(
            "{}: header lists {nnz} entries, found {count}",
            path.display()
        )));
    }
    let n = spots.len();
    ExpressionMatrix::new(Tensor::matrix(n, genes.len(), values)?, spots, genes)
}

/// CSV or MatrixMarket by extension (`.mtx` selects MatrixMarket).
pub fn load_expression(path: &Path) -> Result<ExpressionMatrix> {
    if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("mtx"))
    {
        read_matrix_market(path)
    } else {
        read_expression_csv(path)
    }
}

/// Reads coordinates and reorders them to follow `spot_ids`.
pub fn load_coords(path: &Path, spot_ids: &[String]) -> Result<SpatialCoords> {
    align_coords(spot_ids, &read_coords_csv(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub kind: String,
    pub dtype: String,
    pub order: String,
    pub arrays: Vec<ArrayEntry>,
    pub meta: Value,
}

/// Decoded container contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: Value,
    pub arrays: Vec<(String, Tensor)>,
}

impl Container {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("{} container has no array {name:?}", self.kind)))
    }

    fn meta_field<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self.meta.get(key).ok_or_else(|| {
            Error::Format(format!("{} container header lacks {key:?}", self.kind))
        })?;
        Ok(serde_json::from_value(v.clone())?)
    }
}

pub fn encode_container(kind: &str, meta: Value, arrays: &[(&str, &Tensor)]) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(arrays.len());
    let mut offset = 0;
    for (name, t) in arrays {
        entries.push(ArrayEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel();
    }
    let header = ContainerHeader {
        kind: kind.into(),
        dtype: "f64".into(),
        order: "row-major".into(),
        arrays: entries,
        meta,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(24 + json.len() + 8 * offset);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in arrays {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_container(bytes: &[u8], expected_kind: Option<&str>) -> Result<Container> {
    if bytes.len() < 24 || bytes[..16] != MAGIC {
        return Err(Error::Format(
            "not a dpgen array container (bad magic)".into(),
        ));
    }
    let hlen = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
    if hlen > MAX_HEADER || 24 + hlen as usize > bytes.len() {
        return Err(Error::Format(format!(
            "header length {hlen} exceeds file size"
        )));
    }
    let hend = 24 + hlen as usize;
    let header: ContainerHeader = serde_json::from_slice(&bytes[24..hend])?;
    if header.dtype != "f64" || header.order != "row-major" {
        return Err(Error::Format(format!(
            "unsupported layout {} {}",
            header.dtype, header.order
        )));
    }
    if let Some(k) = expected_kind {
        if header.kind != k {
            return Err(Error::Format(format!(
                "expected a {k} container, found {}",
                header.kind
            )));
        }
    }
    let payload = &bytes[hend..];
    if !payload.len().is_multiple_of(8) {
        return Err(Error::Format(
            "payload is not a whole number of f64 values".into(),
        ));
    }
    let total = payload.len() / 8;
    let mut arrays = Vec::with_capacity(header.arrays.len());
    let mut expected_offset = 0;
    for e in &header.arrays {
        let n: usize = e.shape.iter().product();
        if e.offset != expected_offset || e.offset + n > total {
            return Err(Error::Format(format!(
                "array {:?} lies outside the payload",
                e.name
            )));
        }
        let data = payload[8 * e.offset..8 * (e.offset + n)]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        arrays.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
        expected_offset += n;
    }
    if expected_offset != total {
        return Err(Error::Format(format!(
            "payload holds {total} values, header describes {expected_offset}"
        )));
    }
    Ok(Container {
        kind: header.kind,
        meta: header.meta,
        arrays,
    })
}

pub fn read_container(path: &Path, expected_kind: Option<&str>) -> Result<Container> {
    decode_container(&fs::read(path)?, expected_kind)
}

/// A feature matrix with the spot ids of its rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub spot_ids: Vec<String>,
    pub values: Tensor,
}

pub fn encode_features(f: &Features) -> Result<Vec<u8>> {
    if f.values.rows() != f.spot_ids.len() {
        return Err(Error::invalid("feature rows and spot ids differ in length"));
    }
    encode_container(
        "features",
        serde_json::json!({ "spot_ids": f.spot_ids }),
        &[("features", &f.values)],
    )
}

pub fn save_features(path: &Path, f: &Features) -> Result<()> {
    write_atomic(path, &encode_features(f)?)
}

pub fn load_features(path: &Path) -> Result<Features> {
    let c = read_container(path, Some("features"))?;
    let spot_ids: Vec<String> = c.meta_field("spot_ids")?;
    let values = c.get("features")?.clone();
    if !values.is_matrix() || values.rows() != spot_ids.len() {
        return Err(Error::Format(format!(
            "{}: {} spot ids for features of shape {:?}",
            path.display(),
            spot_ids.len(),
            values.shape()
        )));
    }
    Ok(Features { spot_ids, values })
}

pub fn save_pipeline(path: &Path, p: &FeaturePipeline) -> Result<()> {
    let mean = Tensor::new(vec![p.pca.mean.len()], p.pca.mean.clone())?;
    let meta = serde_json::json!({
        "scale": p.scale,
        "gene_ids": p.gene_ids,
        "hvg": p.hvg,
        "explained_variance": p.pca.explained_variance,
        "rank_deficient": p.pca.rank_deficient,
    });
    let bytes = encode_container(
        "pca_model",
        meta,
        &[("mean", &mean), ("components", &p.pca.components)],
    )?;
    write_atomic(path, &bytes)
}

pub fn load_pipeline(path: &Path) -> Result<FeaturePipeline> {
    let c = read_container(path, Some("pca_model"))?;
    let mean = c.get("mean")?.data().to_vec();
    let components = c.get("components")?.clone();
    let hvg: Vec<usize> = c.meta_field("hvg")?;
    let gene_ids: Vec<String> = c.meta_field("gene_ids")?;
    let explained_variance: Vec<f64> = c.meta_field("explained_variance")?;
    if !components.is_matrix()
        || components.cols() != mean.len()
        || hvg.len() != mean.len()
        || explained_variance.len() != components.rows()
        || hvg.iter().any(|&j| j >= gene_ids.len())
    {
        return Err(Error::Format(format!(
            "{}: inconsistent PCA model",
            path.display()
        )));
    }
    Ok(FeaturePipeline {
        scale: c.meta_field("scale")?,
        gene_ids,
        hvg,
        pca: PcaModel {
            mean,
            components,
            explained_variance,
            rank_deficient: c.meta_field("rank_deficient")?,
        },
    })
}

/// Trained parameters with the settings that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ModelParams,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let meta = serde_json::json!({
        "dims": ck.params.dims,
        "seed": ck.config.seed,
        "config": ck.config,
    });
    let tensors = ck.params.tensors();
    let arrays: Vec<(&str, &Tensor)> = PARAM_NAMES
        .iter()
        .copied()
        .zip(tensors.iter().copied())
        .collect();
    encode_container("checkpoint", meta, &arrays)
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let c = read_container(path, Some("checkpoint"))?;
    let dims: ModelDims = c.meta_field("dims")?;
    let config: TrainConfig = c.meta_field("config")?;
    let names: Vec<&str> = c.arrays.iter().map(|(n, _)| n.as_str()).collect();
    if names != PARAM_NAMES {
        return Err(Error::Format(format!(
            "{}: unexpected parameter list {names:?}",
            path.display()
        )));
    }
    let params = ModelParams::from_tensors(dims, c.arrays.into_iter().map(|(_, t)| t).collect())
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(Checkpoint { config, params })
}

/// `dir/name`, creating `dir` if needed.
pub fn output_path(dir: &Path, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    Ok(dir.join(name))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn expr(values: Vec<f64>, spots: &[&str], genes: &[&str]) -> ExpressionMatrix {
        ExpressionMatrix::new(
            Tensor::matrix(spots.len(), genes.len(), values).unwrap(),
            spots.iter().map(|s| s.to_string()).collect(),
            genes.iter().map(|s| s.to_string()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn expression_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        let x = expr(
            vec![0.1, 1.0 / 3.0, -2.5e-300, 7.0],
            &["a", "b"],
            &["g1", "g2"],
        );
        write_expression_csv(&p, &x).unwrap();
        let y = read_expression_csv(&p).unwrap();
        assert_eq!(x, y);
        let bits = |m: &ExpressionMatrix| {
            m.values
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&x), bits(&y));
    }

    #[test]
    fn coords_round_trip_and_align() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        let c = SpatialCoords::new(
            vec!["b".into(), "a".into()],
            Tensor::matrix(2, 2, vec![1.5, 2.0, -0.25, 3.0]).unwrap(),
        )
        .unwrap();
        write_coords_csv(&p, &c).unwrap();
        assert_eq!(read_coords_csv(&p).unwrap(), c);
        let aligned = load_coords(&p, &["a".into(), "b".into()]).unwrap();
        assert_eq!(aligned.spot_ids, vec!["a", "b"]);
        assert_eq!(aligned.point(0), [-0.25, 3.0]);
    }

    #[test]
    fn coords_columns_in_any_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        fs::write(&p, "y,spot_id,x\n2,a,1\n").unwrap();
        assert_eq!(read_coords_csv(&p).unwrap().point(0), [1.0, 2.0]);
    }

    #[test]
    fn missing_and_extra_spots_named() {
        let c = SpatialCoords::new(
            vec!["a".into(), "z".into()],
            Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap(),
        )
        .unwrap();
        let msg = align_coords(&["a".into(), "b".into()], &c)
            .unwrap_err()
            .to_string();
        assert!(msg.contains("spots without coordinates: b"), "{msg}");
        assert!(msg.contains("coordinates for unknown spots: z"), "{msg}");
    }

    #[test]
    fn malformed_cell_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        fs::write(&p, "spot_id,g1,g2\na,1,2\nb,3,oops\n").unwrap();
        match read_expression_csv(&p).unwrap_err() {
            Error::Parse { row, column, .. } => assert_eq!((row, column), (3, 3)),
            e => panic!("{e}"),
        }
        fs::write(&p, "spot,g1\na,1\n").unwrap();
        assert!(matches!(read_expression_csv(&p), Err(Error::Format(_))));
        fs::write(&p, "spot_id,g1\na,1\na,2\n").unwrap();
        assert!(read_expression_csv(&p)
            .unwrap_err()
            .to_string()
            .contains("duplicate"));
        fs::write(&p, "spot_id,g1,g2\na,1\n").unwrap();
        assert!(read_expression_csv(&p).unwrap_err().is_io());
    }

    #[test]
    fn matrix_market_matches_csv() {
        let dir = tempfile::tempdir().unwrap();
        let x = expr(
            vec![0.0, 3.0, 1.0, 0.0, 0.0, 2.5],
            &["s1", "s2"],
            &["g1", "g2", "g3"],
        );
        let csv_path = dir.path().join("e.csv");
        write_expression_csv(&csv_path, &x).unwrap();
        fs::write(
            dir.path().join("genes.txt"),
            "g1\tGene1\ng2\tGene2\ng3\tGene3\n",
        )
        .unwrap();
        fs::write(dir.path().join("spots.txt"), "s1\ns2\n").unwrap();
        let mtx = dir.path().join("matrix.mtx");
        // genes x spots, as written by common spatial pipelines
        fs::write(
            &mtx,
            "%%MatrixMarket matrix coordinate integer general\n% comment\n3 2 3\n2 1 3\n3 1 1\n3 2 2.5\n",
        )
        .unwrap();
        assert_eq!(
            load_expression(&mtx).unwrap(),
            load_expression(&csv_path).unwrap()
        );

        // the spots x genes orientation is also accepted
        fs::write(
            &mtx,
            "%%MatrixMarket matrix coordinate real general\n2 3 3\n1 2 3\n1 3 1\n2 3 2.5\n",
        )
        .unwrap();
        assert_eq!(load_expression(&mtx).unwrap(), x);

        fs::write(
            &mtx,
            "%%MatrixMarket matrix coordinate real general\n2 3 2\n1 2 3\n",
        )
        .unwrap();
        assert!(load_expression(&mtx).is_err());
        fs::write(
            &mtx,
            "%%MatrixMarket matrix coordinate real general\n2 3 1\n1 9 3\n",
        )
        .unwrap();
        assert!(matches!(
            load_expression(&mtx),
            Err(Error::Parse {
                row: 3,
                column: 2,
                ..
            })
        ));
    }

    #[test]
    fn container_round_trip_and_corruption() {
        let a = Tensor::matrix(2, 3, vec![1.0, -2.0, 3.5, f64::MIN_POSITIVE, 0.0, 1e300]).unwrap();
        let b = Tensor::scalar(0.25);
        let bytes =
            encode_container("test", serde_json::json!({"k": 1}), &[("a", &a), ("b", &b)]).unwrap();
        let c = decode_container(&bytes, Some("test")).unwrap();
        assert_eq!(c.get("a").unwrap(), &a);
        assert_eq!(c.get("b").unwrap(), &b);
        assert_eq!(c.meta["k"], 1);
        assert!(decode_container(&bytes, Some("checkpoint")).is_err());
        assert!(decode_container(&bytes[..bytes.len() - 8], None).is_err());
        let mut bad = bytes.clone();
        bad[0] ^= 1;
        assert!(decode_container(&bad, None).is_err());
        let mut long = bytes.clone();
        long[16..24].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode_container(&long, None).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = TrainConfig {
            seed: 9,
            latent_dim: 2,
            hidden_dim: 5,
            ..TrainConfig::default()
        };
        let mut params = ModelParams::init(cfg.dims(7), &mut rng).unwrap();
        params.theta_lambda = Tensor::scalar(rng.random_range(-1.0..1.0));
        let ck = Checkpoint {
            config: cfg,
            params,
        };
        let p = dir.path().join("ck.bin");
        save_checkpoint(&p, &ck).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back, ck);
        assert_eq!(fs::read(&p).unwrap(), encode_checkpoint(&back).unwrap());
    }

    #[test]
    fn features_and_pipeline_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vals: Vec<f64> = (0..40)
            .map(|_| rng.random_range(0.0..20.0f64).round())
            .collect();
        let spots: Vec<String> = (0..8).map(|i| format!("s{i}")).collect();
        let genes: Vec<String> = (0..5).map(|i| format!("g{i}")).collect();
        let x = ExpressionMatrix::new(Tensor::matrix(8, 5, vals).unwrap(), spots.clone(), genes)
            .unwrap();
        let (pipe, scores) = FeaturePipeline::fit(&x, 4, 3, 1e4).unwrap();
        let pp = dir.path().join("pca_model.bin");
        save_pipeline(&pp, &pipe).unwrap();
        let back = load_pipeline(&pp).unwrap();
        assert_eq!(back, pipe);
        assert_eq!(back.transform(&x).unwrap(), scores);

        let fp = dir.path().join("features.bin");
        let f = Features {
            spot_ids: spots,
            values: scores,
        };
        save_features(&fp, &f).unwrap();
        assert_eq!(load_features(&fp).unwrap(), f);
        assert!(load_pipeline(&fp).is_err());
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
