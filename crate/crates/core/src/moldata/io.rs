use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::moldata::{LabeledMolecule, Molecule, Vec3};
use crate::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    z: Vec<u32>,
    r: Vec<f64>,
    q: i32,
    s: u32,
    energy: f64,
    forces: Vec<f64>,
}

fn rows(flat: &[f64], n: usize, what: &str) -> std::result::Result<Vec<Vec3>, String> {
    if flat.len() != 3 * n {
        return Err(format!(
            "{n} atomic numbers but {} values in \"{what}\" ({} rows)",
            flat.len(),
            flat.len() as f64 / 3.0
        ));
    }
    Ok(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

/// One JSON line, without the trailing newline.
pub fn encode_record(rec: &LabeledMolecule) -> String {
    let m = &rec.molecule;
    let record = Record {
        z: m.atomic_numbers().to_vec(),
        r: m.positions().iter().flatten().copied().collect(),
        q: m.charge(),
        s: m.spin(),
        energy: rec.energy,
        forces: rec.forces.iter().flatten().copied().collect(),
    };
    serde_json::to_string(&record).expect("records serialize")
}

pub fn decode_record(line: &str) -> std::result::Result<LabeledMolecule, String> {
    let rec: Record = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let n = rec.z.len();
    let positions = rows(&rec.r, n, "r")?;
    let forces = rows(&rec.forces, n, "forces")?;
    let m = Molecule::new(positions, rec.z, rec.q, rec.s).map_err(|e| e.to_string())?;
    LabeledMolecule::new(m, rec.energy, forces).map_err(|e| e.to_string())
}

/// Reads a JSON Lines dataset. Blank lines are skipped; errors name the
/// 1-based line.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<LabeledMolecule>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = decode_record(&line).map_err(|msg| Error::Record { path: path.to_path_buf(), line: i + 1, msg })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_dataset(records: &[LabeledMolecule], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        writeln!(w, "{}", encode_record(rec)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moldata::{generate_lj_dataset, GeneratorConfig};

    #[test]
    fn write_then_read_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let data = generate_lj_dataset(&GeneratorConfig { count: 20, seed: 9, ..Default::default() }).unwrap();
        write_dataset(&data, &path).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), data);
    }

    #[test]
    fn shape_error_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let good = r#"{"z":[1],"r":[0,0,0],"q":0,"s":1,"energy":0.0,"forces":[0,0,0]}"#;
        let bad = r#"{"z":[1,1,1,1],"r":[0,0,0,1,0,0,2,0,0],"q":0,"s":1,"energy":0.0,"forces":[0,0,0,0,0,0,0,0,0]}"#;
        fs::write(&path, format!("{good}\n{bad}\n")).unwrap();
        match read_dataset(&path) {
            Err(Error::Record { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("4 atomic numbers"), "{msg}");
            }
            other => panic!("expected a record error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        fs::write(&path, "").unwrap();
        assert!(read_dataset(&path).unwrap().is_empty());
    }
}
