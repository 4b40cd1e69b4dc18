use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::spectrum::{compare_spectra, svd_spectrum_with, tail_energy, SpectrumComparison};
use crate::error::{Error, Result};
use crate::model::{AttentionRecord, Causality};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.csv";
const MANIFEST_HEADER: &str = "file,layer,head,user,causality,size";
const RECORD_HEADER: &str = "layer,head,row,col,value";

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_causality(s: &str) -> Option<Causality> {
    match s {
        "AE" | "ae" => Some(Causality::Ae),
        "AR" | "ar" => Some(Causality::Ar),
        _ => None,
    }
}

/// Writes one CSV per record plus a manifest into `dir`.
pub fn write_attention_dump(dir: &Path, records: &[AttentionRecord]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!("{MANIFEST_HEADER}\n");
    for (i, rec) in records.iter().enumerate() {
        let n = rec.matrix.shape()[0];
        let file = format!("record_{i:05}.csv");
        let _ = writeln!(
            manifest,
            "{file},{},{},{},{},{n}",
            rec.layer, rec.head, rec.user, rec.causality
        );
        let mut body = format!("{RECORD_HEADER}\n");
        for r in 0..n {
            for c in 0..n {
                let _ = writeln!(
                    body,
                    "{},{},{r},{c},{}",
                    rec.layer,
                    rec.head,
                    rec.matrix.at(r, c)
                );
            }
        }
        let path = dir.join(&file);
        fs::write(&path, body).map_err(|e| Error::io(path, e))?;
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(path, e))
}

/// Reads a dump written by [`write_attention_dump`]. Cells absent from a
/// record file are zero.
pub fn read_attention_dump(dir: &Path) -> Result<Vec<AttentionRecord>> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == MANIFEST_HEADER => {}
        _ => {
            return Err(parse_err(
                &mpath,
                1,
                format!("expected header `{MANIFEST_HEADER}`"),
            ))
        }
    }
    let mut out = Vec::new();
    for (ln, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 6 {
            return Err(parse_err(&mpath, ln + 1, "expected 6 fields"));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| parse_err(&mpath, ln + 1, format!("bad integer `{s}`")))
        };
        let (layer, head, user, size) = (num(f[1])?, num(f[2])?, num(f[3])?, num(f[5])?);
        let causality = parse_causality(f[4])
            .ok_or_else(|| parse_err(&mpath, ln + 1, format!("bad causality `{}`", f[4])))?;
        let matrix = read_record(&dir.join(f[0]), layer, head, size)?;
        out.push(AttentionRecord {
            layer,
            head,
            user,
            causality,
            matrix,
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyInput(format!(
            "{} lists no records",
            mpath.display()
        )));
    }
    Ok(out)
}

fn read_record(path: &PathBuf, layer: usize, head: usize, size: usize) -> Result<Tensor> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == RECORD_HEADER => {}
        _ => {
            return Err(parse_err(
                path,
                1,
                format!("expected header `{RECORD_HEADER}`"),
            ))
        }
    }
    let mut m = Tensor::zeros(&[size, size]);
    for (ln, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 5 {
            return Err(parse_err(path, ln + 1, "expected 5 fields"));
        }
        let bad = |s: &str| parse_err(path, ln + 1, format!("bad number `{s}`"));
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad(s));
        let (l, h, r, c) = (int(f[0])?, int(f[1])?, int(f[2])?, int(f[3])?);
        let value: f64 = f[4].parse().map_err(|_| bad(f[4]))?;
        if l != layer || h != head {
            return Err(parse_err(
                path,
                ln + 1,
                "layer/head disagree with the manifest",
            ));
        }
        if r >= size || c >= size {
            return Err(parse_err(
                path,
                ln + 1,
                format!("cell ({r}, {c}) outside {size}×{size}"),
            ));
        }
        m.data_mut()[r * size + c] = value;
    }
    Ok(m)
}

/// Matrix as a plain CSV grid.
pub fn heatmap_csv(matrix: &Tensor) -> String {
    let mut s = String::new();
    for r in 0..matrix.rows() {
        let row: Vec<String> = matrix.row(r).iter().map(|x| x.to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// Files produced by [`write_analysis`].
#[derive(Debug, Clone)]
pub struct AnalysisSummary {
    pub records: usize,
    pub comparison: Option<SpectrumComparison>,
}

/// Writes `summary.csv`, `spectra.csv`, `reconstruction.csv`, a heatmap grid
/// per record and, when both causalities are present at one common size,
/// `comparison.csv`.
pub fn write_analysis(
    records: &[AttentionRecord],
    out: &Path,
    tau: f64,
) -> Result<AnalysisSummary> {
    let heat = out.join("heatmaps");
    fs::create_dir_all(&heat).map_err(|e| Error::io(&heat, e))?;
    let mut summary =
        String::from("record,layer,head,user,causality,size,effective_rank,min_sigma,area\n");
    let mut spectra = String::from("record,index,sigma,normalized\n");
    let mut recon = String::from("record,r,error,tail_energy\n");
    for (i, rec) in records.iter().enumerate() {
        let rep = svd_spectrum_with(&rec.matrix, tau)?;
        let _ = writeln!(
            summary,
            "{i},{},{},{},{},{},{},{:e},{}",
            rec.layer,
            rec.head,
            rec.user,
            rec.causality,
            rec.matrix.shape()[0],
            rep.effective_rank,
            rep.min_singular_value(),
            rep.area()
        );
        for (k, (s, z)) in rep.singular_values.iter().zip(&rep.normalized).enumerate() {
            let _ = writeln!(spectra, "{i},{},{s:e},{z:e}", k + 1);
        }
        for (k, e) in rep.reconstruction_errors.iter().enumerate() {
            let _ = writeln!(
                recon,
                "{i},{},{e:e},{:e}",
                k + 1,
                tail_energy(&rep.singular_values, k + 1)
            );
        }
        let p = heat.join(format!("record_{i:05}.csv"));
        fs::write(&p, heatmap_csv(&rec.matrix)).map_err(|e| Error::io(p, e))?;
    }
    for (name, body) in [
        ("summary.csv", summary),
        ("spectra.csv", spectra),
        ("reconstruction.csv", recon),
    ] {
        let p = out.join(name);
        fs::write(&p, body).map_err(|e| Error::io(p, e))?;
    }

    let pick = |c: Causality| -> Vec<Tensor> {
        records
            .iter()
            .filter(|r| r.causality == c)
            .map(|r| r.matrix.clone())
            .collect()
    };
    let (ae, ar) = (pick(Causality::Ae), pick(Causality::Ar));
    let comparison = if !ae.is_empty() && !ar.is_empty() {
        compare_spectra(&ae, &ar, tau).ok()
    } else {
        None
    };
    if let Some(c) = &comparison {
        let p = out.join("comparison.csv");
        fs::write(&p, c.to_csv()).map_err(|e| Error::io(p, e))?;
    }
    Ok(AnalysisSummary {
        records: records.len(),
        comparison,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(c: Causality, m: Tensor) -> AttentionRecord {
        AttentionRecord {
            layer: 1,
            head: 0,
            user: 7,
            causality: c,
            matrix: m,
        }
    }

    #[test]
    fn round_trip_and_analysis() {
        let dir = tempfile::tempdir().unwrap();
        let m = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.1 + 0.2, 0.7]]).unwrap();
        let recs = vec![
            record(Causality::Ar, m.clone()),
            record(Causality::Ae, Tensor::full(&[2, 2], 0.5)),
        ];
        write_attention_dump(dir.path(), &recs).unwrap();
        let back = read_attention_dump(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].matrix, m);
        assert_eq!(back[1].causality, Causality::Ae);
        let out = dir.path().join("out");
        let s = write_analysis(&back, &out, 1e-2).unwrap();
        assert_eq!(s.comparison.unwrap().ae_effective_ranks, vec![1]);
        assert!(out.join("comparison.csv").exists());
        assert!(out.join("heatmaps/record_00001.csv").exists());
    }

    #[test]
    fn malformed_dump() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join(MANIFEST),
            format!("{MANIFEST_HEADER}\nr.csv,0,0,0,XX,2\n"),
        )
        .unwrap();
        assert!(matches!(
            read_attention_dump(dir.path()),
            Err(Error::Parse { line: 2, .. })
        ));
        fs::write(
            dir.path().join(MANIFEST),
            format!("{MANIFEST_HEADER}\nr.csv,0,0,0,AR,2\n"),
        )
        .unwrap();
        fs::write(
            dir.path().join("r.csv"),
            format!("{RECORD_HEADER}\n0,0,5,0,1.0\n"),
        )
        .unwrap();
        assert!(matches!(
            read_attention_dump(dir.path()),
            Err(Error::Parse { .. })
        ));
    }
}
