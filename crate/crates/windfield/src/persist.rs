//! On-disk model format: one little-endian binary file per component
//! ensemble plus CSV files for the temporal mean, basis, coefficients
//! and feature standardization.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::elm::{ElmEnsemble, ElmMember};
use crate::error::{Result, WindError};
use crate::eof::EofDecomposition;
use crate::st_model::{StModel, VarianceModel};
use crate::terrain::Standardizer;

const MAGIC: &[u8; 8] = b"STELM001";

struct BinWriter {
    buf: Vec<u8>,
}

impl BinWriter {
    fn new() -> Self {
        BinWriter { buf: MAGIC.to_vec() }
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn slice(&mut self, v: &[f64]) {
        for x in v {
            self.f64(*x);
        }
    }
}

struct BinReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> BinReader<'a> {
    fn new(buf: &'a [u8]) -> Result<Self> {
        if buf.len() < 8 || &buf[..8] != MAGIC {
            return Err(WindError::Schema("bad ensemble file magic".into()));
        }
        Ok(BinReader { buf, pos: 8 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(WindError::Schema("truncated ensemble file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn vec(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(WindError::Schema("trailing bytes in ensemble file".into()));
        }
        Ok(())
    }
}

/// Serialize one ensemble: dims, then per-member (alpha, W, b, beta,
/// H^alpha) column-major, then the training targets and hat statistics.
pub fn save_ensemble(path: &Path, e: &ElmEnsemble) -> Result<()> {
    let n = e.n_train();
    let m = e.m_members();
    let d = e.members[0].w.nrows();
    let neurons = e.members[0].w.ncols();
    let mut w = BinWriter::new();
    w.u64(m as u64);
    w.u64(n as u64);
    w.u64(d as u64);
    w.u64(neurons as u64);
    for mem in &e.members {
        w.f64(mem.alpha);
        w.slice(mem.w.as_slice());
        w.slice(mem.b.as_slice());
        w.slice(mem.beta.as_slice());
        w.slice(mem.h_alpha.as_slice());
    }
    w.slice(e.y.as_slice());
    w.slice(e.residuals.as_slice());
    w.f64(e.df);
    w.f64(e.sigma2_eps);
    let mut f = fs::File::create(path)?;
    f.write_all(&w.buf)?;
    Ok(())
}

pub fn load_ensemble(path: &Path) -> Result<ElmEnsemble> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = BinReader::new(&buf)?;
    let m = r.u64()? as usize;
    let n = r.u64()? as usize;
    let d = r.u64()? as usize;
    let neurons = r.u64()? as usize;
    let mut members = Vec::with_capacity(m);
    for _ in 0..m {
        let alpha = r.f64()?;
        let w = DMatrix::from_column_slice(d, neurons, &r.vec(d * neurons)?);
        let b = DVector::from_vec(r.vec(neurons)?);
        let beta = DVector::from_vec(r.vec(neurons)?);
        let h_alpha = DMatrix::from_column_slice(neurons, n, &r.vec(neurons * n)?);
        members.push(ElmMember { w, b, alpha, beta, h_alpha });
    }
    let y = DVector::from_vec(r.vec(n)?);
    let residuals = DVector::from_vec(r.vec(n)?);
    let df = r.f64()?;
    let sigma2_eps = r.f64()?;
    r.done()?;
    Ok(ElmEnsemble { members, y, residuals, df, sigma2_eps })
}

fn write_matrix_csv(path: &Path, header: &str, m: &DMatrix<f64>) -> Result<()> {
    let mut s = String::from(header);
    s.push('\n');
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:e}", m[(i, j)])).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let text = fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in text.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|v| {
                v.trim()
                    .parse()
                    .map_err(|_| WindError::Schema(format!("bad number `{v}` in {path:?}")))
            })
            .collect::<Result<_>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(WindError::Schema(format!("empty matrix file {path:?}")));
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(WindError::Schema(format!("ragged matrix file {path:?}")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// Save a fitted model into a directory: decomposition CSVs, feature
/// standardization and the component ensembles.
pub fn save_model(dir: &Path, model: &StModel) -> Result<()> {
    fs::create_dir_all(dir)?;
    let eof = &model.eof;
    write_matrix_csv(
        &dir.join("temporal_mean.csv"),
        "mu_t",
        &DMatrix::from_column_slice(eof.mu_t.len(), 1, eof.mu_t.as_slice()),
    )?;
    write_matrix_csv(&dir.join("basis.csv"), &csv_header("phi", eof.phi.ncols()), &eof.phi)?;
    write_matrix_csv(
        &dir.join("coefficients.csv"),
        &csv_header("a", eof.coeffs.ncols()),
        &eof.coeffs,
    )?;
    write_matrix_csv(
        &dir.join("singular_values.csv"),
        "sigma",
        &DMatrix::from_column_slice(eof.singular_values.len(), 1, eof.singular_values.as_slice()),
    )?;
    let mut std_csv = String::from("mean,sd\n");
    for (m, s) in model.standardizer.mean.iter().zip(&model.standardizer.sd) {
        std_csv.push_str(&format!("{m:e},{s:e}\n"));
    }
    fs::write(dir.join("standardizer.csv"), std_csv)?;

    let mut manifest = format!("k_retained,{}\n", eof.k_retained);
    for (k, e) in model.ensembles.iter().enumerate() {
        match e {
            Some(e) => {
                let name = format!("component_{k:04}.elm");
                save_ensemble(&dir.join(&name), e)?;
                manifest.push_str(&format!("component_{k},{name}\n"));
            }
            None => manifest.push_str(&format!("component_{k},none\n")),
        }
    }
    fs::write(dir.join("manifest.csv"), manifest)?;
    Ok(())
}

fn csv_header(prefix: &str, n: usize) -> String {
    (0..n).map(|k| format!("{prefix}_{k}")).collect::<Vec<_>>().join(",")
}

pub fn load_model(dir: &Path) -> Result<StModel> {
    let mu = read_matrix_csv(&dir.join("temporal_mean.csv"))?;
    let phi = read_matrix_csv(&dir.join("basis.csv"))?;
    let coeffs = read_matrix_csv(&dir.join("coefficients.csv"))?;
    let sv = read_matrix_csv(&dir.join("singular_values.csv"))?;
    let std_text = fs::read_to_string(dir.join("standardizer.csv"))?;
    let mut mean = Vec::new();
    let mut sd = Vec::new();
    for line in std_text.lines().skip(1) {
        let mut it = line.split(',');
        let m: f64 = it
            .next()
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| WindError::Schema("bad standardizer row".into()))?;
        let s: f64 = it
            .next()
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| WindError::Schema("bad standardizer row".into()))?;
        mean.push(m);
        sd.push(s);
    }

    let manifest = fs::read_to_string(dir.join("manifest.csv"))?;
    let mut k_retained = None;
    let mut ensembles: Vec<Option<ElmEnsemble>> = Vec::new();
    for line in manifest.lines() {
        let Some((key, value)) = line.split_once(',') else { continue };
        if key == "k_retained" {
            k_retained = value.trim().parse().ok();
        } else if key.starts_with("component_") {
            ensembles.push(match value.trim() {
                "none" => None,
                name => Some(load_ensemble(&dir.join(name))?),
            });
        }
    }
    let k_retained =
        k_retained.ok_or_else(|| WindError::Schema("manifest missing k_retained".into()))?;
    if ensembles.len() != k_retained {
        return Err(WindError::Schema(format!(
            "{} component entries for k_retained = {k_retained}",
            ensembles.len()
        )));
    }
    let eof = EofDecomposition {
        mu_t: DVector::from_column_slice(mu.as_slice()),
        phi,
        coeffs,
        singular_values: DVector::from_column_slice(sv.as_slice()),
        k_retained,
    };
    Ok(StModel { eof, ensembles, standardizer: Standardizer { mean, sd } })
}

pub fn save_variance_model(dir: &Path, vm: &VarianceModel) -> Result<()> {
    save_model(dir, &vm.model)?;
    fs::write(dir.join("floor.csv"), format!("floor\n{:e}\n", vm.floor))?;
    Ok(())
}

pub fn load_variance_model(dir: &Path) -> Result<VarianceModel> {
    let model = load_model(dir)?;
    let text = fs::read_to_string(dir.join("floor.csv"))?;
    let floor: f64 = text
        .lines()
        .nth(1)
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| WindError::Schema("bad floor file".into()))?;
    Ok(VarianceModel { model, floor })
}
