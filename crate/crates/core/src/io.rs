//! CSV formats: trajectories, current profiles, measurements, metric reports
//! and SOC-OCV tables.
//!
//! Lines starting with `#` are comments. Trajectory files carry the model,
//! scenario name, seed and termination reason as `# key=value` lines.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::init::SocOcvTable;
use crate::metrics::{Report, POSITIONS};
use crate::scalar::{to_f64, Scalar};
use crate::stepper::{Flags, Measurements, StepRecord, Termination, Trajectory};

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| Error::io(path, e))
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(r)
}

fn num(field: Option<&str>, line: u64, col: &str) -> Result<f64> {
    field
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::Config(format!("line {line}: missing `{col}`")))?
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: `{col}` is not a number")))
}

/// Reads a `(t_s, I_A)` current profile.
pub fn read_profile(path: impl AsRef<Path>) -> Result<Vec<[f64; 2]>> {
    let mut rd = reader(open(path.as_ref())?);
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        out.push([num(rec.get(0), line, "t_s")?, num(rec.get(1), line, "I_A")?]);
    }
    Ok(out)
}

/// Reads `(t_s, V_measured[, T_measured])`.
pub fn read_measurements(path: impl AsRef<Path>) -> Result<Measurements> {
    let mut rd = reader(open(path.as_ref())?);
    let with_t = rd.headers()?.len() >= 3;
    let (mut t, mut v, mut temp) = (Vec::new(), Vec::new(), Vec::new());
    for rec in rd.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        t.push(num(rec.get(0), line, "t_s")?);
        v.push(num(rec.get(1), line, "V_measured")?);
        if with_t {
            temp.push(num(rec.get(2), line, "T_measured")?);
        }
    }
    Measurements::new(t, v, with_t.then_some(temp))
}

/// Trajectory column names in file order.
pub fn trajectory_columns() -> Vec<String> {
    let mut c: Vec<String> = ["t_s", "I_A", "V_V", "T_K", "SOC"].map(String::from).to_vec();
    for q in ["ce", "css", "csb", "jn"] {
        c.extend(POSITIONS.iter().map(|p| format!("{q}_{p}")));
    }
    c.extend(["Qe_neg_mol", "Qe_pos_mol", "Qh_W", "flags"].map(String::from));
    c
}

pub fn write_trajectory<W: Write>(mut w: W, tr: &Trajectory) -> Result<()> {
    let io = |e| Error::io("<trajectory>", e);
    writeln!(w, "# model={}", tr.model).map_err(io)?;
    writeln!(w, "# scenario={}", tr.name).map_err(io)?;
    if let Some(s) = tr.seed {
        writeln!(w, "# seed={s}").map_err(io)?;
    }
    writeln!(w, "# termination={}", tr.termination).map_err(io)?;
    let mut cw = csv::Writer::from_writer(w);
    cw.write_record(trajectory_columns())?;
    for r in &tr.records {
        let mut row: Vec<String> = [r.t, r.current, r.v, r.temperature, r.soc].iter().map(f64::to_string).collect();
        for a in [&r.ce, &r.css, &r.cs_bulk, &r.jn] {
            row.extend(a.iter().flatten().map(f64::to_string));
        }
        row.extend([r.qe[0], r.qe[1], r.qh].iter().map(f64::to_string));
        row.push(r.flags.names());
        cw.write_record(&row)?;
    }
    cw.flush().map_err(io)?;
    Ok(())
}

pub fn save_trajectory(path: impl AsRef<Path>, tr: &Trajectory) -> Result<()> {
    write_trajectory(std::io::BufWriter::new(create(path.as_ref())?), tr)
}

fn parse_termination(s: &str) -> Termination {
    match s {
        "completed" => Termination::Completed,
        "cut-off" => Termination::CutOff,
        other => Termination::Failed(other.strip_prefix("failed: ").unwrap_or(other).to_string()),
    }
}

pub fn read_trajectory<R: Read>(r: R) -> Result<Trajectory> {
    let mut text = String::new();
    BufReader::new(r).read_to_string(&mut text).map_err(|e| Error::io("<trajectory>", e))?;
    let mut tr = Trajectory::new("", "", None);
    for line in text.lines().take_while(|l| l.starts_with('#')) {
        if let Some((k, v)) = line.trim_start_matches('#').trim().split_once('=') {
            match k.trim() {
                "model" => tr.model = v.to_string(),
                "scenario" => tr.name = v.to_string(),
                "seed" => tr.seed = v.parse().ok(),
                "termination" => tr.termination = parse_termination(v),
                _ => {}
            }
        }
    }
    let mut rd = reader(text.as_bytes());
    let cols = trajectory_columns();
    if rd.headers()?.iter().collect::<Vec<_>>() != cols {
        return Err(Error::Config("trajectory header does not match the expected columns".into()));
    }
    for rec in rd.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let x = |k: usize| num(rec.get(k), line, &cols[k]);
        let block = |off: usize| -> Result<[[f64; 4]; 2]> {
            let mut a = [[0.0; 4]; 2];
            for k in 0..8 {
                a[k / 4][k % 4] = x(off + k)?;
            }
            Ok(a)
        };
        tr.records.push(StepRecord {
            t: x(0)?,
            current: x(1)?,
            v: x(2)?,
            temperature: x(3)?,
            soc: x(4)?,
            ce: block(5)?,
            css: block(13)?,
            cs_bulk: block(21)?,
            jn: block(29)?,
            qe: [x(37)?, x(38)?],
            qh: x(39)?,
            flags: Flags::parse_names(rec.get(40).unwrap_or(""))?,
        });
    }
    Ok(tr)
}

pub fn load_trajectory(path: impl AsRef<Path>) -> Result<Trajectory> {
    read_trajectory(open(path.as_ref())?)
}

/// Report CSV: `field, position, R2, RMSE, MAE`.
pub fn write_report<W: Write>(w: W, rep: &Report) -> Result<()> {
    let mut cw = csv::Writer::from_writer(w);
    cw.write_record(["field", "position", "R2", "RMSE", "MAE"])?;
    for r in &rep.rows {
        let r2 = r.r2.map_or_else(String::new, |v| v.to_string());
        cw.write_record([r.field.clone(), r.position.clone(), r2, r.rmse.to_string(), r.mae.to_string()])?;
    }
    cw.flush().map_err(|e| Error::io("<report>", e))?;
    Ok(())
}

/// SOC-OCV CSV: `SOC, OCV_V`.
pub fn write_socv<W: Write, S: Scalar>(w: W, tab: &SocOcvTable<S>) -> Result<()> {
    let mut cw = csv::Writer::from_writer(w);
    cw.write_record(["SOC", "OCV_V"])?;
    for (s, v) in tab.soc.iter().zip(&tab.ocv) {
        cw.write_record([to_f64(*s).to_string(), to_f64(*v).to_string()])?;
    }
    cw.flush().map_err(|e| Error::io("<socv>", e))?;
    Ok(())
}

/// Writes to a file, or to stdout for `-`.
pub fn with_output<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> Result<()>,
{
    if path.as_os_str() == "-" {
        let out = std::io::stdout();
        let mut lock = out.lock();
        f(&mut lock)
    } else {
        let mut w = std::io::BufWriter::new(create(path)?);
        f(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Trajectory {
        let mut tr = Trajectory::new("cc-1c-298k", "reduced", Some(42));
        for k in 0..3 {
            tr.records.push(StepRecord {
                t: k as f64,
                current: 1.7,
                v: 4.1 - 0.01 * k as f64,
                temperature: 298.0,
                soc: 1.0 / 3.0,
                ce: [[1200.5; 4], [1199.25; 4]],
                css: [[1.6e4, 1.61e4, 1.62e4, 1.63e4], [2.0e4; 4]],
                cs_bulk: [[1.6e4; 4], [2.0e4; 4]],
                jn: [[1.0e-5, 1.1e-5, 1.2e-5, 1.3e-5], [-1.0e-5; 4]],
                qe: [3.049e-3, 2.5e-3],
                qh: 0.123,
                flags: if k == 2 { Flags::CUTOFF | Flags::CSS_CLAMPED } else { Flags::empty() },
            });
        }
        tr.termination = Termination::CutOff;
        tr
    }

    #[test]
    fn trajectory_round_trip() {
        let tr = sample();
        let mut buf = Vec::new();
        write_trajectory(&mut buf, &tr).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# model=reduced\n# scenario=cc-1c-298k\n# seed=42\n# termination=cut-off\n"));
        assert_eq!(trajectory_columns().len(), 41);
        let back = read_trajectory(buf.as_slice()).unwrap();
        assert_eq!(back, tr);
        let mut again = Vec::new();
        write_trajectory(&mut again, &back).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn failed_termination_round_trip() {
        let mut tr = sample();
        tr.termination = Termination::Failed("kinetics degeneracy".into());
        let mut buf = Vec::new();
        write_trajectory(&mut buf, &tr).unwrap();
        assert_eq!(read_trajectory(buf.as_slice()).unwrap().termination, tr.termination);
    }

    #[test]
    fn profiles_and_measurements() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("prof.csv");
        std::fs::write(&p, "# random\nt_s,I_A\n0,1.5\n10, -0.5\n12,0\n").unwrap();
        assert_eq!(read_profile(&p).unwrap(), vec![[0.0, 1.5], [10.0, -0.5], [12.0, 0.0]]);
        let m = dir.path().join("meas.csv");
        std::fs::write(&m, "t_s,V_measured,T_measured\n0,4.0,298\n10,3.9,299\n").unwrap();
        let ms = read_measurements(&m).unwrap();
        assert_eq!(ms.sample(5.0), (3.95, Some(298.5)));
        std::fs::write(&m, "t_s,V_measured\n0,4.0\n10,3.9\n").unwrap();
        assert_eq!(read_measurements(&m).unwrap().temperature, None);
        std::fs::write(&p, "t_s,I_A\n0,abc\n").unwrap();
        assert!(read_profile(&p).is_err());
        assert!(read_profile(dir.path().join("missing.csv")).is_err());
    }
}
