use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One annotated interval in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationEvent {
    pub onset_s: f64,
    pub offset_s: f64,
    pub label: String,
}

impl AnnotationEvent {
    pub fn new(onset_s: f64, offset_s: f64, label: impl Into<String>) -> Result<Self> {
        if !(onset_s >= 0.0 && onset_s < offset_s && offset_s.is_finite()) {
            return Err(Error::Validation(format!(
                "event [{onset_s}, {offset_s}] must satisfy 0 <= onset < offset"
            )));
        }
        Ok(AnnotationEvent {
            onset_s,
            offset_s,
            label: label.into(),
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.offset_s - self.onset_s
    }
}

/// An event together with the audio file it belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationRow {
    pub file: String,
    pub event: AnnotationEvent,
}

const FILE_COL: &str = "Audiofilename";
const START_COL: &str = "Starttime";
const END_COL: &str = "Endtime";
const Q_COL: &str = "Q";

/// Reads an annotation table. `Q` values `NEG` and `UNK` are skipped; `POS`
/// and class names become events labelled with that value. When
/// `require_q` is false a missing `Q` column labels every row `POS`, which
/// is how prediction tables are read.
pub fn read_annotation_rows(path: &Path, require_q: bool) -> Result<Vec<AnnotationRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let missing = |name: &str| Error::Format(format!("{}: missing column {name}", path.display()));
    let fcol = col(FILE_COL).ok_or_else(|| missing(FILE_COL))?;
    let scol = col(START_COL).ok_or_else(|| missing(START_COL))?;
    let ecol = col(END_COL).ok_or_else(|| missing(END_COL))?;
    let qcol = col(Q_COL);
    if require_q && qcol.is_none() {
        return Err(missing(Q_COL));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let label = qcol.map_or("POS", |c| field(c));
        if label == "NEG" || label == "UNK" {
            continue;
        }
        let num = |c: usize| -> Result<f64> {
            field(c)
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("{} line {line}: bad time {:?}", path.display(), field(c))))
        };
        let (on, off) = (num(scol)?, num(ecol)?);
        let event = AnnotationEvent::new(on, off, label).map_err(|_| {
            Error::Validation(format!(
                "{} line {line}: onset {on} must be < offset {off}",
                path.display()
            ))
        })?;
        rows.push(AnnotationRow {
            file: field(fcol).to_string(),
            event,
        });
    }
    Ok(rows)
}

/// Events of an annotation table, all files merged.
pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationEvent>> {
    Ok(read_annotation_rows(path, true)?.into_iter().map(|r| r.event).collect())
}

/// Writes `Audiofilename,Starttime,Endtime,Q` with `Q` set to each label.
pub fn write_annotations(path: &Path, file: &str, events: &[AnnotationEvent]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record([FILE_COL, START_COL, END_COL, Q_COL])
        .map_err(|e| csv_err(path, e))?;
    for ev in events {
        w.write_record([file, &format_time(ev.onset_s), &format_time(ev.offset_s), &ev.label])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes a prediction table `Audiofilename,Starttime,Endtime`.
pub fn write_events_csv(path: &Path, rows: &[AnnotationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record([FILE_COL, START_COL, END_COL])
        .map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record([
            r.file.as_str(),
            &format_time(r.event.onset_s),
            &format_time(r.event.offset_s),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn format_time(t: f64) -> String {
    format!("{t:.6}")
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Format(format!("{}: {e}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn pos_row_parses() {
        let d = tempfile::tempdir().unwrap();
        let p = write(
            d.path(),
            "a.csv",
            "Audiofilename,Starttime,Endtime,Q\na.wav,1.0,1.5,POS\n",
        );
        let ev = read_annotations(&p).unwrap();
        assert_eq!(ev, vec![AnnotationEvent::new(1.0, 1.5, "POS").unwrap()]);
    }

    #[test]
    fn empty_event_reports_row() {
        let d = tempfile::tempdir().unwrap();
        let p = write(
            d.path(),
            "a.csv",
            "Audiofilename,Starttime,Endtime,Q\na.wav,1.0,2.0,POS\na.wav,2.0,2.0,POS\n",
        );
        let err = read_annotations(&p).unwrap_err();
        assert!(matches!(&err, Error::Validation(m) if m.contains("line 3")), "{err}");
    }

    #[test]
    fn unk_rows_are_skipped() {
        let mut body = String::from("Audiofilename,Starttime,Endtime,Q\n");
        for i in 0..5 {
            body += &format!("t.wav,{}.0,{}.5,POS\n", 2 * i, 2 * i);
        }
        for i in 0..3 {
            body += &format!("t.wav,{}.0,{}.2,UNK\n", 20 + i, 20 + i);
        }
        body += "t.wav,30.0,31.0,NEG\n";
        let d = tempfile::tempdir().unwrap();
        let p = write(d.path(), "t.csv", &body);
        let ev = read_annotations(&p).unwrap();
        assert_eq!(ev.len(), 5);
        assert!(ev.iter().all(|e| e.label == "POS"));
    }

    #[test]
    fn missing_column_is_format_error() {
        let d = tempfile::tempdir().unwrap();
        let p = write(d.path(), "a.csv", "Audiofilename,Starttime,Q\na.wav,1.0,POS\n");
        assert!(matches!(read_annotations(&p), Err(Error::Format(_))));
        let p = write(d.path(), "b.csv", "Audiofilename,Starttime,Endtime\na.wav,1.0,2.0\n");
        assert!(matches!(read_annotations(&p), Err(Error::Format(_))));
        let rows = read_annotation_rows(&p, false).unwrap();
        assert_eq!(rows[0].event.label, "POS");
    }

    #[test]
    fn write_then_read() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("w.csv");
        let ev = vec![
            AnnotationEvent::new(0.25, 0.5, "POS").unwrap(),
            AnnotationEvent::new(1.0, 1.75, "bird").unwrap(),
        ];
        write_annotations(&p, "w.wav", &ev).unwrap();
        assert_eq!(read_annotations(&p).unwrap(), ev);
    }
}
