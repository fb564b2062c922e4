//! Raw ink data model and SVC2004 corpus ingestion.
//!
//! An SVC2004 sample file is plain text: the first line holds the point
//! count, every following line one stroke point as `X Y TIMESTAMP BUTTON`
//! (task 1) or `X Y TIMESTAMP BUTTON AZIMUTH ALTITUDE PRESSURE` (task 2).
//! `BUTTON` is 1 while the pen touches the tablet and 0 where it lifts.
//! Files are named `U<writer>S<sample>.TXT`; samples 1-20 are genuine,
//! 21-40 are skilled forgeries.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

/// Pen contact state of a single sampled point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PenState {
    Down,
    Up,
}

/// One digitizer sample.
///
/// `aux` carries the task-2-only channels (azimuth, altitude, pressure).
/// They are parsed so nothing is lost, but no downstream stage reads them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StrokePoint {
    pub x: i32,
    pub y: i32,
    /// Raw device clock, milliseconds. Non-negative.
    pub t: i64,
    pub pen: PenState,
    pub aux: Option<(i32, i32, i32)>,
}

/// A maximal pen-down run of points. The terminating pen-up sample, when
/// present, is kept as the final point of the stroke.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stroke {
    pub points: Vec<StrokePoint>,
}

impl Stroke {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Genuine-vs-forgery label of a signature instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Genuine,
    Forgery,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Genuine => write!(f, "genuine"),
            Label::Forgery => write!(f, "forgery"),
        }
    }
}

/// One signature sample: the strokes of a single signing act plus its
/// corpus coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignatureInstance {
    pub strokes: Vec<Stroke>,
    pub writer_id: u32,
    pub sample_index: u32,
    pub label: Label,
}

impl SignatureInstance {
    /// Total number of stroke points.
    pub fn point_count(&self) -> usize {
        self.strokes.iter().map(Stroke::len).sum()
    }

    /// Iterate every point in stroke order.
    pub fn points(&self) -> impl Iterator<Item = &StrokePoint> {
        self.strokes.iter().flat_map(|s| s.points.iter())
    }
}

/// Which SVC2004 task a corpus was read as. Task 2 files carry the three
/// aux channels; the distinction is metadata only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Task1,
    Task2,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::Task1 => write!(f, "task1"),
            Task::Task2 => write!(f, "task2"),
        }
    }
}

/// A loaded set of signature instances, sorted by (writer, sample).
#[derive(Debug, Clone)]
pub struct Corpus {
    pub instances: Vec<SignatureInstance>,
    pub source_task: Task,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("malformed header: first line is not a point count ({0:?})")]
    MalformedHeader(String),
    #[error("line {line}: expected 4 or 7 columns, found {found}")]
    ColumnCountMismatch { line: usize, found: usize },
    #[error("declared {declared} points but file holds {actual}")]
    PointCountMismatch { declared: usize, actual: usize },
    #[error("line {line}: bad integer field {field:?}")]
    BadInteger { line: usize, field: String },
    #[error("line {line}: negative timestamp {value}")]
    NegativeTimestamp { line: usize, value: i64 },
    #[error("line {line}: pen state must be 0 or 1, found {value}")]
    BadPenState { line: usize, value: i64 },
    #[error("empty input")]
    EmptyInput,
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("no SVC2004-named files found under {0}")]
    NoFilesFound(PathBuf),
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: ParseError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("duplicate instance U{writer}S{sample}")]
    DuplicateInstance { writer: u32, sample: u32 },
}

/// Files that failed to parse under permissive loading.
#[derive(Debug)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

/// Result of a corpus load: the corpus plus per-file diagnostics.
#[derive(Debug)]
pub struct LoadOutcome {
    pub corpus: Corpus,
    pub skipped: Vec<SkippedFile>,
    pub warnings: Vec<String>,
}

/// How to react to files that fail to parse.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadMode {
    /// Abort on the first bad file.
    Strict,
    /// Skip bad files, reporting them in the outcome.
    Permissive,
}

/// Parse one SVC2004 sample file.
///
/// Returns the points in file order. `aux` is populated exactly when the
/// file has 7 columns; the column count must be uniform across the file.
/// Equal consecutive timestamps are allowed; a decreasing timestamp is a
/// data quirk handled downstream, not a parse error.
pub fn parse_svc_file(bytes: &[u8]) -> Result<Vec<StrokePoint>, ParseError> {
    let text = String::from_utf8_lossy(bytes);
    let mut lines = text.lines();

    let header = lines.next().ok_or(ParseError::EmptyInput)?;
    let declared: usize = header
        .trim()
        .parse()
        .map_err(|_| ParseError::MalformedHeader(header.trim().to_string()))?;

    let mut points = Vec::with_capacity(declared);
    let mut columns: Option<usize> = None;

    for (idx, raw) in lines.enumerate() {
        let line_no = idx + 2; // 1-based, after the header
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 && fields.len() != 7 {
            return Err(ParseError::ColumnCountMismatch {
                line: line_no,
                found: fields.len(),
            });
        }
        match columns {
            None => columns = Some(fields.len()),
            Some(c) if c != fields.len() => {
                return Err(ParseError::ColumnCountMismatch {
                    line: line_no,
                    found: fields.len(),
                })
            }
            _ => {}
        }

        let int = |field: &str| -> Result<i64, ParseError> {
            field.parse().map_err(|_| ParseError::BadInteger {
                line: line_no,
                field: field.to_string(),
            })
        };

        let x = int(fields[0])? as i32;
        let y = int(fields[1])? as i32;
        let t = int(fields[2])?;
        if t < 0 {
            return Err(ParseError::NegativeTimestamp { line: line_no, value: t });
        }
        let pen = match int(fields[3])? {
            1 => PenState::Down,
            0 => PenState::Up,
            other => return Err(ParseError::BadPenState { line: line_no, value: other }),
        };
        let aux = if fields.len() == 7 {
            Some((int(fields[4])? as i32, int(fields[5])? as i32, int(fields[6])? as i32))
        } else {
            None
        };
        points.push(StrokePoint { x, y, t, pen, aux });
    }

    if points.len() != declared {
        return Err(ParseError::PointCountMismatch {
            declared,
            actual: points.len(),
        });
    }
    Ok(points)
}

/// Serialize points back to the SVC2004 text form (4 or 7 columns,
/// matching the presence of `aux` on the first point). Inverse of
/// [`parse_svc_file`].
pub fn to_svc_text(points: &[StrokePoint]) -> String {
    let mut out = String::new();
    out.push_str(&points.len().to_string());
    out.push('\n');
    for p in points {
        let pen = match p.pen {
            PenState::Down => 1,
            PenState::Up => 0,
        };
        match p.aux {
            Some((az, al, pr)) => {
                out.push_str(&format!("{} {} {} {} {} {} {}\n", p.x, p.y, p.t, pen, az, al, pr))
            }
            None => out.push_str(&format!("{} {} {} {}\n", p.x, p.y, p.t, pen)),
        }
    }
    out
}

/// Partition points into strokes.
///
/// A pen-up point closes the current stroke and stays as its final point;
/// a trailing pen-down run with no terminator closes at end of input. No
/// point is dropped or duplicated, so concatenating the outputs in order
/// reproduces the input.
pub fn segment_strokes(points: &[StrokePoint]) -> Result<Vec<Stroke>, ParseError> {
    if points.is_empty() {
        return Err(ParseError::EmptyInput);
    }
    let mut strokes = Vec::new();
    let mut current: Vec<StrokePoint> = Vec::new();
    for &p in points {
        current.push(p);
        if p.pen == PenState::Up {
            strokes.push(Stroke { points: std::mem::take(&mut current) });
        }
    }
    if !current.is_empty() {
        strokes.push(Stroke { points: current });
    }
    Ok(strokes)
}

/// Count the timestamp reversals in a point list. Device clocks quantize
/// and occasionally step back; callers surface this as a warning.
pub fn timestamp_reversals(points: &[StrokePoint]) -> usize {
    points.windows(2).filter(|w| w[1].t < w[0].t).count()
}

/// Decompose an SVC2004 file name (`U<writer>S<sample>.TXT`, extension
/// case-insensitive) into writer and sample indices.
pub fn parse_svc_name(name: &str) -> Option<(u32, u32)> {
    let stem = name.strip_suffix(".TXT").or_else(|| name.strip_suffix(".txt"))?;
    let rest = stem.strip_prefix('U').or_else(|| stem.strip_prefix('u'))?;
    let s_pos = rest.find(['S', 's'])?;
    let writer: u32 = rest[..s_pos].parse().ok()?;
    let sample: u32 = rest[s_pos + 1..].parse().ok()?;
    Some((writer, sample))
}

/// SVC2004 label convention: samples 1-20 are genuine, 21-40 forgeries.
pub fn label_for_sample(sample_index: u32) -> Label {
    if sample_index <= 20 {
        Label::Genuine
    } else {
        Label::Forgery
    }
}

/// Build a [`SignatureInstance`] from parsed points and corpus coordinates.
pub fn instance_from_points(
    points: &[StrokePoint],
    writer_id: u32,
    sample_index: u32,
) -> Result<SignatureInstance, ParseError> {
    let strokes = segment_strokes(points)?;
    Ok(SignatureInstance {
        strokes,
        writer_id,
        sample_index,
        label: label_for_sample(sample_index),
    })
}

/// Load every SVC2004-named file under `root` into a corpus.
///
/// Instances are sorted by (writer, sample) so the corpus order does not
/// depend on directory iteration order. Files whose names do not match
/// the `U<w>S<s>.TXT` pattern (or whose indices fall outside 1..=40) are
/// ignored; files that match but fail to parse abort in strict mode and
/// are reported and skipped in permissive mode.
pub fn load_corpus(root: &Path, task: Task, mode: LoadMode) -> Result<LoadOutcome, LoadError> {
    let entries = fs::read_dir(root).map_err(|e| LoadError::Io {
        path: root.to_path_buf(),
        source: e,
    })?;

    let mut named: Vec<(u32, u32, PathBuf)> = Vec::new();
    let mut warnings = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| LoadError::Io { path: root.to_path_buf(), source: e })?;
        let path = entry.path();
        if !path.is_file() {
            continue;
        }
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if let Some((writer, sample)) = parse_svc_name(name) {
            if (1..=40).contains(&writer) && (1..=40).contains(&sample) {
                named.push((writer, sample, path));
            } else {
                warnings.push(format!("{}: writer/sample outside 1..=40, ignored", name));
            }
        }
    }
    if named.is_empty() {
        return Err(LoadError::NoFilesFound(root.to_path_buf()));
    }
    named.sort();

    let mut instances = Vec::with_capacity(named.len());
    let mut skipped = Vec::new();
    let mut last_key = None;
    for (writer, sample, path) in named {
        if last_key == Some((writer, sample)) {
            return Err(LoadError::DuplicateInstance { writer, sample });
        }
        last_key = Some((writer, sample));

        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) => {
                if mode == LoadMode::Strict {
                    return Err(LoadError::Io { path, source: e });
                }
                skipped.push(SkippedFile { path, reason: e.to_string() });
                continue;
            }
        };
        match parse_svc_file(&bytes).and_then(|pts| {
            let reversals = timestamp_reversals(&pts);
            if reversals > 0 {
                warnings.push(format!(
                    "{}: {} decreasing timestamp step(s)",
                    path.display(),
                    reversals
                ));
            }
            instance_from_points(&pts, writer, sample)
        }) {
            Ok(inst) => instances.push(inst),
            Err(e) => {
                if mode == LoadMode::Strict {
                    return Err(LoadError::Parse { path, source: e });
                }
                skipped.push(SkippedFile { path, reason: e.to_string() });
            }
        }
    }

    Ok(LoadOutcome {
        corpus: Corpus { instances, source_task: task },
        skipped,
        warnings,
    })
}
