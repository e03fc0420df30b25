//! File formats: event paths, model specs, curves and run manifests.
//!
//! Event paths travel as CSV with a leading horizon comment:
//!
//! ```text
//! # horizon: 33
//! t,k,y
//! 1,1,0.030028...
//! 4.5,2,0.026999...
//! ```
//!
//! `t` is the event time, `k` the 1-based component, `y` the mark.
//! Floats are written with Rust's shortest-roundtrip formatting, so a
//! write/read cycle reproduces the path bit for bit. The JSON form
//! carries the same `t`/`k`/`y` fields (also 1-based) plus the horizon.
//!
//! Model specs are the serde JSON form of [`ModelSpec`]; reading one
//! validates it fully. Run manifests record what a command produced —
//! the argument vector and a SHA-256 digest per output file — and contain
//! nothing volatile, so re-running a deterministic command yields a
//! byte-identical manifest.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write as IoWrite};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{MarkedPath, ModelSpec, PathEvent};
use crate::moments::MomentCurve;
use crate::numerics::Vector;
use crate::simulate::Checkpoint;

// ======================================================================
// Event-path CSV
// ======================================================================

/// Writes a path as `t,k,y` CSV with the horizon comment line.
pub fn write_path_csv(mut w: impl IoWrite, path: &MarkedPath) -> Result<()> {
    path.validate()?;
    writeln!(w, "# horizon: {}", path.horizon)?;
    writeln!(w, "t,k,y")?;
    for ev in &path.events {
        writeln!(w, "{},{},{}", ev.time, ev.component + 1, ev.mark)?;
    }
    Ok(())
}

/// Reads the CSV form produced by [`write_path_csv`].
pub fn read_path_csv(r: impl Read) -> Result<MarkedPath> {
    let reader = BufReader::new(r);
    let mut horizon: Option<f64> = None;
    let mut header_seen = false;
    let mut events: Vec<PathEvent> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let row = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('#') {
            let rest = rest.trim();
            if let Some(v) = rest.strip_prefix("horizon:") {
                let v = v.trim();
                horizon = Some(v.parse::<f64>().map_err(|_| {
                    Error::Format(format!("line {row}: cannot parse horizon '{v}'"))
                })?);
            }
            continue;
        }
        if !header_seen {
            let cols: Vec<&str> = trimmed.split(',').map(str::trim).collect();
            if cols.len() != 3
                || !cols[0].eq_ignore_ascii_case("t")
                || !cols[1].eq_ignore_ascii_case("k")
                || !cols[2].eq_ignore_ascii_case("y")
            {
                return Err(Error::Format(format!(
                    "line {row}: expected header 't,k,y', got '{trimmed}'"
                )));
            }
            header_seen = true;
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::Format(format!(
                "line {row}: expected 3 fields 't,k,y', got {}",
                fields.len()
            )));
        }
        let t: f64 = fields[0]
            .parse()
            .map_err(|_| Error::Format(format!("line {row}: bad time '{}'", fields[0])))?;
        let k: usize = fields[1]
            .parse()
            .map_err(|_| Error::Format(format!("line {row}: bad component '{}'", fields[1])))?;
        if k == 0 {
            return Err(Error::Format(format!(
                "line {row}: components are 1-based, got 0"
            )));
        }
        let y: f64 = fields[2]
            .parse()
            .map_err(|_| Error::Format(format!("line {row}: bad mark '{}'", fields[2])))?;
        events.push(PathEvent { time: t, component: k - 1, mark: y });
    }
    let horizon = horizon.ok_or_else(|| {
        Error::Format("missing '# horizon: <T>' comment line before the data".into())
    })?;
    MarkedPath::new(horizon, events)
}

// ======================================================================
// Event-path JSON
// ======================================================================

#[derive(Serialize, Deserialize)]
struct JsonEvent {
    t: f64,
    /// 1-based component, as in the CSV form.
    k: usize,
    y: f64,
}

#[derive(Serialize, Deserialize)]
struct JsonPath {
    horizon: f64,
    events: Vec<JsonEvent>,
}

/// Writes a path as pretty-printed JSON with 1-based components.
pub fn write_path_json(w: impl IoWrite, path: &MarkedPath) -> Result<()> {
    path.validate()?;
    let doc = JsonPath {
        horizon: path.horizon,
        events: path
            .events
            .iter()
            .map(|e| JsonEvent { t: e.time, k: e.component + 1, y: e.mark })
            .collect(),
    };
    let mut w = w;
    serde_json::to_writer_pretty(&mut w, &doc)
        .map_err(|e| Error::Format(format!("cannot encode path JSON: {e}")))?;
    writeln!(w)?;
    Ok(())
}

/// Reads the JSON form produced by [`write_path_json`].
pub fn read_path_json(r: impl Read) -> Result<MarkedPath> {
    let doc: JsonPath = serde_json::from_reader(r)
        .map_err(|e| Error::Format(format!("cannot parse path JSON: {e}")))?;
    let mut events = Vec::with_capacity(doc.events.len());
    for (i, ev) in doc.events.iter().enumerate() {
        if ev.k == 0 {
            return Err(Error::Format(format!("event {i}: components are 1-based, got 0")));
        }
        events.push(PathEvent { time: ev.t, component: ev.k - 1, mark: ev.y });
    }
    MarkedPath::new(doc.horizon, events)
}

// ======================================================================
// Model-spec JSON
// ======================================================================

/// Writes a model spec as pretty-printed JSON.
pub fn write_spec_json(w: impl IoWrite, spec: &ModelSpec) -> Result<()> {
    spec.ensure_valid()?;
    let mut w = w;
    serde_json::to_writer_pretty(&mut w, spec)
        .map_err(|e| Error::Format(format!("cannot encode spec JSON: {e}")))?;
    writeln!(w)?;
    Ok(())
}

/// Reads and fully validates a model spec.
pub fn read_spec_json(r: impl Read) -> Result<ModelSpec> {
    let spec: ModelSpec = serde_json::from_reader(r)
        .map_err(|e| Error::Format(format!("cannot parse spec JSON: {e}")))?;
    spec.ensure_valid()?;
    Ok(spec)
}

/// [`read_spec_json`] from a filesystem path.
pub fn read_spec_json_path(path: impl AsRef<Path>) -> Result<ModelSpec> {
    let path = path.as_ref();
    let file = File::open(path)
        .map_err(|e| Error::InvalidPath(format!("{}: {e}", path.display())))?;
    read_spec_json(BufReader::new(file))
}

// ======================================================================
// Curve CSVs
// ======================================================================

/// Writes intensity checkpoints as `t,lambda1,...,lambdad`.
pub fn write_checkpoints_csv(mut w: impl IoWrite, checkpoints: &[Checkpoint]) -> Result<()> {
    let dim = checkpoints.first().map_or(0, |c| c.lambda.dim());
    write!(w, "t")?;
    for k in 1..=dim {
        write!(w, ",lambda{k}")?;
    }
    writeln!(w)?;
    for c in checkpoints {
        write!(w, "{}", c.time)?;
        for v in c.lambda.iter() {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Writes a moment curve as CSV: time, mean entries, then the covariance
/// row-major (`cov_ij = Cov(lambda_i, lambda_j)`).
pub fn write_moment_curve_csv(mut w: impl IoWrite, curve: &MomentCurve) -> Result<()> {
    let d = curve.mean.first().map_or(0, Vector::dim);
    write!(w, "t")?;
    for k in 1..=d {
        write!(w, ",mean{k}")?;
    }
    for i in 1..=d {
        for j in 1..=d {
            write!(w, ",cov{i}{j}")?;
        }
    }
    writeln!(w)?;
    for (idx, &t) in curve.grid.iter().enumerate() {
        write!(w, "{t}")?;
        for v in curve.mean[idx].iter() {
            write!(w, ",{v}")?;
        }
        let c = &curve.covariance[idx];
        for i in 0..d {
            for j in 0..d {
                write!(w, ",{}", c.get(i, j))?;
            }
        }
        writeln!(w)?;
    }
    Ok(())
}

// ======================================================================
// Run manifests
// ======================================================================

/// SHA-256 digest as lowercase hex.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileDigest {
    pub file: String,
    pub sha256: String,
}

/// Record of a command run: the subcommand, its argument vector, input
/// and output digests, the seed, the tool version and a wall-clock
/// stamp. The `config_digest` hashes the subcommand, arguments and input
/// digests — everything that determines the outputs — so it is stable
/// across runs with identical inputs even though the wall time moves.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub subcommand: String,
    pub command: Vec<String>,
    pub seed: Option<u64>,
    pub inputs: Vec<FileDigest>,
    pub config_digest: String,
    /// Unix seconds; absent until [`RunManifest::stamp_now`].
    pub wall_time_unix: Option<u64>,
    pub outputs: Vec<FileDigest>,
}

fn digest_of_file(path: &Path) -> Result<FileDigest> {
    let mut file =
        File::open(path).map_err(|e| Error::InvalidPath(format!("{}: {e}", path.display())))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    Ok(FileDigest { file: path.display().to_string(), sha256: sha256_hex(&bytes) })
}

impl RunManifest {
    pub fn new(subcommand: &str, command: Vec<String>) -> Self {
        RunManifest {
            tool: format!("exciter {}", env!("CARGO_PKG_VERSION")),
            subcommand: subcommand.to_string(),
            command,
            seed: None,
            inputs: Vec::new(),
            config_digest: String::new(),
            wall_time_unix: None,
            outputs: Vec::new(),
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    pub fn stamp_now(&mut self) {
        self.wall_time_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .ok();
    }

    /// Digests an input file and folds it into the config digest.
    pub fn record_input(&mut self, path: impl AsRef<Path>) -> Result<()> {
        self.inputs.push(digest_of_file(path.as_ref())?);
        Ok(())
    }

    /// Digests an already-written output file.
    pub fn record_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        self.outputs.push(digest_of_file(path.as_ref())?);
        Ok(())
    }

    fn compute_config_digest(&self) -> String {
        let mut material = String::new();
        material.push_str(&self.subcommand);
        for arg in &self.command {
            material.push('\n');
            material.push_str(arg);
        }
        for input in &self.inputs {
            material.push('\n');
            material.push_str(&input.sha256);
        }
        if let Some(seed) = self.seed {
            material.push('\n');
            material.push_str(&seed.to_string());
        }
        sha256_hex(material.as_bytes())
    }

    pub fn write(&self, w: impl IoWrite) -> Result<()> {
        let mut snapshot = self.clone();
        snapshot.config_digest = self.compute_config_digest();
        let mut w = w;
        serde_json::to_writer_pretty(&mut w, &snapshot)
            .map_err(|e| Error::Format(format!("cannot encode manifest: {e}")))?;
        writeln!(w)?;
        Ok(())
    }
}

/// Opens a file for buffered writing, wrapping the error with the path.
pub fn create_file(path: impl AsRef<Path>) -> Result<BufWriter<File>> {
    let path = path.as_ref();
    let file = File::create(path)
        .map_err(|e| Error::InvalidPath(format!("{}: {e}", path.display())))?;
    Ok(BufWriter::new(file))
}

// ======================================================================
// Tests
// ======================================================================

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MarkModel;
    use crate::numerics::Matrix;
    use crate::simulate::{simulate_path, SimConfig};

    fn sample_path() -> MarkedPath {
        MarkedPath::new(
            33.0,
            vec![
                PathEvent { time: 1.0, component: 0, mark: 0.030028459916 },
                PathEvent { time: 4.5, component: 1, mark: 0.027000123 },
                PathEvent { time: 13.0, component: 0, mark: 0.04 },
            ],
        )
        .unwrap()
    }

    #[test]
    fn path_csv_golden_form() {
        let mut buf = Vec::new();
        write_path_csv(&mut buf, &sample_path()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "# horizon: 33\nt,k,y\n1,1,0.030028459916\n4.5,2,0.027000123\n13,1,0.04\n"
        );
    }

    #[test]
    fn path_csv_roundtrips_bitwise() {
        let spec = ModelSpec::linear(
            Vector::from_slice(&[0.8, 0.6]),
            Matrix::from_diag(&[-1.0, -0.9]),
            Matrix::from_diag(&[0.4, 0.3]),
            vec![MarkModel::ConstantExponential { rate: 1.0 }; 2],
        );
        let sim = simulate_path(&spec, 50.0, &SimConfig { seed: 3, ..Default::default() })
            .unwrap();
        let mut buf = Vec::new();
        write_path_csv(&mut buf, &sim.path).unwrap();
        let back = read_path_csv(buf.as_slice()).unwrap();
        assert_eq!(back.horizon, sim.path.horizon);
        assert_eq!(back.events, sim.path.events);
    }

    #[test]
    fn path_json_roundtrips_and_uses_one_based_components() {
        let path = sample_path();
        let mut buf = Vec::new();
        write_path_json(&mut buf, &path).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("\"k\": 2"), "json:\n{text}");
        let back = read_path_json(buf.as_slice()).unwrap();
        assert_eq!(back.events, path.events);
        assert_eq!(back.horizon, path.horizon);
    }

    #[test]
    fn path_csv_read_errors_are_specific() {
        let missing_horizon = "t,k,y\n1,1,0.5\n";
        match read_path_csv(missing_horizon.as_bytes()) {
            Err(Error::Format(msg)) => assert!(msg.contains("horizon"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
        let zero_component = "# horizon: 5\nt,k,y\n1,0,0.5\n";
        match read_path_csv(zero_component.as_bytes()) {
            Err(Error::Format(msg)) => assert!(msg.contains("1-based"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
        let bad_header = "# horizon: 5\ntime,comp,mark\n";
        assert!(matches!(read_path_csv(bad_header.as_bytes()), Err(Error::Format(_))));
        let bad_field = "# horizon: 5\nt,k,y\nxyz,1,0.5\n";
        assert!(matches!(read_path_csv(bad_field.as_bytes()), Err(Error::Format(_))));
        // Structural violations surface as path errors from validation.
        let unordered = "# horizon: 5\nt,k,y\n2,1,0.5\n1,1,0.5\n";
        assert!(matches!(read_path_csv(unordered.as_bytes()), Err(Error::InvalidPath(_))));
    }

    #[test]
    fn spec_json_roundtrips_and_validates() {
        let spec = ModelSpec::linear(
            Vector::from_slice(&[0.5]),
            Matrix::from_diag(&[-1.0]),
            Matrix::from_diag(&[0.4]),
            vec![MarkModel::ConstantLognormal { mu: -3.0, sigma: 0.5 }],
        );
        let mut buf = Vec::new();
        write_spec_json(&mut buf, &spec).unwrap();
        let back = read_spec_json(buf.as_slice()).unwrap();
        assert_eq!(back, spec);

        // Sign violations are rejected on read, not deferred to use sites.
        let mut bad = spec.clone();
        bad.b.set(0, 0, -0.4);
        let text = serde_json::to_string(&bad).unwrap();
        assert!(matches!(read_spec_json(text.as_bytes()), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn checkpoints_csv_layout() {
        let checkpoints = vec![
            Checkpoint { time: 0.0, lambda: Vector::from_slice(&[0.5, 0.25]) },
            Checkpoint { time: 1.5, lambda: Vector::from_slice(&[0.75, 0.5]) },
        ];
        let mut buf = Vec::new();
        write_checkpoints_csv(&mut buf, &checkpoints).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "t,lambda1,lambda2\n0,0.5,0.25\n1.5,0.75,0.5\n");
    }

    #[test]
    fn moment_curve_csv_layout() {
        let curve = MomentCurve {
            grid: vec![0.0, 1.0],
            mean: vec![Vector::from_slice(&[1.0]), Vector::from_slice(&[1.5])],
            second_moment: vec![
                Matrix::from_diag(&[1.0]),
                Matrix::from_diag(&[2.5]),
            ],
            covariance: vec![Matrix::from_diag(&[0.0]), Matrix::from_diag(&[0.25])],
        };
        let mut buf = Vec::new();
        write_moment_curve_csv(&mut buf, &curve).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "t,mean1,cov11\n0,1,0\n1,1.5,0.25\n");
    }

    #[test]
    fn sha256_matches_the_reference_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn manifest_config_digest_is_stable_across_runs() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("spec.json");
        std::fs::write(&input, "{}").unwrap();
        let out = dir.path().join("events.csv");
        std::fs::write(&out, "# horizon: 5\nt,k,y\n1,1,0.5\n").unwrap();

        let render = || -> RunManifest {
            let mut m = RunManifest::new("simulate", vec!["--seed".into(), "7".into()]);
            m.set_seed(7);
            m.record_input(&input).unwrap();
            m.record_file(&out).unwrap();
            m.stamp_now();
            let mut buf = Vec::new();
            m.write(&mut buf).unwrap();
            serde_json::from_slice(&buf).unwrap()
        };
        let first = render();
        let second = render();
        assert_eq!(first.config_digest.len(), 64);
        assert_eq!(first.config_digest, second.config_digest);
        assert_eq!(first.inputs[0].sha256, second.inputs[0].sha256);
        assert_eq!(first.outputs[0].sha256, second.outputs[0].sha256);
        assert_eq!(first.subcommand, "simulate");
        assert_eq!(first.seed, Some(7));
        assert!(first.wall_time_unix.is_some());
        assert!(first.tool.starts_with("exciter "));
    }

    #[test]
    fn manifest_config_digest_tracks_inputs_and_flags() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("spec.json");
        std::fs::write(&input, "{}").unwrap();

        let digest_for = |args: Vec<String>, content: &str| -> String {
            std::fs::write(&input, content).unwrap();
            let mut m = RunManifest::new("simulate", args);
            m.record_input(&input).unwrap();
            let mut buf = Vec::new();
            m.write(&mut buf).unwrap();
            let parsed: RunManifest = serde_json::from_slice(&buf).unwrap();
            parsed.config_digest
        };

        let base = digest_for(vec!["--T".into(), "5".into()], "{}");
        let other_flag = digest_for(vec!["--T".into(), "9".into()], "{}");
        let other_input = digest_for(vec!["--T".into(), "5".into()], "{\"dim\":1}");
        assert_ne!(base, other_flag);
        assert_ne!(base, other_input);
        assert_eq!(base, digest_for(vec!["--T".into(), "5".into()], "{}"));
    }
}
