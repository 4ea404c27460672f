//! Adapters for external models that run as subprocesses.
//!
//! Contract: audio goes in as 32-bit float WAV files in a scratch
//! directory; stems come back as WAV files, scalar outputs as one JSON
//! object on stdout. A non-zero exit status or unreadable output is a
//! plugin error.

use std::path::{Path, PathBuf};
use std::process::Command;

use serde::Deserialize;

use crate::encoders::TimbreShifter;
use crate::error::{Error, Result};
use crate::rl::{AestheticScorer, Transcriber};
use crate::signal::{load_wav, save_wav, WavEncoding, Waveform};

/// Lead vocal, backing vocals, and instrumental.
#[derive(Debug, Clone, PartialEq)]
pub struct Stems {
    pub lead: Waveform,
    pub backing: Waveform,
    pub instrumental: Waveform,
}

pub trait Separator {
    fn separate(&self, song: &Waveform) -> Result<Stems>;
}

/// Treats the input as a clean lead; the other stems are silence.
#[derive(Debug, Clone, Copy, Default)]
pub struct PassthroughSeparator;

impl Separator for PassthroughSeparator {
    fn separate(&self, song: &Waveform) -> Result<Stems> {
        let silence = Waveform::silence(song.len(), song.sample_rate())?;
        Ok(Stems {
            lead: song.clone(),
            backing: silence.clone(),
            instrumental: silence,
        })
    }
}

fn plugin_err(cmd: &[String], msg: impl std::fmt::Display) -> Error {
    Error::Plugin(format!("`{}`: {msg}", cmd.join(" ")))
}

fn scratch() -> Result<tempfile::TempDir> {
    tempfile::tempdir().map_err(|e| Error::Plugin(format!("cannot create scratch directory: {e}")))
}

/// Run `cmd args...`, returning stdout.
fn run(cmd: &[String], args: &[&Path], extra: &[String]) -> Result<String> {
    let (prog, fixed) = cmd.split_first().ok_or_else(|| Error::Plugin("empty plugin command".into()))?;
    let out = Command::new(prog)
        .args(fixed)
        .args(args)
        .args(extra)
        .output()
        .map_err(|e| plugin_err(cmd, e))?;
    if !out.status.success() {
        return Err(plugin_err(
            cmd,
            format!("exit {}: {}", out.status, String::from_utf8_lossy(&out.stderr).trim()),
        ));
    }
    String::from_utf8(out.stdout).map_err(|e| plugin_err(cmd, e))
}

fn load_output(cmd: &[String], path: &Path) -> Result<Waveform> {
    load_wav(path).map_err(|e| plugin_err(cmd, format!("bad output {}: {e}", path.display())))
}

/// `cmd <in.wav> <out_dir>`; expects `lead.wav`, `backing.wav`, and
/// `instrumental.wav` in `out_dir`.
#[derive(Debug, Clone)]
pub struct SubprocessSeparator {
    pub command: Vec<String>,
}

impl Separator for SubprocessSeparator {
    fn separate(&self, song: &Waveform) -> Result<Stems> {
        let dir = scratch()?;
        let input = dir.path().join("input.wav");
        save_wav(song, &input, WavEncoding::Float32)?;
        let out: PathBuf = dir.path().join("stems");
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        run(&self.command, &[&input, &out], &[])?;
        let stem = |name: &str| load_output(&self.command, &out.join(name));
        Ok(Stems {
            lead: stem("lead.wav")?,
            backing: stem("backing.wav")?,
            instrumental: stem("instrumental.wav")?,
        })
    }
}

/// `cmd <in.wav> <out.wav> <speaker>`.
#[derive(Debug, Clone)]
pub struct SubprocessShifter {
    pub command: Vec<String>,
    pub speakers: usize,
}

impl TimbreShifter for SubprocessShifter {
    fn speakers(&self) -> usize {
        self.speakers
    }

    fn shift(&self, w: &Waveform, speaker: usize) -> Result<Waveform> {
        let dir = scratch()?;
        let input = dir.path().join("input.wav");
        let output = dir.path().join("output.wav");
        save_wav(w, &input, WavEncoding::Float32)?;
        run(&self.command, &[&input, &output], &[speaker.to_string()])?;
        load_output(&self.command, &output)
    }
}

#[derive(Deserialize)]
struct AestheticOut {
    ce: f64,
    cu: f64,
}

/// `cmd <in.wav>` printing `{"ce": .., "cu": ..}`.
#[derive(Debug, Clone)]
pub struct SubprocessAesthetic {
    pub command: Vec<String>,
    pub range: (f64, f64),
}

impl AestheticScorer for SubprocessAesthetic {
    fn range(&self) -> (f64, f64) {
        self.range
    }

    fn score(&self, w: &Waveform) -> Result<(f64, f64)> {
        let dir = scratch()?;
        let input = dir.path().join("input.wav");
        save_wav(w, &input, WavEncoding::Float32)?;
        let out = run(&self.command, &[&input], &[])?;
        let parsed: AestheticOut = serde_json::from_str(out.trim()).map_err(|e| plugin_err(&self.command, e))?;
        Ok((parsed.ce, parsed.cu))
    }
}

#[derive(Deserialize)]
struct TranscriptOut {
    text: String,
}

/// `cmd <in.wav>` printing `{"text": ".."}`.
#[derive(Debug, Clone)]
pub struct SubprocessTranscriber {
    pub command: Vec<String>,
}

impl Transcriber for SubprocessTranscriber {
    fn transcribe(&self, w: &Waveform) -> Result<String> {
        let dir = scratch()?;
        let input = dir.path().join("input.wav");
        save_wav(w, &input, WavEncoding::Float32)?;
        let out = run(&self.command, &[&input], &[])?;
        let parsed: TranscriptOut = serde_json::from_str(out.trim()).map_err(|e| plugin_err(&self.command, e))?;
        Ok(parsed.text)
    }
}
